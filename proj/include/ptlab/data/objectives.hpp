#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ptlab/core/rng.hpp"
#include "ptlab/data/batch.hpp"
#include "ptlab/data/vocab.hpp"
#include "ptlab/model/config.hpp"

namespace ptlab {

// Every objective follows one convention: a position is trained iff it lies in
// the suffix (target) region, and it is trained to predict the next token of
// its own example. The first suffix token therefore acts as a start marker.

/// Dense next-token packing of a contiguous stream. Uses
/// batch_size * seq_len + 1 tokens: the extra token is the final target.
PackedBatch pack_flm(std::span<const int> stream, std::size_t seq_len, std::size_t batch_size);

struct PlmPair {
  std::vector<int> first;
  std::vector<int> second;
};

struct PlmBatch {
  PackedBatch batch;
  /// Prefix length i drawn for the first example of each row; the second
  /// example gets seq_len - i.
  std::vector<int> splits;
};

/// Prefix-LM packing with complementary splits, two examples per row.
///
/// Each example supplies seq_len + 1 tokens (seq_len positions plus the next
/// token of the last one). Decoder-only rows hold both examples back to back
/// (2 * seq_len positions). Encoder-decoder rows put both prefixes in the
/// encoder and both suffixes in the decoder, seq_len positions each.
PlmBatch pack_plm(std::span<const PlmPair> pairs, std::size_t seq_len, ArchitectureKind arch, Rng& rng);

/// Masked span of the raw sequence.
struct Span {
  std::size_t start = 0;
  std::size_t length = 0;
  bool operator==(const Span&) const = default;
};

struct CorruptedExample {
  std::vector<int> corrupted_input;
  std::vector<int> targets;
  int n_masked = 0;
  std::vector<Span> spans;
};

/// Replaces each span by sentinel k (in order) and builds the targets
/// sentinel_k ++ span tokens, closed by one more sentinel. Spans must be
/// sorted, non-empty, non-overlapping and non-adjacent.
CorruptedExample apply_spans(std::span<const int> tokens, std::span<const Span> spans, const Vocab& vocab);

/// Deterministic span counts for a raw sequence of `length` tokens.
struct SpanCounts {
  std::size_t n_masked = 0;
  std::size_t n_spans = 0;
  std::size_t input_len = 0;
  std::size_t target_len = 0;  // includes sentinels
};

SpanCounts span_counts(std::size_t length, double mask_rate, double mean_span);

/// T5-style span corruption with a budgeted random composition of the masked
/// token count and uniform non-adjacent placement.
CorruptedExample corrupt_spans(std::span<const int> tokens, double mask_rate, double mean_span, const Vocab& vocab,
                               Rng& rng);

/// Longest raw length whose corrupted input plus targets fit in `budget`.
std::size_t raw_length_for_budget(std::size_t budget, double mask_rate, double mean_span);

/// Builds an MLM batch. Decoder-only rows are input ++ targets with the input
/// as the (ND) prefix; encoder-decoder rows split them across the two streams.
PackedBatch make_mlm_batch(std::span<const CorruptedExample> examples, ArchitectureKind arch, std::size_t seq_len,
                           const ObjectiveKind& objective = ObjectiveKind::mlm());

/// Input/answer pair for prompted finetuning and scoring.
struct PromptedPair {
  std::vector<int> input;
  std::vector<int> target;
};

/// Decoder length of a prompted pair: input, the eos separator, the target.
std::size_t prompted_length(const PromptedPair& pair);

/// Prompted batch. Decoder-only rows are input ++ [eos] ++ target with the
/// input as the (ND) prefix; ED rows send the input to the encoder. With
/// `terminate`, the last target token is trained to predict eos.
PackedBatch make_prompted_batch(std::span<const PromptedPair> pairs, ArchitectureKind arch, std::size_t seq_len,
                                bool terminate = true);

struct TokenAccounting {
  std::size_t tokens_seen = 0;
  std::size_t tokens_trained = 0;
  double fraction = 0.0;
};

TokenAccounting token_accounting(const PackedBatch& batch);

/// One JSON record per row, newline terminated.
std::string dump_batch_jsonl(const PackedBatch& batch);

}  // namespace ptlab
