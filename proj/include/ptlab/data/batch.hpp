#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ptlab {

enum class Objective { flm, plm, mlm, multitask };

/// Pretraining objective plus its span-corruption settings.
struct ObjectiveKind {
  Objective kind = Objective::flm;
  double mask_rate = 0.15;
  double mean_span = 3.0;

  static ObjectiveKind flm() { return {Objective::flm}; }
  static ObjectiveKind plm() { return {Objective::plm}; }
  static ObjectiveKind mlm(double rate = 0.15, double span = 3.0) { return {Objective::mlm, rate, span}; }
  static ObjectiveKind multitask() { return {Objective::multitask}; }

  void validate() const;
  bool operator==(const ObjectiveKind&) const = default;
};

/// "FLM", "PLM", "MLM" or "MTF".
std::string short_name(Objective objective);
ObjectiveKind parse_objective(const std::string& text);

/// Segment id given to padding positions. Padding forms its own segment, so
/// it is never visible from real tokens.
inline constexpr int kPadSegment = -1;

/// Token ids with loss and visibility metadata; the single currency between
/// data pipelines and the model.
///
/// Decoder-stream matrices are [batch_size x seq_len] row-major. Each
/// position t predicts target_ids at t. Encoder streams exist only for
/// encoder-decoder batches.
struct PackedBatch {
  ObjectiveKind objective;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  int pad_id = 0;

  std::vector<int> input_ids;
  std::vector<int> target_ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<int> segment_ids;

  /// Per row, the bidirectional prefix length of each segment in order of
  /// appearance. Present only for non-causal decoder batches.
  std::optional<std::vector<std::vector<int>>> prefix_lens;

  bool has_encoder = false;
  std::size_t encoder_len = 0;
  std::vector<int> encoder_ids;
  std::vector<int> encoder_segments;

  std::size_t positions() const { return batch_size * seq_len; }
  std::size_t encoder_positions() const { return batch_size * encoder_len; }

  /// Throws Error when sizes or invariants do not line up.
  void validate() const;
  bool operator==(const PackedBatch&) const = default;
};

}  // namespace ptlab
