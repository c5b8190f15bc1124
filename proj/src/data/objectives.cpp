#include "ptlab/data/objectives.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "ptlab/core/error.hpp"

namespace ptlab {

namespace {

/// Empty rows, every position padding.
PackedBatch blank_batch(ObjectiveKind objective, std::size_t rows, std::size_t width) {
  PackedBatch b;
  b.objective = objective;
  b.batch_size = rows;
  b.seq_len = width;
  b.pad_id = Vocab::kPad;
  b.input_ids.assign(rows * width, Vocab::kPad);
  b.target_ids.assign(rows * width, Vocab::kPad);
  b.loss_mask.assign(rows * width, 0);
  b.segment_ids.assign(rows * width, kPadSegment);
  return b;
}

void add_encoder(PackedBatch& b, std::size_t width) {
  b.has_encoder = true;
  b.encoder_len = width;
  b.encoder_ids.assign(b.batch_size * width, Vocab::kPad);
  b.encoder_segments.assign(b.batch_size * width, kPadSegment);
}

/// Writes one example's stream into a decoder row starting at `offset`.
/// Positions at or after `trained_from` are trained on the next token; the
/// last position predicts `final_target` (trained only if it is not pad).
void write_stream(PackedBatch& b, std::size_t row, std::size_t offset, std::span<const int> stream, int segment,
                  std::size_t trained_from, int final_target) {
  const std::size_t base = row * b.seq_len + offset;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const int target = t + 1 < stream.size() ? stream[t + 1] : final_target;
    b.input_ids[base + t] = stream[t];
    b.target_ids[base + t] = target;
    b.loss_mask[base + t] = t >= trained_from && target != Vocab::kPad ? 1 : 0;
    b.segment_ids[base + t] = segment;
  }
}

void write_encoder(PackedBatch& b, std::size_t row, std::size_t offset, std::span<const int> tokens, int segment) {
  const std::size_t base = row * b.encoder_len + offset;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    b.encoder_ids[base + t] = tokens[t];
    b.encoder_segments[base + t] = segment;
  }
}

/// Uniform random subset of size k from {0, ..., n - 1}, sorted.
std::vector<std::size_t> sorted_subset(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

PackedBatch pack_flm(std::span<const int> stream, std::size_t seq_len, std::size_t batch_size) {
  if (seq_len == 0 || batch_size == 0) throw Error("pack_flm: seq_len and batch_size must be positive");
  const std::size_t need = seq_len * batch_size + 1;
  if (stream.size() < need) {
    throw Error("pack_flm: insufficient data (" + std::to_string(stream.size()) + " tokens, need " +
                std::to_string(need) + ")");
  }
  PackedBatch b = blank_batch(ObjectiveKind::flm(), batch_size, seq_len);
  for (std::size_t r = 0; r < batch_size; ++r) {
    write_stream(b, r, 0, stream.subspan(r * seq_len, seq_len), 0, 0, stream[(r + 1) * seq_len]);
  }
  return b;
}

PlmBatch pack_plm(std::span<const PlmPair> pairs, std::size_t seq_len, ArchitectureKind arch, Rng& rng) {
  if (pairs.empty() || seq_len == 0) throw Error("pack_plm: need at least one pair and a positive seq_len");
  for (const auto& p : pairs) {
    if (p.first.size() < seq_len + 1 || p.second.size() < seq_len + 1) {
      throw Error("pack_plm: example shorter than seq_len + 1 tokens");
    }
  }
  const auto L = seq_len;
  const bool ed = arch == ArchitectureKind::encoder_decoder;
  PlmBatch out;
  out.batch = blank_batch(ObjectiveKind::plm(), pairs.size(), ed ? L : 2 * L);
  PackedBatch& b = out.batch;
  if (ed) add_encoder(b, L);
  if (arch == ArchitectureKind::non_causal_decoder) b.prefix_lens.emplace();

  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const auto i = static_cast<std::size_t>(rng.between(1, static_cast<std::int64_t>(L)));
    out.splits.push_back(static_cast<int>(i));
    std::span<const int> a(pairs[r].first.data(), L + 1);
    std::span<const int> c(pairs[r].second.data(), L + 1);
    const std::size_t pa = i, pb = L - i;
    if (ed) {
      write_encoder(b, r, 0, a.first(pa), 0);
      write_encoder(b, r, pa, c.first(pb), 1);
      write_stream(b, r, 0, a.subspan(pa, L - pa), 0, 0, a[L]);
      write_stream(b, r, L - pa, c.subspan(pb, L - pb), 1, 0, c[L]);
    } else {
      write_stream(b, r, 0, a.first(L), 0, pa, a[L]);
      write_stream(b, r, L, c.first(L), 1, pb, c[L]);
      if (b.prefix_lens) b.prefix_lens->push_back({static_cast<int>(pa), static_cast<int>(pb)});
    }
  }
  return out;
}

CorruptedExample apply_spans(std::span<const int> tokens, std::span<const Span> spans, const Vocab& vocab) {
  if (spans.empty()) throw Error("apply_spans: need at least one span");
  if (static_cast<int>(spans.size()) + 1 > vocab.n_sentinels()) {
    throw Error("apply_spans: " + std::to_string(spans.size()) + " spans need more sentinels than the vocab has");
  }
  CorruptedExample ex;
  ex.spans.assign(spans.begin(), spans.end());
  std::size_t pos = 0;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const Span& s = spans[k];
    if (s.length == 0) throw Error("apply_spans: empty span");
    if (s.start + s.length > tokens.size()) throw Error("apply_spans: span past the end of the sequence");
    if (k > 0 && s.start <= spans[k - 1].start + spans[k - 1].length) {
      throw Error("apply_spans: spans must be sorted and non-adjacent");
    }
    const int sentinel = vocab.sentinel(static_cast<int>(k));
    ex.corrupted_input.insert(ex.corrupted_input.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                              tokens.begin() + static_cast<std::ptrdiff_t>(s.start));
    ex.corrupted_input.push_back(sentinel);
    ex.targets.push_back(sentinel);
    ex.targets.insert(ex.targets.end(), tokens.begin() + static_cast<std::ptrdiff_t>(s.start),
                      tokens.begin() + static_cast<std::ptrdiff_t>(s.start + s.length));
    ex.n_masked += static_cast<int>(s.length);
    pos = s.start + s.length;
  }
  ex.corrupted_input.insert(ex.corrupted_input.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos), tokens.end());
  ex.targets.push_back(vocab.sentinel(static_cast<int>(spans.size())));
  return ex;
}

SpanCounts span_counts(std::size_t length, double mask_rate, double mean_span) {
  const double masked = mask_rate * static_cast<double>(length);
  SpanCounts c;
  c.n_masked = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(masked)));
  c.n_spans = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(masked / mean_span)));
  c.n_spans = std::min(c.n_spans, c.n_masked);
  c.input_len = length - c.n_masked + c.n_spans;
  c.target_len = c.n_masked + c.n_spans + 1;
  return c;
}

CorruptedExample corrupt_spans(std::span<const int> tokens, double mask_rate, double mean_span, const Vocab& vocab,
                               Rng& rng) {
  ObjectiveKind::mlm(mask_rate, mean_span).validate();
  const std::size_t n = tokens.size();
  if (static_cast<double>(n) < 2.0 * mean_span) throw Error("corrupt_spans: sequence shorter than 2 * mean_span");
  const SpanCounts c = span_counts(n, mask_rate, mean_span);
  if (c.n_masked >= n) throw Error("sequence too dense to corrupt");
  const std::size_t keep = n - c.n_masked;
  if (keep + 1 < c.n_spans) throw Error("sequence too dense to corrupt");

  // Span lengths: a uniform composition of n_masked into n_spans positive parts.
  auto cuts = sorted_subset(c.n_masked - 1, c.n_spans - 1, rng);
  std::vector<std::size_t> lengths;
  std::size_t prev = 0;
  for (std::size_t cut : cuts) {
    lengths.push_back(cut + 1 - prev);
    prev = cut + 1;
  }
  lengths.push_back(c.n_masked - prev);

  // Placement: the kept tokens split into n_spans + 1 gaps, inner gaps >= 1.
  // Stars and bars over the free tokens makes every valid layout equally likely.
  const std::size_t free = keep - (c.n_spans - 1);
  auto bars = sorted_subset(free + c.n_spans, c.n_spans, rng);
  std::vector<Span> spans;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < c.n_spans; ++k) {
    const std::size_t gap = k == 0 ? bars[0] : bars[k] - bars[k - 1];  // stars between bars, plus the mandatory one
    pos += gap;
    spans.push_back({pos, lengths[k]});
    pos += lengths[k];
  }
  return apply_spans(tokens, spans, vocab);
}

std::size_t raw_length_for_budget(std::size_t budget, double mask_rate, double mean_span) {
  for (std::size_t n = budget; n >= 2; --n) {
    const SpanCounts c = span_counts(n, mask_rate, mean_span);
    if (c.n_masked < n && c.input_len + c.target_len <= budget) return n;
  }
  throw Error("raw_length_for_budget: budget " + std::to_string(budget) + " too small");
}

PackedBatch make_mlm_batch(std::span<const CorruptedExample> examples, ArchitectureKind arch, std::size_t seq_len,
                           const ObjectiveKind& objective) {
  if (examples.empty()) throw Error("make_mlm_batch: no examples");
  std::size_t enc_width = 0, dec_width = 0;
  for (const auto& ex : examples) {
    const std::size_t total = ex.corrupted_input.size() + ex.targets.size();
    if (total > seq_len) {
      throw Error("make_mlm_batch: example of " + std::to_string(total) + " tokens overflows seq_len " +
                  std::to_string(seq_len));
    }
    enc_width = std::max(enc_width, ex.corrupted_input.size());
    dec_width = std::max(dec_width, ex.targets.size());
  }
  const bool ed = arch == ArchitectureKind::encoder_decoder;
  PackedBatch b = blank_batch(objective, examples.size(), ed ? dec_width : seq_len);
  if (ed) add_encoder(b, enc_width);
  if (arch == ArchitectureKind::non_causal_decoder) b.prefix_lens.emplace();

  for (std::size_t r = 0; r < examples.size(); ++r) {
    const auto& ex = examples[r];
    if (ed) {
      write_encoder(b, r, 0, ex.corrupted_input, 0);
      write_stream(b, r, 0, ex.targets, 0, 0, Vocab::kEos);
    } else {
      std::vector<int> stream = ex.corrupted_input;
      stream.insert(stream.end(), ex.targets.begin(), ex.targets.end());
      write_stream(b, r, 0, stream, 0, ex.corrupted_input.size(), Vocab::kEos);
      if (b.prefix_lens) b.prefix_lens->push_back({static_cast<int>(ex.corrupted_input.size())});
    }
  }
  return b;
}

std::size_t prompted_length(const PromptedPair& pair) { return pair.input.size() + 1 + pair.target.size(); }

PackedBatch make_prompted_batch(std::span<const PromptedPair> pairs, ArchitectureKind arch, std::size_t seq_len,
                                bool terminate) {
  if (pairs.empty()) throw Error("make_prompted_batch: no examples");
  std::size_t enc_width = 0, dec_width = 0;
  for (const auto& p : pairs) {
    if (prompted_length(p) > seq_len) throw Error("render too long for seq_len " + std::to_string(seq_len));
    enc_width = std::max(enc_width, p.input.size());
    dec_width = std::max(dec_width, p.target.size() + 1);
  }
  const bool ed = arch == ArchitectureKind::encoder_decoder;
  PackedBatch b = blank_batch(ObjectiveKind::multitask(), pairs.size(), ed ? dec_width : seq_len);
  if (ed) add_encoder(b, enc_width);
  if (arch == ArchitectureKind::non_causal_decoder) b.prefix_lens.emplace();
  const int final_target = terminate ? Vocab::kEos : Vocab::kPad;

  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const auto& p = pairs[r];
    std::vector<int> answer{Vocab::kEos};
    answer.insert(answer.end(), p.target.begin(), p.target.end());
    if (ed) {
      write_encoder(b, r, 0, p.input, 0);
      write_stream(b, r, 0, answer, 0, 0, final_target);
    } else {
      std::vector<int> stream = p.input;
      stream.insert(stream.end(), answer.begin(), answer.end());
      write_stream(b, r, 0, stream, 0, p.input.size(), final_target);
      if (b.prefix_lens) b.prefix_lens->push_back({static_cast<int>(p.input.size())});
    }
  }
  return b;
}

TokenAccounting token_accounting(const PackedBatch& batch) {
  TokenAccounting a;
  for (int s : batch.segment_ids) a.tokens_seen += s != kPadSegment;
  for (int s : batch.encoder_segments) a.tokens_seen += s != kPadSegment;
  for (auto m : batch.loss_mask) a.tokens_trained += m != 0;
  a.fraction = a.tokens_seen == 0 ? 0.0 : static_cast<double>(a.tokens_trained) / static_cast<double>(a.tokens_seen);
  return a;
}

std::string dump_batch_jsonl(const PackedBatch& batch) {
  std::string out;
  for (std::size_t r = 0; r < batch.batch_size; ++r) {
    const auto lo = static_cast<std::ptrdiff_t>(r * batch.seq_len);
    const auto hi = lo + static_cast<std::ptrdiff_t>(batch.seq_len);
    nlohmann::ordered_json rec;
    rec["objective"] = short_name(batch.objective.kind);
    rec["input_ids"] = std::vector<int>(batch.input_ids.begin() + lo, batch.input_ids.begin() + hi);
    rec["target_ids"] = std::vector<int>(batch.target_ids.begin() + lo, batch.target_ids.begin() + hi);
    rec["loss_mask"] = std::vector<int>(batch.loss_mask.begin() + lo, batch.loss_mask.begin() + hi);
    rec["segment_ids"] = std::vector<int>(batch.segment_ids.begin() + lo, batch.segment_ids.begin() + hi);
    rec["prefix_lens"] = batch.prefix_lens ? nlohmann::ordered_json((*batch.prefix_lens)[r]) : nullptr;
    if (batch.has_encoder) {
      const auto elo = static_cast<std::ptrdiff_t>(r * batch.encoder_len);
      const auto ehi = elo + static_cast<std::ptrdiff_t>(batch.encoder_len);
      rec["encoder_ids"] = std::vector<int>(batch.encoder_ids.begin() + elo, batch.encoder_ids.begin() + ehi);
      rec["encoder_segments"] =
          std::vector<int>(batch.encoder_segments.begin() + elo, batch.encoder_segments.begin() + ehi);
    }
    out += rec.dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace ptlab
