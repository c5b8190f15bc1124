#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ptlab/numeric/tensor.hpp"

namespace ptlab {

enum class MaskKind { causal, prefix, full };

struct AttentionMask {
  BoolMatrix visibility;
  MaskKind kind = MaskKind::causal;
  std::size_t prefix_len = 0;

  bool visible(std::size_t target, std::size_t source) const { return visibility(target, source); }
};

/// Builds a self-attention mask over one row.
///   causal:    j <= i
///   prefix(p): j < p or j <= i
///   full:      always
/// With segment_ids, visibility additionally requires equal segment ids.
/// prefix_len is required iff kind == prefix and must lie in [0, seq_len].
AttentionMask build_mask(MaskKind kind, std::size_t seq_len,
                         std::optional<std::size_t> prefix_len = std::nullopt,
                         std::optional<std::span<const int>> segment_ids = std::nullopt);

/// Contiguous run of equal segment ids within a row.
struct SegmentSpan {
  int id = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Splits a row into segments. Throws Error if a segment id reappears after
/// a different one (segments must be contiguous).
std::vector<SegmentSpan> segment_spans(std::span<const int> segment_ids);

/// Mask for a packed row where each non-padding segment has its own prefix
/// length, measured from the segment start. kind is causal or prefix.
AttentionMask build_packed_mask(MaskKind kind, std::span<const int> segment_ids,
                                std::span<const int> segment_prefix_lens);

/// True where query i may use bidirectional relative-position buckets for key j:
/// both positions sit inside the same segment's prefix.
BoolMatrix bidirectional_region(std::span<const int> segment_ids,
                                std::span<const int> segment_prefix_lens);

/// Cross-attention visibility: decoder i sees encoder j iff segments match.
BoolMatrix cross_visibility(std::span<const int> decoder_segments,
                            std::span<const int> encoder_segments);

}  // namespace ptlab
