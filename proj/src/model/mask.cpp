#include "ptlab/model/mask.hpp"

#include <set>
#include <string>

#include "ptlab/core/error.hpp"
#include "ptlab/data/batch.hpp"

namespace ptlab {

AttentionMask build_mask(MaskKind kind, std::size_t seq_len, std::optional<std::size_t> prefix_len,
                         std::optional<std::span<const int>> segment_ids) {
  if (kind == MaskKind::prefix && !prefix_len) throw Error("build_mask: prefix mask needs prefix_len");
  if (kind != MaskKind::prefix && prefix_len) throw Error("build_mask: prefix_len given for a non-prefix mask");
  const std::size_t p = prefix_len.value_or(0);
  if (p > seq_len) {
    throw Error("build_mask: prefix_len " + std::to_string(p) + " out of range [0, " +
                std::to_string(seq_len) + "]");
  }
  if (segment_ids && segment_ids->size() != seq_len) throw Error("build_mask: segment_ids length mismatch");

  AttentionMask mask{BoolMatrix(seq_len, seq_len), kind, p};
  for (std::size_t i = 0; i < seq_len; ++i) {
    for (std::size_t j = 0; j < seq_len; ++j) {
      bool v = false;
      switch (kind) {
        case MaskKind::causal: v = j <= i; break;
        case MaskKind::prefix: v = j < p || j <= i; break;
        case MaskKind::full: v = true; break;
      }
      if (segment_ids) v = v && (*segment_ids)[i] == (*segment_ids)[j];
      mask.visibility.set(i, j, v);
    }
  }
  return mask;
}

std::vector<SegmentSpan> segment_spans(std::span<const int> segment_ids) {
  std::vector<SegmentSpan> spans;
  std::set<int> seen;
  for (std::size_t i = 0; i < segment_ids.size(); ++i) {
    if (spans.empty() || spans.back().id != segment_ids[i]) {
      if (!seen.insert(segment_ids[i]).second) {
        throw Error("segment id " + std::to_string(segment_ids[i]) + " is not contiguous");
      }
      spans.push_back({segment_ids[i], i, i + 1});
    } else {
      spans.back().end = i + 1;
    }
  }
  return spans;
}

namespace {

/// Absolute prefix end for every position's segment (0 for padding).
std::vector<std::size_t> prefix_ends(std::span<const int> segment_ids,
                                     std::span<const int> segment_prefix_lens) {
  std::vector<std::size_t> ends(segment_ids.size(), 0);
  std::size_t next = 0;
  for (const auto& span : segment_spans(segment_ids)) {
    if (span.id == kPadSegment) continue;
    if (next >= segment_prefix_lens.size()) throw Error("missing prefix length for a segment");
    const int p = segment_prefix_lens[next++];
    if (p < 0 || static_cast<std::size_t>(p) > span.end - span.begin) {
      throw Error("prefix length " + std::to_string(p) + " out of range for a segment of length " +
                  std::to_string(span.end - span.begin));
    }
    for (std::size_t i = span.begin; i < span.end; ++i) ends[i] = span.begin + static_cast<std::size_t>(p);
  }
  if (next != segment_prefix_lens.size()) throw Error("more prefix lengths than segments");
  return ends;
}

}  // namespace

AttentionMask build_packed_mask(MaskKind kind, std::span<const int> segment_ids,
                                std::span<const int> segment_prefix_lens) {
  const std::size_t n = segment_ids.size();
  AttentionMask mask{BoolMatrix(n, n), kind, 0};
  if (kind == MaskKind::full) throw Error("build_packed_mask: full masks have no prefix");
  std::vector<std::size_t> ends(n, 0);
  if (kind == MaskKind::prefix) ends = prefix_ends(segment_ids, segment_prefix_lens);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool same = segment_ids[i] == segment_ids[j];
      mask.visibility.set(i, j, same && (j <= i || j < ends[i]));
    }
  }
  return mask;
}

BoolMatrix bidirectional_region(std::span<const int> segment_ids,
                                std::span<const int> segment_prefix_lens) {
  const std::size_t n = segment_ids.size();
  const auto ends = prefix_ends(segment_ids, segment_prefix_lens);
  BoolMatrix region(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= ends[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      region.set(i, j, segment_ids[i] == segment_ids[j] && j < ends[i]);
    }
  }
  return region;
}

BoolMatrix cross_visibility(std::span<const int> decoder_segments,
                            std::span<const int> encoder_segments) {
  BoolMatrix vis(decoder_segments.size(), encoder_segments.size());
  for (std::size_t i = 0; i < decoder_segments.size(); ++i) {
    for (std::size_t j = 0; j < encoder_segments.size(); ++j) {
      vis.set(i, j, decoder_segments[i] != kPadSegment && decoder_segments[i] == encoder_segments[j]);
    }
  }
  return vis;
}

}  // namespace ptlab
