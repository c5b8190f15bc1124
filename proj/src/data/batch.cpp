#include "ptlab/data/batch.hpp"

#include <string>

#include "ptlab/core/error.hpp"

namespace ptlab {

void ObjectiveKind::validate() const {
  if (kind != Objective::mlm) return;
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ValidationError("MLM mask_rate must lie in (0, 1)");
  if (!(mean_span >= 1.0)) throw ValidationError("MLM mean_span must be >= 1");
}

std::string short_name(Objective objective) {
  switch (objective) {
    case Objective::flm: return "FLM";
    case Objective::plm: return "PLM";
    case Objective::mlm: return "MLM";
    case Objective::multitask: return "MTF";
  }
  return "?";
}

ObjectiveKind parse_objective(const std::string& text) {
  if (text == "FLM") return ObjectiveKind::flm();
  if (text == "PLM") return ObjectiveKind::plm();
  if (text == "MLM") return ObjectiveKind::mlm();
  if (text == "MTF") return ObjectiveKind::multitask();
  throw ValidationError("unknown objective '" + text + "' (expected FLM, PLM, MLM or MTF)");
}

void PackedBatch::validate() const {
  const std::size_t n = positions();
  if (input_ids.size() != n || target_ids.size() != n || loss_mask.size() != n || segment_ids.size() != n) {
    throw Error("PackedBatch: decoder stream sizes do not match batch_size x seq_len");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (loss_mask[i] && target_ids[i] == pad_id) throw Error("PackedBatch: loss on a pad target");
  }
  if (prefix_lens && prefix_lens->size() != batch_size) {
    throw Error("PackedBatch: prefix_lens must have one entry per row");
  }
  if (has_encoder) {
    if (encoder_ids.size() != encoder_positions() || encoder_segments.size() != encoder_positions()) {
      throw Error("PackedBatch: encoder stream sizes do not match batch_size x encoder_len");
    }
  } else if (!encoder_ids.empty() || encoder_len != 0) {
    throw Error("PackedBatch: encoder tokens present without has_encoder");
  }
}

}  // namespace ptlab
