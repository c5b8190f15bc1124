#pragma once

#include <cstdint>
#include <string>

namespace ptlab {

enum class ArchitectureKind { causal_decoder, non_causal_decoder, encoder_decoder };

/// "CD", "ND" or "ED".
std::string short_name(ArchitectureKind arch);
ArchitectureKind parse_architecture(const std::string& text);
inline bool is_decoder_only(ArchitectureKind a) { return a != ArchitectureKind::encoder_decoder; }

struct RelativeBiasConfig {
  int n_buckets = 32;
  int max_distance = 128;
  bool operator==(const RelativeBiasConfig&) const = default;
};

/// Static description of a transformer variant. Defaults are the desk-scale
/// configuration.
struct ModelConfig {
  int vocab_size = 512;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 160;
  int decoder_layers = 2;
  int encoder_layers = 0;
  bool tied_embeddings = true;
  RelativeBiasConfig rel_bias;
  double dropout_rate = 0.0;
  double norm_epsilon = 1e-6;

  int head_dim() const { return d_model / n_heads; }

  /// Throws ValidationError if the config cannot describe `arch`.
  void validate(ArchitectureKind arch) const;
  bool operator==(const ModelConfig&) const = default;
};

/// Desk-scale defaults; encoder-decoder gets as many encoder layers as decoder layers.
ModelConfig desk_config(ArchitectureKind arch);

/// The large-scale shared architecture (vocabulary 32,128, width 4,096,
/// 64 heads, feed-forward 10,240, 24 decoder-only layers or 24 + 24).
ModelConfig reference_config(ArchitectureKind arch);

}  // namespace ptlab
