#include "ptlab/model/config.hpp"

#include "ptlab/core/error.hpp"

namespace ptlab {

std::string short_name(ArchitectureKind arch) {
  switch (arch) {
    case ArchitectureKind::causal_decoder: return "CD";
    case ArchitectureKind::non_causal_decoder: return "ND";
    case ArchitectureKind::encoder_decoder: return "ED";
  }
  return "?";
}

ArchitectureKind parse_architecture(const std::string& text) {
  if (text == "CD" || text == "causal_decoder") return ArchitectureKind::causal_decoder;
  if (text == "ND" || text == "non_causal_decoder") return ArchitectureKind::non_causal_decoder;
  if (text == "ED" || text == "encoder_decoder") return ArchitectureKind::encoder_decoder;
  throw ValidationError("unknown architecture '" + text + "' (expected CD, ND or ED)");
}

void ModelConfig::validate(ArchitectureKind arch) const {
  auto fail = [](const std::string& what) { throw ValidationError("model config: " + what); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (d_model <= 0 || n_heads <= 0) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff <= 0) fail("d_ff must be positive");
  if (decoder_layers <= 0) fail("decoder_layers must be positive");
  if (arch == ArchitectureKind::encoder_decoder) {
    if (encoder_layers <= 0) fail("encoder-decoder needs encoder_layers > 0");
  } else if (encoder_layers != 0) {
    fail("encoder_layers must be 0 for decoder-only architectures");
  }
  if (rel_bias.n_buckets < 2) fail("rel_bias.n_buckets must be >= 2");
  if (rel_bias.max_distance <= 0) fail("rel_bias.max_distance must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
  if (!(norm_epsilon > 0.0)) fail("norm_epsilon must be positive");
}

ModelConfig desk_config(ArchitectureKind arch) {
  ModelConfig c;
  if (arch == ArchitectureKind::encoder_decoder) c.encoder_layers = c.decoder_layers;
  return c;
}

ModelConfig reference_config(ArchitectureKind arch) {
  ModelConfig c;
  c.vocab_size = 32128;
  c.d_model = 4096;
  c.n_heads = 64;
  c.d_ff = 10240;
  c.decoder_layers = 24;
  c.encoder_layers = arch == ArchitectureKind::encoder_decoder ? 24 : 0;
  c.tied_embeddings = true;
  return c;
}

}  // namespace ptlab
