#include "ptlab/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ptlab/core/json_fields.hpp"
#include "ptlab/model/transformer.hpp"

namespace ptlab {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::string_view kMagic = "PTLCKPT\n";

void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }

void put_blob(std::string& out, const Tensor& t) {
  put_u64(out, t.size());
  out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw Error("checkpoint truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(sizeof v).data(), sizeof v);
    return v;
  }
  Tensor blob(const Shape& shape, Precision precision) {
    const std::uint64_t n = u64();
    if (n != element_count(shape)) throw Error("checkpoint blob size does not match its shape");
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw Error("checkpoint truncated");
    std::vector<double> data(n);
    std::memcpy(data.data(), take(n * sizeof(double)).data(), n * sizeof(double));
    return Tensor(shape, std::move(data), precision);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

ordered_json shape_json(const Tensor& t) { return ordered_json(t.shape()); }

}  // namespace

bool Checkpoint::identical(const Checkpoint& other) const {
  if (!(meta == other.meta) || !params.identical(other.params)) return false;
  if (optimizer_state.has_value() != other.optimizer_state.has_value()) return false;
  return !optimizer_state || optimizer_state->identical(*other.optimizer_state);
}

Checkpoint fresh_checkpoint(const ModelConfig& config, ArchitectureKind arch, std::uint64_t seed,
                            Precision precision) {
  config.validate(arch);
  Checkpoint c;
  c.params = init_params(config, arch, seed, precision);
  c.meta.arch = arch;
  c.meta.config = config;
  c.meta.precision = precision;
  c.meta.init_seed = seed;
  return c;
}

ArchitectureKind model_arch(const CheckpointMeta& meta) {
  return meta.empty_encoder ? ArchitectureKind::encoder_decoder : meta.arch;
}

void route_batch(PackedBatch& batch, const CheckpointMeta& meta) {
  if (!meta.empty_encoder) return;
  batch.has_encoder = true;
  batch.encoder_len = 0;
  batch.encoder_ids.clear();
  batch.encoder_segments.clear();
}

ordered_json meta_to_json(const CheckpointMeta& m) {
  ordered_json j;
  j["format_version"] = m.format_version;
  j["arch"] = short_name(m.arch);
  j["objective"] = m.objective ? to_json(*m.objective) : ordered_json();
  j["cumulative"] = to_json(m.cumulative);
  auto& hist = j["stage_history"] = ordered_json::array();
  for (const auto& s : m.stage_history) hist.push_back(to_json(s));
  j["config"] = to_json(m.config);
  j["empty_encoder"] = m.empty_encoder;
  j["precision"] = to_string(m.precision);
  j["init_seed"] = m.init_seed;
  return j;
}

CheckpointMeta meta_from_json(const json& j) {
  const std::string w = "checkpoint meta";
  check_keys(j, {"format_version", "arch", "objective", "cumulative", "stage_history", "config", "empty_encoder",
                 "precision", "init_seed"},
             w);
  CheckpointMeta m;
  m.format_version = field<int>(j, "format_version", w);
  if (m.format_version != kCheckpointFormatVersion) {
    throw ValidationError("unsupported checkpoint format_version " + std::to_string(m.format_version));
  }
  m.arch = parse_architecture(field<std::string>(j, "arch", w));
  if (!j.at("objective").is_null()) m.objective = objective_from_json(j["objective"]);
  m.cumulative = ledger_from_json(j.at("cumulative"));
  for (const auto& s : j.at("stage_history")) m.stage_history.push_back(summary_from_json(s));
  m.config = model_config_from_json(j.at("config"));
  m.empty_encoder = field<bool>(j, "empty_encoder", w);
  m.precision = parse_precision(field<std::string>(j, "precision", w));
  m.init_seed = field<std::uint64_t>(j, "init_seed", w);
  return m;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  ordered_json header;
  header["meta"] = meta_to_json(c.meta);
  auto& params = header["params"] = ordered_json::array();
  for (const auto& [path, t] : c.params) params.push_back({{"path", path}, {"shape", shape_json(t)}});
  if (c.optimizer_state) {
    const auto& st = *c.optimizer_state;
    ordered_json opt;
    opt["step"] = st.step;
    opt["decay_rate"] = st.config.decay_rate;
    opt["clip_threshold"] = st.config.clip_threshold;
    opt["epsilon1"] = st.config.epsilon1;
    opt["epsilon2"] = st.config.epsilon2;
    auto& slots = opt["slots"] = ordered_json::array();
    for (const auto& [path, m] : st.moments) {
      ordered_json s{{"path", path}, {"factored", m.factored}};
      if (m.factored) {
        s["row"] = shape_json(m.row);
        s["col"] = shape_json(m.col);
      } else {
        s["full"] = shape_json(m.full);
      }
      slots.push_back(s);
    }
    header["optimizer"] = opt;
  } else {
    header["optimizer"] = nullptr;
  }

  const std::string text = header.dump();
  std::string out(kMagic);
  put_u64(out, text.size());
  out += text;
  for (const auto& [path, t] : c.params) put_blob(out, t);
  if (c.optimizer_state) {
    for (const auto& [path, m] : c.optimizer_state->moments) {
      if (m.factored) {
        put_blob(out, m.row);
        put_blob(out, m.col);
      } else {
        put_blob(out, m.full);
      }
    }
  }
  return out;
}

namespace {

json parse_header(Reader& r) {
  if (r.take(kMagic.size()) != kMagic) throw Error("not a checkpoint file (bad magic)");
  const std::uint64_t len = r.u64();
  try {
    return json::parse(r.take(len));
  } catch (const json::parse_error& e) {
    throw Error(std::string("corrupt checkpoint header: ") + e.what());
  }
}

}  // namespace

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  const json header = parse_header(r);
  check_keys(header, {"meta", "params", "optimizer"}, "checkpoint header");
  Checkpoint c;
  c.meta = meta_from_json(header.at("meta"));
  const Precision p = c.meta.precision;
  for (const auto& e : header.at("params")) {
    c.params.add(e.at("path").get<std::string>(), r.blob(e.at("shape").get<Shape>(), p));
  }
  const json& opt = header.at("optimizer");
  if (!opt.is_null()) {
    OptimizerState st;
    st.step = opt.at("step").get<std::int64_t>();
    st.config = {opt.at("decay_rate").get<double>(), opt.at("clip_threshold").get<double>(),
                 opt.at("epsilon1").get<double>(), opt.at("epsilon2").get<double>()};
    for (const auto& s : opt.at("slots")) {
      SecondMoment m;
      m.factored = s.at("factored").get<bool>();
      if (m.factored) {
        m.row = r.blob(s.at("row").get<Shape>(), Precision::high);
        m.col = r.blob(s.at("col").get<Shape>(), Precision::high);
      } else {
        m.full = r.blob(s.at("full").get<Shape>(), Precision::high);
      }
      st.moments.emplace(s.at("path").get<std::string>(), std::move(m));
    }
    c.optimizer_state = std::move(st);
  }
  if (!r.done()) throw Error("trailing bytes after checkpoint data");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string head(kMagic.size() + sizeof(std::uint64_t), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  Reader r(head);
  if (r.take(kMagic.size()) != kMagic) throw Error("not a checkpoint file (bad magic)");
  std::string text(r.u64(), '\0');
  in.read(text.data(), static_cast<std::streamsize>(text.size()));
  if (!in) throw Error("checkpoint truncated");
  return json::parse(text);
}

}  // namespace ptlab
