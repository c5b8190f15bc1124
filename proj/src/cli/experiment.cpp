#include "ptlab/cli/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ptlab/core/json_fields.hpp"

namespace ptlab {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

namespace {

/// Shortest text that reads back as the same double.
std::string fmt_double(double v) { return json(v).dump(); }

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() || base.empty() ? p : base / p; }

/// Encoder layers follow the architecture: none for decoder-only models,
/// as many as decoder layers for ED when left unset.
ModelConfig config_for(ModelConfig c, ArchitectureKind arch) {
  if (arch == ArchitectureKind::encoder_decoder) {
    if (c.encoder_layers == 0) c.encoder_layers = c.decoder_layers;
  } else {
    c.encoder_layers = 0;
  }
  return c;
}

std::string file_label(const TrainingStage& s) { return short_name(s.arch) + "-" + short_name(s.objective.kind); }

void check_name(const std::string& name) {
  if (name.empty()) throw ValidationError("spec: name must not be empty");
  for (char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) {
      throw ValidationError("spec: name may only contain letters, digits, '-', '_' and '.'");
    }
  }
}

ordered_json corpus_to_json(const CorpusSpec& c) {
  ordered_json j;
  if (c.kind == CorpusSpec::Kind::grammar) {
    j["kind"] = "grammar";
    j["seed"] = c.seed;
    j["documents"] = c.documents;
    j["step_one"] = c.step_one;
  } else {
    j["kind"] = "text";
    j["path"] = c.path.string();
  }
  return j;
}

CorpusSpec corpus_from_json(const json& j, const fs::path& base) {
  const std::string w = "corpus";
  check_keys(j, {"kind", "seed", "documents", "step_one", "path"}, w);
  CorpusSpec c;
  const auto kind = field<std::string>(j, "kind", w);
  if (kind == "grammar") {
    if (j.contains("path")) throw ValidationError(w + ": grammar corpora take no path");
    optional_field(j, "seed", w, c.seed);
    optional_field(j, "documents", w, c.documents);
    optional_field(j, "step_one", w, c.step_one);
    if (c.documents == 0) throw ValidationError(w + ": documents must be positive");
    if (!(c.step_one >= 0.0 && c.step_one <= 1.0)) throw ValidationError(w + ": step_one must lie in [0, 1]");
  } else if (kind == "text") {
    c.kind = CorpusSpec::Kind::text;
    for (const char* k : {"seed", "documents", "step_one"})
      if (j.contains(k)) throw ValidationError(w + ": text corpora take no '" + k + "'");
    c.path = resolve(field<std::string>(j, "path", w), base);
  } else {
    throw ValidationError(w + ": unknown kind '" + kind + "' (expected grammar or text)");
  }
  return c;
}

ordered_json tasks_to_json(const TaskSpec& t) {
  ordered_json j;
  switch (t.kind) {
    case TaskSpec::Kind::none: j["kind"] = "none"; break;
    case TaskSpec::Kind::toy:
      j["kind"] = "toy";
      j["seed"] = t.seed;
      j["examples_per_task"] = t.examples_per_task;
      break;
    case TaskSpec::Kind::files: {
      j["kind"] = "files";
      auto& f = j["finetune"] = ordered_json::array();
      for (const auto& p : t.finetune) f.push_back(p.string());
      auto& e = j["eval"] = ordered_json::array();
      for (const auto& p : t.eval) e.push_back(p.string());
      break;
    }
  }
  return j;
}

TaskSpec tasks_from_json(const json& j, const fs::path& base) {
  const std::string w = "tasks";
  check_keys(j, {"kind", "seed", "examples_per_task", "finetune", "eval"}, w);
  TaskSpec t;
  const auto kind = field<std::string>(j, "kind", w);
  if (kind == "none") {
    if (j.size() != 1) throw ValidationError(w + ": kind none takes no other fields");
  } else if (kind == "toy") {
    t.kind = TaskSpec::Kind::toy;
    optional_field(j, "seed", w, t.seed);
    optional_field(j, "examples_per_task", w, t.examples_per_task);
    if (t.examples_per_task < 10) throw ValidationError(w + ": examples_per_task must be at least 10");
  } else if (kind == "files") {
    t.kind = TaskSpec::Kind::files;
    for (const auto& p : field<std::vector<std::string>>(j, "finetune", w)) t.finetune.push_back(resolve(p, base));
    for (const auto& p : field<std::vector<std::string>>(j, "eval", w)) t.eval.push_back(resolve(p, base));
  } else {
    throw ValidationError(w + ": unknown kind '" + kind + "' (expected none, toy or files)");
  }
  return t;
}

ordered_json eval_to_json(const EvalSpec& e) {
  ordered_json j;
  j["marks"] = e.marks;
  j["policy"] = to_string(e.policy);
  j["scoring"] = to_string(e.scoring);
  j["seq_len"] = e.seq_len;
  j["final"] = e.final;
  return j;
}

EvalSpec eval_from_json(const json& j) {
  const std::string w = "eval";
  check_keys(j, {"marks", "policy", "scoring", "seq_len", "final"}, w);
  EvalSpec e;
  optional_field(j, "marks", w, e.marks);
  if (j.contains("policy")) e.policy = parse_aggregation_policy(field<std::string>(j, "policy", w));
  if (j.contains("scoring")) e.scoring = parse_scoring_policy(field<std::string>(j, "scoring", w));
  optional_field(j, "seq_len", w, e.seq_len);
  optional_field(j, "final", w, e.final);
  for (double m : e.marks)
    if (!(m > 0.0 && m <= 1.0)) throw ValidationError(w + ": marks must lie in (0, 1]");
  if (e.seq_len < 2) throw ValidationError(w + ": seq_len must be at least 2");
  return e;
}

std::string conversion_name(StageConversion c) {
  switch (c) {
    case StageConversion::automatic: return "auto";
    case StageConversion::mask_switch: return "mask_switch";
    case StageConversion::empty_encoder: return "empty_encoder";
  }
  return "?";
}

ordered_json spec_stage_to_json(const SpecStage& s) {
  ordered_json j = to_json(s.stage);
  if (s.conversion != StageConversion::automatic) j["convert"] = conversion_name(s.conversion);
  if (s.stage.objective.kind == Objective::multitask) j["per_task_cap"] = s.per_task_cap;
  return j;
}

SpecStage spec_stage_from_json(const json& j, std::size_t index) {
  const std::string w = "stage " + std::to_string(index);
  if (!j.is_object()) throw ValidationError(w + ": expected an object");
  json core = j;
  SpecStage s;
  if (core.contains("convert")) {
    const auto c = field<std::string>(core, "convert", w);
    if (c == "auto") s.conversion = StageConversion::automatic;
    else if (c == "mask_switch") s.conversion = StageConversion::mask_switch;
    else if (c == "empty_encoder") s.conversion = StageConversion::empty_encoder;
    else throw ValidationError(w + ": unknown convert '" + c + "' (expected auto, mask_switch or empty_encoder)");
    core.erase("convert");
  }
  if (core.contains("per_task_cap")) {
    s.per_task_cap = field<std::size_t>(core, "per_task_cap", w);
    core.erase("per_task_cap");
  }
  TrainingStage base;
  if (core.contains("objective") && core["objective"].is_string() && core["objective"] == "MTF") {
    base.schedule = LrSchedule::fixed(0.001);
  }
  try {
    s.stage = stage_from_json(core, base);
  } catch (const ValidationError& e) {
    throw ValidationError(w + ": " + e.what());
  }
  if (s.stage.objective.kind != Objective::multitask && j.contains("per_task_cap")) {
    throw ValidationError(w + ": per_task_cap only applies to MTF stages");
  }
  return s;
}

}  // namespace

void ExperimentSpec::validate() const {
  if (format_version != kSpecFormatVersion) {
    throw ValidationError("spec: unsupported format_version " + std::to_string(format_version));
  }
  check_name(name);
  if (stages.empty()) throw ValidationError("spec: stage list is empty");
  ArchitectureKind cur = stages[0].stage.arch;
  bool hollow = false;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string w = "stage " + std::to_string(i);
    try {
      s.stage.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(w + ": " + e.what());
    }
    if (s.stage.objective.kind == Objective::multitask && tasks.kind == TaskSpec::Kind::none) {
      throw ValidationError(w + ": MTF needs a task suite");
    }
    if (i == 0) {
      if (s.conversion != StageConversion::automatic) throw ValidationError(w + ": the first stage cannot convert");
      config_for(model, cur).validate(cur);
      continue;
    }
    const ArchitectureKind next = s.stage.arch;
    const std::string step = short_name(cur) + " to " + short_name(next);
    if (next == cur) {
      if (s.conversion != StageConversion::automatic) throw ValidationError(w + ": nothing to convert");
    } else if (s.stage.objective.kind == Objective::multitask) {
      throw ValidationError(w + ": MTF runs in the current architecture (" + short_name(cur) + ")");
    } else if (!hollow && is_decoder_only(cur) && is_decoder_only(next)) {
      if (s.conversion == StageConversion::empty_encoder) throw ValidationError(w + ": " + step + " is a mask switch");
    } else if (!hollow && cur == ArchitectureKind::encoder_decoder && next == ArchitectureKind::causal_decoder) {
      if (s.conversion != StageConversion::empty_encoder) {
        throw ValidationError(w + ": ED to CD is only possible with \"convert\": \"empty_encoder\"");
      }
      hollow = true;
    } else {
      throw ValidationError(w + ": no parameter mapping from " + step);
    }
    cur = next;
  }
}

std::int64_t ExperimentSpec::pretraining_budget() const {
  std::int64_t total = 0;
  for (const auto& s : stages)
    if (s.stage.objective.kind != Objective::multitask) total += s.stage.token_budget_seen;
  return total;
}

ordered_json spec_to_json(const ExperimentSpec& s) {
  ordered_json j;
  j["format_version"] = s.format_version;
  j["name"] = s.name;
  j["model"] = to_json(s.model);
  j["precision"] = to_string(s.precision);
  j["init_seed"] = s.init_seed;
  j["corpus"] = corpus_to_json(s.corpus);
  j["tasks"] = tasks_to_json(s.tasks);
  j["eval"] = eval_to_json(s.eval);
  auto& st = j["stages"] = ordered_json::array();
  for (const auto& x : s.stages) st.push_back(spec_stage_to_json(x));
  return j;
}

ExperimentSpec spec_from_json(const json& j, const fs::path& base) {
  const std::string w = "spec";
  check_keys(j, {"format_version", "name", "model", "precision", "init_seed", "corpus", "tasks", "eval", "stages"}, w);
  ExperimentSpec s;
  s.format_version = field<int>(j, "format_version", w);
  s.name = field<std::string>(j, "name", w);
  if (j.contains("model")) s.model = model_config_from_json(j["model"]);
  if (j.contains("precision")) s.precision = parse_precision(field<std::string>(j, "precision", w));
  optional_field(j, "init_seed", w, s.init_seed);
  if (j.contains("corpus")) s.corpus = corpus_from_json(j["corpus"], base);
  if (j.contains("tasks")) s.tasks = tasks_from_json(j["tasks"], base);
  if (j.contains("eval")) s.eval = eval_from_json(j["eval"]);
  if (!j.contains("stages") || !j["stages"].is_array()) throw ValidationError(w + ": 'stages' must be a list");
  for (std::size_t i = 0; i < j["stages"].size(); ++i) s.stages.push_back(spec_stage_from_json(j["stages"][i], i));
  s.validate();
  return s;
}

namespace {

json parse_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace

ExperimentSpec load_spec(const fs::path& path) { return spec_from_json(parse_json_file(path), path.parent_path()); }

void override_seeds(ExperimentSpec& spec, std::uint64_t seed) {
  spec.init_seed = mix_seed(seed, 0);
  for (std::size_t i = 0; i < spec.stages.size(); ++i) spec.stages[i].stage.seed = mix_seed(seed, i + 1);
}

ordered_json manifest_to_json(const RunManifest& m) {
  ordered_json j;
  j["name"] = m.name;
  j["spec_hash"] = m.spec_hash;
  j["status"] = m.status;
  j["architecture"] = m.architecture;
  j["objective"] = m.objective;
  auto& st = j["stages"] = ordered_json::array();
  for (const auto& s : m.stages) {
    st.push_back({{"label", s.label},
                  {"checkpoint", s.checkpoint},
                  {"metrics", s.metrics},
                  {"steps", s.steps},
                  {"tokens_seen", s.tokens_seen},
                  {"final_validation_loss",
                   s.final_validation_loss ? ordered_json(*s.final_validation_loss) : ordered_json()},
                  {"wall_seconds", s.wall_seconds}});
  }
  auto& ev = j["evals"] = ordered_json::array();
  for (const auto& e : m.evals) ev.push_back({{"mark", e.mark}, {"tokens_seen", e.tokens_seen}, {"report", e.report}});
  auto& h = j["file_hashes"] = ordered_json::object();
  for (const auto& [path, hash] : m.file_hashes) h[path] = hash;
  j["wall_seconds"] = m.wall_seconds;
  return j;
}

RunManifest manifest_from_json(const json& j, const fs::path& run_dir) {
  const std::string w = "manifest";
  check_keys(j, {"name", "spec_hash", "status", "architecture", "objective", "stages", "evals", "file_hashes",
                 "wall_seconds"},
             w);
  RunManifest m;
  m.run_dir = run_dir;
  m.name = field<std::string>(j, "name", w);
  m.spec_hash = field<std::string>(j, "spec_hash", w);
  m.status = field<std::string>(j, "status", w);
  m.architecture = field<std::string>(j, "architecture", w);
  m.objective = field<std::string>(j, "objective", w);
  for (const auto& s : j.at("stages")) {
    StageRecord r;
    r.label = field<std::string>(s, "label", w);
    r.checkpoint = field<std::string>(s, "checkpoint", w);
    r.metrics = field<std::string>(s, "metrics", w);
    r.steps = field<std::int64_t>(s, "steps", w);
    r.tokens_seen = field<std::int64_t>(s, "tokens_seen", w);
    if (!s.at("final_validation_loss").is_null()) r.final_validation_loss = s["final_validation_loss"].get<double>();
    r.wall_seconds = field<double>(s, "wall_seconds", w);
    m.stages.push_back(r);
  }
  for (const auto& e : j.at("evals")) {
    m.evals.push_back(
        {field<std::int64_t>(e, "tokens_seen", w), field<std::string>(e, "mark", w), field<std::string>(e, "report", w)});
  }
  for (const auto& [k, v] : j.at("file_hashes").items()) m.file_hashes.emplace_back(k, v.get<std::string>());
  m.wall_seconds = field<double>(j, "wall_seconds", w);
  return m;
}

RunManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw Error("missing manifest " + path.string());
  return manifest_from_json(parse_json_file(path), path.parent_path());
}

std::string manifest_fingerprint(const RunManifest& m) {
  ordered_json j = manifest_to_json(m);
  j.erase("wall_seconds");
  for (auto& s : j["stages"]) s.erase("wall_seconds");
  return j.dump();
}

Corpus materialize_corpus(const CorpusSpec& spec, const Vocab& vocab) {
  std::vector<std::string> docs;
  if (spec.kind == CorpusSpec::Kind::grammar) {
    PatternGrammar g;
    g.step_one = spec.step_one;
    docs = generate_documents(g, spec.seed, spec.documents);
  } else {
    docs = load_documents(spec.path);
  }
  Corpus c = build_corpus(docs, vocab);
  if (c.train.empty()) throw ValidationError("corpus is empty");
  return c;
}

ToySuite materialize_tasks(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskSpec::Kind::none: return {};
    case TaskSpec::Kind::toy: return make_toy_suite(PatternGrammar{}, spec.seed, spec.examples_per_task);
    case TaskSpec::Kind::files: {
      ToySuite s;
      for (const auto& p : spec.finetune)
        for (auto& t : load_tasks(p)) s.train_tasks.push_back(std::move(t));
      for (const auto& p : spec.eval)
        for (auto& t : load_tasks(p)) s.heldout_tasks.push_back(std::move(t));
      return s;
    }
  }
  return {};
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

class RunWriter {
 public:
  RunWriter(RunManifest& m) : m_(m) {}

  void add_file(const std::string& rel) { files_.insert(rel); }

  void flush() {
    m_.file_hashes.clear();
    for (const auto& f : files_) m_.file_hashes.emplace_back(f, file_hash(m_.run_dir / f));
    write_text(m_.run_dir / "manifest.json", manifest_to_json(m_).dump(2) + "\n");
  }

 private:
  RunManifest& m_;
  std::set<std::string> files_;
};

std::string mark_label(double frac) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%g%%", frac * 100.0);
  return buf;
}

}  // namespace

RunManifest cmd_run(const ExperimentSpec& input, const fs::path& out_root, const RunSettings& settings) {
  ExperimentSpec spec = input;
  if (settings.seed_override) override_seeds(spec, *settings.seed_override);
  if (settings.precision) spec.precision = *settings.precision;
  spec.validate();

  const auto t0 = std::chrono::steady_clock::now();
  RunManifest m;
  m.name = spec.name;
  m.spec_hash = hex64(fnv1a(spec_to_json(spec).dump()));
  m.status = "running";
  m.architecture = short_name(spec.stages[0].stage.arch);
  m.objective = short_name(spec.stages[0].stage.objective.kind);
  m.run_dir = out_root / spec.name;
  if (fs::exists(m.run_dir)) {
    if (!settings.overwrite) throw ValidationError("run directory " + m.run_dir.string() + " already exists");
    fs::remove_all(m.run_dir);
  }
  fs::create_directories(m.run_dir);
  RunWriter writer(m);
  write_text(m.run_dir / "spec.json", spec_to_json(spec).dump(2) + "\n");
  writer.add_file("spec.json");

  const Vocab vocab(spec.model.vocab_size);
  const Corpus corpus = materialize_corpus(spec.corpus, vocab);
  const ToySuite suite = materialize_tasks(spec.tasks);
  const bool evaluating = !suite.heldout_tasks.empty();

  EvalOptions eval_opts;
  eval_opts.scoring = spec.eval.scoring;
  eval_opts.seq_len = spec.eval.seq_len;
  eval_opts.compute = settings.compute;
  auto run_eval = [&](const Checkpoint& c, const std::string& mark) {
    const EvalReport rep = evaluate(c, suite.heldout_tasks, eval_opts, spec.eval.policy);
    const std::string rel = "eval_" + std::to_string(m.evals.size()) + ".json";
    write_text(m.run_dir / rel, report_to_json(rep).dump(2) + "\n");
    writer.add_file(rel);
    m.evals.push_back({c.meta.cumulative.tokens_seen, mark, rel});
  };

  RunOptions opts;
  opts.compute = settings.compute;
  std::map<std::int64_t, std::string> mark_names;
  if (evaluating) {
    const auto total = spec.pretraining_budget();
    for (double f : spec.eval.marks) {
      const auto tokens = static_cast<std::int64_t>(std::llround(f * static_cast<double>(total)));
      if (tokens > 0 && !mark_names.count(tokens)) {
        mark_names[tokens] = mark_label(f);
        opts.marks.push_back(tokens);
      }
    }
    opts.on_mark = [&](const Checkpoint& c, std::int64_t mark) { run_eval(c, mark_names.at(mark)); };
  }

  const auto first = spec.stages[0].stage.arch;
  Checkpoint ckpt = fresh_checkpoint(config_for(spec.model, first), first, spec.init_seed, spec.precision);
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const SpecStage& s = spec.stages[i];
    if (s.stage.arch != ckpt.meta.arch) {
      ckpt = convert(ckpt, s.stage.arch,
                     s.conversion == StageConversion::empty_encoder ? ConversionMode::empty_encoder_experimental
                                                                     : ConversionMode::mask_switch);
    }
    const std::string base = "stage_" + std::to_string(i) + "_" + file_label(s.stage);
    const std::string metrics_rel = "metrics_" + base + ".jsonl";
    const auto ts = std::chrono::steady_clock::now();
    try {
      JsonlMetricsWriter metrics(m.run_dir / metrics_rel);
      writer.add_file(metrics_rel);
      if (s.stage.objective.kind == Objective::multitask) {
        FinetuneSettings fs_;
        fs_.schedule = s.stage.schedule;
        fs_.dropout = s.stage.dropout;
        fs_.seed = s.stage.seed;
        fs_.seq_len = s.stage.seq_len;
        fs_.batch_size = s.stage.batch_size;
        fs_.z_loss = s.stage.z_loss;
        fs_.per_task_cap = s.per_task_cap;
        ckpt = multitask_finetune(ckpt, suite.train_tasks, s.stage.token_budget_seen, fs_, opts, metrics.sink());
      } else {
        ckpt = run_stage(ckpt, s.stage, corpus, opts, metrics.sink());
      }
    } catch (const TrainingAborted& e) {
      const std::string rel = base + "_aborted.ckpt";
      save_checkpoint(e.diagnostic(), m.run_dir / rel);
      writer.add_file(rel);
      m.status = "aborted";
      m.wall_seconds = seconds_since(t0);
      writer.flush();
      throw;
    }
    const std::string ckpt_rel = base + ".ckpt";
    save_checkpoint(ckpt, m.run_dir / ckpt_rel);
    writer.add_file(ckpt_rel);
    const auto& summary = ckpt.meta.stage_history.back();
    m.stages.push_back({s.stage.label(), ckpt_rel, metrics_rel, summary.ledger.steps, summary.ledger.tokens_seen,
                        summary.final_validation_loss, seconds_since(ts)});
    writer.flush();
  }
  if (evaluating && spec.eval.final) {
    const bool already = !m.evals.empty() && m.evals.back().tokens_seen == ckpt.meta.cumulative.tokens_seen;
    if (!already) run_eval(ckpt, "final");
  }
  m.status = "complete";
  m.wall_seconds = seconds_since(t0);
  writer.flush();
  return m;
}

void check_matrix_pair(ArchitectureKind arch, Objective objective) {
  const bool ok = (arch == ArchitectureKind::causal_decoder && (objective == Objective::flm || objective == Objective::mlm)) ||
                  (arch != ArchitectureKind::causal_decoder && (objective == Objective::plm || objective == Objective::mlm));
  if (!ok) {
    throw ValidationError("pair " + short_name(arch) + ":" + short_name(objective) +
                          " is not part of the matrix (CD uses FLM or MLM; ND and ED use PLM or MLM)");
  }
}

std::vector<std::string> all_matrix_pairs() { return {"CD:FLM", "CD:MLM", "ND:PLM", "ND:MLM", "ED:PLM", "ED:MLM"}; }

namespace {

std::pair<ArchitectureKind, ObjectiveKind> parse_pair(const std::string& pair) {
  const auto colon = pair.find(':');
  if (colon == std::string::npos) throw ValidationError("matrix pair '" + pair + "' is not of the form ARCH:OBJECTIVE");
  const auto arch = parse_architecture(pair.substr(0, colon));
  const auto obj = parse_objective(pair.substr(colon + 1));
  check_matrix_pair(arch, obj.kind);
  return {arch, obj};
}

}  // namespace

MatrixSpec matrix_from_json(const json& j, const fs::path& base) {
  const std::string w = "matrix";
  check_keys(j, {"format_version", "name", "model", "precision", "init_seed", "corpus", "tasks", "eval", "pairs",
                 "stage"},
             w);
  MatrixSpec m;
  m.format_version = field<int>(j, "format_version", w);
  if (m.format_version != kSpecFormatVersion) {
    throw ValidationError(w + ": unsupported format_version " + std::to_string(m.format_version));
  }
  m.name = field<std::string>(j, "name", w);
  check_name(m.name);
  if (j.contains("model")) m.model = model_config_from_json(j["model"]);
  if (j.contains("precision")) m.precision = parse_precision(field<std::string>(j, "precision", w));
  optional_field(j, "init_seed", w, m.init_seed);
  if (j.contains("corpus")) m.corpus = corpus_from_json(j["corpus"], base);
  if (j.contains("tasks")) m.tasks = tasks_from_json(j["tasks"], base);
  if (j.contains("eval")) m.eval = eval_from_json(j["eval"]);
  if (!j.contains("pairs")) throw ValidationError(w + ": missing field 'pairs'");
  if (j["pairs"].is_string() && j["pairs"] == "all") {
    m.pairs = all_matrix_pairs();
  } else {
    m.pairs = field<std::vector<std::string>>(j, "pairs", w);
  }
  if (m.pairs.empty()) throw ValidationError(w + ": no pairs");
  std::set<std::string> seen;
  for (const auto& p : m.pairs) {
    parse_pair(p);
    if (!seen.insert(p).second) throw ValidationError(w + ": duplicate pair " + p);
  }
  json st = j.contains("stage") ? j["stage"] : json::object();
  check_keys(st, {"token_budget_seen", "schedule", "seed", "seq_len", "batch_size", "z_loss"}, w + " stage");
  st["arch"] = "CD";
  st["objective"] = "FLM";
  m.stage = stage_from_json(st);
  for (const auto& p : m.pairs) matrix_run_spec(m, p).validate();
  return m;
}

MatrixSpec load_matrix(const fs::path& path) { return matrix_from_json(parse_json_file(path), path.parent_path()); }

ExperimentSpec matrix_run_spec(const MatrixSpec& matrix, const std::string& pair) {
  const auto [arch, objective] = parse_pair(pair);
  ExperimentSpec s;
  s.name = matrix.name + "-" + short_name(arch) + "-" + short_name(objective.kind);
  s.model = matrix.model;
  s.precision = matrix.precision;
  s.init_seed = matrix.init_seed;
  s.corpus = matrix.corpus;
  s.tasks = matrix.tasks;
  s.eval = matrix.eval;
  SpecStage st;
  st.stage = matrix.stage;
  st.stage.arch = arch;
  st.stage.objective = objective;
  s.stages.push_back(st);
  return s;
}

std::vector<RunManifest> cmd_matrix(const MatrixSpec& matrix, const fs::path& out_root, const RunSettings& settings) {
  const fs::path root = out_root / matrix.name;
  if (fs::exists(root / "comparison.csv") && !settings.overwrite) {
    throw ValidationError("matrix directory " + root.string() + " already exists");
  }
  fs::create_directories(root);
  std::vector<RunManifest> runs;
  std::ostringstream csv;
  csv << "run,arch,objective,final_val_loss,mark,tokens_seen,median_then_mean,single_prompt_mean,random_baseline\n";
  for (const auto& pair : matrix.pairs) {
    RunManifest m = cmd_run(matrix_run_spec(matrix, pair), root, settings);
    const auto& loss = m.stages.back().final_validation_loss;
    for (const auto& e : m.evals) {
      const EvalReport rep = report_from_json(parse_json_file(m.run_dir / e.report));
      csv << m.name << ',' << m.architecture << ',' << m.objective << ',' << (loss ? fmt_double(*loss) : "") << ','
          << e.mark << ',' << e.tokens_seen << ',' << fmt_double(rep.median_then_mean) << ','
          << fmt_double(rep.single_prompt_mean) << ',' << fmt_double(rep.random_baseline) << '\n';
    }
    runs.push_back(std::move(m));
  }
  write_text(root / "comparison.csv", csv.str());
  return runs;
}

void cmd_report(const std::vector<fs::path>& manifests, const fs::path& out_dir) {
  if (manifests.empty()) throw ValidationError("report: no manifests given");
  std::vector<RunManifest> runs;
  std::vector<std::string> missing;
  for (const auto& p : manifests) {
    if (!fs::exists(p)) {
      missing.push_back(p.string());
      continue;
    }
    RunManifest m = load_manifest(p);
    for (const auto& s : m.stages)
      for (const auto& f : {s.checkpoint, s.metrics})
        if (!fs::exists(m.run_dir / f)) missing.push_back((m.run_dir / f).string());
    for (const auto& e : m.evals)
      if (!fs::exists(m.run_dir / e.report)) missing.push_back((m.run_dir / e.report).string());
    runs.push_back(std::move(m));
  }
  if (!missing.empty()) {
    std::string msg = "report: missing files:";
    for (const auto& f : missing) msg += "\n  " + f;
    throw Error(msg);
  }

  std::ostringstream curves;
  curves << "run,stage_index,stage,tokens_seen,stage_tokens_seen,val_loss\n";
  std::ostringstream evals;
  evals << "run,mark,tokens_seen,policy,scoring,aggregate,min,max,baseline\n";
  for (const auto& m : runs) {
    for (std::size_t i = 0; i < m.stages.size(); ++i) {
      for (const auto& r : read_metrics(m.run_dir / m.stages[i].metrics)) {
        if (r.kind != MetricRecord::Kind::validation) continue;
        curves << m.name << ',' << i << ',' << r.stage << ',' << r.tokens_seen << ',' << r.stage_tokens_seen << ','
               << fmt_double(r.cross_entropy) << '\n';
      }
    }
    for (const auto& e : m.evals) {
      const EvalReport rep = report_from_json(parse_json_file(m.run_dir / e.report));
      double lo = 0.0, hi = 0.0;
      for (const auto& [a, b] : rep.spread) {
        lo += a;
        hi += b;
      }
      lo /= static_cast<double>(rep.spread.size());
      hi /= static_cast<double>(rep.spread.size());
      for (auto policy : {AggregationPolicy::median_then_mean, AggregationPolicy::single_prompt_mean}) {
        const double agg =
            policy == AggregationPolicy::median_then_mean ? rep.median_then_mean : rep.single_prompt_mean;
        evals << m.name << ',' << e.mark << ',' << e.tokens_seen << ',' << to_string(policy) << ','
              << to_string(rep.scoring) << ',' << fmt_double(agg) << ',' << fmt_double(lo) << ',' << fmt_double(hi)
              << ',' << fmt_double(rep.random_baseline) << '\n';
      }
    }
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "loss_curves.csv", curves.str());
  write_text(out_dir / "eval_summary.csv", evals.str());
}

EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& tasks, const EvalOptions& options,
                    AggregationPolicy policy) {
  const Checkpoint c = load_checkpoint(checkpoint);
  return evaluate(c, load_tasks(tasks), options, policy);
}

ordered_json cmd_inspect(const fs::path& checkpoint) {
  const json header = read_checkpoint_header(checkpoint);
  ordered_json out;
  out["meta"] = ordered_json::parse(header.at("meta").dump());
  std::int64_t count = 0;
  for (const auto& p : header.at("params")) {
    std::int64_t n = 1;
    for (auto d : p.at("shape")) n *= d.get<std::int64_t>();
    count += n;
  }
  out["tensors"] = header.at("params").size();
  out["parameters"] = count;
  out["optimizer_state"] = !header.at("optimizer").is_null();
  return out;
}

}  // namespace ptlab
