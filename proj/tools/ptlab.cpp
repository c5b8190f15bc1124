// Command-line front end: run, matrix, report, eval and inspect.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "ptlab/cli/experiment.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string spec;
  std::string out = "runs";
  std::optional<std::uint64_t> seed_override;
  int threads = 1;
  std::string precision;
  bool overwrite = false;

  ptlab::RunSettings settings() const {
    ptlab::RunSettings s;
    s.compute.threads = threads;
    s.seed_override = seed_override;
    s.overwrite = overwrite;
    if (!precision.empty()) s.precision = ptlab::parse_precision(precision);
    return s;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--spec", c.spec, "Spec file (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output root directory");
  cmd->add_option("--seed-override", c.seed_override, "Derive every seed from this value");
  cmd->add_option("--threads", c.threads, "Worker threads for attention")->check(CLI::PositiveNumber);
  cmd->add_option("--precision", c.precision, "Numeric precision")->check(CLI::IsMember({"high", "low"}));
  cmd->add_flag("--overwrite", c.overwrite, "Replace an existing run directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pretraining objective and architecture lab"};
  app.require_subcommand(1);

  Common run_opts;
  auto* run = app.add_subcommand("run", "Run one experiment spec");
  add_common(run, run_opts);

  Common matrix_opts;
  auto* matrix = app.add_subcommand("matrix", "Run an architecture x objective matrix");
  add_common(matrix, matrix_opts);

  std::vector<std::string> manifests;
  std::string report_out = "report";
  auto* report = app.add_subcommand("report", "Write plot-ready CSVs from run manifests");
  report->add_option("manifests", manifests, "manifest.json files")->required();
  report->add_option("--out", report_out, "Output directory");

  std::string ckpt_path, tasks_path, eval_out, policy = "median_then_mean", scoring = "sum_logprob";
  std::size_t eval_seq_len = 64;
  int eval_threads = 1;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint against a task file");
  eval->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--tasks", tasks_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Report path (stdout when omitted)");
  eval->add_option("--policy", policy)->check(CLI::IsMember({"median_then_mean", "single_prompt_mean"}));
  eval->add_option("--scoring", scoring)->check(CLI::IsMember({"sum_logprob", "mean_logprob"}));
  eval->add_option("--seq-len", eval_seq_len);
  eval->add_option("--threads", eval_threads)->check(CLI::PositiveNumber);

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Print checkpoint metadata");
  inspect->add_option("checkpoint", inspect_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*run) {
      const auto m = ptlab::cmd_run(ptlab::load_spec(run_opts.spec), run_opts.out, run_opts.settings());
      std::cout << (m.run_dir / "manifest.json").string() << '\n';
    } else if (*matrix) {
      const auto runs = ptlab::cmd_matrix(ptlab::load_matrix(matrix_opts.spec), matrix_opts.out, matrix_opts.settings());
      for (const auto& m : runs) std::cout << (m.run_dir / "manifest.json").string() << '\n';
    } else if (*report) {
      std::vector<std::filesystem::path> paths(manifests.begin(), manifests.end());
      ptlab::cmd_report(paths, report_out);
      std::cout << report_out << '\n';
    } else if (*eval) {
      ptlab::EvalOptions opts;
      opts.scoring = ptlab::parse_scoring_policy(scoring);
      opts.seq_len = eval_seq_len;
      opts.compute.threads = eval_threads;
      const auto rep = ptlab::cmd_eval(ckpt_path, tasks_path, opts, ptlab::parse_aggregation_policy(policy));
      const std::string text = ptlab::report_to_json(rep).dump(2) + "\n";
      if (eval_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream(eval_out) << text;
      }
    } else if (*inspect) {
      std::cout << ptlab::cmd_inspect(inspect_path).dump(2) << '\n';
    }
  } catch (const ptlab::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ptlab::TrainingAborted& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
