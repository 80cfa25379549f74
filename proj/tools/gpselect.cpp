// Command-line front end: generate, run, evaluate, compare.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gpselect/cli_runner.hpp"
#include "gpselect/errors.hpp"

using namespace gpselect;

namespace {

Json load_config(const std::string& path, const std::vector<std::string>& sets) {
  Json config = Json::object();
  if (!path.empty()) {
    try {
      config = read_json(path);
    } catch (const IoError& e) {
      // A config file that does not parse is a configuration problem.
      if (fs::exists(path)) throw ConfigError(e.what());
      throw;
    }
  }
  return apply_overrides(std::move(config), sets);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP-based preselection for truncated EM"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  bool force = false;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset directory");
  gen->add_option("-c,--config", config_path, "Generator spec (JSON)");
  gen->add_option("--set", sets, "Override key=value (repeatable)");
  gen->add_option("-o,--out", out_dir, "Output dataset directory")->required();
  gen->add_flag("--force", force, "Overwrite an existing dataset");

  bool resume = false;
  int jobs = 1;
  auto* run = app.add_subcommand("run", "Run an experiment configuration");
  run->add_option("-c,--config", config_path, "Experiment config (JSON)");
  run->add_option("--set", sets, "Override key=value (repeatable)");
  run->add_flag("--force", force, "Replace an existing run directory");
  run->add_flag("--resume", resume, "Continue from checkpoints");
  run->add_option("-j,--jobs", jobs, "Repetitions run in parallel")->check(CLI::PositiveNumber);

  std::string run_dir;
  std::string dataset_dir;
  auto* eval = app.add_subcommand("evaluate", "Score a run against ground truth");
  eval->add_option("run_dir", run_dir, "Run directory")->required();
  eval->add_option("dataset_dir", dataset_dir, "Dataset directory")->required();

  std::vector<std::string> run_dirs;
  auto* cmp = app.add_subcommand("compare", "Align several runs into one table");
  cmp->add_option("run_dirs", run_dirs, "Run directories")->required();
  cmp->add_option("-o,--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      cmd_generate(load_config(config_path, sets), out_dir, force);
      std::printf("dataset written to %s\n", out_dir.c_str());
    } else if (*run) {
      RunOptions opts;
      opts.force = force;
      opts.resume = resume;
      opts.jobs = jobs;
      const RunSummary s = cmd_run(load_config(config_path, sets), opts);
      std::printf("%s\n", s.summary.dump(2).c_str());
      if (s.any_failure) {
        std::fprintf(stderr, "error: at least one repetition stopped on a numerical failure\n");
        return 3;
      }
    } else if (*eval) {
      const Json report = cmd_evaluate(run_dir, dataset_dir);
      std::printf("%s\n", report.dump(2).c_str());
    } else if (*cmp) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      cmd_compare(dirs, out_dir);
      std::printf("comparison written to %s\n", out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
