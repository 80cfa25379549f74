#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gpselect/em_engine.hpp"
#include "gpselect/io.hpp"
#include "gpselect/synthdata.hpp"

namespace gpselect {

struct GeneratorSpec {
  std::string type = "bars";  // "bars" or "gmm"
  ModelKind model = ModelKind::kBsc;
  int N = 2000;
  std::uint64_t seed = 0;
  // bars
  int grid_side = 5;
  double pi = 0.2;
  double sigma2 = 2.0;
  double slab_mu = 2.0;
  double slab_psi = 1.0;
  double bar_amplitude = 1.0;
  // gmm
  int C = 3;
  GmmLayout layout = GmmLayout::kRandom;
  double separation = 8.0;
  int dim = 2;
};

// Strict parsing: unknown keys and bad values raise ConfigError naming the key.
GeneratorSpec parse_generator(const Json& j);
Json to_json(const GeneratorSpec& spec);

struct Dataset {
  Eigen::MatrixXd Y;
  std::optional<GroundTruth> truth;
  Eigen::VectorXi labels;  // mixture data only
  Json generator;          // spec that produced it, when known
};

Dataset generate_dataset(const GeneratorSpec& spec);

// Directory layout: data.csv, ground_truth.json, states.csv, manifest.json.
void write_dataset(const fs::path& dir, const Dataset& ds);
Dataset load_dataset(const fs::path& dir);

struct ExperimentConfig {
  EMConfig em;
  // Partial kernel values; unspecified ones come from the data-scaled preset.
  Json kernel_overrides = Json::object();
  bool init_from_truth = false;
  int checkpoint_every = 10;
  int repetitions = 1;
  std::optional<int> expected_dim;
  std::optional<fs::path> dataset;
  std::optional<GeneratorSpec> generator;
  fs::path output_dir;
  Json resolved;  // the full configuration with defaults filled in
};

ExperimentConfig parse_experiment(const Json& j);

// Applies "a.b.c=value" overrides; value is parsed as JSON when possible and
// kept as a string otherwise.
Json apply_overrides(Json config, const std::vector<std::string>& overrides);

// Default root for outputs: $GPSELECT_OUTPUT_ROOT or ./runs.
fs::path default_output_root();

void cmd_generate(const Json& spec, const fs::path& out_dir, bool force);

struct RunOptions {
  bool force = false;
  bool resume = false;
  int jobs = 1;
  bool quiet = true;
};

struct RunSummary {
  Json summary;
  bool any_failure = false;
};

RunSummary cmd_run(const Json& config, const RunOptions& options);

Json cmd_evaluate(const fs::path& run_dir, const fs::path& dataset_dir);

Json cmd_compare(const std::vector<fs::path>& run_dirs, const fs::path& out_dir);

// Shared by all subcommands: 0 ok, 2 config error, 3 numerical failure,
// 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace gpselect
