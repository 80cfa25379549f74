#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gpselect/gp_regression.hpp"
#include "gpselect/kernels.hpp"
#include "gpselect/models.hpp"
#include "gpselect/params.hpp"
#include "gpselect/selection.hpp"

namespace gpselect {

enum class SelectionMode {
  kGPSelect,
  kCosine,
  kSingletonLikelihood,
  kFullExact,
  kRandom,  // uniform draw of H' indices, a reference point for hit rates
};

SelectionMode parse_selection_mode(const std::string& name);
std::string to_string(SelectionMode mode);

// Source of the first iteration's GP targets.
enum class TargetInit {
  kRandom,      // uniform on [0, 1]
  kFromParams,  // exact posterior means under the initial parameters
};

TargetInit parse_target_init(const std::string& name);
std::string to_string(TargetInit init);

struct EMConfig {
  ModelKind model_kind = ModelKind::kBsc;
  SelectionMode selection_mode = SelectionMode::kGPSelect;
  int T = 100;
  int T_star = 1;
  int H = 10;        // latents, or clusters for the mixture
  int H_prime = 5;   // selected latents (clusters) per point
  double random_fraction = 0.1;
  KernelPreset kernel_preset = KernelPreset::kLinear;
  // Explicit starting values; when absent they are scaled to the data.
  std::optional<KernelHyperparams> kernel;
  std::optional<int> ichol_rank;
  double ichol_tol = 1e-10;
  nlss::GibbsOptions gibbs;
  int nlss_free_energy_draws = 20;
  std::uint64_t seed = 0;
  int max_grad_steps = 20;
  bool zscore_inputs = false;
  bool append_singletons = false;
  TargetInit init_targets = TargetInit::kRandom;
  // Starting parameters; drawn by init_params when absent.
  std::optional<ModelParams> initial_params;
  int threads = 1;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Known generating parameters and latent states, used for diagnostics only.
struct GroundTruth {
  ModelParams params;
  Eigen::MatrixXd states;  // N x H_true, 0/1 (one-hot labels for the mixture)
};

struct PhaseTimes {
  double affinity = 0.0;
  double selection = 0.0;
  double estep = 0.0;
  double mstep = 0.0;
  double hyperopt = 0.0;
  double total = 0.0;
};

struct IterationRecord {
  int iteration = 0;  // 1-based
  // Truncated free energy of the E-step's posteriors under the parameters
  // that produced them.
  double free_energy = 0.0;
  double free_energy_se = 0.0;  // Monte-Carlo standard error (NLSS only)
  KernelHyperparams hp;         // used for this iteration's affinities
  double gp_evidence = 0.0;     // NaN when no GP was fitted
  bool hyperopt_ran = false;
  double hyperopt_evidence = 0.0;  // after optimization, NaN otherwise
  int hyperopt_steps = 0;
  PhaseTimes times;
  double hit_rate = 0.0;          // NaN without ground truth
  double acceptance_rate = 0.0;   // NaN except for NLSS
  std::uint64_t targets_in_checksum = 0;
  std::uint64_t targets_out_checksum = 0;
  std::vector<std::string> warnings;
  std::string snapshot;  // file holding a parameter snapshot, if any
};

using EMTrace = std::vector<IterationRecord>;

// Everything needed to continue a run after `completed` iterations.
struct EMState {
  int completed = 0;
  ModelParams params;
  KernelHyperparams hp;
  Eigen::MatrixXd targets;  // N x H, GP targets for the next iteration
  std::vector<nlss::ChainState> chains;
  EMTrace trace;
};

struct EMResult {
  ModelParams params;
  EMTrace trace;
  EMState state;
  std::vector<SelectedIndices> last_selection;
  // Set when a numerical failure stopped the run early; the trace holds the
  // completed iterations.
  std::optional<std::string> failure;
};

// Called after every completed iteration with the state and that
// iteration's selections.
using IterationObserver = std::function<void(
    const EMState&, const std::vector<SelectedIndices>& selection)>;

EMResult run_em(const EMConfig& config, const Eigen::MatrixXd& Y,
                const std::optional<GroundTruth>& truth = std::nullopt,
                const IterationObserver& observer = nullptr,
                const std::optional<EMState>& resume = std::nullopt);

ModelParams init_params(ModelKind kind, int num_latents,
                        const Eigen::MatrixXd& Y, Rng& rng);

// Exact posterior means (responsibilities for the mixture) under `params`,
// one row per data point.
Eigen::MatrixXd exact_expectations(const ModelParams& params,
                                   const Eigen::MatrixXd& Y);

// FNV-1a over the raw bytes of a matrix.
std::uint64_t checksum(const Eigen::MatrixXd& M);

// ---------------------------------------------------------------- scoring

struct RecoveryReport {
  std::vector<double> cosine;  // per true column; NaN when unmatched
  std::vector<int> match;      // learned column per true column, -1 if none
  int unmatched = 0;           // true columns without a match >= threshold
  bool success = false;
};

// Greedy one-to-one matching by descending cosine similarity; learned
// columns of zero norm take no part.
RecoveryReport evaluate_recovery(const Eigen::MatrixXd& W_learned,
                                 const Eigen::MatrixXd& W_true,
                                 double threshold = 0.95);

// Dictionary used for scoring. Slab models are invariant under
// (W_h, mu_h) -> (-W_h, -mu_h), so their columns are signed by sign(mu_h).
// Mixture means are returned one cluster per column.
Eigen::MatrixXd scoring_dictionary(const ModelParams& params);

// Map from true latent index to learned latent index (-1 when none) for any
// model kind: columns of W by cosine, mixture means by distance.
std::vector<int> match_latents(const ModelParams& learned,
                               const ModelParams& truth);

// Fraction of truly active latents (mapped through `mapping`) that lie in
// the selected set, averaged over all active entries.
double selection_hit_rate(const std::vector<SelectedIndices>& selection,
                          const Eigen::MatrixXd& true_states,
                          const std::vector<int>& mapping);

// Fraction of points whose arg-max label equals the true label under the
// best permutation of cluster labels.
double label_accuracy(const Eigen::MatrixXd& responsibilities,
                      const Eigen::VectorXi& true_labels);

// Per-component signal variance of the kernel on X (mean diagonal
// contribution) and the share held by the largest one.
struct KernelShares {
  double rbf = 0.0;
  double linear = 0.0;
  double bias = 0.0;
  double dominant_share = 0.0;
  std::string dominant;
};
KernelShares kernel_shares(const KernelHyperparams& hp,
                           const Eigen::MatrixXd& X);

}  // namespace gpselect
