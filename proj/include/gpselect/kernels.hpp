#pragma once

#include <Eigen/Dense>

#include <array>
#include <map>
#include <string>
#include <vector>

namespace gpselect {

// Hyperparameters of the composition kernel
//
//   k(x, x') = rbf_variance * exp(-|x - x'|^2 / (2 rbf_lengthscale^2))
//            + linear_variance * <x, x'> + bias_variance
//
// plus noise_variance on the Gram diagonal. A variance of exactly zero
// switches its component off; switched-off components are not optimized.
struct KernelHyperparams {
  double rbf_variance = 1.0;
  double rbf_lengthscale = 1.0;
  double linear_variance = 0.0;
  double bias_variance = 0.0;
  double noise_variance = 0.1;

  static constexpr double kNoiseFloor = 1e-8;

  bool rbf_enabled() const { return rbf_variance > 0.0; }
  bool linear_enabled() const { return linear_variance > 0.0; }
  bool bias_enabled() const { return bias_variance > 0.0; }

  // Throws std::invalid_argument on negative or non-finite fields.
  void validate() const;

  // Copy with noise raised to the jitter floor.
  KernelHyperparams floored() const;

  friend bool operator==(const KernelHyperparams&,
                         const KernelHyperparams&) = default;
};

// Index of each hyperparameter in gradient arrays and log vectors.
enum HyperIndex : int {
  kRbfVariance = 0,
  kRbfLengthscale = 1,
  kLinearVariance = 2,
  kBiasVariance = 3,
  kNoiseVariance = 4,
};
inline constexpr int kNumHyperparams = 5;

const std::array<std::string, kNumHyperparams>& hyperparam_names();

// Flat key-value form using the field names above.
std::map<std::string, double> to_record(const KernelHyperparams& hp);
KernelHyperparams from_record(const std::map<std::string, double>& rec);

// Log-scale view used by the optimizer. Disabled components map to -inf
// and are reported inactive by active_mask().
Eigen::VectorXd to_log_vector(const KernelHyperparams& hp);
KernelHyperparams from_log_vector(const Eigen::VectorXd& logv);
std::array<bool, kNumHyperparams> active_mask(const KernelHyperparams& hp);

enum class KernelPreset { kLinear, kRbf, kComposition };

KernelPreset parse_kernel_preset(const std::string& name);
std::string to_string(KernelPreset preset);

// Starting values scaled to the data: lengthscale from the median pairwise
// distance of a subsample, linear variance from the mean squared norm.
KernelHyperparams default_hyperparams(KernelPreset preset,
                                      const Eigen::MatrixXd& X);

double eval_kernel(const KernelHyperparams& hp,
                   const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& xp);

struct GramMatrix {
  Eigen::MatrixXd values;
  bool includes_noise = false;
};

// X holds one point per row.
GramMatrix gram_matrix(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                       bool with_noise);

// Cross-covariance between rows of A and rows of B (noise-free).
Eigen::MatrixXd cross_kernel(const KernelHyperparams& hp,
                             const Eigen::MatrixXd& A,
                             const Eigen::MatrixXd& B);

// dK/dlog(theta_i) of the noisy Gram, one matrix per hyperparameter.
std::array<Eigen::MatrixXd, kNumHyperparams> kernel_gradients(
    const KernelHyperparams& hp, const Eigen::MatrixXd& X);

struct LowRankFactor {
  Eigen::MatrixXd factor;     // N x Q
  std::vector<int> pivots;    // selected data indices, in pivot order
  double residual_trace = 0;  // trace(K_noiseless - G G^T)

  int rank() const { return static_cast<int>(factor.cols()); }
};

// Greedy pivoted incomplete Cholesky of the noiseless kernel. Pivot is the
// largest residual diagonal entry, ties to the lowest index.
LowRankFactor incomplete_cholesky(const KernelHyperparams& hp,
                                  const Eigen::MatrixXd& X, int max_rank,
                                  double tol);

void check_finite(const Eigen::MatrixXd& X, const char* what);

}  // namespace gpselect
