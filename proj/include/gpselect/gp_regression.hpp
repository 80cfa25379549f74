#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

#include "gpselect/kernels.hpp"

namespace gpselect {

// Multi-output GP regression state. All H target columns share one kernel
// and one factorization of the noisy Gram matrix K.
//
// Two representations are used internally:
//   dense    - Cholesky of the full N x N Gram;
//   low rank - K = G G^T + noise * I inverted through the Woodbury identity.
// The low-rank form is exact when the kernel has no RBF component (G then
// holds the linear and bias features) and approximate when G comes from an
// incomplete Cholesky factor.
class GPFit {
 public:
  const KernelHyperparams& hp() const { return hp_; }
  const Eigen::MatrixXd& targets() const { return targets_; }
  // K^{-1} T, one column per output.
  const Eigen::MatrixXd& alpha() const { return alpha_; }
  // Diagonal of K^{-1}; strictly positive.
  const Eigen::VectorXd& inverse_diag() const { return inverse_diag_; }
  double log_det() const { return log_det_; }
  // Noise actually placed on the diagonal (after any jitter escalation).
  double effective_noise() const { return noise_; }
  bool is_lowrank() const { return lowrank_mode_; }
  const std::optional<LowRankFactor>& lowrank() const { return lowrank_; }
  Eigen::Index size() const { return targets_.rows(); }
  Eigen::Index outputs() const { return targets_.cols(); }

  // K^{-1} B.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& B) const;
  // Dense K^{-1}; O(N^2) memory.
  Eigen::MatrixXd inverse() const;
  // G in K = G G^T + noise I (low-rank mode only).
  const Eigen::MatrixXd& features() const { return features_; }

 private:
  friend GPFit fit(const KernelHyperparams&, const Eigen::MatrixXd&,
                   const Eigen::MatrixXd&);
  friend GPFit fit_lowrank(const KernelHyperparams&, const Eigen::MatrixXd&,
                           const Eigen::MatrixXd&, const LowRankFactor&);
  friend GPFit fit_features(const KernelHyperparams&, Eigen::MatrixXd,
                            const Eigen::MatrixXd&);

  void finish_dense();
  void finish_lowrank();

  KernelHyperparams hp_;
  Eigen::MatrixXd targets_;
  Eigen::MatrixXd alpha_;
  Eigen::VectorXd inverse_diag_;
  double log_det_ = 0.0;
  double noise_ = 0.0;
  bool lowrank_mode_ = false;
  Eigen::LLT<Eigen::MatrixXd> llt_;  // of K (dense) or of noise I + G^T G
  Eigen::MatrixXd features_;
  std::optional<LowRankFactor> lowrank_;
};

// Exact fit. One factorization regardless of the number of outputs; an RBF-free
// kernel is factorized through its D+1 explicit features.
GPFit fit(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
          const Eigen::MatrixXd& T);

// Fit using an incomplete Cholesky factor of the noiseless kernel.
GPFit fit_lowrank(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& T, const LowRankFactor& factor);

// Fit with an explicit feature matrix G (K = G G^T + noise I).
GPFit fit_features(const KernelHyperparams& hp, Eigen::MatrixXd G,
                   const Eigen::MatrixXd& T);

// Closed-form leave-one-out means:
//   loo(n, h) = T(n, h) - [K^{-1} T](n, h) / [K^{-1}](n, n).
// Requires N >= 2.
Eigen::MatrixXd loo_means(const GPFit& fit);

// Sum over output columns of the GP evidence; log det K is shared.
double log_marginal_likelihood(const GPFit& fit);

// d evidence / d log(theta_i) for an exact fit, zero for disabled entries.
Eigen::VectorXd evidence_gradient(const GPFit& fit, const Eigen::MatrixXd& X);

// Number of Gram factorizations performed by this process.
std::uint64_t factorization_count();

struct HyperoptOptions {
  int max_steps = 20;
  int max_halvings = 10;
  double initial_step = 1.0;  // in log units along the max-norm direction
  double max_step = 2.0;
  // When set, the evidence is that of the rank-limited (Nystrom) model with
  // pivots chosen by an incomplete Cholesky at the starting point.
  std::optional<int> lowrank_rank;
};

struct HyperoptResult {
  KernelHyperparams hp;
  double initial_evidence = 0.0;
  double evidence = 0.0;
  std::vector<double> accepted_evidence;  // starting value first
  int gradient_steps = 0;
  bool reset_to_default = false;
};

// Gradient ascent with backtracking on log hyperparameters. Returns the
// best iterate; evidence never ends below the starting value.
HyperoptResult optimize_hyperparams(const KernelHyperparams& hp0,
                                    const Eigen::MatrixXd& X,
                                    const Eigen::MatrixXd& T,
                                    const HyperoptOptions& options = {});

// Evidence of the Nystrom model built on fixed pivots, with its gradient.
struct EvidenceWithGradient {
  double value = 0.0;
  Eigen::VectorXd gradient;
};
EvidenceWithGradient nystrom_evidence(const KernelHyperparams& hp,
                                      const Eigen::MatrixXd& X,
                                      const Eigen::MatrixXd& T,
                                      const std::vector<int>& pivots,
                                      bool with_gradient);

struct GPDiagnostics {
  double evidence = 0.0;
  double loo_mean_abs_error = 0.0;
  KernelHyperparams hp;
};
GPDiagnostics diagnostics(const GPFit& fit, const Eigen::MatrixXd& loo);

}  // namespace gpselect
