#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "gpselect/params.hpp"
#include "gpselect/rng.hpp"
#include "gpselect/selection.hpp"

namespace gpselect {

// Posterior of one data point restricted to (and renormalized over) K_n.
struct BinaryPosterior {
  StateSetRow states;
  Eigen::VectorXd probs;        // one entry per state in K_n
  double log_normalizer = 0.0;  // log sum_{s in K_n} p(y, s)
};

// Truncated free energy of one point from per-state log joints:
// sum_s q(s) log p(y, s) + entropy(q).
double truncated_free_energy(const Eigen::VectorXd& log_joint,
                             const Eigen::VectorXd& probs);

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v);

// Floors shared by the M-steps.
inline constexpr double kSigma2Floor = 1e-6;
inline constexpr double kPsiFloor = 1e-6;
inline constexpr double kPiMin = 1e-4;
inline constexpr double kPiMax = 1.0 - 1e-4;
inline constexpr double kVarianceFloor = 1e-6;

namespace bsc {

double log_joint(const BSCParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
                 const Eigen::Ref<const Eigen::VectorXd>& s);

struct EStepRow {
  BinaryPosterior posterior;
  Eigen::VectorXd mean_s;    // <s>
  Eigen::MatrixXd mean_ssT;  // <s s^T>
};

EStepRow estep(const BSCParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
               const StateSetRow& states);

struct SufficientStats {
  int num_points = 0;
  Eigen::VectorXd sum_s;
  Eigen::MatrixXd sum_ysT;  // D x H
  Eigen::MatrixXd sum_ssT;  // H x H
  double sum_yy = 0.0;

  SufficientStats(int d, int h);
  void add(const Eigen::Ref<const Eigen::VectorXd>& y, const EStepRow& row);
};

// Closed-form update. Latents without posterior support keep their column
// of `previous`. Notes about regularized solves go to `warnings`.
BSCParams mstep(const SufficientStats& stats, const BSCParams& previous,
                std::vector<std::string>* warnings = nullptr);

double free_energy(const BSCParams& p, const Eigen::MatrixXd& Y,
                   const std::vector<BinaryPosterior>& posteriors);

}  // namespace bsc

namespace ss {

// Gaussian moments of the active slab entries (ascending index order).
struct SlabMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct CollapsedState {
  double log_value = 0.0;  // log p(y, s) with z integrated out
  SlabMoments moments;
};

CollapsedState collapsed_log_marginal(const SSParams& p,
                                      const Eigen::Ref<const Eigen::VectorXd>& y,
                                      StateMask s);

struct EStepRow {
  BinaryPosterior posterior;
  std::vector<SlabMoments> slab;  // per state in K_n
  Eigen::VectorXd mean_s;         // <s>
  Eigen::VectorXd mean_sz;        // <s .* z>
  Eigen::MatrixXd mean_szszT;     // <(s .* z)(s .* z)^T>
};

EStepRow estep(const SSParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
               const StateSetRow& states);

struct SufficientStats {
  int num_points = 0;
  Eigen::VectorXd sum_s;
  Eigen::MatrixXd sum_y_szT;   // D x H
  Eigen::MatrixXd sum_szszT;   // H x H
  Eigen::VectorXd sum_sz;      // sum <s_h z_h>
  Eigen::VectorXd sum_sz2;     // sum <s_h z_h^2>
  double sum_yy = 0.0;

  SufficientStats(int d, int h);
  void add(const Eigen::Ref<const Eigen::VectorXd>& y, const EStepRow& row);
};

SSParams mstep(const SufficientStats& stats, const SSParams& previous,
               std::vector<std::string>* warnings = nullptr);

double free_energy(const SSParams& p, const Eigen::MatrixXd& Y,
                   const std::vector<BinaryPosterior>& posteriors);

}  // namespace ss

namespace nlss {

// Per-dimension maximum max_h s_h z_h W_dh (inactive latents contribute 0).
Eigen::VectorXd observation_mean(const NLSSParams& p,
                                 const Eigen::Ref<const Eigen::VectorXd>& s,
                                 const Eigen::Ref<const Eigen::VectorXd>& z);

// log p(y | s, z) + log p(s), without the slab prior.
double log_likelihood_and_prior(const NLSSParams& p,
                                const Eigen::Ref<const Eigen::VectorXd>& y,
                                StateMask s,
                                const Eigen::Ref<const Eigen::VectorXd>& z);

struct GibbsOptions {
  int n_samples = 50;
  int burn_in = 20;
  double initial_scale = 0.3;  // proposal sd in units of sqrt(psi_h)
  double target_acceptance = 0.44;
};

// Warm-startable chain state of one data point.
struct ChainState {
  Eigen::VectorXd b;  // H, 0/1
  Eigen::VectorXd z;  // H
  bool initialized() const { return z.size() > 0; }
};

struct EStepRow {
  Eigen::VectorXd mean_s;
  Eigen::VectorXd mean_sz;
  Eigen::VectorXd mean_sz2;
  Eigen::VectorXd state_frequency;  // per state in K_n
  // Per-sample averages of winner-take-all statistics.
  Eigen::MatrixXd win_yz;   // D x H
  Eigen::MatrixXd win_zz;   // D x H
  Eigen::MatrixXd win_yy;   // D x H
  Eigen::VectorXd nowin_yy; // D
  int proposals = 0;
  int accepted = 0;
  // Batch-means standard errors of state_frequency (20 batches), floored
  // at 1 / n_samples.
  Eigen::VectorXd state_frequency_se;
};

EStepRow gibbs_estep(const NLSSParams& p,
                     const Eigen::Ref<const Eigen::VectorXd>& y,
                     const StateSetRow& states, const GibbsOptions& options,
                     Rng& rng, ChainState& chain);

struct SufficientStats {
  int num_points = 0;
  Eigen::VectorXd sum_s;
  Eigen::VectorXd sum_sz;
  Eigen::VectorXd sum_sz2;
  Eigen::MatrixXd win_yz;
  Eigen::MatrixXd win_zz;
  Eigen::MatrixXd win_yy;
  Eigen::VectorXd nowin_yy;

  SufficientStats(int d, int h);
  void add(const EStepRow& row);
};

// Winner-take-all update; (d, h) pairs that never won keep their weight.
NLSSParams mstep(const SufficientStats& stats, const NLSSParams& previous,
                 std::vector<std::string>* warnings = nullptr);

struct MonteCarloValue {
  double value = 0.0;
  double std_error = 0.0;
};

// Importance estimate of log sum_{s in K_n} p(y, s) with z drawn from the
// slab prior (same draw shared by all states).
MonteCarloValue truncated_log_marginal(const NLSSParams& p,
                                       const Eigen::Ref<const Eigen::VectorXd>& y,
                                       const StateSetRow& states, int draws,
                                       Rng& rng);

}  // namespace nlss

namespace gmm {

double log_component(const GMMParams& p,
                     const Eigen::Ref<const Eigen::VectorXd>& y, int c);

struct EStepRow {
  Eigen::VectorXd resp;  // C, zero outside the selected clusters
  double log_normalizer = 0.0;
  bool underflow = false;
};

EStepRow estep(const GMMParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
               const SelectedIndices& clusters);

// Weighted updates from N x C responsibilities. Clusters with total
// responsibility below 1e-8 are re-seeded at a random data point.
GMMParams mstep(const Eigen::MatrixXd& resp, const Eigen::MatrixXd& Y,
                Rng& rng, std::vector<std::string>* warnings = nullptr);

double free_energy(const GMMParams& p, const Eigen::MatrixXd& Y,
                   const Eigen::MatrixXd& resp);

}  // namespace gmm

}  // namespace gpselect
