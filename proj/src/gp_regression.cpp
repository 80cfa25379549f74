#include "gpselect/gp_regression.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "gpselect/errors.hpp"

namespace gpselect {

namespace {

std::atomic<std::uint64_t> g_factorizations{0};

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kMaxJitter = 1e-4;
constexpr double kLogClamp = 25.0;

std::string describe(const KernelHyperparams& hp) {
  std::ostringstream os;
  os.precision(6);
  for (const auto& [k, v] : to_record(hp)) os << ' ' << k << '=' << v;
  return os.str();
}

// Cholesky with jitter escalation 0, 1e-8, ..., 1e-4. Returns the jitter
// used or a negative value on failure.
double factorize(Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::MatrixXd& K) {
  ++g_factorizations;
  double jitter = 0.0;
  Eigen::MatrixXd work;
  while (true) {
    if (jitter == 0.0) {
      llt.compute(K);
    } else {
      work = K;
      work.diagonal().array() += jitter;
      llt.compute(work);
    }
    if (llt.info() == Eigen::Success &&
        llt.matrixLLT().diagonal().minCoeff() > 0.0) {
      return jitter;
    }
    jitter = jitter == 0.0 ? 1e-8 : jitter * 10.0;
    if (jitter > kMaxJitter * 1.0000001) return -1.0;
  }
}

void check_inputs(const Eigen::MatrixXd& X, const Eigen::MatrixXd& T) {
  if (X.rows() != T.rows()) {
    throw std::invalid_argument("GP fit: X and T row counts differ");
  }
  if (X.rows() < 1) throw std::invalid_argument("GP fit: empty data");
  check_finite(X, "GP fit");
  check_finite(T, "GP fit targets");
}

// Linear and bias features: K_noiseless = G G^T exactly when RBF is off.
Eigen::MatrixXd linear_features(const KernelHyperparams& hp,
                                const Eigen::MatrixXd& X) {
  const Eigen::Index cols =
      (hp.linear_enabled() ? X.cols() : 0) + (hp.bias_enabled() ? 1 : 0);
  Eigen::MatrixXd G(X.rows(), cols);
  Eigen::Index c = 0;
  if (hp.linear_enabled()) {
    G.leftCols(X.cols()) = std::sqrt(hp.linear_variance) * X;
    c = X.cols();
  }
  if (hp.bias_enabled()) G.col(c).setConstant(std::sqrt(hp.bias_variance));
  return G;
}

Eigen::MatrixXd lower_inverse(const Eigen::LLT<Eigen::MatrixXd>& llt,
                              Eigen::Index n) {
  Eigen::MatrixXd Linv = Eigen::MatrixXd::Identity(n, n);
  llt.matrixL().solveInPlace(Linv);
  return Linv;
}

}  // namespace

std::uint64_t factorization_count() { return g_factorizations.load(); }

void GPFit::finish_dense() {
  const Eigen::Index n = targets_.rows();
  alpha_ = llt_.solve(targets_);
  log_det_ = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  inverse_diag_ = lower_inverse(llt_, n).colwise().squaredNorm().transpose();
}

void GPFit::finish_lowrank() {
  const Eigen::Index n = targets_.rows();
  const Eigen::Index q = features_.cols();
  lowrank_mode_ = true;
  Eigen::MatrixXd S = features_.transpose() * features_;
  S.diagonal().array() += noise_;
  ++g_factorizations;
  llt_.compute(S);
  if (llt_.info() != Eigen::Success) {
    throw NumericalError("GP low-rank factorization failed for" +
                         describe(hp_));
  }
  log_det_ = static_cast<double>(n - q) * std::log(noise_) +
             2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  alpha_ = solve(targets_);
  Eigen::MatrixXd V = features_.transpose();
  llt_.matrixL().solveInPlace(V);
  inverse_diag_ =
      ((1.0 - V.colwise().squaredNorm().array()) / noise_).matrix().transpose();
  // Cancellation guard: the exact diagonal is at least 1/(noise + K_nn).
  const Eigen::VectorXd kdiag = features_.rowwise().squaredNorm();
  for (Eigen::Index i = 0; i < n; ++i) {
    inverse_diag_[i] = std::max(inverse_diag_[i], 1.0 / (noise_ + kdiag[i]));
  }
}

Eigen::MatrixXd GPFit::solve(const Eigen::MatrixXd& B) const {
  if (!lowrank_mode_) return llt_.solve(B);
  if (features_.cols() == 0) return B / noise_;
  const Eigen::MatrixXd inner = llt_.solve(features_.transpose() * B);
  return (B - features_ * inner) / noise_;
}

Eigen::MatrixXd GPFit::inverse() const {
  const Eigen::Index n = targets_.rows();
  if (!lowrank_mode_) {
    const Eigen::MatrixXd Linv = lower_inverse(llt_, n);
    Eigen::MatrixXd Kinv = Eigen::MatrixXd::Zero(n, n);
    Kinv.selfadjointView<Eigen::Lower>().rankUpdate(Linv.transpose());
    Kinv.triangularView<Eigen::StrictlyUpper>() = Kinv.transpose();
    return Kinv;
  }
  return solve(Eigen::MatrixXd::Identity(n, n));
}

GPFit fit_features(const KernelHyperparams& hp, Eigen::MatrixXd G,
                   const Eigen::MatrixXd& T) {
  hp.validate();
  if (G.rows() != T.rows()) {
    throw std::invalid_argument("fit_features: feature and target rows differ");
  }
  GPFit out;
  out.hp_ = hp;
  out.targets_ = T;
  out.noise_ = hp.floored().noise_variance;
  out.features_ = std::move(G);
  out.finish_lowrank();
  return out;
}

GPFit fit(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
          const Eigen::MatrixXd& T) {
  hp.validate();
  check_inputs(X, T);
  if (!hp.rbf_enabled()) {
    Eigen::MatrixXd G = linear_features(hp, X);
    if (G.cols() < X.rows()) return fit_features(hp, std::move(G), T);
  }
  GPFit out;
  out.hp_ = hp;
  out.targets_ = T;
  const GramMatrix K = gram_matrix(hp, X, true);
  const double jitter = factorize(out.llt_, K.values);
  if (jitter < 0.0) {
    throw NumericalError("GP Cholesky failed after jitter escalation for" +
                         describe(hp));
  }
  out.noise_ = hp.floored().noise_variance + jitter;
  out.finish_dense();
  return out;
}

GPFit fit_lowrank(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& T, const LowRankFactor& factor) {
  hp.validate();
  check_inputs(X, T);
  if (factor.factor.rows() != X.rows()) {
    throw std::invalid_argument("fit_lowrank: factor built for other data");
  }
  GPFit out = fit_features(hp, factor.factor, T);
  out.lowrank_ = factor;
  return out;
}

Eigen::MatrixXd loo_means(const GPFit& fit) {
  if (fit.size() < 2) {
    throw std::invalid_argument("loo_means: need at least two data points");
  }
  return fit.targets().array() -
         fit.alpha().array().colwise() / fit.inverse_diag().array();
}

double log_marginal_likelihood(const GPFit& fit) {
  const double n = static_cast<double>(fit.size());
  const double h = static_cast<double>(fit.outputs());
  return -0.5 * fit.targets().cwiseProduct(fit.alpha()).sum() -
         0.5 * h * fit.log_det() - 0.5 * h * n * kLog2Pi;
}

namespace {

Eigen::VectorXd feature_gradient(const GPFit& fit, const Eigen::MatrixXd& X) {
  const KernelHyperparams& hp = fit.hp();
  const double h = static_cast<double>(fit.outputs());
  const Eigen::MatrixXd& a = fit.alpha();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(kNumHyperparams);
  if (hp.linear_enabled()) {
    const double lv = hp.linear_variance;
    const Eigen::MatrixXd KiX = fit.solve(X);
    g[kLinearVariance] = 0.5 * lv * (X.transpose() * a).squaredNorm() -
                         0.5 * h * lv * X.cwiseProduct(KiX).sum();
  }
  if (hp.bias_enabled()) {
    const double b = hp.bias_variance;
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(X.rows());
    const Eigen::MatrixXd Ki1 = fit.solve(ones);
    g[kBiasVariance] = 0.5 * b * a.colwise().sum().squaredNorm() -
                       0.5 * h * b * Ki1.sum();
  }
  const double s2 = fit.effective_noise();
  g[kNoiseVariance] = 0.5 * s2 * a.squaredNorm() -
                      0.5 * h * s2 * fit.inverse_diag().sum();
  return g;
}

// Gradient given dense K^{-1}, squared distances and inner products.
Eigen::VectorXd dense_gradient(const KernelHyperparams& hp, double noise,
                               const Eigen::MatrixXd& alpha,
                               const Eigen::MatrixXd& Kinv,
                               const Eigen::MatrixXd& d2,
                               const Eigen::MatrixXd& dots) {
  const double h = static_cast<double>(alpha.cols());
  Eigen::MatrixXd Wm = alpha * alpha.transpose();
  Wm -= h * Kinv;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(kNumHyperparams);
  if (hp.rbf_enabled()) {
    const double l2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
    const Eigen::ArrayXXd R =
        hp.rbf_variance * (-0.5 / l2 * d2.array()).exp();
    const Eigen::ArrayXXd WR = Wm.array() * R;
    g[kRbfVariance] = 0.5 * WR.sum();
    g[kRbfLengthscale] = 0.5 * (WR * d2.array()).sum() / l2;
  }
  if (hp.linear_enabled()) {
    g[kLinearVariance] =
        0.5 * hp.linear_variance * (Wm.array() * dots.array()).sum();
  }
  if (hp.bias_enabled()) g[kBiasVariance] = 0.5 * hp.bias_variance * Wm.sum();
  g[kNoiseVariance] = 0.5 * noise * Wm.trace();
  return g;
}

Eigen::MatrixXd pairwise_sq(const Eigen::MatrixXd& X,
                            const Eigen::MatrixXd& dots) {
  const Eigen::VectorXd sq = dots.diagonal();
  Eigen::MatrixXd d2 = (-2.0 * dots).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);
  d2 = (0.5 * (d2 + d2.transpose())).eval();
  d2.diagonal().setZero();
  (void)X;
  return d2;
}

}  // namespace

Eigen::VectorXd evidence_gradient(const GPFit& fit, const Eigen::MatrixXd& X) {
  if (X.rows() != fit.size()) {
    throw std::invalid_argument("evidence_gradient: X does not match fit");
  }
  if (fit.lowrank()) {
    return nystrom_evidence(fit.hp(), X, fit.targets(), fit.lowrank()->pivots,
                            true)
        .gradient;
  }
  if (fit.is_lowrank()) return feature_gradient(fit, X);
  const Eigen::MatrixXd dots = X * X.transpose();
  return dense_gradient(fit.hp(), fit.effective_noise(), fit.alpha(),
                        fit.inverse(), pairwise_sq(X, dots), dots);
}

EvidenceWithGradient nystrom_evidence(const KernelHyperparams& hp,
                                      const Eigen::MatrixXd& X,
                                      const Eigen::MatrixXd& T,
                                      const std::vector<int>& pivots,
                                      bool with_gradient) {
  hp.validate();
  check_inputs(X, T);
  const Eigen::Index n = X.rows();
  const Eigen::Index q = static_cast<Eigen::Index>(pivots.size());
  Eigen::MatrixXd XP(q, X.cols());
  for (Eigen::Index j = 0; j < q; ++j) XP.row(j) = X.row(pivots[j]);

  const Eigen::MatrixXd B = cross_kernel(hp, X, XP);  // N x Q
  Eigen::MatrixXd C = cross_kernel(hp, XP, XP);
  C = (0.5 * (C + C.transpose())).eval();
  const double jitter =
      q > 0 ? 1e-10 * std::max(1e-300, C.diagonal().mean()) : 0.0;
  C.diagonal().array() += jitter;
  Eigen::LLT<Eigen::MatrixXd> lc(C);
  ++g_factorizations;
  if (q > 0 && lc.info() != Eigen::Success) {
    throw NumericalError("Nystrom pivot block is not positive definite for" +
                         describe(hp));
  }
  // G = B L_C^{-T}, so G G^T = B C^{-1} B^T.
  Eigen::MatrixXd G = B.transpose();
  if (q > 0) lc.matrixL().solveInPlace(G);
  G.transposeInPlace();

  const GPFit f = fit_features(hp, G, T);
  EvidenceWithGradient out;
  out.value = log_marginal_likelihood(f);
  if (!with_gradient) return out;

  const double h = static_cast<double>(T.cols());
  out.gradient = Eigen::VectorXd::Zero(kNumHyperparams);
  const Eigen::MatrixXd& alpha = f.alpha();
  if (q > 0) {
    const Eigen::MatrixXd Abar = lc.solve(B.transpose());  // Q x N
    const Eigen::MatrixXd U = Abar * alpha;                // Q x H
    const Eigen::MatrixXd E = f.solve(Abar.transpose());   // N x Q = (Abar K^-1)^T
    const Eigen::MatrixXd F = Abar * E;                    // Q x Q

    const Eigen::MatrixXd dotsNP = X * XP.transpose();
    Eigen::MatrixXd d2NP;
    Eigen::MatrixXd R;
    if (hp.rbf_enabled()) {
      const Eigen::VectorXd xn = X.rowwise().squaredNorm();
      const Eigen::VectorXd pn = XP.rowwise().squaredNorm();
      d2NP = (-2.0 * dotsNP).colwise() + xn;
      d2NP.rowwise() += pn.transpose();
      d2NP = d2NP.cwiseMax(0.0);
      for (Eigen::Index j = 0; j < q; ++j) d2NP(pivots[j], j) = 0.0;
      const double l2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
      R = hp.rbf_variance * (-0.5 / l2 * d2NP).array().exp().matrix();
    }
    auto accumulate = [&](int index, const Eigen::MatrixXd& dB) {
      Eigen::MatrixXd dC(q, q);
      for (Eigen::Index j = 0; j < q; ++j) dC.row(j) = dB.row(pivots[j]);
      dC = (0.5 * (dC + dC.transpose())).eval();
      const double data = 2.0 * (dB.transpose() * alpha).cwiseProduct(U).sum() -
                          (dC * U).cwiseProduct(U).sum();
      const double trace =
          2.0 * E.cwiseProduct(dB).sum() - F.cwiseProduct(dC).sum();
      out.gradient[index] = 0.5 * data - 0.5 * h * trace;
    };
    if (hp.rbf_enabled()) {
      accumulate(kRbfVariance, R);
      const double l2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
      accumulate(kRbfLengthscale, R.cwiseProduct(d2NP) / l2);
    }
    if (hp.linear_enabled()) accumulate(kLinearVariance, hp.linear_variance * dotsNP);
    if (hp.bias_enabled()) {
      accumulate(kBiasVariance,
                 Eigen::MatrixXd::Constant(n, q, hp.bias_variance));
    }
  }
  const double s2 = f.effective_noise();
  out.gradient[kNoiseVariance] =
      0.5 * s2 * alpha.squaredNorm() - 0.5 * h * s2 * f.inverse_diag().sum();
  return out;
}

GPDiagnostics diagnostics(const GPFit& fit, const Eigen::MatrixXd& loo) {
  GPDiagnostics d;
  d.evidence = log_marginal_likelihood(fit);
  d.loo_mean_abs_error = (loo - fit.targets()).cwiseAbs().mean();
  d.hp = fit.hp();
  return d;
}

namespace {

// Evidence evaluation strategy used by the optimizer.
class EvidenceModel {
 public:
  enum class Kind { kDense, kFeatures, kNystrom };

  EvidenceModel(const Eigen::MatrixXd& X, const Eigen::MatrixXd& T, Kind kind,
                std::vector<int> pivots)
      : X_(X), T_(T), kind_(kind), pivots_(std::move(pivots)) {
    if (kind_ == Kind::kDense) {
      dots_ = X_ * X_.transpose();
      d2_ = pairwise_sq(X_, dots_);
    }
  }

  // Evidence at hp; -inf when the factorization fails.
  double value(const KernelHyperparams& hp) {
    try {
      switch (kind_) {
        case Kind::kFeatures: {
          last_fit_ = fit_features(hp, linear_features(hp, X_), T_);
          return log_marginal_likelihood(*last_fit_);
        }
        case Kind::kNystrom:
          return nystrom_evidence(hp, X_, T_, pivots_, false).value;
        case Kind::kDense:
          return dense_value(hp);
      }
    } catch (const NumericalError&) {
    }
    return -std::numeric_limits<double>::infinity();
  }

  // Gradient at the hp of the last successful value() call.
  Eigen::VectorXd gradient(const KernelHyperparams& hp) {
    switch (kind_) {
      case Kind::kFeatures:
        return feature_gradient(*last_fit_, X_);
      case Kind::kNystrom:
        return nystrom_evidence(hp, X_, T_, pivots_, true).gradient;
      case Kind::kDense: {
        const Eigen::Index n = X_.rows();
        const Eigen::MatrixXd Linv = lower_inverse(llt_, n);
        Eigen::MatrixXd Kinv = Eigen::MatrixXd::Zero(n, n);
        Kinv.selfadjointView<Eigen::Lower>().rankUpdate(Linv.transpose());
        Kinv.triangularView<Eigen::StrictlyUpper>() = Kinv.transpose();
        return dense_gradient(hp, noise_, alpha_, Kinv, d2_, dots_);
      }
    }
    return Eigen::VectorXd::Zero(kNumHyperparams);
  }

 private:
  double dense_value(const KernelHyperparams& hp) {
    const KernelHyperparams f = hp.floored();
    const Eigen::Index n = X_.rows();
    Eigen::MatrixXd K = Eigen::MatrixXd::Constant(n, n, f.bias_variance);
    if (f.linear_enabled()) K += f.linear_variance * dots_;
    if (f.rbf_enabled()) {
      const double l2 = f.rbf_lengthscale * f.rbf_lengthscale;
      K += f.rbf_variance * (-0.5 / l2 * d2_.array()).exp().matrix();
    }
    K.diagonal().array() += f.noise_variance;
    ++g_factorizations;
    llt_.compute(K);
    if (llt_.info() != Eigen::Success ||
        !(llt_.matrixLLT().diagonal().minCoeff() > 0.0)) {
      throw NumericalError("dense evidence factorization failed");
    }
    noise_ = f.noise_variance;
    alpha_ = llt_.solve(T_);
    const double logdet = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
    const double h = static_cast<double>(T_.cols());
    return -0.5 * T_.cwiseProduct(alpha_).sum() - 0.5 * h * logdet -
           0.5 * h * static_cast<double>(n) * kLog2Pi;
  }

  const Eigen::MatrixXd& X_;
  const Eigen::MatrixXd& T_;
  Kind kind_;
  std::vector<int> pivots_;
  Eigen::MatrixXd dots_;
  Eigen::MatrixXd d2_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::MatrixXd alpha_;
  double noise_ = 0.0;
  std::optional<GPFit> last_fit_;
};

KernelPreset infer_preset(const KernelHyperparams& hp) {
  if (hp.rbf_enabled() && (hp.linear_enabled() || hp.bias_enabled())) {
    return KernelPreset::kComposition;
  }
  if (hp.rbf_enabled()) return KernelPreset::kRbf;
  return KernelPreset::kLinear;
}

KernelHyperparams apply_step(const Eigen::VectorXd& logv,
                             const std::array<bool, kNumHyperparams>& mask,
                             const KernelHyperparams& base) {
  Eigen::VectorXd v = logv;
  for (int i = 0; i < kNumHyperparams; ++i) {
    v[i] = std::clamp(v[i], -kLogClamp, kLogClamp);
  }
  v[kNoiseVariance] =
      std::max(v[kNoiseVariance], std::log(KernelHyperparams::kNoiseFloor));
  KernelHyperparams hp = from_log_vector(v);
  // Disabled components stay off.
  if (!mask[kRbfVariance]) {
    hp.rbf_variance = 0.0;
    hp.rbf_lengthscale = base.rbf_lengthscale;
  }
  if (!mask[kLinearVariance]) hp.linear_variance = 0.0;
  if (!mask[kBiasVariance]) hp.bias_variance = 0.0;
  return hp;
}

}  // namespace

HyperoptResult optimize_hyperparams(const KernelHyperparams& hp0,
                                    const Eigen::MatrixXd& X,
                                    const Eigen::MatrixXd& T,
                                    const HyperoptOptions& options) {
  if (options.max_steps < 1) {
    throw std::invalid_argument("optimize_hyperparams: max_steps must be >= 1");
  }
  hp0.validate();
  check_inputs(X, T);

  HyperoptResult result;
  KernelHyperparams start = hp0.floored();

  EvidenceModel::Kind kind = EvidenceModel::Kind::kDense;
  std::vector<int> pivots;
  if (!start.rbf_enabled()) {
    kind = EvidenceModel::Kind::kFeatures;
  } else if (options.lowrank_rank) {
    kind = EvidenceModel::Kind::kNystrom;
    const int rank = std::clamp(*options.lowrank_rank, 1,
                                static_cast<int>(X.rows()));
    pivots = incomplete_cholesky(start, X, rank, 0.0).pivots;
  }
  EvidenceModel model(X, T, kind, pivots);

  double f = model.value(start);
  if (!std::isfinite(f)) {
    start = default_hyperparams(infer_preset(start), X);
    result.reset_to_default = true;
    f = model.value(start);
    if (!std::isfinite(f)) {
      throw NumericalError("GP evidence not finite at default hyperparameters");
    }
  }
  result.initial_evidence = f;
  result.accepted_evidence.push_back(f);

  const auto mask = active_mask(start);
  Eigen::VectorXd theta = to_log_vector(start);
  for (int i = 0; i < kNumHyperparams; ++i) {
    if (!mask[i]) theta[i] = 0.0;
  }
  KernelHyperparams current = start;
  Eigen::VectorXd grad = model.gradient(current);
  double step = options.initial_step;

  for (int s = 0; s < options.max_steps; ++s) {
    for (int i = 0; i < kNumHyperparams; ++i) {
      if (!mask[i] || !std::isfinite(grad[i])) grad[i] = 0.0;
    }
    const double gmax = grad.cwiseAbs().maxCoeff();
    if (!(gmax > 0.0)) break;
    const Eigen::VectorXd dir = grad / gmax;

    bool accepted = false;
    KernelHyperparams trial;
    double ftrial = 0.0;
    Eigen::VectorXd theta_trial;
    for (int k = 0; k <= options.max_halvings; ++k) {
      theta_trial = theta + step * dir;
      trial = apply_step(theta_trial, mask, start);
      ftrial = model.value(trial);
      if (std::isfinite(ftrial) && ftrial >= f) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // Restore the factorization state of the current iterate.
      model.value(current);
      break;
    }
    theta = to_log_vector(trial);
    for (int i = 0; i < kNumHyperparams; ++i) {
      if (!mask[i]) theta[i] = 0.0;
    }
    current = trial;
    f = ftrial;
    result.accepted_evidence.push_back(f);
    ++result.gradient_steps;
    if (s + 1 < options.max_steps) grad = model.gradient(current);
    step = std::min(step * 2.0, options.max_step);
  }
  result.hp = current;
  result.evidence = f;
  return result;
}

}  // namespace gpselect
