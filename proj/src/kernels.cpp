#include "gpselect/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gpselect {

namespace {

// Squared distances between rows of A and rows of B.
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& A,
                                  const Eigen::MatrixXd& B,
                                  const Eigen::MatrixXd& dots) {
  const Eigen::VectorXd an = A.rowwise().squaredNorm();
  const Eigen::VectorXd bn = B.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * dots).colwise() + an;
  d2.rowwise() += bn.transpose();
  return d2.cwiseMax(0.0);
}

}  // namespace

void KernelHyperparams::validate() const {
  const std::array<double, kNumHyperparams> v = {
      rbf_variance, rbf_lengthscale, linear_variance, bias_variance,
      noise_variance};
  for (int i = 0; i < kNumHyperparams; ++i) {
    if (!std::isfinite(v[i]) || v[i] < 0.0) {
      throw std::invalid_argument("kernel hyperparameter " +
                                  hyperparam_names()[i] +
                                  " must be finite and nonnegative");
    }
  }
  if (rbf_lengthscale <= 0.0) {
    throw std::invalid_argument("rbf_lengthscale must be positive");
  }
}

KernelHyperparams KernelHyperparams::floored() const {
  KernelHyperparams out = *this;
  out.noise_variance = std::max(noise_variance, kNoiseFloor);
  return out;
}

const std::array<std::string, kNumHyperparams>& hyperparam_names() {
  static const std::array<std::string, kNumHyperparams> names = {
      "rbf_variance", "rbf_lengthscale", "linear_variance", "bias_variance",
      "noise_variance"};
  return names;
}

std::map<std::string, double> to_record(const KernelHyperparams& hp) {
  return {{"rbf_variance", hp.rbf_variance},
          {"rbf_lengthscale", hp.rbf_lengthscale},
          {"linear_variance", hp.linear_variance},
          {"bias_variance", hp.bias_variance},
          {"noise_variance", hp.noise_variance}};
}

KernelHyperparams from_record(const std::map<std::string, double>& rec) {
  KernelHyperparams hp;
  for (const auto& [key, value] : rec) {
    if (key == "rbf_variance") {
      hp.rbf_variance = value;
    } else if (key == "rbf_lengthscale") {
      hp.rbf_lengthscale = value;
    } else if (key == "linear_variance") {
      hp.linear_variance = value;
    } else if (key == "bias_variance") {
      hp.bias_variance = value;
    } else if (key == "noise_variance") {
      hp.noise_variance = value;
    } else {
      throw std::invalid_argument("unknown kernel hyperparameter: " + key);
    }
  }
  hp.validate();
  return hp;
}

Eigen::VectorXd to_log_vector(const KernelHyperparams& hp) {
  Eigen::VectorXd v(kNumHyperparams);
  const double ninf = -std::numeric_limits<double>::infinity();
  v[kRbfVariance] = hp.rbf_enabled() ? std::log(hp.rbf_variance) : ninf;
  v[kRbfLengthscale] = std::log(hp.rbf_lengthscale);
  v[kLinearVariance] =
      hp.linear_enabled() ? std::log(hp.linear_variance) : ninf;
  v[kBiasVariance] = hp.bias_enabled() ? std::log(hp.bias_variance) : ninf;
  v[kNoiseVariance] = std::log(hp.floored().noise_variance);
  return v;
}

KernelHyperparams from_log_vector(const Eigen::VectorXd& logv) {
  if (logv.size() != kNumHyperparams) {
    throw std::invalid_argument("log hyperparameter vector has wrong size");
  }
  KernelHyperparams hp;
  hp.rbf_variance = std::exp(logv[kRbfVariance]);
  hp.rbf_lengthscale = std::exp(logv[kRbfLengthscale]);
  hp.linear_variance = std::exp(logv[kLinearVariance]);
  hp.bias_variance = std::exp(logv[kBiasVariance]);
  hp.noise_variance = std::exp(logv[kNoiseVariance]);
  return hp.floored();
}

std::array<bool, kNumHyperparams> active_mask(const KernelHyperparams& hp) {
  return {hp.rbf_enabled(), hp.rbf_enabled(), hp.linear_enabled(),
          hp.bias_enabled(), true};
}

KernelPreset parse_kernel_preset(const std::string& name) {
  if (name == "linear") return KernelPreset::kLinear;
  if (name == "rbf") return KernelPreset::kRbf;
  if (name == "composition") return KernelPreset::kComposition;
  throw std::invalid_argument("unknown kernel preset: " + name);
}

std::string to_string(KernelPreset preset) {
  switch (preset) {
    case KernelPreset::kLinear:
      return "linear";
    case KernelPreset::kRbf:
      return "rbf";
    case KernelPreset::kComposition:
      return "composition";
  }
  return "composition";
}

KernelHyperparams default_hyperparams(KernelPreset preset,
                                      const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows();
  double mean_sq = n > 0 ? X.rowwise().squaredNorm().mean() : 1.0;
  if (!(mean_sq > 0.0)) mean_sq = 1.0;

  // Median pairwise distance over a deterministic subsample.
  const Eigen::Index m = std::min<Eigen::Index>(n, 200);
  const Eigen::Index stride = m > 0 ? std::max<Eigen::Index>(1, n / m) : 1;
  std::vector<double> dists;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i + 1; j < m; ++j) {
      dists.push_back((X.row(i * stride) - X.row(j * stride)).norm());
    }
  }
  double median = 1.0;
  if (!dists.empty()) {
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2,
                     dists.end());
    median = dists[dists.size() / 2];
    if (!(median > 0.0)) median = 1.0;
  }

  KernelHyperparams hp;
  hp.rbf_variance = 0.0;
  hp.rbf_lengthscale = median;
  hp.linear_variance = 0.0;
  hp.bias_variance = 0.0;
  hp.noise_variance = 0.1;
  switch (preset) {
    case KernelPreset::kLinear:
      hp.linear_variance = 0.1 / mean_sq;
      break;
    case KernelPreset::kRbf:
      hp.rbf_variance = 0.1;
      break;
    case KernelPreset::kComposition:
      hp.rbf_variance = 0.1;
      hp.linear_variance = 0.1 / mean_sq;
      hp.bias_variance = 0.1;
      break;
  }
  return hp;
}

double eval_kernel(const KernelHyperparams& hp,
                   const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& xp) {
  if (x.size() != xp.size()) {
    throw std::invalid_argument("eval_kernel: dimension mismatch");
  }
  double k = hp.bias_variance;
  if (hp.rbf_enabled()) {
    const double d2 = (x - xp).squaredNorm();
    k += hp.rbf_variance *
         std::exp(-d2 / (2.0 * hp.rbf_lengthscale * hp.rbf_lengthscale));
  }
  if (hp.linear_enabled()) k += hp.linear_variance * x.dot(xp);
  return k;
}

void check_finite(const Eigen::MatrixXd& X, const char* what) {
  if (!X.allFinite()) {
    throw std::invalid_argument(std::string(what) +
                                ": input contains non-finite entries");
  }
}

Eigen::MatrixXd cross_kernel(const KernelHyperparams& hp,
                             const Eigen::MatrixXd& A,
                             const Eigen::MatrixXd& B) {
  if (A.cols() != B.cols()) {
    throw std::invalid_argument("cross_kernel: dimension mismatch");
  }
  const Eigen::MatrixXd dots = A * B.transpose();
  Eigen::MatrixXd K =
      Eigen::MatrixXd::Constant(A.rows(), B.rows(), hp.bias_variance);
  if (hp.rbf_enabled()) {
    const double s = -0.5 / (hp.rbf_lengthscale * hp.rbf_lengthscale);
    K += hp.rbf_variance * (s * squared_distances(A, B, dots)).array().exp()
                               .matrix();
  }
  if (hp.linear_enabled()) K += hp.linear_variance * dots;
  return K;
}

GramMatrix gram_matrix(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                       bool with_noise) {
  if (X.rows() < 1) throw std::invalid_argument("gram_matrix: N must be >= 1");
  check_finite(X, "gram_matrix");
  GramMatrix g;
  g.values = cross_kernel(hp, X, X);
  // Exact symmetry regardless of rounding in the distance expansion.
  g.values = (0.5 * (g.values + g.values.transpose())).eval();
  if (hp.rbf_enabled()) {
    g.values.diagonal().array() =
        hp.rbf_variance + hp.bias_variance +
        hp.linear_variance * X.rowwise().squaredNorm().array();
  }
  if (with_noise) {
    g.values.diagonal().array() += hp.floored().noise_variance;
  }
  g.includes_noise = with_noise;
  return g;
}

std::array<Eigen::MatrixXd, kNumHyperparams> kernel_gradients(
    const KernelHyperparams& hp, const Eigen::MatrixXd& X) {
  if (X.rows() < 1) {
    throw std::invalid_argument("kernel_gradients: N must be >= 1");
  }
  check_finite(X, "kernel_gradients");
  const Eigen::Index n = X.rows();
  std::array<Eigen::MatrixXd, kNumHyperparams> grads;
  for (auto& g : grads) g = Eigen::MatrixXd::Zero(n, n);

  const Eigen::MatrixXd dots = X * X.transpose();
  if (hp.rbf_enabled()) {
    Eigen::MatrixXd d2 = squared_distances(X, X, dots);
    d2 = (0.5 * (d2 + d2.transpose())).eval();
    d2.diagonal().setZero();
    const double l2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
    const Eigen::MatrixXd rbf =
        hp.rbf_variance * (-0.5 / l2 * d2).array().exp().matrix();
    grads[kRbfVariance] = rbf;
    grads[kRbfLengthscale] = rbf.cwiseProduct(d2) / l2;
  }
  if (hp.linear_enabled()) {
    grads[kLinearVariance] = hp.linear_variance * dots;
    grads[kLinearVariance] =
        (0.5 * (grads[kLinearVariance] + grads[kLinearVariance].transpose()))
            .eval();
  }
  if (hp.bias_enabled()) grads[kBiasVariance].setConstant(hp.bias_variance);
  grads[kNoiseVariance].diagonal().setConstant(hp.floored().noise_variance);
  return grads;
}

LowRankFactor incomplete_cholesky(const KernelHyperparams& hp,
                                  const Eigen::MatrixXd& X, int max_rank,
                                  double tol) {
  const int n = static_cast<int>(X.rows());
  if (max_rank < 1 || max_rank > n) {
    throw std::invalid_argument("incomplete_cholesky: need 1 <= max_rank <= N");
  }
  if (tol < 0.0) throw std::invalid_argument("incomplete_cholesky: tol < 0");
  check_finite(X, "incomplete_cholesky");

  Eigen::VectorXd diag(n);
  for (int i = 0; i < n; ++i) {
    diag[i] = eval_kernel(hp, X.row(i).transpose(), X.row(i).transpose());
  }

  LowRankFactor out;
  Eigen::MatrixXd G(n, max_rank);
  int q = 0;
  double trace = diag.sum();
  while (q < max_rank && trace > tol) {
    int pivot = 0;
    for (int i = 1; i < n; ++i) {
      if (diag[i] > diag[pivot]) pivot = i;
    }
    const double dpiv = diag[pivot];
    // Numerically exhausted: remaining residual is rounding noise.
    if (dpiv <= 1e-12 * std::max(1.0, trace)) break;

    const Eigen::MatrixXd kcol =
        cross_kernel(hp, X, X.row(pivot));  // N x 1
    Eigen::VectorXd col = kcol.col(0);
    if (q > 0) col.noalias() -= G.leftCols(q) * G.row(pivot).head(q).transpose();
    col /= std::sqrt(dpiv);
    G.col(q) = col;
    for (int i = 0; i < n; ++i) {
      diag[i] = std::max(diag[i] - col[i] * col[i], 0.0);
    }
    diag[pivot] = 0.0;
    out.pivots.push_back(pivot);
    ++q;
    trace = diag.sum();
  }
  out.factor = G.leftCols(q);
  out.residual_trace = std::max(trace, 0.0);
  return out;
}

}  // namespace gpselect
