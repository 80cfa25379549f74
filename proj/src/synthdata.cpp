#include "gpselect/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gpselect {

Eigen::MatrixXd bars_dictionary(int grid_side) {
  if (grid_side < 1) throw std::invalid_argument("grid_side must be >= 1");
  const int d = grid_side * grid_side;
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(d, 2 * grid_side);
  for (int b = 0; b < grid_side; ++b) {
    for (int k = 0; k < grid_side; ++k) {
      W(b * grid_side + k, b) = 1.0;              // horizontal bar in row b
      W(k * grid_side + b, grid_side + b) = 1.0;  // vertical bar in column b
    }
  }
  return W;
}

ModelParams BarsGroundTruth::params(ModelKind kind) const {
  switch (kind) {
    case ModelKind::kBsc:
      return BSCParams{W_true, sigma2_true, pi_true};
    case ModelKind::kSs:
      return SSParams{W_true, sigma2_true, pi_true, mu_true, psi_true};
    case ModelKind::kNlss:
      return NLSSParams{W_true, sigma2_true, pi_true, mu_true, psi_true};
    case ModelKind::kGmm:
      break;
  }
  throw std::invalid_argument("bars ground truth has no mixture form");
}

BarsDataset gen_bars(ModelKind kind, int N, int grid_side, double pi,
                     double sigma2, double slab_mu, double slab_psi, Rng& rng,
                     double bar_amplitude) {
  if (kind == ModelKind::kGmm) {
    throw std::invalid_argument("gen_bars: model kind must be bsc, ss or nlss");
  }
  const int h = 2 * grid_side;
  if (N < h) throw std::invalid_argument("gen_bars: need N >= H");
  if (!(pi > 0.0 && pi < 1.0)) throw std::invalid_argument("gen_bars: pi in (0,1)");
  if (!(sigma2 >= 0.0)) throw std::invalid_argument("gen_bars: sigma2 >= 0");
  if (kind != ModelKind::kBsc && !(slab_psi > 0.0)) {
    throw std::invalid_argument("gen_bars: slab_psi must be positive");
  }
  BarsDataset ds;
  ds.kind = kind;
  BarsGroundTruth& gt = ds.truth;
  if (!(bar_amplitude > 0.0)) {
    throw std::invalid_argument("gen_bars: bar_amplitude must be positive");
  }
  gt.W_true = bar_amplitude * bars_dictionary(grid_side);
  const Eigen::Index d = gt.W_true.rows();
  gt.pi_true = pi;
  gt.sigma2_true = sigma2;
  if (kind != ModelKind::kBsc) {
    gt.mu_true = Eigen::VectorXd::Constant(h, slab_mu);
    gt.psi_true = Eigen::VectorXd::Constant(h, slab_psi);
  }
  gt.states = Eigen::MatrixXd::Zero(N, h);
  gt.slabs = Eigen::MatrixXd::Zero(N, h);
  ds.Y.resize(N, d);

  std::bernoulli_distribution bern(pi);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise_sd = std::sqrt(sigma2);
  const double slab_sd = std::sqrt(std::max(slab_psi, 0.0));
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < h; ++k) gt.states(n, k) = bern(rng) ? 1.0 : 0.0;
    if (kind != ModelKind::kBsc) {
      for (int k = 0; k < h; ++k) {
        const double z = slab_mu + slab_sd * normal(rng);
        gt.slabs(n, k) = gt.states(n, k) * z;
      }
    }
    Eigen::VectorXd mean;
    switch (kind) {
      case ModelKind::kBsc:
        mean = gt.W_true * gt.states.row(n).transpose();
        break;
      case ModelKind::kSs:
        mean = gt.W_true * gt.slabs.row(n).transpose();
        break;
      default: {
        mean = [&] {
          Eigen::VectorXd m(d);
          const bool any = gt.states.row(n).sum() > 0.0;
          const bool all = gt.states.row(n).sum() == h;
          for (Eigen::Index i = 0; i < d; ++i) {
            double v = all ? -std::numeric_limits<double>::infinity() : 0.0;
            for (int k = 0; k < h; ++k) {
              if (gt.states(n, k) != 0.0) {
                v = std::max(v, gt.slabs(n, k) * gt.W_true(i, k));
              }
            }
            m[i] = any ? v : 0.0;
          }
          return m;
        }();
      }
    }
    for (Eigen::Index i = 0; i < d; ++i) {
      ds.Y(n, i) = mean[i] + noise_sd * normal(rng);
    }
  }
  return ds;
}

GmmLayout parse_gmm_layout(const std::string& name) {
  if (name == "random") return GmmLayout::kRandom;
  if (name == "collinear") return GmmLayout::kCollinear;
  throw std::invalid_argument("unknown gmm layout: " + name);
}

std::string to_string(GmmLayout layout) {
  return layout == GmmLayout::kRandom ? "random" : "collinear";
}

Eigen::MatrixXd GmmDataset::states() const {
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(labels.size(), truth.means.rows());
  for (Eigen::Index n = 0; n < labels.size(); ++n) S(n, labels[n]) = 1.0;
  return S;
}

double collinearity_residual(const Eigen::MatrixXd& means) {
  if (means.rows() < 2) return 0.0;
  const Eigen::MatrixXd centered = means.rowwise() - means.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const Eigen::VectorXd sv = svd.singularValues();
  // With fewer points than dimensions the trailing values are trivially 0.
  const Eigen::Index k = std::min<Eigen::Index>(centered.rows() - 1, centered.cols());
  return k >= 2 ? sv[k - 1] : 0.0;
}

GmmDataset gen_gmm(int N, int C, GmmLayout layout, double separation, Rng& rng,
                   int dim) {
  if (C < 1) throw std::invalid_argument("gen_gmm: C must be >= 1");
  if (N < 1) throw std::invalid_argument("gen_gmm: N must be >= 1");
  if (dim < 1) throw std::invalid_argument("gen_gmm: dim must be >= 1");
  if (!(separation > 0.0)) {
    throw std::invalid_argument("gen_gmm: separation must be positive");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 2.0 * separation);
  GmmDataset ds;
  Eigen::MatrixXd& means = ds.truth.means;
  means.resize(C, dim);

  constexpr int kMaxTries = 100000;
  if (layout == GmmLayout::kRandom) {
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
      for (Eigen::Index i = 0; i < means.size(); ++i) means(i) = unif(rng);
      double closest = std::numeric_limits<double>::infinity();
      for (int a = 0; a < C; ++a) {
        for (int b = a + 1; b < C; ++b) {
          closest = std::min(closest, (means.row(a) - means.row(b)).norm());
        }
      }
      if (closest >= separation) break;
      if (attempt + 1 == kMaxTries) {
        throw std::invalid_argument(
            "gen_gmm: cannot place the means at this separation");
      }
    }
  } else {
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
      Eigen::VectorXd u(dim);
      for (int i = 0; i < dim; ++i) u[i] = normal(rng);
      u.normalize();
      Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
      if (dim >= 2) {
        for (int i = 0; i < dim; ++i) v[i] = normal(rng);
        v -= v.dot(u) * u;
        v.normalize();
      }
      for (int c = 0; c < C; ++c) {
        const double along = (c - 0.5 * (C - 1)) * separation;
        const double jitter = 0.1 * separation * normal(rng);
        means.row(c) = (along * u + jitter * v).transpose();
      }
      if (collinearity_residual(means) < 0.1 * separation) break;
    }
  }
  ds.truth.variances = Eigen::VectorXd::Ones(C);
  ds.truth.weights = Eigen::VectorXd::Constant(C, 1.0 / C);

  std::uniform_int_distribution<int> pick(0, C - 1);
  ds.labels.resize(N);
  ds.Y.resize(N, dim);
  for (int n = 0; n < N; ++n) {
    const int c = pick(rng);
    ds.labels[n] = c;
    for (int i = 0; i < dim; ++i) ds.Y(n, i) = means(c, i) + normal(rng);
  }
  return ds;
}

}  // namespace gpselect
