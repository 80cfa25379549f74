#include "doctest.h"

#include <cmath>

#include "gpselect/gp_regression.hpp"
#include "gpselect/synthdata.hpp"
#include "support.hpp"

using namespace gpselect;
using testing::kLog2Pi;
using testing::max_abs;
using testing::random_matrix;
using testing::uniform;
using testing::uniform_int;

namespace {

KernelHyperparams random_hp(Rng& rng) {
  KernelHyperparams hp;
  hp.rbf_variance = uniform(rng, 0.2, 2.0);
  hp.rbf_lengthscale = uniform(rng, 0.5, 2.0);
  hp.linear_variance = uniform(rng, 0.05, 1.0);
  hp.bias_variance = uniform(rng, 0.05, 1.0);
  hp.noise_variance = uniform(rng, 0.05, 0.5);
  return hp;
}

double k(const KernelHyperparams& hp, const Eigen::RowVectorXd& a,
         const Eigen::RowVectorXd& b) {
  const double l2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
  return hp.rbf_variance * std::exp(-(a - b).squaredNorm() / (2.0 * l2)) +
         hp.linear_variance * a.dot(b) + hp.bias_variance;
}

// Leave-one-out by refitting on the N-1 remaining points with an LU solve.
Eigen::MatrixXd refit_loo(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                          const Eigen::MatrixXd& T) {
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd out(n, T.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<Eigen::Index> rest;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) rest.push_back(j);
    }
    const auto m = static_cast<Eigen::Index>(rest.size());
    Eigen::MatrixXd K(m, m);
    Eigen::VectorXd kstar(m);
    Eigen::MatrixXd Tr(m, T.cols());
    for (Eigen::Index a = 0; a < m; ++a) {
      kstar[a] = k(hp, X.row(i), X.row(rest[a]));
      Tr.row(a) = T.row(rest[a]);
      for (Eigen::Index b = 0; b < m; ++b) {
        K(a, b) = k(hp, X.row(rest[a]), X.row(rest[b]));
      }
      K(a, a) += hp.noise_variance;
    }
    out.row(i) = (kstar.transpose() * K.fullPivLu().solve(Tr));
  }
  return out;
}

Eigen::MatrixXd dense_gram(const KernelHyperparams& hp, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd K(X.rows(), X.rows());
  for (Eigen::Index a = 0; a < X.rows(); ++a) {
    for (Eigen::Index b = 0; b < X.rows(); ++b) K(a, b) = k(hp, X.row(a), X.row(b));
    K(a, a) += hp.noise_variance;
  }
  return K;
}

double direct_evidence(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                       const Eigen::MatrixXd& T) {
  const Eigen::MatrixXd K = dense_gram(hp, X);
  double total = 0.0;
  for (Eigen::Index h = 0; h < T.cols(); ++h) {
    total += testing::mvn_logpdf(T.col(h), Eigen::VectorXd::Zero(X.rows()), K);
  }
  return total;
}

}  // namespace

TEST_SUITE("gp_regression") {

TEST_CASE("diagonal system gives alpha = T / (k(x,x) + noise)") {
  KernelHyperparams hp{1.0, 0.01, 0.0, 0.0, 1.0};
  Eigen::MatrixXd X(2, 1);
  X << 0.0, 10.0;
  Eigen::MatrixXd T(2, 1);
  T << 1.0, 0.0;
  const GPFit f = fit(hp, X, T);
  CHECK(f.alpha()(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(f.alpha()(1, 0)) < 1e-12);
}

TEST_CASE("LOO means equal explicit refits") {
  Rng rng(101);
  double worst = 0.0;
  for (int rep = 0; rep < 30; ++rep) {
    const int n = uniform_int(rng, 2, 30);
    const int h = uniform_int(rng, 1, 5);
    const KernelHyperparams hp = random_hp(rng);
    const Eigen::MatrixXd X = random_matrix(n, 3, rng);
    const Eigen::MatrixXd T = random_matrix(n, h, rng).cwiseAbs().cwiseMin(1.0);
    worst = std::max(worst, max_abs(loo_means(fit(hp, X, T)) - refit_loo(hp, X, T)));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("LOO of an RBF-free kernel through the feature path equals refits") {
  Rng rng(102);
  KernelHyperparams hp{0.0, 1.0, 0.4, 0.3, 0.2};
  const Eigen::MatrixXd X = random_matrix(25, 3, rng);
  const Eigen::MatrixXd T = random_matrix(25, 4, rng);
  const GPFit f = fit(hp, X, T);
  CHECK(f.is_lowrank());
  CHECK(max_abs(loo_means(f) - refit_loo(hp, X, T)) < 1e-8);
}

TEST_CASE("constant targets with a bias-dominated kernel") {
  Rng rng(103);
  KernelHyperparams hp{0.0, 1.0, 1e-6, 100.0, 0.01};
  const Eigen::MatrixXd X = random_matrix(40, 2, rng);
  const Eigen::MatrixXd T = Eigen::MatrixXd::Constant(40, 2, 0.7);
  CHECK(max_abs(loo_means(fit(hp, X, T)).array() - 0.7) < 0.01);
}

TEST_CASE("N = 1 is rejected") {
  KernelHyperparams hp;
  const GPFit f = fit(hp, Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Ones(1, 1));
  CHECK_THROWS_AS(loo_means(f), std::invalid_argument);
}

TEST_CASE("evidence plug-in values for K = I") {
  KernelHyperparams unit{0.0, 1.0, 0.0, 0.0, 1.0};
  const Eigen::MatrixXd X = Eigen::MatrixXd::Zero(6, 2);
  CHECK(log_marginal_likelihood(fit(unit, X, Eigen::MatrixXd::Zero(6, 1))) ==
        doctest::Approx(-3.0 * kLog2Pi).epsilon(1e-14));
  Eigen::MatrixXd t(1, 1);
  t << 2.0;
  CHECK(log_marginal_likelihood(fit(unit, Eigen::MatrixXd::Zero(1, 1), t)) ==
        doctest::Approx(-2.0 - 0.5 * kLog2Pi).epsilon(1e-14));
}

TEST_CASE("evidence matches a direct determinant and solve") {
  Rng rng(104);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = uniform_int(rng, 2, 30);
    const KernelHyperparams hp = random_hp(rng);
    const Eigen::MatrixXd X = random_matrix(n, 2, rng);
    const Eigen::MatrixXd T = random_matrix(n, 3, rng);
    CHECK(log_marginal_likelihood(fit(hp, X, T)) ==
          doctest::Approx(direct_evidence(hp, X, T)).epsilon(1e-10));
  }
}

TEST_CASE("evidence gradient matches finite differences") {
  Rng rng(105);
  const double step = 1e-5;
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const int n = uniform_int(rng, 5, 25);
    KernelHyperparams hp = random_hp(rng);
    // Exercise both the dense and the feature representation.
    if (rep % 3 == 0) hp.rbf_variance = 0.0;
    const Eigen::MatrixXd X = random_matrix(n, 2, rng);
    const Eigen::MatrixXd T = random_matrix(n, 2, rng);
    const Eigen::VectorXd g = evidence_gradient(fit(hp, X, T), X);
    const Eigen::VectorXd theta = to_log_vector(hp);
    for (int i = 0; i < kNumHyperparams; ++i) {
      if (!active_mask(hp)[i]) {
        CHECK(g[i] == 0.0);
        continue;
      }
      Eigen::VectorXd up = theta, dn = theta;
      up[i] += step;
      dn[i] -= step;
      const double fd = (direct_evidence(from_log_vector(up), X, T) -
                         direct_evidence(from_log_vector(dn), X, T)) /
                        (2.0 * step);
      worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("one factorization per fit regardless of the number of outputs") {
  Rng rng(106);
  const KernelHyperparams hp = random_hp(rng);
  const Eigen::MatrixXd X = random_matrix(30, 2, rng);
  for (int h : {1, 4, 16}) {
    const auto before = factorization_count();
    const GPFit f = fit(hp, X, random_matrix(30, h, rng));
    (void)loo_means(f);
    (void)log_marginal_likelihood(f);
    CHECK(factorization_count() - before == 1);
  }
}

TEST_CASE("per-column solve agrees with the shared factorization") {
  Rng rng(107);
  const KernelHyperparams hp = random_hp(rng);
  const Eigen::MatrixXd X = random_matrix(20, 3, rng);
  const Eigen::MatrixXd T = random_matrix(20, 4, rng);
  const Eigen::MatrixXd joint = loo_means(fit(hp, X, T));
  for (Eigen::Index h = 0; h < T.cols(); ++h) {
    const Eigen::MatrixXd single = loo_means(fit(hp, X, T.col(h)));
    CHECK(max_abs(single - joint.col(h)) < 1e-12);
  }
}

TEST_CASE("low-rank fit at full rank matches the exact fit") {
  Rng rng(108);
  const KernelHyperparams hp = random_hp(rng);
  const Eigen::MatrixXd X = random_matrix(40, 3, rng);
  const Eigen::MatrixXd T = random_matrix(40, 3, rng);
  const GPFit exact = fit(hp, X, T);
  const GPFit low = fit_lowrank(hp, X, T, incomplete_cholesky(hp, X, 40, 0.0));
  CHECK(max_abs(loo_means(low) - loo_means(exact)) < 1e-6);
  CHECK(log_marginal_likelihood(low) ==
        doctest::Approx(log_marginal_likelihood(exact)).epsilon(1e-8));
}

TEST_CASE("low-rank fit with one duplicated point at rank N-1") {
  Rng rng(109);
  KernelHyperparams hp = random_hp(rng);
  Eigen::MatrixXd X = random_matrix(30, 3, rng);
  X.row(29) = X.row(4);
  const Eigen::MatrixXd T = random_matrix(30, 2, rng);
  const LowRankFactor f = incomplete_cholesky(hp, X, 29, 0.0);
  CHECK(max_abs(loo_means(fit_lowrank(hp, X, T, f)) - loo_means(fit(hp, X, T))) < 1e-6);
}

TEST_CASE("low-rank LOO on bars data stays close to the full fit") {
  Rng rng(110);
  const BarsDataset ds = gen_bars(ModelKind::kBsc, 500, 5, 0.2, 2.0, 2.0, 1.0, rng);
  const KernelHyperparams hp = default_hyperparams(KernelPreset::kComposition, ds.Y);
  const Eigen::MatrixXd& T = ds.truth.states;
  const Eigen::MatrixXd full = loo_means(fit(hp, ds.Y, T));
  const Eigen::MatrixXd low =
      loo_means(fit_lowrank(hp, ds.Y, T, incomplete_cholesky(hp, ds.Y, 100, 0.0)));
  const double dev = (full - low).cwiseAbs().mean();
  MESSAGE("mean-abs LOO deviation at Q=100: " << dev);
  CHECK(dev < 0.05);
}

TEST_CASE("Nystrom evidence gradient matches finite differences") {
  Rng rng(111);
  for (int rep = 0; rep < 10; ++rep) {
    const KernelHyperparams hp = random_hp(rng);
    const Eigen::MatrixXd X = random_matrix(30, 2, rng);
    const Eigen::MatrixXd T = random_matrix(30, 2, rng);
    const std::vector<int> piv = incomplete_cholesky(hp, X, 8, 0.0).pivots;
    const auto eg = nystrom_evidence(hp, X, T, piv, true);
    const Eigen::VectorXd theta = to_log_vector(hp);
    for (int i = 0; i < kNumHyperparams; ++i) {
      Eigen::VectorXd up = theta, dn = theta;
      up[i] += 1e-5;
      dn[i] -= 1e-5;
      const double fd = (nystrom_evidence(from_log_vector(up), X, T, piv, false).value -
                         nystrom_evidence(from_log_vector(dn), X, T, piv, false).value) /
                        2e-5;
      CHECK(std::abs(eg.gradient[i] - fd) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("optimizer: invalid step count") {
  Rng rng(112);
  const Eigen::MatrixXd X = random_matrix(10, 2, rng);
  HyperoptOptions opt;
  opt.max_steps = 0;
  CHECK_THROWS_AS(optimize_hyperparams(KernelHyperparams{}, X, X.leftCols(1), opt),
                  std::invalid_argument);
}

TEST_CASE("optimizer: pure-noise targets shrink the signal variances") {
  Rng rng(113);
  const Eigen::MatrixXd X = random_matrix(150, 3, rng);
  const Eigen::MatrixXd T = random_matrix(150, 2, rng);  // independent of X
  KernelHyperparams hp0{1.0, 1.0, 1.0, 0.0, 0.1};
  const HyperoptResult r = optimize_hyperparams(hp0, X, T);
  CHECK(r.hp.rbf_variance / r.hp.noise_variance <
        hp0.rbf_variance / hp0.noise_variance);
  CHECK(r.hp.linear_variance / r.hp.noise_variance <
        hp0.linear_variance / hp0.noise_variance);
  CHECK(r.evidence >= r.initial_evidence);
}

TEST_CASE("optimizer: linear targets favour the linear component") {
  Rng rng(114);
  const Eigen::MatrixXd X = random_matrix(150, 3, rng);
  Eigen::MatrixXd T = X * Eigen::Vector3d(1.0, -2.0, 0.5);
  T += 0.05 * random_matrix(150, 1, rng);
  KernelHyperparams hp0{1.0, 1.0, 0.1, 0.0, 0.5};
  const HyperoptResult r = optimize_hyperparams(hp0, X, T);
  const double lin_signal = r.hp.linear_variance * X.rowwise().squaredNorm().mean();
  CHECK(lin_signal > r.hp.rbf_variance);
  const double before = (loo_means(fit(hp0, X, T)) - T).cwiseAbs().mean();
  const double after = (loo_means(fit(r.hp, X, T)) - T).cwiseAbs().mean();
  CHECK(after < before);
}

TEST_CASE("optimizer: accepted evidence never decreases") {
  Rng rng(115);
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::MatrixXd X = random_matrix(60, 2, rng);
    const Eigen::MatrixXd T = (X.col(0).array().sin()).matrix() + 0.1 * random_matrix(60, 1, rng);
    HyperoptOptions opt;
    if (rep % 2) opt.lowrank_rank = 15;
    const HyperoptResult r = optimize_hyperparams(random_hp(rng), X, T, opt);
    REQUIRE(!r.accepted_evidence.empty());
    for (std::size_t i = 1; i < r.accepted_evidence.size(); ++i) {
      CHECK(r.accepted_evidence[i] >= r.accepted_evidence[i - 1]);
    }
    CHECK(r.gradient_steps <= 20);
    CHECK(r.evidence == r.accepted_evidence.back());
  }
}

TEST_CASE("optimizer: non-finite starting evidence resets to defaults") {
  Rng rng(116);
  const Eigen::MatrixXd X = random_matrix(20, 2, rng);
  const Eigen::MatrixXd T = random_matrix(20, 1, rng);
  KernelHyperparams bad{1e300, 1.0, 1e300, 0.0, 1e-8};
  const HyperoptResult r = optimize_hyperparams(bad, X, T);
  if (r.reset_to_default) {
    CHECK(std::isfinite(r.evidence));
  } else {
    CHECK(std::isfinite(r.initial_evidence));
  }
}

}  // TEST_SUITE
