#include "doctest.h"

#include <Eigen/Eigenvalues>

#include <cmath>

#include "gpselect/kernels.hpp"
#include "support.hpp"

using namespace gpselect;
using testing::max_abs;
using testing::random_matrix;
using testing::uniform;

namespace {

KernelHyperparams random_hp(Rng& rng) {
  KernelHyperparams hp;
  hp.rbf_variance = uniform(rng, 0.2, 2.0);
  hp.rbf_lengthscale = uniform(rng, 0.5, 2.0);
  hp.linear_variance = uniform(rng, 0.1, 1.0);
  hp.bias_variance = uniform(rng, 0.1, 1.0);
  hp.noise_variance = uniform(rng, 0.05, 0.5);
  return hp;
}

// Direct double loop over the closed-form kernel.
Eigen::MatrixXd loop_gram(const KernelHyperparams& hp, const Eigen::MatrixXd& X,
                          bool with_noise) {
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d2 = (X.row(i) - X.row(j)).squaredNorm();
      K(i, j) = hp.rbf_variance *
                    std::exp(-d2 / (2.0 * hp.rbf_lengthscale * hp.rbf_lengthscale)) +
                hp.linear_variance * X.row(i).dot(X.row(j)) + hp.bias_variance;
      if (with_noise && i == j) K(i, j) += hp.noise_variance;
    }
  }
  return K;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("eval_kernel plug-in values") {
  KernelHyperparams hp{1.0, 1.0, 0.0, 0.0, 0.1};
  Eigen::Vector3d x(0.3, -1.0, 2.0);
  CHECK(eval_kernel(hp, x, x) == doctest::Approx(1.0).epsilon(1e-15));

  KernelHyperparams lin{0.0, 1.0, 1.0, 0.0, 0.1};
  CHECK(eval_kernel(lin, Eigen::Vector2d(1, 2), Eigen::Vector2d(3, 4)) ==
        doctest::Approx(11.0).epsilon(1e-15));

  KernelHyperparams mix{2.0, 2.0, 0.5, 0.25, 0.1};
  // |x - x'|^2 = 2, <x, x'> = 0
  const double expected = 2.0 * std::exp(-2.0 / 8.0) + 0.25;
  CHECK(eval_kernel(mix, Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)) ==
        doctest::Approx(expected).epsilon(1e-14));

  CHECK_THROWS_AS(eval_kernel(hp, Eigen::Vector2d(1, 0), x), std::invalid_argument);
}

TEST_CASE("gram_matrix matches a loop over eval formula and is symmetric") {
  Rng rng(11);
  Eigen::MatrixXd one(1, 1);
  one << 0.0;
  const GramMatrix g1 = gram_matrix(KernelHyperparams{1.0, 1.0, 0.0, 0.0, 0.1}, one, true);
  CHECK(g1.values(0, 0) == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(g1.includes_noise);

  for (int rep = 0; rep < 20; ++rep) {
    const KernelHyperparams hp = random_hp(rng);
    const Eigen::MatrixXd X = random_matrix(12, 4, rng);
    for (bool noise : {false, true}) {
      const Eigen::MatrixXd K = gram_matrix(hp, X, noise).values;
      CHECK(max_abs(K - loop_gram(hp, X, noise)) < 1e-12);
      CHECK(max_abs(K - K.transpose()) < 1e-12);
    }
  }

  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(3, 2);
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(gram_matrix(KernelHyperparams{}, bad, true), std::invalid_argument);
}

TEST_CASE("noisy Gram is positive definite even for repeated points") {
  Rng rng(5);
  KernelHyperparams hp{1.0, 1.0, 1.0, 1.0, 1e-8};
  Eigen::MatrixXd X = random_matrix(200, 3, rng);
  X.bottomRows(100) = X.topRows(100);  // every point duplicated
  Eigen::LLT<Eigen::MatrixXd> llt(gram_matrix(hp, X, true).values);
  CHECK(llt.info() == Eigen::Success);
}

TEST_CASE("kernel_gradients: noise gradient and finite differences") {
  KernelHyperparams hp{1.0, 1.0, 0.0, 0.0, 0.3};
  const auto g = kernel_gradients(hp, Eigen::MatrixXd::Zero(2, 1));
  CHECK(max_abs(g[kNoiseVariance] - 0.3 * Eigen::MatrixXd::Identity(2, 2)) < 1e-15);

  Rng rng(21);
  const double step = 1e-6;
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const KernelHyperparams p = random_hp(rng);
    const Eigen::MatrixXd X = random_matrix(5, 3, rng);
    const auto grads = kernel_gradients(p, X);
    const Eigen::VectorXd theta = to_log_vector(p);
    for (int i = 0; i < kNumHyperparams; ++i) {
      Eigen::VectorXd up = theta, dn = theta;
      up[i] += step;
      dn[i] -= step;
      const Eigen::MatrixXd fd = (loop_gram(from_log_vector(up), X, true) -
                                  loop_gram(from_log_vector(dn), X, true)) /
                                 (2.0 * step);
      worst = std::max(worst, max_abs(grads[i] - fd));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("disabled components have zero gradients and stay inactive") {
  KernelHyperparams hp{0.0, 1.5, 0.7, 0.0, 0.2};
  Rng rng(2);
  const auto grads = kernel_gradients(hp, random_matrix(4, 2, rng));
  CHECK(max_abs(grads[kRbfVariance]) == 0.0);
  CHECK(max_abs(grads[kRbfLengthscale]) == 0.0);
  CHECK(max_abs(grads[kBiasVariance]) == 0.0);
  const auto mask = active_mask(hp);
  CHECK_FALSE(mask[kRbfVariance]);
  CHECK_FALSE(mask[kRbfLengthscale]);
  CHECK(mask[kLinearVariance]);
  CHECK_FALSE(mask[kBiasVariance]);
  CHECK(mask[kNoiseVariance]);
}

TEST_CASE("flat record round trip uses the documented names") {
  KernelHyperparams hp{0.5, 2.0, 0.1, 0.0, 0.01};
  const auto rec = to_record(hp);
  CHECK(rec.size() == 5);
  for (const auto& name : {"rbf_variance", "rbf_lengthscale", "linear_variance",
                           "bias_variance", "noise_variance"}) {
    CHECK(rec.count(name) == 1);
  }
  CHECK(from_record(rec) == hp);
  const KernelHyperparams back = from_log_vector(to_log_vector(hp));
  CHECK(back.rbf_variance == doctest::Approx(hp.rbf_variance).epsilon(1e-14));
  CHECK(back.rbf_lengthscale == doctest::Approx(hp.rbf_lengthscale).epsilon(1e-14));
  CHECK(back.linear_variance == doctest::Approx(hp.linear_variance).epsilon(1e-14));
  CHECK(back.bias_variance == 0.0);
  CHECK(back.noise_variance == doctest::Approx(hp.noise_variance).epsilon(1e-14));
}

TEST_CASE("validate rejects negative and non-finite values") {
  KernelHyperparams hp;
  hp.noise_variance = -1.0;
  CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
  hp = KernelHyperparams{};
  hp.rbf_lengthscale = std::nan("");
  CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
  hp = KernelHyperparams{};
  hp.noise_variance = 0.0;
  CHECK(hp.floored().noise_variance == KernelHyperparams::kNoiseFloor);
}

TEST_CASE("incomplete Cholesky: full rank is exact") {
  Rng rng(3);
  KernelHyperparams hp = random_hp(rng);
  const Eigen::MatrixXd X = random_matrix(40, 3, rng);
  const LowRankFactor f = incomplete_cholesky(hp, X, 40, 0.0);
  const Eigen::MatrixXd K = loop_gram(hp, X, false);
  CHECK((K - f.factor * f.factor.transpose()).norm() < 1e-8);
  CHECK(f.residual_trace <= 1e-8 * K.trace());
}

TEST_CASE("incomplete Cholesky: rank-one data stops at one pivot") {
  KernelHyperparams hp{0.0, 1.0, 1.0, 0.0, 0.1};
  Eigen::MatrixXd X(30, 3);
  X.rowwise() = Eigen::RowVector3d(0.5, -1.0, 2.0);
  const LowRankFactor f = incomplete_cholesky(hp, X, 30, 0.0);
  CHECK(f.rank() == 1);
  CHECK(f.pivots == std::vector<int>{0});
}

TEST_CASE("incomplete Cholesky: residual bounded by trailing eigenvalues") {
  Rng rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    const KernelHyperparams hp = random_hp(rng);
    const Eigen::MatrixXd X = random_matrix(50, 3, rng);
    const Eigen::MatrixXd K = loop_gram(hp, X, false);
    const LowRankFactor f = incomplete_cholesky(hp, X, 10, 0.0);
    REQUIRE(f.rank() == 10);
    const double direct = K.trace() - f.factor.squaredNorm();
    CHECK(f.residual_trace == doctest::Approx(direct).epsilon(1e-8));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
    // Eigenvalues ascending: the trailing N-Q are the smallest 40.
    const double tail = es.eigenvalues().head(40).sum();
    CHECK(f.residual_trace >= tail - 1e-9);
  }
}

TEST_CASE("incomplete Cholesky: residual non-increasing in rank") {
  Rng rng(9);
  const KernelHyperparams hp = random_hp(rng);
  const Eigen::MatrixXd X = random_matrix(60, 4, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int q = 1; q <= 60; ++q) {
    const double r = incomplete_cholesky(hp, X, q, 0.0).residual_trace;
    CHECK(r <= prev + 1e-12);
    prev = r;
  }
  CHECK_THROWS_AS(incomplete_cholesky(hp, X, 0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(incomplete_cholesky(hp, X, 61, 0.0), std::invalid_argument);
}

TEST_CASE("incomplete Cholesky pivots on the largest diagonal, lowest index on ties") {
  // Linear kernel: diagonal is the squared norm.
  KernelHyperparams hp{0.0, 1.0, 1.0, 0.0, 0.1};
  Eigen::MatrixXd X(4, 2);
  X << 1, 0,  //
      0, 3,   //
      3, 0,   //
      0, 1;
  const LowRankFactor f = incomplete_cholesky(hp, X, 2, 0.0);
  CHECK(f.pivots == std::vector<int>{1, 2});
}

}  // TEST_SUITE
