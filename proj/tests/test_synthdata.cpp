#include "doctest.h"

#include <cmath>
#include <set>

#include "gpselect/em_engine.hpp"
#include "gpselect/synthdata.hpp"
#include "support.hpp"

using namespace gpselect;
using testing::max_abs;

TEST_SUITE("synthdata") {

TEST_CASE("bars dictionary layout") {
  const Eigen::MatrixXd W = bars_dictionary(5);
  REQUIRE(W.rows() == 25);
  REQUIRE(W.cols() == 10);
  for (int h = 0; h < 10; ++h) CHECK(W.col(h).sum() == 5.0);
  // Horizontal bar 1 covers row 1; vertical bar 3 covers column 3.
  for (int c = 0; c < 5; ++c) CHECK(W(1 * 5 + c, 1) == 1.0);
  for (int r = 0; r < 5; ++r) CHECK(W(r * 5 + 3, 5 + 3) == 1.0);
  // Every pixel is covered by exactly one horizontal and one vertical bar.
  CHECK(W.rowwise().sum() == Eigen::VectorXd::Constant(25, 2.0));
}

TEST_CASE("bars data statistics") {
  Rng rng(401);
  const BarsDataset ds = gen_bars(ModelKind::kBsc, 2000, 5, 0.2, 2.0, 2.0, 1.0, rng);
  CHECK(ds.Y.rows() == 2000);
  CHECK(ds.Y.cols() == 25);
  const double mean_active = ds.truth.states.rowwise().sum().mean();
  CHECK(std::abs(mean_active - 2.0) < 0.15);
  const Eigen::MatrixXd resid = ds.Y - ds.truth.states * ds.truth.W_true.transpose();
  CHECK(std::abs(resid.array().square().mean() - 2.0) < 0.1);
}

TEST_CASE("noiseless single-bar data equals the bar") {
  Rng rng(402);
  const BarsDataset ds = gen_bars(ModelKind::kBsc, 500, 4, 0.1, 0.0, 2.0, 1.0, rng, 1.5);
  int checked = 0;
  for (Eigen::Index n = 0; n < ds.Y.rows(); ++n) {
    if (ds.truth.states.row(n).sum() != 1.0) continue;
    Eigen::Index h = 0;
    ds.truth.states.row(n).maxCoeff(&h);
    CHECK(max_abs(ds.Y.row(n).transpose() - ds.truth.W_true.col(h)) == 0.0);
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("slab models multiply bars by slab draws") {
  Rng rng(403);
  const BarsDataset ss = gen_bars(ModelKind::kSs, 3000, 5, 0.2, 0.0, 2.0, 1.0, rng);
  const Eigen::ArrayXXd on = ss.truth.states.array();
  const double mean_slab = (ss.truth.slabs.array() * on).sum() / on.sum();
  CHECK(std::abs(mean_slab - 2.0) < 0.05);
  const Eigen::MatrixXd expected =
      ss.truth.states.cwiseProduct(ss.truth.slabs) * ss.truth.W_true.transpose();
  CHECK(max_abs(ss.Y - expected) < 1e-12);

  Rng rng2(404);
  const BarsDataset nl = gen_bars(ModelKind::kNlss, 200, 5, 0.3, 0.0, 2.0, 1.0, rng2);
  NLSSParams p = std::get<NLSSParams>(nl.truth.params(ModelKind::kNlss));
  for (Eigen::Index n = 0; n < 200; ++n) {
    CHECK(max_abs(nl.Y.row(n).transpose() -
                  nlss::observation_mean(p, nl.truth.states.row(n).transpose(),
                                         nl.truth.slabs.row(n).transpose())) < 1e-12);
  }
}

TEST_CASE("generation is reproducible") {
  Rng a(405), b(405);
  CHECK(gen_bars(ModelKind::kSs, 50, 5, 0.2, 2.0, 2.0, 1.0, a).Y ==
        gen_bars(ModelKind::kSs, 50, 5, 0.2, 2.0, 2.0, 1.0, b).Y);
}

TEST_CASE("mixture layouts") {
  Rng rng(406);
  const GmmDataset one = gen_gmm(100, 1, GmmLayout::kRandom, 8.0, rng);
  CHECK(one.labels.minCoeff() == 0);
  CHECK(one.labels.maxCoeff() == 0);

  for (int rep = 0; rep < 20; ++rep) {
    const GmmDataset r = gen_gmm(300, 3, GmmLayout::kRandom, 8.0, rng);
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        CHECK((r.truth.means.row(a) - r.truth.means.row(b)).norm() >= 8.0);
      }
    }
    const GmmDataset c = gen_gmm(300, 3, GmmLayout::kCollinear, 8.0, rng);
    CHECK(collinearity_residual(c.truth.means) < 0.8);
  }
  const GmmDataset g = gen_gmm(3000, 3, GmmLayout::kRandom, 8.0, rng);
  CHECK(g.states().rowwise().sum() == Eigen::VectorXd::Ones(3000));
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs((g.labels.array() == c).cast<double>().mean() - 1.0 / 3.0) < 0.03);
  }
}

TEST_CASE("exact EM on separated mixtures labels nearly every point") {
  Rng rng(407);
  const GmmDataset g = gen_gmm(600, 3, GmmLayout::kRandom, 8.0, rng);
  EMConfig c;
  c.model_kind = ModelKind::kGmm;
  c.selection_mode = SelectionMode::kFullExact;
  c.H = 3;
  c.H_prime = 3;
  c.T = 40;
  c.initial_params = g.truth;
  const EMResult r = run_em(c, g.Y);
  CHECK(label_accuracy(exact_expectations(r.params, g.Y), g.labels) >= 0.98);
}

}  // TEST_SUITE
