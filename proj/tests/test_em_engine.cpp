#include "doctest.h"

#include <cmath>

#include "gpselect/em_engine.hpp"
#include "gpselect/errors.hpp"
#include "gpselect/synthdata.hpp"
#include "support.hpp"

using namespace gpselect;
using testing::max_abs;
using testing::mvn_logpdf;
using testing::random_matrix;
using testing::uniform;

namespace {

const Eigen::MatrixXd& dict(const ModelParams& p) {
  return std::visit(
      [](const auto& q) -> const Eigen::MatrixXd& {
        using T = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return q.means;
        } else {
          return q.W;
        }
      },
      p);
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.index() != b.index()) return false;
  if (const auto* g = std::get_if<GMMParams>(&a)) {
    const auto& h = std::get<GMMParams>(b);
    return g->means == h.means && g->variances == h.variances && g->weights == h.weights;
  }
  return std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return false;
        } else if constexpr (std::is_same_v<T, BSCParams>) {
          const auto& q = std::get<BSCParams>(b);
          return p.W == q.W && p.sigma2 == q.sigma2 && p.pi == q.pi;
        } else {
          const auto& q = std::get<T>(b);
          return p.W == q.W && p.sigma2 == q.sigma2 && p.pi == q.pi && p.mu == q.mu &&
                 p.psi == q.psi;
        }
      },
      a);
}

EMConfig small_config(ModelKind kind, SelectionMode mode, int H, int Hp) {
  EMConfig c;
  c.model_kind = kind;
  c.selection_mode = mode;
  c.H = H;
  c.H_prime = Hp;
  c.T = 5;
  c.seed = 17;
  return c;
}

BarsDataset small_bars(ModelKind kind, int n, std::uint64_t seed) {
  Rng rng(seed);
  return gen_bars(kind, n, 3, 0.3, 0.5, 2.0, 1.0, rng, 2.0);
}

}  // namespace

TEST_SUITE("em_engine") {

TEST_CASE("one exact EM step matches a straight-line computation") {
  Rng rng(301);
  const Eigen::MatrixXd Y = random_matrix(25, 3, rng, 1.5);
  BSCParams p0;
  p0.W = random_matrix(3, 2, rng);
  p0.sigma2 = 0.8;
  p0.pi = 0.3;

  // Oracle: enumerate the 4 states by hand.
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3, 3);
  Eigen::MatrixXd S(4, 2);
  S << 0, 0, 1, 0, 0, 1, 1, 1;
  Eigen::MatrixXd sum_ys = Eigen::MatrixXd::Zero(3, 2);
  Eigen::MatrixXd sum_ss = Eigen::MatrixXd::Zero(2, 2);
  Eigen::MatrixXd Q(25, 4);
  double loglik = 0.0;
  double active = 0.0;
  for (int n = 0; n < 25; ++n) {
    const Eigen::VectorXd y = Y.row(n).transpose();
    Eigen::Vector4d lj;
    for (int k = 0; k < 4; ++k) {
      const Eigen::VectorXd s = S.row(k).transpose();
      lj[k] = s.sum() * std::log(p0.pi) + (2.0 - s.sum()) * std::log(1.0 - p0.pi) +
              mvn_logpdf(y, p0.W * s, p0.sigma2 * I);
    }
    const Eigen::Vector4d w = lj.array().exp();
    loglik += std::log(w.sum());
    Q.row(n) = (w / w.sum()).transpose();
    for (int k = 0; k < 4; ++k) {
      const Eigen::VectorXd s = S.row(k).transpose();
      sum_ys += Q(n, k) * y * s.transpose();
      sum_ss += Q(n, k) * s * s.transpose();
      active += Q(n, k) * s.sum();
    }
  }
  const Eigen::MatrixXd W1 = sum_ys * sum_ss.inverse();
  double resid = 0.0;
  for (int n = 0; n < 25; ++n) {
    for (int k = 0; k < 4; ++k) {
      resid += Q(n, k) * (Y.row(n).transpose() - W1 * S.row(k).transpose()).squaredNorm();
    }
  }

  EMConfig c = small_config(ModelKind::kBsc, SelectionMode::kFullExact, 2, 2);
  c.T = 1;
  c.initial_params = p0;
  const EMResult r = run_em(c, Y);
  const auto& p1 = std::get<BSCParams>(r.params);
  CHECK(max_abs(p1.W - W1) < 1e-10);
  CHECK(p1.sigma2 == doctest::Approx(resid / 75.0).epsilon(1e-10));
  CHECK(p1.pi == doctest::Approx(active / 50.0).epsilon(1e-12));
  REQUIRE(r.trace.size() == 1);
  CHECK(r.trace[0].free_energy == doctest::Approx(loglik).epsilon(1e-10));
}

TEST_CASE("full selection makes all modes follow the exact trajectory") {
  const BarsDataset ds = small_bars(ModelKind::kBsc, 150, 302);
  EMConfig exact = small_config(ModelKind::kBsc, SelectionMode::kFullExact, 6, 6);
  exact.random_fraction = 0.0;
  const EMResult ref = run_em(exact, ds.Y);
  for (SelectionMode m : {SelectionMode::kGPSelect, SelectionMode::kCosine}) {
    EMConfig c = exact;
    c.selection_mode = m;
    c.T_star = 2;
    const EMResult r = run_em(c, ds.Y);
    CHECK(same_params(r.params, ref.params));
    for (std::size_t t = 0; t < ref.trace.size(); ++t) {
      CHECK(r.trace[t].free_energy == ref.trace[t].free_energy);
    }
  }
}

TEST_CASE("runs are deterministic given a seed, for any thread count") {
  const BarsDataset ds = small_bars(ModelKind::kBsc, 200, 303);
  EMConfig c = small_config(ModelKind::kBsc, SelectionMode::kGPSelect, 6, 3);
  c.kernel_preset = KernelPreset::kComposition;
  c.T_star = 2;
  const EMResult a = run_em(c, ds.Y);
  c.threads = 3;
  const EMResult b = run_em(c, ds.Y);
  CHECK(same_params(a.params, b.params));
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t t = 0; t < a.trace.size(); ++t) {
    CHECK(a.trace[t].free_energy == b.trace[t].free_energy);
    CHECK(a.trace[t].hp == b.trace[t].hp);
    CHECK(a.trace[t].targets_out_checksum == b.trace[t].targets_out_checksum);
  }
  CHECK(a.last_selection == b.last_selection);
  c.seed = 18;
  c.threads = 1;
  CHECK_FALSE(same_params(run_em(c, ds.Y).params, a.params));
}

TEST_CASE("NLSS runs are deterministic for any thread count") {
  const BarsDataset ds = small_bars(ModelKind::kNlss, 80, 304);
  EMConfig c = small_config(ModelKind::kNlss, SelectionMode::kCosine, 6, 3);
  c.T = 3;
  const EMResult a = run_em(c, ds.Y);
  c.threads = 2;
  const EMResult b = run_em(c, ds.Y);
  CHECK(same_params(a.params, b.params));
  CHECK(a.trace.back().free_energy == b.trace.back().free_energy);
}

TEST_CASE("targets written by one iteration are read by the next") {
  const BarsDataset ds = small_bars(ModelKind::kBsc, 100, 305);
  EMConfig c = small_config(ModelKind::kBsc, SelectionMode::kGPSelect, 6, 3);
  c.T = 6;
  const EMResult r = run_em(c, ds.Y);
  for (std::size_t t = 1; t < r.trace.size(); ++t) {
    CHECK(r.trace[t].targets_in_checksum == r.trace[t - 1].targets_out_checksum);
    CHECK(r.trace[t].targets_in_checksum != r.trace[t].targets_out_checksum);
  }
  CHECK(checksum(r.state.targets) == r.trace.back().targets_out_checksum);
}

TEST_CASE("trace bookkeeping: schedule, timings, evidence") {
  const BarsDataset ds = small_bars(ModelKind::kBsc, 100, 306);
  EMConfig c = small_config(ModelKind::kBsc, SelectionMode::kGPSelect, 6, 3);
  c.T = 7;
  c.T_star = 3;
  c.kernel_preset = KernelPreset::kRbf;
  const EMResult r = run_em(c, ds.Y, GroundTruth{ds.truth.params(ModelKind::kBsc), ds.truth.states});
  REQUIRE(r.trace.size() == 7);
  for (const auto& rec : r.trace) {
    CHECK(rec.hyperopt_ran == (rec.iteration % 3 == 0));
    CHECK(std::isfinite(rec.gp_evidence));
    CHECK(rec.hyperopt_steps <= 20);
    CHECK(rec.times.affinity >= 0.0);
    CHECK(rec.times.estep >= 0.0);
    CHECK(rec.times.total >= rec.times.affinity + rec.times.estep);
    CHECK(rec.hit_rate >= 0.0);
    CHECK(rec.hit_rate <= 1.0);
    CHECK(std::isnan(rec.hyperopt_evidence) != rec.hyperopt_ran);
  }
  // The kernel changes only after an optimization.
  CHECK(r.trace[1].hp == r.trace[0].hp);
  CHECK(r.trace[2].hp == r.trace[1].hp);
  CHECK_FALSE(r.trace[3].hp == r.trace[2].hp);
  CHECK(r.trace[4].hp == r.trace[3].hp);
}

TEST_CASE("resuming from a saved state reproduces the uninterrupted run") {
  const BarsDataset ds = small_bars(ModelKind::kBsc, 120, 307);
  EMConfig c = small_config(ModelKind::kBsc, SelectionMode::kGPSelect, 6, 3);
  c.T = 6;
  c.T_star = 2;
  const EMResult full = run_em(c, ds.Y);
  EMState saved;
  run_em(c, ds.Y, std::nullopt, [&](const EMState& st, const std::vector<SelectedIndices>&) {
    if (st.completed == 3) saved = st;
  });
  const EMResult resumed = run_em(c, ds.Y, std::nullopt, nullptr, saved);
  CHECK(same_params(resumed.params, full.params));
  REQUIRE(resumed.trace.size() == full.trace.size());
  for (std::size_t t = 0; t < full.trace.size(); ++t) {
    CHECK(resumed.trace[t].free_energy == full.trace[t].free_energy);
  }
}

TEST_CASE("exact EM never decreases the free energy") {
  for (ModelKind kind : {ModelKind::kBsc, ModelKind::kSs}) {
    const BarsDataset ds = small_bars(kind, 100, 308);
    EMConfig c = small_config(kind, SelectionMode::kFullExact, 6, 6);
    c.T = 20;
    const EMResult r = run_em(c, ds.Y);
    for (std::size_t t = 1; t < r.trace.size(); ++t) {
      CHECK(r.trace[t].free_energy >= r.trace[t - 1].free_energy - 1e-8);
    }
  }
  Rng rng(309);
  const GmmDataset g = gen_gmm(200, 3, GmmLayout::kRandom, 4.0, rng);
  EMConfig c = small_config(ModelKind::kGmm, SelectionMode::kFullExact, 3, 3);
  c.T = 20;
  const EMResult r = run_em(c, g.Y);
  for (std::size_t t = 1; t < r.trace.size(); ++t) {
    CHECK(r.trace[t].free_energy >= r.trace[t - 1].free_energy - 1e-8);
  }
}

TEST_CASE("init_params") {
  Rng rng(310);
  const Eigen::MatrixXd Y = random_matrix(20, 4, rng);
  Rng a(5), b(5);
  CHECK(same_params(init_params(ModelKind::kSs, 6, Y, a), init_params(ModelKind::kSs, 6, Y, b)));
  Rng c(5);
  CHECK_THROWS_AS(init_params(ModelKind::kBsc, 21, Y, c), std::invalid_argument);
  for (ModelKind k : {ModelKind::kBsc, ModelKind::kSs, ModelKind::kNlss, ModelKind::kGmm}) {
    Rng r(7);
    const ModelParams p = init_params(k, 5, Y, r);
    CHECK_NOTHROW(validate(p));
    CHECK(latent_count(p) == 5);
    CHECK(observed_dim(p) == 4);
  }
}

TEST_CASE("configuration errors") {
  EMConfig c;
  c.H = 4;
  c.H_prime = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EMConfig{};
  c.T = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EMConfig{};
  c.random_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EMConfig{};
  c.H = 30;
  c.selection_mode = SelectionMode::kFullExact;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EMConfig{};
  c.model_kind = ModelKind::kNlss;
  c.init_targets = TargetInit::kFromParams;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_selection_mode("magic"), std::invalid_argument);
  CHECK(parse_selection_mode("singleton") == SelectionMode::kSingletonLikelihood);
  CHECK(to_string(SelectionMode::kGPSelect) == "gp_select");
}

TEST_CASE("exact expectations agree with the models' E-steps") {
  Rng rng(311);
  const Eigen::MatrixXd Y = random_matrix(10, 3, rng);
  Rng r(1);
  const ModelParams p = init_params(ModelKind::kBsc, 3, Y, r);
  const Eigen::MatrixXd E = exact_expectations(p, Y);
  for (int n = 0; n < 10; ++n) {
    const auto e = bsc::estep(std::get<BSCParams>(p), Y.row(n).transpose(),
                              build_state_set({0, 1, 2}, 3));
    CHECK(max_abs(E.row(n).transpose() - e.mean_s) < 1e-14);
  }
}

// ---------------------------------------------------------------- scoring

TEST_CASE("recovery of identical, permuted and corrupted dictionaries") {
  const Eigen::MatrixXd W = bars_dictionary(5);
  const RecoveryReport same = evaluate_recovery(W, W);
  CHECK(same.success);
  for (double c : same.cosine) CHECK(c == doctest::Approx(1.0));

  Eigen::MatrixXd P(25, 10);
  for (int h = 0; h < 10; ++h) P.col(h) = (h + 1.5) * W.col((h + 3) % 10);
  const RecoveryReport perm = evaluate_recovery(P, W);
  CHECK(perm.success);
  CHECK(perm.match[3] == 0);

  Rng rng(312);
  Eigen::MatrixXd Wn = W;
  Wn.col(4) = random_matrix(25, 1, rng);
  const RecoveryReport bad = evaluate_recovery(Wn, W);
  CHECK_FALSE(bad.success);
  CHECK(bad.unmatched == 1);
}

TEST_CASE("slab dictionaries are scored up to the sign symmetry") {
  SSParams p;
  p.W = bars_dictionary(3);
  p.sigma2 = 1.0;
  p.pi = 0.2;
  p.mu = Eigen::VectorXd::Constant(6, 2.0);
  p.psi = Eigen::VectorXd::Ones(6);
  SSParams flipped = p;
  flipped.W.col(2) *= -1.0;
  flipped.mu[2] = -2.0;
  CHECK(evaluate_recovery(scoring_dictionary(flipped), scoring_dictionary(p)).success);
  flipped.mu[2] = 2.0;
  CHECK_FALSE(evaluate_recovery(scoring_dictionary(flipped), scoring_dictionary(p)).success);
}

TEST_CASE("hit rate and label accuracy") {
  Eigen::MatrixXd states(2, 3);
  states << 1, 0, 1,  //
      0, 1, 0;
  std::vector<SelectedIndices> sel = {{0, 1}, {1, 2}};
  CHECK(selection_hit_rate(sel, states, {0, 1, 2}) == doctest::Approx(2.0 / 3.0));
  // Learned latent 2 plays the role of true latent 0, and vice versa.
  CHECK(selection_hit_rate(sel, states, {2, 1, 0}) == doctest::Approx(2.0 / 3.0));
  CHECK(std::isnan(selection_hit_rate(sel, Eigen::MatrixXd::Zero(2, 3), {0, 1, 2})));

  Eigen::MatrixXd resp(4, 2);
  resp << 0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.6, 0.4;
  Eigen::VectorXi labels(4);
  labels << 1, 0, 0, 0;
  CHECK(label_accuracy(resp, labels) == doctest::Approx(0.75));
}

TEST_CASE("kernel shares") {
  Eigen::MatrixXd X(2, 2);
  X << 1, 1, 1, 1;
  const KernelShares s = kernel_shares(KernelHyperparams{0.5, 1.0, 1.0, 0.0, 0.1}, X);
  CHECK(s.linear == doctest::Approx(2.0));
  CHECK(s.dominant == "linear");
  CHECK(s.dominant_share == doctest::Approx(0.8));
}

TEST_CASE("NLSS parameters stay near a ground-truth fixed point") {
  Rng rng(313);
  const BarsDataset ds = gen_bars(ModelKind::kNlss, 2000, 5, 0.2, 2.0, 2.0, 1.0, rng);
  const auto truth = std::get<NLSSParams>(ds.truth.params(ModelKind::kNlss));
  // Wide truncation: with H' = 5 the dropped weak activations bias pi
  // low by about a tenth, which is a property of the truncation rather
  // than of the M-step.
  EMConfig c = small_config(ModelKind::kNlss, SelectionMode::kCosine, 10, 8);
  c.random_fraction = 0.0;
  c.T = 1;
  c.initial_params = truth;
  const EMResult r = run_em(c, ds.Y);
  const auto& p = std::get<NLSSParams>(r.params);
  const double dw = (p.W - truth.W).norm() / truth.W.norm();
  MESSAGE("relative W change " << dw << ", sigma2 " << p.sigma2 << ", pi " << p.pi);
  CHECK(dw < 0.05);
  CHECK(std::abs(p.sigma2 / truth.sigma2 - 1.0) < 0.05);
  CHECK(std::abs(p.pi / truth.pi - 1.0) < 0.05);
  CHECK(std::abs(p.mu.mean() / truth.mu.mean() - 1.0) < 0.05);
}

}  // TEST_SUITE
