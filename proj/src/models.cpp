#include "gpselect/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gpselect {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

std::vector<int> active_of(StateMask m, int h) {
  std::vector<int> idx;
  for (int i = 0; i < h; ++i) {
    if (m >> i & 1U) idx.push_back(i);
  }
  return idx;
}

int popcount(StateMask m) { return __builtin_popcountll(m); }

double log_prior(StateMask m, int h, double pi) {
  const int k = popcount(m);
  return k * std::log(pi) + (h - k) * std::log1p(-pi);
}

void check_states(const StateSetRow& states, int h) {
  if (states.size() == 0) {
    throw std::invalid_argument("E-step: empty state set");
  }
  if (states.num_latents != h) {
    throw std::invalid_argument("E-step: state set built for another H");
  }
}

Eigen::VectorXd normalize_log(const Eigen::VectorXd& logp, double& lse) {
  lse = log_sum_exp(logp);
  return (logp.array() - lse).exp().matrix();
}

// Solves X A = B for X where A is symmetric; only latents with support are
// solved, others keep `fallback`. Returns true when regularization was used.
bool solve_supported(const Eigen::MatrixXd& B, const Eigen::MatrixXd& A,
                     const Eigen::VectorXd& support, const Eigen::MatrixXd& fallback,
                     Eigen::MatrixXd& out) {
  std::vector<int> keep;
  for (Eigen::Index h = 0; h < support.size(); ++h) {
    if (support[h] >= 1e-8) keep.push_back(static_cast<int>(h));
  }
  out = fallback;
  if (keep.empty()) return false;
  const Eigen::Index k = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd As(k, k);
  Eigen::MatrixXd Bs(B.rows(), k);
  for (Eigen::Index i = 0; i < k; ++i) {
    Bs.col(i) = B.col(keep[i]);
    for (Eigen::Index j = 0; j < k; ++j) As(i, j) = A(keep[i], keep[j]);
  }
  bool regularized = false;
  Eigen::LLT<Eigen::MatrixXd> llt(As);
  if (llt.info() != Eigen::Success) {
    As.diagonal().array() += 1e-8;
    llt.compute(As);
    regularized = true;
  }
  const Eigen::MatrixXd Xs = llt.solve(Bs.transpose()).transpose();
  for (Eigen::Index i = 0; i < k; ++i) out.col(keep[i]) = Xs.col(i);
  return regularized;
}

double expected_residual(double sum_yy, const Eigen::MatrixXd& W,
                         const Eigen::MatrixXd& sum_ysT,
                         const Eigen::MatrixXd& sum_ssT) {
  return sum_yy - 2.0 * W.cwiseProduct(sum_ysT).sum() +
         (W.transpose() * W).cwiseProduct(sum_ssT).sum();
}

}  // namespace

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() == 0) return -std::numeric_limits<double>::infinity();
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

double truncated_free_energy(const Eigen::VectorXd& log_joint,
                             const Eigen::VectorXd& probs) {
  double f = 0.0;
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    if (probs[k] > 0.0) f += probs[k] * (log_joint[k] - std::log(probs[k]));
  }
  return f;
}

// ---------------------------------------------------------------- BSC

namespace bsc {

double log_joint(const BSCParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
                 const Eigen::Ref<const Eigen::VectorXd>& s) {
  const double d = static_cast<double>(p.W.rows());
  const double k = s.sum();
  const double h = static_cast<double>(s.size());
  return k * std::log(p.pi) + (h - k) * std::log1p(-p.pi) -
         0.5 * d * (kLog2Pi + std::log(p.sigma2)) -
         0.5 * (y - p.W * s).squaredNorm() / p.sigma2;
}

EStepRow estep(const BSCParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
               const StateSetRow& states) {
  const int h = static_cast<int>(p.W.cols());
  check_states(states, h);
  const double d = static_cast<double>(p.W.rows());
  const Eigen::VectorXd Wty = p.W.transpose() * y;
  const Eigen::MatrixXd WtW = p.W.transpose() * p.W;
  const double yy = y.squaredNorm();
  const double base = -0.5 * d * (kLog2Pi + std::log(p.sigma2));

  const std::size_t n_states = states.size();
  Eigen::VectorXd logp(n_states);
  for (std::size_t k = 0; k < n_states; ++k) {
    const auto idx = active_of(states.masks[k], h);
    double quad = yy;
    for (int a : idx) {
      quad -= 2.0 * Wty[a];
      for (int b : idx) quad += WtW(a, b);
    }
    logp[k] = log_prior(states.masks[k], h, p.pi) + base -
              0.5 * quad / p.sigma2;
  }

  EStepRow row;
  row.posterior.states = states;
  row.posterior.probs = normalize_log(logp, row.posterior.log_normalizer);
  row.mean_s = Eigen::VectorXd::Zero(h);
  row.mean_ssT = Eigen::MatrixXd::Zero(h, h);
  for (std::size_t k = 0; k < n_states; ++k) {
    const double q = row.posterior.probs[k];
    const auto idx = active_of(states.masks[k], h);
    for (int a : idx) {
      row.mean_s[a] += q;
      for (int b : idx) row.mean_ssT(a, b) += q;
    }
  }
  return row;
}

SufficientStats::SufficientStats(int d, int h)
    : sum_s(Eigen::VectorXd::Zero(h)),
      sum_ysT(Eigen::MatrixXd::Zero(d, h)),
      sum_ssT(Eigen::MatrixXd::Zero(h, h)) {}

void SufficientStats::add(const Eigen::Ref<const Eigen::VectorXd>& y,
                          const EStepRow& row) {
  ++num_points;
  sum_s += row.mean_s;
  sum_ysT.noalias() += y * row.mean_s.transpose();
  sum_ssT += row.mean_ssT;
  sum_yy += y.squaredNorm();
}

BSCParams mstep(const SufficientStats& stats, const BSCParams& previous,
                std::vector<std::string>* warnings) {
  if (stats.num_points < 1) {
    throw std::invalid_argument("bsc::mstep: no data accumulated");
  }
  const double n = stats.num_points;
  const double d = static_cast<double>(stats.sum_ysT.rows());
  const double h = static_cast<double>(stats.sum_s.size());
  BSCParams out;
  if (solve_supported(stats.sum_ysT, stats.sum_ssT, stats.sum_s, previous.W,
                      out.W) &&
      warnings) {
    warnings->push_back("bsc_mstep_regularized");
  }
  const double resid =
      expected_residual(stats.sum_yy, out.W, stats.sum_ysT, stats.sum_ssT);
  out.sigma2 = std::max(resid / (n * d), kSigma2Floor);
  out.pi = std::clamp(stats.sum_s.sum() / (n * h), kPiMin, kPiMax);
  return out;
}

double free_energy(const BSCParams& p, const Eigen::MatrixXd& Y,
                   const std::vector<BinaryPosterior>& posteriors) {
  if (static_cast<Eigen::Index>(posteriors.size()) != Y.rows()) {
    throw std::invalid_argument("bsc::free_energy: one posterior per point");
  }
  double f = 0.0;
  for (Eigen::Index n = 0; n < Y.rows(); ++n) {
    const auto& post = posteriors[n];
    Eigen::VectorXd lj(post.states.size());
    for (std::size_t k = 0; k < post.states.size(); ++k) {
      lj[k] = log_joint(p, Y.row(n).transpose(), post.states.state(k));
    }
    f += truncated_free_energy(lj, post.probs);
  }
  return f;
}

}  // namespace bsc

// ---------------------------------------------------------------- SS

namespace ss {

namespace {

// Collapsed marginal from precomputed W^T W and W^T y.
CollapsedState collapsed_from_gram(const SSParams& p, const Eigen::MatrixXd& WtW,
                                   const Eigen::VectorXd& Wty, double yy,
                                   StateMask s) {
  const int h = static_cast<int>(p.W.cols());
  const double d = static_cast<double>(p.W.rows());
  const double s2 = p.sigma2;
  const auto idx = active_of(s, h);
  const Eigen::Index k = static_cast<Eigen::Index>(idx.size());
  CollapsedState out;
  double logdet = d * std::log(s2);
  double quad = yy / s2;
  if (k > 0) {
    Eigen::MatrixXd G(k, k);
    Eigen::VectorXd wy(k), mu(k), psi(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      wy[i] = Wty[idx[i]];
      mu[i] = p.mu[idx[i]];
      psi[i] = p.psi[idx[i]];
      for (Eigen::Index j = 0; j < k; ++j) G(i, j) = WtW(idx[i], idx[j]);
    }
    // r = y - W_s mu_s; W_s^T r and |r|^2 from the Gram quantities.
    const Eigen::VectorXd Wtr = wy - G * mu;
    const double rr = yy - 2.0 * mu.dot(wy) + mu.dot(G * mu);
    Eigen::MatrixXd Lambda = G / s2;
    Lambda.diagonal() += psi.cwiseInverse();
    Eigen::LLT<Eigen::MatrixXd> llt(Lambda);
    const Eigen::VectorXd b = Wtr / s2;
    const Eigen::VectorXd Lb = llt.solve(b);
    logdet += psi.array().log().sum() +
              2.0 * llt.matrixLLT().diagonal().array().log().sum();
    quad = rr / s2 - b.dot(Lb);
    out.moments.mean = mu + Lb;
    out.moments.cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
  } else {
    out.moments.mean.resize(0);
    out.moments.cov.resize(0, 0);
  }
  out.log_value = log_prior(s, h, p.pi) - 0.5 * (d * kLog2Pi + logdet + quad);
  return out;
}

}  // namespace

CollapsedState collapsed_log_marginal(const SSParams& p,
                                      const Eigen::Ref<const Eigen::VectorXd>& y,
                                      StateMask s) {
  return collapsed_from_gram(p, p.W.transpose() * p.W, p.W.transpose() * y,
                             y.squaredNorm(), s);
}

EStepRow estep(const SSParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
               const StateSetRow& states) {
  const int h = static_cast<int>(p.W.cols());
  check_states(states, h);
  const Eigen::MatrixXd WtW = p.W.transpose() * p.W;
  const Eigen::VectorXd Wty = p.W.transpose() * y;
  const double yy = y.squaredNorm();

  const std::size_t n_states = states.size();
  EStepRow row;
  row.slab.resize(n_states);
  Eigen::VectorXd logp(n_states);
  for (std::size_t k = 0; k < n_states; ++k) {
    CollapsedState c = collapsed_from_gram(p, WtW, Wty, yy, states.masks[k]);
    logp[k] = c.log_value;
    row.slab[k] = std::move(c.moments);
  }
  row.posterior.states = states;
  row.posterior.probs = normalize_log(logp, row.posterior.log_normalizer);

  row.mean_s = Eigen::VectorXd::Zero(h);
  row.mean_sz = Eigen::VectorXd::Zero(h);
  row.mean_szszT = Eigen::MatrixXd::Zero(h, h);
  for (std::size_t k = 0; k < n_states; ++k) {
    const double q = row.posterior.probs[k];
    const auto idx = active_of(states.masks[k], h);
    const SlabMoments& m = row.slab[k];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      row.mean_s[idx[i]] += q;
      row.mean_sz[idx[i]] += q * m.mean[i];
      for (std::size_t j = 0; j < idx.size(); ++j) {
        row.mean_szszT(idx[i], idx[j]) +=
            q * (m.cov(i, j) + m.mean[i] * m.mean[j]);
      }
    }
  }
  return row;
}

SufficientStats::SufficientStats(int d, int h)
    : sum_s(Eigen::VectorXd::Zero(h)),
      sum_y_szT(Eigen::MatrixXd::Zero(d, h)),
      sum_szszT(Eigen::MatrixXd::Zero(h, h)),
      sum_sz(Eigen::VectorXd::Zero(h)),
      sum_sz2(Eigen::VectorXd::Zero(h)) {}

void SufficientStats::add(const Eigen::Ref<const Eigen::VectorXd>& y,
                          const EStepRow& row) {
  ++num_points;
  sum_s += row.mean_s;
  sum_y_szT.noalias() += y * row.mean_sz.transpose();
  sum_szszT += row.mean_szszT;
  sum_sz += row.mean_sz;
  sum_sz2 += row.mean_szszT.diagonal();
  sum_yy += y.squaredNorm();
}

SSParams mstep(const SufficientStats& stats, const SSParams& previous,
               std::vector<std::string>* warnings) {
  if (stats.num_points < 1) {
    throw std::invalid_argument("ss::mstep: no data accumulated");
  }
  const double n = stats.num_points;
  const double d = static_cast<double>(stats.sum_y_szT.rows());
  const Eigen::Index h = stats.sum_s.size();
  SSParams out;
  if (solve_supported(stats.sum_y_szT, stats.sum_szszT, stats.sum_s, previous.W,
                      out.W) &&
      warnings) {
    warnings->push_back("ss_mstep_regularized");
  }
  const double resid =
      expected_residual(stats.sum_yy, out.W, stats.sum_y_szT, stats.sum_szszT);
  out.sigma2 = std::max(resid / (n * d), kSigma2Floor);
  out.pi = std::clamp(stats.sum_s.sum() / (n * static_cast<double>(h)), kPiMin,
                      kPiMax);
  out.mu = previous.mu;
  out.psi = previous.psi;
  for (Eigen::Index i = 0; i < h; ++i) {
    const double ns = stats.sum_s[i];
    if (ns < 1e-8) continue;
    out.mu[i] = stats.sum_sz[i] / ns;
    out.psi[i] =
        std::max(stats.sum_sz2[i] / ns - out.mu[i] * out.mu[i], kPsiFloor);
  }
  return out;
}

double free_energy(const SSParams& p, const Eigen::MatrixXd& Y,
                   const std::vector<BinaryPosterior>& posteriors) {
  if (static_cast<Eigen::Index>(posteriors.size()) != Y.rows()) {
    throw std::invalid_argument("ss::free_energy: one posterior per point");
  }
  double f = 0.0;
  for (Eigen::Index n = 0; n < Y.rows(); ++n) {
    const auto& post = posteriors[n];
    Eigen::VectorXd lj(post.states.size());
    for (std::size_t k = 0; k < post.states.size(); ++k) {
      lj[k] = collapsed_log_marginal(p, Y.row(n).transpose(),
                                     post.states.masks[k])
                  .log_value;
    }
    f += truncated_free_energy(lj, post.probs);
  }
  return f;
}

}  // namespace ss

// ---------------------------------------------------------------- NLSS

namespace nlss {

namespace {

// Observation mean for active indices `idx` with slab values z.
void max_mean(const Eigen::MatrixXd& W, const std::vector<int>& idx,
              const Eigen::VectorXd& z, int h_total, Eigen::VectorXd& mean) {
  const Eigen::Index d = W.rows();
  const bool all_active = static_cast<int>(idx.size()) == h_total;
  for (Eigen::Index i = 0; i < d; ++i) {
    double m = all_active ? -std::numeric_limits<double>::infinity() : 0.0;
    for (int a : idx) m = std::max(m, z[a] * W(i, a));
    mean[i] = idx.empty() ? 0.0 : m;
  }
}

double log_gauss_obs(const Eigen::VectorXd& y, const Eigen::VectorXd& mean,
                     double sigma2) {
  const double d = static_cast<double>(y.size());
  return -0.5 * d * (kLog2Pi + std::log(sigma2)) -
         0.5 * (y - mean).squaredNorm() / sigma2;
}

double log_slab(double z, double mu, double psi) {
  return -0.5 * (kLog2Pi + std::log(psi)) - 0.5 * (z - mu) * (z - mu) / psi;
}

}  // namespace

Eigen::VectorXd observation_mean(const NLSSParams& p,
                                 const Eigen::Ref<const Eigen::VectorXd>& s,
                                 const Eigen::Ref<const Eigen::VectorXd>& z) {
  const int h = static_cast<int>(p.W.cols());
  std::vector<int> idx;
  for (int i = 0; i < h; ++i) {
    if (s[i] != 0.0) idx.push_back(i);
  }
  Eigen::VectorXd mean(p.W.rows());
  max_mean(p.W, idx, z, h, mean);
  return mean;
}

double log_likelihood_and_prior(const NLSSParams& p,
                                const Eigen::Ref<const Eigen::VectorXd>& y,
                                StateMask s,
                                const Eigen::Ref<const Eigen::VectorXd>& z) {
  const int h = static_cast<int>(p.W.cols());
  Eigen::VectorXd mean(p.W.rows());
  max_mean(p.W, active_of(s, h), z, h, mean);
  return log_prior(s, h, p.pi) + log_gauss_obs(y, mean, p.sigma2);
}

EStepRow gibbs_estep(const NLSSParams& p,
                     const Eigen::Ref<const Eigen::VectorXd>& y,
                     const StateSetRow& states, const GibbsOptions& options,
                     Rng& rng, ChainState& chain) {
  const int h = static_cast<int>(p.W.cols());
  const Eigen::Index d = p.W.rows();
  check_states(states, h);
  if (options.n_samples < 1 || options.burn_in < 0) {
    throw std::invalid_argument("gibbs_estep: need n_samples >= 1, burn_in >= 0");
  }
  const Eigen::VectorXd yv = y;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  if (!chain.initialized() || chain.z.size() != h) {
    chain.b = Eigen::VectorXd::Zero(h);
    chain.z.resize(h);
    for (int i = 0; i < h; ++i) {
      chain.z[i] = p.mu[i] + std::sqrt(p.psi[i]) * normal(rng);
    }
  }
  // Current binary state restricted to K_n.
  const StateMask allowed = support_mask(states);
  const std::vector<int> movable = active_of(allowed, h);
  StateMask current = vector_to_mask(chain.b) & allowed;
  Eigen::VectorXd& z = chain.z;

  const std::size_t n_states = states.size();
  std::vector<std::vector<int>> active(n_states);
  for (std::size_t k = 0; k < n_states; ++k) {
    active[k] = active_of(states.masks[k], h);
  }
  std::vector<double> state_prior(n_states);
  for (std::size_t k = 0; k < n_states; ++k) {
    state_prior[k] = log_prior(states.masks[k], h, p.pi);
  }

  Eigen::VectorXd mean(d);
  Eigen::VectorXd logp(n_states);
  double log_scale = 0.0;

  EStepRow row;
  row.mean_s = Eigen::VectorXd::Zero(h);
  row.mean_sz = Eigen::VectorXd::Zero(h);
  row.mean_sz2 = Eigen::VectorXd::Zero(h);
  row.state_frequency = Eigen::VectorXd::Zero(n_states);
  row.win_yz = Eigen::MatrixXd::Zero(d, h);
  row.win_zz = Eigen::MatrixXd::Zero(d, h);
  row.win_yy = Eigen::MatrixXd::Zero(d, h);
  row.nowin_yy = Eigen::VectorXd::Zero(d);

  constexpr int kBatches = 20;
  const int batch_size = std::max(1, options.n_samples / kBatches);
  Eigen::MatrixXd batch_freq = Eigen::MatrixXd::Zero(n_states, kBatches);
  std::vector<int> batch_count(kBatches, 0);

  const int total = options.burn_in + options.n_samples;
  for (int t = 0; t < total; ++t) {
    // Binary state given slabs: enumerate K_n.
    for (std::size_t k = 0; k < n_states; ++k) {
      max_mean(p.W, active[k], z, h, mean);
      logp[k] = state_prior[k] + log_gauss_obs(yv, mean, p.sigma2);
    }
    const double lse = log_sum_exp(logp);
    double u = unif(rng);
    std::size_t chosen = n_states - 1;
    for (std::size_t k = 0; k < n_states; ++k) {
      u -= std::exp(logp[k] - lse);
      if (u <= 0.0) {
        chosen = k;
        break;
      }
    }
    current = states.masks[chosen];
    const std::vector<int>& act = active[chosen];

    // Slabs given binary state.
    int sweep_props = 0;
    int sweep_acc = 0;
    max_mean(p.W, act, z, h, mean);
    double cur_ll = log_gauss_obs(yv, mean, p.sigma2);
    for (int idx : movable) {
      const double sd = std::sqrt(p.psi[idx]);
      if (!(current >> idx & 1U)) {
        z[idx] = p.mu[idx] + sd * normal(rng);
        continue;
      }
      const double old = z[idx];
      const double prop =
          old + std::exp(log_scale) * options.initial_scale * sd * normal(rng);
      z[idx] = prop;
      max_mean(p.W, act, z, h, mean);
      const double new_ll = log_gauss_obs(yv, mean, p.sigma2);
      const double log_ratio = new_ll + log_slab(prop, p.mu[idx], p.psi[idx]) -
                               cur_ll - log_slab(old, p.mu[idx], p.psi[idx]);
      ++sweep_props;
      if (std::log(unif(rng)) < log_ratio) {
        cur_ll = new_ll;
        ++sweep_acc;
      } else {
        z[idx] = old;
      }
    }

    if (t < options.burn_in) {
      if (sweep_props > 0) {
        const double rate = static_cast<double>(sweep_acc) / sweep_props;
        log_scale += (rate - options.target_acceptance) / std::sqrt(t + 1.0);
      }
      continue;
    }
    row.proposals += sweep_props;
    row.accepted += sweep_acc;

    const int sample = t - options.burn_in;
    row.state_frequency[chosen] += 1.0;
    const int batch = std::min(sample / batch_size, kBatches - 1);
    batch_freq(chosen, batch) += 1.0;
    ++batch_count[batch];
    for (int a : act) {
      row.mean_s[a] += 1.0;
      row.mean_sz[a] += z[a];
      row.mean_sz2[a] += z[a] * z[a];
    }
    const bool all_active = static_cast<int>(act.size()) == h;
    for (Eigen::Index i = 0; i < d; ++i) {
      int winner = -1;
      double best = -std::numeric_limits<double>::infinity();
      for (int a : act) {
        const double v = z[a] * p.W(i, a);
        if (v > best) {
          best = v;
          winner = a;
        }
      }
      const double yi = yv[i];
      if (winner >= 0 && (all_active || best > 0.0)) {
        row.win_yz(i, winner) += yi * z[winner];
        row.win_zz(i, winner) += z[winner] * z[winner];
        row.win_yy(i, winner) += yi * yi;
      } else {
        row.nowin_yy[i] += yi * yi;
      }
    }
  }
  chain.b = mask_to_vector(current, h);

  const double ns = options.n_samples;
  row.mean_s /= ns;
  row.mean_sz /= ns;
  row.mean_sz2 /= ns;
  row.state_frequency /= ns;
  row.win_yz /= ns;
  row.win_zz /= ns;
  row.win_yy /= ns;
  row.nowin_yy /= ns;

  // Batch-means standard error of the state frequencies.
  row.state_frequency_se = Eigen::VectorXd::Zero(n_states);
  int used = 0;
  Eigen::MatrixXd means(n_states, kBatches);
  for (int b = 0; b < kBatches; ++b) {
    if (batch_count[b] == 0) continue;
    means.col(used++) = batch_freq.col(b) / batch_count[b];
  }
  if (used >= 2) {
    const Eigen::MatrixXd m = means.leftCols(used);
    const Eigen::VectorXd mu = m.rowwise().mean();
    const Eigen::VectorXd var =
        (m.colwise() - mu).rowwise().squaredNorm() / (used - 1.0);
    row.state_frequency_se = (var / used).cwiseSqrt();
  }
  // A frequency from n draws cannot resolve below 1/n; an all-equal batch
  // set would otherwise report zero error.
  row.state_frequency_se = row.state_frequency_se.cwiseMax(1.0 / ns);
  return row;
}

SufficientStats::SufficientStats(int d, int h)
    : sum_s(Eigen::VectorXd::Zero(h)),
      sum_sz(Eigen::VectorXd::Zero(h)),
      sum_sz2(Eigen::VectorXd::Zero(h)),
      win_yz(Eigen::MatrixXd::Zero(d, h)),
      win_zz(Eigen::MatrixXd::Zero(d, h)),
      win_yy(Eigen::MatrixXd::Zero(d, h)),
      nowin_yy(Eigen::VectorXd::Zero(d)) {}

void SufficientStats::add(const EStepRow& row) {
  ++num_points;
  sum_s += row.mean_s;
  sum_sz += row.mean_sz;
  sum_sz2 += row.mean_sz2;
  win_yz += row.win_yz;
  win_zz += row.win_zz;
  win_yy += row.win_yy;
  nowin_yy += row.nowin_yy;
}

NLSSParams mstep(const SufficientStats& stats, const NLSSParams& previous,
                 std::vector<std::string>* warnings) {
  if (stats.num_points < 1) {
    throw std::invalid_argument("nlss::mstep: no data accumulated");
  }
  const double n = stats.num_points;
  const Eigen::Index d = stats.win_yz.rows();
  const Eigen::Index h = stats.win_yz.cols();
  NLSSParams out = previous;
  int unsupported = 0;
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index a = 0; a < h; ++a) {
      if (stats.win_zz(i, a) > 1e-12) {
        out.W(i, a) = stats.win_yz(i, a) / stats.win_zz(i, a);
      } else {
        ++unsupported;
      }
    }
  }
  if (unsupported > 0 && warnings) warnings->push_back("nlss_w_unsupported");
  double resid = stats.nowin_yy.sum();
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index a = 0; a < h; ++a) {
      const double w = out.W(i, a);
      resid += stats.win_yy(i, a) - 2.0 * w * stats.win_yz(i, a) +
               w * w * stats.win_zz(i, a);
    }
  }
  out.sigma2 = std::max(resid / (n * static_cast<double>(d)), kSigma2Floor);
  out.pi = std::clamp(stats.sum_s.sum() / (n * static_cast<double>(h)), kPiMin,
                      kPiMax);
  for (Eigen::Index a = 0; a < h; ++a) {
    const double ns = stats.sum_s[a];
    if (ns < 1e-8) continue;
    out.mu[a] = stats.sum_sz[a] / ns;
    out.psi[a] =
        std::max(stats.sum_sz2[a] / ns - out.mu[a] * out.mu[a], kPsiFloor);
  }
  return out;
}

MonteCarloValue truncated_log_marginal(const NLSSParams& p,
                                       const Eigen::Ref<const Eigen::VectorXd>& y,
                                       const StateSetRow& states, int draws,
                                       Rng& rng) {
  const int h = static_cast<int>(p.W.cols());
  check_states(states, h);
  if (draws < 2) throw std::invalid_argument("truncated_log_marginal: draws < 2");
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::VectorXd yv = y;
  const std::size_t n_states = states.size();
  std::vector<std::vector<int>> active(n_states);
  Eigen::VectorXd prior(n_states);
  for (std::size_t k = 0; k < n_states; ++k) {
    active[k] = active_of(states.masks[k], h);
    prior[k] = log_prior(states.masks[k], h, p.pi);
  }
  Eigen::VectorXd z = p.mu;
  Eigen::VectorXd mean(p.W.rows());
  Eigen::VectorXd lk(n_states);
  Eigen::VectorXd lg(draws);
  const std::vector<int> movable = active_of(support_mask(states), h);
  for (int m = 0; m < draws; ++m) {
    for (int idx : movable) {
      z[idx] = p.mu[idx] + std::sqrt(p.psi[idx]) * normal(rng);
    }
    for (std::size_t k = 0; k < n_states; ++k) {
      max_mean(p.W, active[k], z, h, mean);
      lk[k] = prior[k] + log_gauss_obs(yv, mean, p.sigma2);
    }
    lg[m] = log_sum_exp(lk);
  }
  const double mx = lg.maxCoeff();
  const Eigen::ArrayXd w = (lg.array() - mx).exp();
  const double mw = w.mean();
  MonteCarloValue out;
  out.value = mx + std::log(mw);
  const double var = (w - mw).square().sum() / (draws - 1.0);
  out.std_error = std::sqrt(var / draws) / mw;
  return out;
}

}  // namespace nlss

// ---------------------------------------------------------------- GMM

namespace gmm {

double log_component(const GMMParams& p,
                     const Eigen::Ref<const Eigen::VectorXd>& y, int c) {
  const double d = static_cast<double>(p.means.cols());
  const double var = p.variances[c];
  return std::log(p.weights[c]) - 0.5 * d * (kLog2Pi + std::log(var)) -
         0.5 * (y - p.means.row(c).transpose()).squaredNorm() / var;
}

EStepRow estep(const GMMParams& p, const Eigen::Ref<const Eigen::VectorXd>& y,
               const SelectedIndices& clusters) {
  const Eigen::Index c_total = p.means.rows();
  if (clusters.empty() || static_cast<Eigen::Index>(clusters.size()) > c_total) {
    throw std::invalid_argument("gmm::estep: need 1 <= C' <= C");
  }
  Eigen::VectorXd lc(clusters.size());
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    if (clusters[i] < 0 || clusters[i] >= c_total) {
      throw std::invalid_argument("gmm::estep: cluster index out of range");
    }
    lc[i] = log_component(p, y, clusters[i]);
  }
  EStepRow row;
  row.resp = Eigen::VectorXd::Zero(c_total);
  const double lse = log_sum_exp(lc);
  if (!std::isfinite(lse)) {
    row.underflow = true;
    for (int c : clusters) row.resp[c] = 1.0 / static_cast<double>(clusters.size());
    row.log_normalizer = lse;
    return row;
  }
  row.log_normalizer = lse;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    row.resp[clusters[i]] = std::exp(lc[i] - lse);
  }
  return row;
}

GMMParams mstep(const Eigen::MatrixXd& resp, const Eigen::MatrixXd& Y, Rng& rng,
                std::vector<std::string>* warnings) {
  if (resp.rows() != Y.rows()) {
    throw std::invalid_argument("gmm::mstep: responsibilities and data differ");
  }
  const Eigen::Index n = Y.rows();
  const Eigen::Index c_total = resp.cols();
  const double d = static_cast<double>(Y.cols());
  GMMParams out;
  out.means = Eigen::MatrixXd::Zero(c_total, Y.cols());
  out.variances = Eigen::VectorXd::Zero(c_total);
  out.weights = Eigen::VectorXd::Zero(c_total);
  const Eigen::VectorXd totals = resp.colwise().sum().transpose();

  double global_var = 0.0;
  {
    const Eigen::RowVectorXd gm = Y.colwise().mean();
    global_var = (Y.rowwise() - gm).squaredNorm() / (static_cast<double>(n) * d);
    global_var = std::max(global_var, kVarianceFloor);
  }
  for (Eigen::Index c = 0; c < c_total; ++c) {
    if (totals[c] < 1e-8) {
      std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
      out.means.row(c) = Y.row(pick(rng));
      out.variances[c] = global_var;
      out.weights[c] = 1e-8;
      if (warnings) warnings->push_back("gmm_cluster_reinit");
      continue;
    }
    out.means.row(c) = resp.col(c).transpose() * Y / totals[c];
    const double ss =
        (resp.col(c).array() *
         (Y.rowwise() - out.means.row(c)).rowwise().squaredNorm().array())
            .sum();
    out.variances[c] = std::max(ss / (d * totals[c]), kVarianceFloor);
    out.weights[c] = totals[c];
  }
  out.weights /= out.weights.sum();
  return out;
}

double free_energy(const GMMParams& p, const Eigen::MatrixXd& Y,
                   const Eigen::MatrixXd& resp) {
  double f = 0.0;
  for (Eigen::Index n = 0; n < Y.rows(); ++n) {
    for (Eigen::Index c = 0; c < resp.cols(); ++c) {
      const double r = resp(n, c);
      if (r <= 0.0) continue;
      f += r * (log_component(p, Y.row(n).transpose(), static_cast<int>(c)) -
                std::log(r));
    }
  }
  return f;
}

}  // namespace gmm

}  // namespace gpselect
