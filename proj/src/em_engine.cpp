#include "gpselect/em_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "gpselect/errors.hpp"

namespace gpselect {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Static chunking keeps the work split independent of timing; every point
// writes only its own slot so results do not depend on the thread count.
template <typename Fn>
void parallel_for(Eigen::Index n, int threads, Fn&& fn) {
  const int workers =
      static_cast<int>(std::min<Eigen::Index>(std::max(threads, 1), n));
  if (workers <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const Eigen::Index chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const Eigen::Index begin = w * chunk;
    const Eigen::Index end = std::min(n, begin + chunk);
    pool.emplace_back([&, begin, end] {
      try {
        for (Eigen::Index i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

Eigen::MatrixXd zscore(const Eigen::MatrixXd& Y) {
  const Eigen::RowVectorXd mean = Y.colwise().mean();
  Eigen::MatrixXd X = Y.rowwise() - mean;
  for (Eigen::Index d = 0; d < X.cols(); ++d) {
    const double sd = std::sqrt(X.col(d).squaredNorm() /
                                static_cast<double>(std::max<Eigen::Index>(1, X.rows())));
    if (sd > 0.0) X.col(d) /= sd;
  }
  return X;
}

double mean_dim_variance(const Eigen::MatrixXd& Y) {
  const Eigen::RowVectorXd mean = Y.colwise().mean();
  return (Y.rowwise() - mean).squaredNorm() /
         (static_cast<double>(Y.rows()) * static_cast<double>(Y.cols()));
}

std::vector<int> distinct_rows(Eigen::Index n, int k, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(n) - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

SelectedIndices all_indices(int h) {
  SelectedIndices s(h);
  std::iota(s.begin(), s.end(), 0);
  return s;
}

SelectedIndices random_indices(int h, int k, Rng& rng) {
  std::vector<int> pool = all_indices(h);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, h - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  SelectedIndices out(pool.begin(), pool.begin() + k);
  std::sort(out.begin(), out.end());
  return out;
}

Eigen::MatrixXd dictionary_of(const ModelParams& params) {
  return std::visit(
      [](const auto& p) -> Eigen::MatrixXd {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return p.means.transpose();
        } else {
          return p.W;
        }
      },
      params);
}

// Singleton log-likelihood affinity for every model kind.
AffinityMatrix singleton_scores(const ModelParams& params,
                                const Eigen::MatrixXd& Y) {
  return std::visit(
      [&](const auto& p) -> AffinityMatrix {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          AffinityMatrix A(Y.rows(), p.means.rows());
          for (Eigen::Index n = 0; n < Y.rows(); ++n) {
            for (Eigen::Index c = 0; c < p.means.rows(); ++c) {
              A(n, c) = gmm::log_component(p, Y.row(n).transpose(),
                                           static_cast<int>(c));
            }
          }
          return A;
        } else if constexpr (std::is_same_v<T, BSCParams>) {
          // Unit slab without variance reproduces the BSC singleton state.
          SSParams q{p.W, p.sigma2, p.pi,
                     Eigen::VectorXd::Ones(p.W.cols()),
                     Eigen::VectorXd::Zero(p.W.cols())};
          return singleton_affinity(q, Y);
        } else {
          SSParams q{p.W, p.sigma2, p.pi, p.mu, p.psi};
          return singleton_affinity(q, Y);
        }
      },
      params);
}

void require_finite(const ModelParams& params, int iteration) {
  const bool ok = std::visit(
      [](const auto& p) -> bool {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return p.means.allFinite() && p.variances.allFinite() &&
                 p.weights.allFinite();
        } else if constexpr (std::is_same_v<T, BSCParams>) {
          return p.W.allFinite() && std::isfinite(p.sigma2) &&
                 std::isfinite(p.pi);
        } else {
          return p.W.allFinite() && std::isfinite(p.sigma2) &&
                 std::isfinite(p.pi) && p.mu.allFinite() && p.psi.allFinite();
        }
      },
      params);
  if (!ok) {
    throw NumericalError("M-step produced non-finite parameters at iteration " +
                         std::to_string(iteration));
  }
}

}  // namespace

SelectionMode parse_selection_mode(const std::string& name) {
  if (name == "gp_select") return SelectionMode::kGPSelect;
  if (name == "cosine") return SelectionMode::kCosine;
  if (name == "singleton") return SelectionMode::kSingletonLikelihood;
  if (name == "full_exact") return SelectionMode::kFullExact;
  if (name == "random") return SelectionMode::kRandom;
  throw std::invalid_argument("unknown selection mode: " + name);
}

std::string to_string(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::kGPSelect:
      return "gp_select";
    case SelectionMode::kCosine:
      return "cosine";
    case SelectionMode::kSingletonLikelihood:
      return "singleton";
    case SelectionMode::kFullExact:
      return "full_exact";
    case SelectionMode::kRandom:
      return "random";
  }
  return "gp_select";
}

TargetInit parse_target_init(const std::string& name) {
  if (name == "random") return TargetInit::kRandom;
  if (name == "from_params") return TargetInit::kFromParams;
  throw std::invalid_argument("unknown target init: " + name);
}

std::string to_string(TargetInit init) {
  return init == TargetInit::kRandom ? "random" : "from_params";
}

void EMConfig::validate() const {
  if (T < 1) throw ConfigError("T must be >= 1");
  if (T_star < 1) throw ConfigError("T_star must be >= 1");
  if (H < 1) throw ConfigError("H must be >= 1");
  if (model_kind != ModelKind::kGmm && H > kMaxLatents) {
    throw ConfigError("H must be <= 64");
  }
  if (H_prime < 1 || H_prime > H) throw ConfigError("H_prime must lie in [1, H]");
  if (model_kind != ModelKind::kGmm && H_prime > 20) {
    throw ConfigError("H_prime must be <= 20 for enumerated state sets");
  }
  if (selection_mode == SelectionMode::kFullExact &&
      model_kind != ModelKind::kGmm && H > 20) {
    throw ConfigError("full_exact selection needs H <= 20");
  }
  if (!(random_fraction >= 0.0 && random_fraction < 1.0)) {
    throw ConfigError("random_fraction must lie in [0, 1)");
  }
  if (ichol_rank && *ichol_rank < 1) throw ConfigError("ichol_rank must be >= 1");
  if (gibbs.n_samples < 1) throw ConfigError("gibbs.n_samples must be >= 1");
  if (gibbs.burn_in < 0) throw ConfigError("gibbs.burn_in must be >= 0");
  if (nlss_free_energy_draws < 2) {
    throw ConfigError("nlss_free_energy_draws must be >= 2");
  }
  if (max_grad_steps < 1) throw ConfigError("max_grad_steps must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (kernel) {
    try {
      kernel->validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("kernel: ") + e.what());
    }
  }
  if (init_targets == TargetInit::kFromParams &&
      model_kind == ModelKind::kNlss) {
    throw ConfigError("init_targets=from_params is not available for nlss");
  }
  if (initial_params) {
    if (kind_of(*initial_params) != model_kind) {
      throw ConfigError("initial_params: model kind differs from model_kind");
    }
    if (latent_count(*initial_params) != H) {
      throw ConfigError("initial_params: latent count differs from H");
    }
  }
}

std::uint64_t checksum(const Eigen::MatrixXd& M) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(M.data());
  const std::size_t n = static_cast<std::size_t>(M.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

ModelParams init_params(ModelKind kind, int num_latents, const Eigen::MatrixXd& Y,
                        Rng& rng) {
  const Eigen::Index n = Y.rows();
  if (num_latents < 1 || n < num_latents) {
    throw std::invalid_argument("init_params: need 1 <= H <= N");
  }
  const std::vector<int> rows = distinct_rows(n, num_latents, rng);
  const double var = std::max(mean_dim_variance(Y), kVarianceFloor);
  if (kind == ModelKind::kGmm) {
    GMMParams p;
    p.means.resize(num_latents, Y.cols());
    for (int c = 0; c < num_latents; ++c) p.means.row(c) = Y.row(rows[c]);
    p.variances = Eigen::VectorXd::Constant(num_latents, var);
    p.weights = Eigen::VectorXd::Constant(num_latents, 1.0 / num_latents);
    return p;
  }
  const double mean_all = Y.mean();
  const double sd = std::sqrt((Y.array() - mean_all).square().mean());
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd W(Y.cols(), num_latents);
  for (int h = 0; h < num_latents; ++h) {
    for (Eigen::Index d = 0; d < Y.cols(); ++d) {
      W(d, h) = Y(rows[h], d) + 0.01 * sd * normal(rng);
    }
  }
  const double pi = std::clamp(1.0 / num_latents, kPiMin, kPiMax);
  if (kind == ModelKind::kBsc) return BSCParams{W, var, pi};
  const Eigen::ArrayXd flat = Y.reshaped().array();
  const double positives = (flat > 0.0).cast<double>().sum();
  const double mu =
      positives > 0.0 ? (flat > 0.0).select(flat, 0.0).sum() / positives : 1.0;
  const Eigen::VectorXd mu_v = Eigen::VectorXd::Constant(num_latents, mu);
  const Eigen::VectorXd psi_v = Eigen::VectorXd::Ones(num_latents);
  if (kind == ModelKind::kSs) return SSParams{W, var, pi, mu_v, psi_v};
  return NLSSParams{W, var, pi, mu_v, psi_v};
}

Eigen::MatrixXd exact_expectations(const ModelParams& params,
                                   const Eigen::MatrixXd& Y) {
  const int h = latent_count(params);
  Eigen::MatrixXd out(Y.rows(), h);
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          const SelectedIndices all = all_indices(h);
          for (Eigen::Index n = 0; n < Y.rows(); ++n) {
            out.row(n) = gmm::estep(p, Y.row(n).transpose(), all).resp;
          }
        } else if constexpr (std::is_same_v<T, BSCParams>) {
          const StateSetRow states = build_state_set(all_indices(h), h);
          for (Eigen::Index n = 0; n < Y.rows(); ++n) {
            out.row(n) = bsc::estep(p, Y.row(n).transpose(), states).mean_s;
          }
        } else if constexpr (std::is_same_v<T, SSParams>) {
          const StateSetRow states = build_state_set(all_indices(h), h);
          for (Eigen::Index n = 0; n < Y.rows(); ++n) {
            out.row(n) = ss::estep(p, Y.row(n).transpose(), states).mean_s;
          }
        } else {
          throw std::invalid_argument(
              "exact_expectations: not available for the nonlinear model");
        }
      },
      params);
  return out;
}

EMResult run_em(const EMConfig& config, const Eigen::MatrixXd& Y,
                const std::optional<GroundTruth>& truth,
                const IterationObserver& observer,
                const std::optional<EMState>& resume) {
  config.validate();
  check_finite(Y, "data");
  const Eigen::Index N = Y.rows();
  const Eigen::Index D = Y.cols();
  const int H = config.H;
  const bool is_gmm = config.model_kind == ModelKind::kGmm;
  const bool gp_mode = config.selection_mode == SelectionMode::kGPSelect;
  if (N < 2) throw ConfigError("data needs at least two points");
  if (N < H) throw ConfigError("data has fewer points than latents");

  const Eigen::MatrixXd X = config.zscore_inputs ? zscore(Y) : Y;

  EMState st;
  if (resume) {
    st = *resume;
    if (st.targets.rows() != N || st.targets.cols() != H) {
      throw ConfigError("resume state does not match data or H");
    }
    if (kind_of(st.params) != config.model_kind ||
        latent_count(st.params) != H || observed_dim(st.params) != D) {
      throw ConfigError("resume parameters do not match the configuration");
    }
  } else {
    if (config.initial_params) {
      st.params = *config.initial_params;
    } else {
      Rng rng = derive_stream(config.seed, 0, 0, StreamPurpose::kInit);
      st.params = init_params(config.model_kind, H, Y, rng);
    }
    if (observed_dim(st.params) != D) {
      throw ConfigError("initial_params: dimension differs from the data");
    }
    validate(st.params);
    st.hp = config.kernel ? *config.kernel
                          : default_hyperparams(config.kernel_preset, X);
    if (config.init_targets == TargetInit::kFromParams) {
      st.targets = exact_expectations(st.params, Y);
    } else {
      st.targets.resize(N, H);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      for (Eigen::Index n = 0; n < N; ++n) {
        Rng rng = derive_stream(config.seed, 0, n, StreamPurpose::kTargets);
        for (int h = 0; h < H; ++h) st.targets(n, h) = unif(rng);
      }
    }
  }
  if (config.model_kind == ModelKind::kNlss &&
      static_cast<Eigen::Index>(st.chains.size()) != N) {
    st.chains.assign(N, nlss::ChainState{});
  }

  EMResult result;
  std::vector<SelectedIndices> selection(N);
  std::optional<LowRankFactor> factor;
  std::optional<KernelHyperparams> factor_hp;

  for (int t = st.completed + 1; t <= config.T; ++t) {
    const auto iter_start = Clock::now();
    IterationRecord rec;
    rec.iteration = t;
    rec.hp = st.hp;
    rec.gp_evidence = kNaN;
    rec.hyperopt_evidence = kNaN;
    rec.hit_rate = kNaN;
    rec.acceptance_rate = kNaN;
    rec.targets_in_checksum = checksum(st.targets);
    try {
      // Affinities.
      auto t0 = Clock::now();
      AffinityMatrix A;
      switch (config.selection_mode) {
        case SelectionMode::kGPSelect: {
          std::optional<GPFit> gp;
          if (config.ichol_rank) {
            const int q = std::min<int>(*config.ichol_rank, static_cast<int>(N));
            if (!factor || !factor_hp || !(*factor_hp == st.hp)) {
              factor = incomplete_cholesky(st.hp, X, q, config.ichol_tol);
              factor_hp = st.hp;
            }
            gp.emplace(fit_lowrank(st.hp, X, st.targets, *factor));
          } else {
            gp.emplace(fit(st.hp, X, st.targets));
          }
          A = gp_affinity(*gp);
          rec.gp_evidence = log_marginal_likelihood(*gp);
          break;
        }
        case SelectionMode::kCosine:
          A = cosine_affinity(dictionary_of(st.params), Y);
          break;
        case SelectionMode::kSingletonLikelihood:
          A = singleton_scores(st.params, Y);
          break;
        case SelectionMode::kFullExact:
        case SelectionMode::kRandom:
          break;
      }
      rec.times.affinity = seconds_since(t0);

      // Selection.
      t0 = Clock::now();
      const int h_prime =
          config.selection_mode == SelectionMode::kFullExact ? H : config.H_prime;
      parallel_for(N, config.threads, [&](Eigen::Index n) {
        Rng rng = derive_stream(config.seed, t, n, StreamPurpose::kSelection);
        switch (config.selection_mode) {
          case SelectionMode::kFullExact:
            selection[n] = all_indices(H);
            break;
          case SelectionMode::kRandom:
            selection[n] = random_indices(H, h_prime, rng);
            break;
          default:
            selection[n] = rank_and_truncate(A.row(n).transpose(), h_prime,
                                             config.random_fraction, rng);
        }
      });
      std::vector<StateSetRow> states;
      if (!is_gmm) {
        states.resize(N);
        parallel_for(N, config.threads, [&](Eigen::Index n) {
          states[n] = build_state_set(selection[n], H);
          if (config.append_singletons) append_singletons(states[n]);
        });
      }
      rec.times.selection = seconds_since(t0);

      if (truth) {
        rec.hit_rate = selection_hit_rate(selection, truth->states,
                                          match_latents(st.params, truth->params));
      }

      // E-step and sufficient statistics; reduction in point order.
      t0 = Clock::now();
      Eigen::MatrixXd targets_out(N, H);
      Eigen::VectorXd log_norm(N);
      ModelParams next;
      std::visit(
          [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, BSCParams>) {
              std::vector<bsc::EStepRow> rows(N);
              parallel_for(N, config.threads, [&](Eigen::Index n) {
                rows[n] = bsc::estep(p, Y.row(n).transpose(), states[n]);
              });
              bsc::SufficientStats stats(static_cast<int>(D), H);
              for (Eigen::Index n = 0; n < N; ++n) {
                targets_out.row(n) = rows[n].mean_s;
                log_norm[n] = rows[n].posterior.log_normalizer;
                stats.add(Y.row(n).transpose(), rows[n]);
              }
              rec.times.estep = seconds_since(t0);
              t0 = Clock::now();
              next = bsc::mstep(stats, p, &rec.warnings);
            } else if constexpr (std::is_same_v<T, SSParams>) {
              std::vector<ss::EStepRow> rows(N);
              parallel_for(N, config.threads, [&](Eigen::Index n) {
                rows[n] = ss::estep(p, Y.row(n).transpose(), states[n]);
              });
              ss::SufficientStats stats(static_cast<int>(D), H);
              for (Eigen::Index n = 0; n < N; ++n) {
                targets_out.row(n) = rows[n].mean_s;
                log_norm[n] = rows[n].posterior.log_normalizer;
                stats.add(Y.row(n).transpose(), rows[n]);
              }
              rec.times.estep = seconds_since(t0);
              t0 = Clock::now();
              next = ss::mstep(stats, p, &rec.warnings);
            } else if constexpr (std::is_same_v<T, NLSSParams>) {
              std::vector<nlss::EStepRow> rows(N);
              Eigen::VectorXd fe_se(N);
              parallel_for(N, config.threads, [&](Eigen::Index n) {
                Rng rng = derive_stream(config.seed, t, n, StreamPurpose::kGibbs);
                rows[n] = nlss::gibbs_estep(p, Y.row(n).transpose(), states[n],
                                            config.gibbs, rng, st.chains[n]);
                Rng fe_rng =
                    derive_stream(config.seed, t, n, StreamPurpose::kFreeEnergy);
                const auto mc = nlss::truncated_log_marginal(
                    p, Y.row(n).transpose(), states[n],
                    config.nlss_free_energy_draws, fe_rng);
                log_norm[n] = mc.value;
                fe_se[n] = mc.std_error;
              });
              nlss::SufficientStats stats(static_cast<int>(D), H);
              long proposals = 0;
              long accepted = 0;
              for (Eigen::Index n = 0; n < N; ++n) {
                targets_out.row(n) = rows[n].mean_s;
                stats.add(rows[n]);
                proposals += rows[n].proposals;
                accepted += rows[n].accepted;
              }
              rec.free_energy_se = std::sqrt(fe_se.squaredNorm());
              rec.acceptance_rate =
                  proposals > 0 ? static_cast<double>(accepted) / proposals : kNaN;
              rec.times.estep = seconds_since(t0);
              t0 = Clock::now();
              next = nlss::mstep(stats, p, &rec.warnings);
            } else {
              int underflow = 0;
              std::vector<gmm::EStepRow> rows(N);
              parallel_for(N, config.threads, [&](Eigen::Index n) {
                rows[n] = gmm::estep(p, Y.row(n).transpose(), selection[n]);
              });
              for (Eigen::Index n = 0; n < N; ++n) {
                targets_out.row(n) = rows[n].resp;
                log_norm[n] = rows[n].log_normalizer;
                if (rows[n].underflow) ++underflow;
              }
              if (underflow > 0) {
                rec.warnings.push_back("gmm_underflow:" + std::to_string(underflow));
              }
              rec.times.estep = seconds_since(t0);
              t0 = Clock::now();
              Rng rng = derive_stream(config.seed, t, 0, StreamPurpose::kReinit);
              next = gmm::mstep(targets_out, Y, rng, &rec.warnings);
            }
          },
          st.params);
      rec.free_energy = log_norm.sum();
      require_finite(next, t);
      st.params = std::move(next);
      rec.times.mstep = seconds_since(t0);

      st.targets = std::move(targets_out);
      rec.targets_out_checksum = checksum(st.targets);

      // Kernel hyperparameters, after the data loop every T* iterations.
      if (gp_mode && t % config.T_star == 0) {
        t0 = Clock::now();
        HyperoptOptions opts;
        opts.max_steps = config.max_grad_steps;
        if (config.ichol_rank) {
          opts.lowrank_rank = std::min<int>(*config.ichol_rank, static_cast<int>(N));
        }
        const HyperoptResult opt = optimize_hyperparams(st.hp, X, st.targets, opts);
        st.hp = opt.hp;
        rec.hyperopt_ran = true;
        rec.hyperopt_evidence = opt.evidence;
        rec.hyperopt_steps = opt.gradient_steps;
        if (opt.reset_to_default) rec.warnings.push_back("hyperparams_reset");
        rec.times.hyperopt = seconds_since(t0);
      }
    } catch (const NumericalError& e) {
      result.failure = std::string(e.what());
      break;
    }
    rec.times.total = seconds_since(iter_start);
    st.trace.push_back(std::move(rec));
    st.completed = t;
    if (observer) observer(st, selection);
  }

  result.params = st.params;
  result.trace = st.trace;
  result.last_selection = std::move(selection);
  result.state = std::move(st);
  return result;
}

}  // namespace gpselect
