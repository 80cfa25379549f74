#include "gpselect/cli_runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "gpselect/errors.hpp"

namespace gpselect {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Typed access to one JSON object level; remembers the keys it consumed so
// leftovers can be rejected.
class Section {
 public:
  Section(const Json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(label("") + "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    if (!has(key)) return fallback;
    return read<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(label(key) + "missing required key");
    return read<T>(key);
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string label(const std::string& key) const {
    return prefix_ + key + (key.empty() ? "" : ": ");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(prefix_ + k + ": unknown key");
    }
  }

 private:
  template <typename T>
  T read(const std::string& key) {
    try {
      return j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(label(key) + "wrong type (" + j_.at(key).dump() + ")");
    }
  }

  const Json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

template <typename F>
auto config_parse(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

ModelParams as_kind(const ModelParams& params, ModelKind kind) {
  if (kind_of(params) == kind) return params;
  if (kind == ModelKind::kGmm || kind_of(params) == ModelKind::kGmm) {
    throw ConfigError("ground truth and model kinds are incompatible");
  }
  return std::visit(
      [&](const auto& p) -> ModelParams {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return p;
        } else {
          const Eigen::Index h = p.W.cols();
          Eigen::VectorXd mu = Eigen::VectorXd::Ones(h);
          Eigen::VectorXd psi = Eigen::VectorXd::Ones(h);
          if constexpr (!std::is_same_v<T, BSCParams>) {
            mu = p.mu;
            psi = p.psi;
          }
          switch (kind) {
            case ModelKind::kBsc:
              return BSCParams{p.W, p.sigma2, p.pi};
            case ModelKind::kSs:
              return SSParams{p.W, p.sigma2, p.pi, mu, psi};
            default:
              return NLSSParams{p.W, p.sigma2, p.pi, mu, psi};
          }
        }
      },
      params);
}

std::string rep_name(int rep) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "rep_%03d", rep);
  return buf;
}

std::string snapshot_name(int iteration) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "snapshots/params_%04d.json", iteration);
  return buf;
}

bool is_snapshot_iteration(int t, int every, int total) {
  return t % every == 0 || t == total;
}

EMTrace with_snapshots(EMTrace trace, int every, int total) {
  for (auto& r : trace) {
    if (is_snapshot_iteration(r.iteration, every, total)) {
      r.snapshot = snapshot_name(r.iteration);
    }
  }
  return trace;
}

Json kernel_shares_json(const KernelShares& s) {
  return Json{{"rbf", s.rbf},
              {"linear", s.linear},
              {"bias", s.bias},
              {"dominant", s.dominant},
              {"dominant_share", number_to_json(s.dominant_share)}};
}

// Scores computed from a finished run against known ground truth.
Json outcome_json(const ModelParams& params, const Dataset& ds) {
  Json out = Json::object();
  if (!ds.truth) return out;
  if (kind_of(params) == ModelKind::kGmm) {
    const Eigen::MatrixXd resp = exact_expectations(params, ds.Y);
    const double acc = label_accuracy(resp, ds.labels);
    out["label_accuracy"] = acc;
    out["success"] = acc >= 0.95;
  } else {
    const ModelParams gt = as_kind(ds.truth->params, kind_of(params));
    const RecoveryReport rep =
        evaluate_recovery(scoring_dictionary(params), scoring_dictionary(gt));
    Json cos = Json::array();
    for (double c : rep.cosine) cos.push_back(number_to_json(c));
    out["success"] = rep.success;
    out["unmatched"] = rep.unmatched;
    out["cosine"] = cos;
    out["match"] = rep.match;
  }
  return out;
}

std::uint64_t dataset_checksum(const Eigen::MatrixXd& Y) { return checksum(Y); }

void prepare_output(const fs::path& dir, bool force, bool resume) {
  std::error_code ec;
  if (fs::exists(dir)) {
    const bool has_content = fs::exists(dir / "config.json") ||
                             fs::exists(dir / "summary.json") ||
                             fs::exists(dir / rep_name(0));
    if (has_content && !force && !resume) {
      throw IoError("output directory " + dir.string() +
                    " already holds a run; pass --force or --resume");
    }
    if (force && !resume) {
      for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("rep_", 0) == 0 || name == "summary.json" ||
            name == "config.json" || name == "dataset" || name == "report.json") {
          fs::remove_all(entry.path(), ec);
        }
      }
    }
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Keeps only selection rows of iterations <= completed.
void truncate_selections(const fs::path& path, int completed) {
  if (!fs::exists(path)) {
    write_file_atomic(path, selection_csv_header());
    return;
  }
  std::istringstream in(read_file(path));
  std::string line;
  std::string out;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      out += line + '\n';
      first = false;
      continue;
    }
    if (line.empty()) continue;
    const int it = std::stoi(line.substr(0, line.find(',')));
    if (it <= completed) out += line + '\n';
  }
  if (first) out = selection_csv_header();
  write_file_atomic(path, out);
}

struct RepOutcome {
  Json result;
  bool failed = false;
};

RepOutcome run_repetition(const ExperimentConfig& cfg, const Dataset& ds, int rep,
                          const fs::path& rep_dir, bool resume) {
  std::error_code ec;
  fs::create_directories(rep_dir / "snapshots", ec);
  if (ec) throw IoError("cannot create " + rep_dir.string() + ": " + ec.message());

  const fs::path result_path = rep_dir / "result.json";
  if (resume && fs::exists(result_path)) {
    const Json done = read_json(result_path);
    if (done.value("complete", false)) return {done, done.value("failed", false)};
  }

  EMConfig em = cfg.em;
  em.seed = cfg.em.seed + static_cast<std::uint64_t>(rep);
  if (cfg.init_from_truth) {
    if (!ds.truth) throw ConfigError("init: dataset has no ground truth");
    em.initial_params = as_kind(ds.truth->params, em.model_kind);
  }
  {
    KernelHyperparams hp = default_hyperparams(em.kernel_preset, ds.Y);
    if (!cfg.kernel_overrides.empty()) {
      auto rec = to_record(hp);
      for (const auto& [k, v] : cfg.kernel_overrides.items()) {
        rec[k] = v.get<double>();
      }
      hp = config_parse("kernel", [&] { return from_record(rec); });
    }
    em.kernel = hp;
  }
  em.validate();

  std::optional<EMState> resume_state;
  const fs::path ckpt_path = rep_dir / "checkpoint.json";
  if (resume && fs::exists(ckpt_path)) {
    resume_state = state_from_json(read_json(ckpt_path).at("state"));
  }
  write_json(rep_dir / "config.json", cfg.resolved);
  const fs::path sel_path = rep_dir / "selections.csv";
  truncate_selections(sel_path, resume_state ? resume_state->completed : 0);

  std::optional<GroundTruth> truth;
  if (ds.truth) {
    truth = GroundTruth{as_kind(ds.truth->params, em.model_kind), ds.truth->states};
  }

  std::ofstream sel_out(sel_path, std::ios::app);
  if (!sel_out) throw IoError("cannot write " + sel_path.string());
  const int every = cfg.checkpoint_every;
  const int total = em.T;
  auto write_checkpoint = [&](const EMState& st) {
    EMState copy = st;
    copy.trace = with_snapshots(st.trace, every, total);
    write_json(rep_dir / snapshot_name(st.completed), params_to_json(st.params));
    write_file_atomic(rep_dir / "trace.csv", trace_to_csv(copy.trace));
    write_json(rep_dir / "params.json", params_to_json(st.params));
    write_json(ckpt_path, Json{{"config", cfg.resolved}, {"state", state_to_json(copy)}});
  };
  auto observer = [&](const EMState& st, const std::vector<SelectedIndices>& sel) {
    sel_out << selection_csv_rows(st.completed, sel);
    sel_out.flush();
    if (is_snapshot_iteration(st.completed, every, total)) write_checkpoint(st);
  };

  EMResult res = run_em(em, ds.Y, truth, observer, resume_state);
  sel_out.close();

  const EMTrace trace = with_snapshots(res.trace, every, total);
  write_file_atomic(rep_dir / "trace.csv", trace_to_csv(trace));
  write_json(rep_dir / "params.json", params_to_json(res.params));

  Json result{{"rep", rep},
              {"seed", em.seed},
              {"complete", true},
              {"completed_iterations", res.state.completed},
              {"failed", res.failure.has_value()},
              {"failure", res.failure ? *res.failure : ""},
              {"final_free_energy",
               number_to_json(trace.empty() ? kNaN : trace.back().free_energy)},
              {"final_hp", hyperparams_to_json(res.state.hp)},
              {"kernel_shares", kernel_shares_json(kernel_shares(res.state.hp, ds.Y))}};
  PhaseTimes sum;
  for (const auto& r : trace) {
    sum.affinity += r.times.affinity;
    sum.selection += r.times.selection;
    sum.estep += r.times.estep;
    sum.mstep += r.times.mstep;
    sum.hyperopt += r.times.hyperopt;
    sum.total += r.times.total;
  }
  result["phase_seconds"] = Json{{"affinity", sum.affinity},   {"selection", sum.selection},
                                 {"estep", sum.estep},         {"mstep", sum.mstep},
                                 {"hyperopt", sum.hyperopt},   {"total", sum.total}};
  result["outcome"] = outcome_json(res.params, ds);
  write_json(result_path, result);
  return {result, res.failure.has_value()};
}

const Json& members(const Json& j, const char* key) {
  if (!j.contains(key)) throw IoError(std::string("missing '") + key + "'");
  return j.at(key);
}

}  // namespace

// ---------------------------------------------------------------- config

GeneratorSpec parse_generator(const Json& j) {
  Section s(j, "generator.");
  GeneratorSpec g;
  g.type = s.get<std::string>("type", g.type);
  if (g.type != "bars" && g.type != "gmm") {
    throw ConfigError("generator.type: must be 'bars' or 'gmm'");
  }
  g.N = s.get<int>("N", g.N);
  g.seed = s.get<std::uint64_t>("seed", g.seed);
  if (g.N < 1) throw ConfigError("generator.N: must be >= 1");
  if (g.type == "bars") {
    const std::string model = s.get<std::string>("model", "bsc");
    g.model = config_parse("generator.model", [&] { return parse_model_kind(model); });
    if (g.model == ModelKind::kGmm) {
      throw ConfigError("generator.model: bars data needs bsc, ss or nlss");
    }
    g.grid_side = s.get<int>("grid_side", g.grid_side);
    g.pi = s.get<double>("pi", g.pi);
    g.sigma2 = s.get<double>("sigma2", g.sigma2);
    g.slab_mu = s.get<double>("slab_mu", g.slab_mu);
    g.slab_psi = s.get<double>("slab_psi", g.slab_psi);
    g.bar_amplitude = s.get<double>("bar_amplitude", g.bar_amplitude);
    if (g.grid_side < 1) throw ConfigError("generator.grid_side: must be >= 1");
    if (!(g.pi > 0.0 && g.pi < 1.0)) throw ConfigError("generator.pi: must lie in (0, 1)");
    if (!(g.sigma2 >= 0.0)) throw ConfigError("generator.sigma2: must be >= 0");
    if (!(g.slab_psi > 0.0)) throw ConfigError("generator.slab_psi: must be > 0");
    if (!(g.bar_amplitude > 0.0)) {
      throw ConfigError("generator.bar_amplitude: must be > 0");
    }
    if (g.N < 2 * g.grid_side) throw ConfigError("generator.N: must be >= H");
  } else {
    g.model = ModelKind::kGmm;
    if (s.has("model") &&
        s.get<std::string>("model", "gmm") != "gmm") {
      throw ConfigError("generator.model: gmm data needs model 'gmm'");
    }
    g.C = s.get<int>("C", g.C);
    const std::string layout = s.get<std::string>("layout", "random");
    g.layout = config_parse("generator.layout", [&] { return parse_gmm_layout(layout); });
    g.separation = s.get<double>("separation", g.separation);
    g.dim = s.get<int>("dim", g.dim);
    if (g.C < 1) throw ConfigError("generator.C: must be >= 1");
    if (!(g.separation > 0.0)) throw ConfigError("generator.separation: must be > 0");
    if (g.dim < 1) throw ConfigError("generator.dim: must be >= 1");
  }
  s.finish();
  return g;
}

Json to_json(const GeneratorSpec& g) {
  Json j{{"type", g.type}, {"model", to_string(g.model)}, {"N", g.N}, {"seed", g.seed}};
  if (g.type == "bars") {
    j["grid_side"] = g.grid_side;
    j["pi"] = g.pi;
    j["sigma2"] = g.sigma2;
    j["slab_mu"] = g.slab_mu;
    j["slab_psi"] = g.slab_psi;
    j["bar_amplitude"] = g.bar_amplitude;
  } else {
    j["C"] = g.C;
    j["layout"] = to_string(g.layout);
    j["separation"] = g.separation;
    j["dim"] = g.dim;
  }
  return j;
}

ExperimentConfig parse_experiment(const Json& j) {
  Section s(j, "");
  ExperimentConfig c;
  EMConfig& em = c.em;
  const std::string model = s.require<std::string>("model");
  em.model_kind = config_parse("model", [&] { return parse_model_kind(model); });
  const std::string selection = s.get<std::string>("selection", "gp_select");
  em.selection_mode =
      config_parse("selection", [&] { return parse_selection_mode(selection); });
  em.T = s.get<int>("T", em.model_kind == ModelKind::kGmm ? 40 : 100);
  em.T_star = s.get<int>("T_star", 10);
  em.H = s.get<int>("H", em.H);
  em.H_prime = s.get<int>("H_prime", em.H_prime);
  em.random_fraction = s.get<double>("random_fraction", em.random_fraction);
  if (s.has("kernel")) {
    Section k(s.raw("kernel"), "kernel.");
    const std::string preset = k.get<std::string>("preset", "linear");
    em.kernel_preset =
        config_parse("kernel.preset", [&] { return parse_kernel_preset(preset); });
    for (const auto& name : hyperparam_names()) {
      if (k.has(name)) c.kernel_overrides[name] = k.get<double>(name, 0.0);
    }
    k.finish();
  }
  if (s.has("ichol_rank")) em.ichol_rank = s.get<int>("ichol_rank", 0);
  em.ichol_tol = s.get<double>("ichol_tol", em.ichol_tol);
  if (s.has("gibbs")) {
    Section g(s.raw("gibbs"), "gibbs.");
    em.gibbs.n_samples = g.get<int>("n_samples", em.gibbs.n_samples);
    em.gibbs.burn_in = g.get<int>("burn_in", em.gibbs.burn_in);
    em.gibbs.initial_scale = g.get<double>("initial_scale", em.gibbs.initial_scale);
    em.gibbs.target_acceptance =
        g.get<double>("target_acceptance", em.gibbs.target_acceptance);
    g.finish();
  }
  em.nlss_free_energy_draws =
      s.get<int>("nlss_free_energy_draws", em.nlss_free_energy_draws);
  em.seed = s.get<std::uint64_t>("seed", em.seed);
  em.max_grad_steps = s.get<int>("max_grad_steps", em.max_grad_steps);
  em.zscore_inputs = s.get<bool>("zscore_inputs", em.zscore_inputs);
  em.append_singletons = s.get<bool>("append_singletons", em.append_singletons);
  const std::string init = s.get<std::string>("init", "random");
  if (init != "random" && init != "ground_truth") {
    throw ConfigError("init: must be 'random' or 'ground_truth'");
  }
  c.init_from_truth = init == "ground_truth";
  const std::string init_targets = s.get<std::string>("init_targets", "random");
  em.init_targets =
      config_parse("init_targets", [&] { return parse_target_init(init_targets); });
  em.threads = s.get<int>("threads", em.threads);
  c.checkpoint_every = s.get<int>("checkpoint_every", c.checkpoint_every);
  c.repetitions = s.get<int>("repetitions", c.repetitions);
  if (s.has("D")) c.expected_dim = s.get<int>("D", 0);
  if (s.has("dataset")) c.dataset = s.get<std::string>("dataset", "");
  if (s.has("generator")) c.generator = parse_generator(s.raw("generator"));
  if (s.has("output_dir")) c.output_dir = s.get<std::string>("output_dir", "");
  s.finish();

  if (c.dataset && c.generator) {
    throw ConfigError("dataset: give either 'dataset' or 'generator', not both");
  }
  if (!c.dataset && !c.generator) {
    throw ConfigError("dataset: one of 'dataset' or 'generator' is required");
  }
  if (c.checkpoint_every < 1) throw ConfigError("checkpoint_every: must be >= 1");
  if (c.repetitions < 1) throw ConfigError("repetitions: must be >= 1");
  if (c.output_dir.empty()) {
    c.output_dir = default_output_root() /
                   (to_string(em.model_kind) + "_" + to_string(em.selection_mode) +
                    "_seed" + std::to_string(em.seed));
  }
  em.validate();

  Json kernel{{"preset", to_string(em.kernel_preset)}};
  for (const auto& [k, v] : c.kernel_overrides.items()) kernel[k] = v;
  c.resolved = Json{{"model", to_string(em.model_kind)},
                    {"selection", to_string(em.selection_mode)},
                    {"T", em.T},
                    {"T_star", em.T_star},
                    {"H", em.H},
                    {"H_prime", em.H_prime},
                    {"random_fraction", em.random_fraction},
                    {"kernel", kernel},
                    {"ichol_rank", em.ichol_rank ? Json(*em.ichol_rank) : Json(nullptr)},
                    {"ichol_tol", em.ichol_tol},
                    {"gibbs",
                     {{"n_samples", em.gibbs.n_samples},
                      {"burn_in", em.gibbs.burn_in},
                      {"initial_scale", em.gibbs.initial_scale},
                      {"target_acceptance", em.gibbs.target_acceptance}}},
                    {"nlss_free_energy_draws", em.nlss_free_energy_draws},
                    {"seed", em.seed},
                    {"max_grad_steps", em.max_grad_steps},
                    {"zscore_inputs", em.zscore_inputs},
                    {"append_singletons", em.append_singletons},
                    {"init", init},
                    {"init_targets", to_string(em.init_targets)},
                    {"threads", em.threads},
                    {"checkpoint_every", c.checkpoint_every},
                    {"repetitions", c.repetitions},
                    {"output_dir", c.output_dir.string()}};
  if (c.expected_dim) c.resolved["D"] = *c.expected_dim;
  if (c.dataset) c.resolved["dataset"] = c.dataset->string();
  if (c.generator) c.resolved["generator"] = to_json(*c.generator);
  return c;
}

Json apply_overrides(Json config, const std::vector<std::string>& overrides) {
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + item + "'");
    }
    const std::string path = item.substr(0, eq);
    const std::string text = item.substr(eq + 1);
    Json value;
    try {
      value = Json::parse(text);
    } catch (const Json::parse_error&) {
      value = text;
    }
    Json* node = &config;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot - start);
      if (key.empty()) throw ConfigError("--set: empty key in '" + path + "'");
      if (!node->is_object()) throw ConfigError("--set: '" + path + "' is not an object path");
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      if (!node->contains(key)) (*node)[key] = Json::object();
      node = &(*node)[key];
      start = dot + 1;
    }
  }
  return config;
}

fs::path default_output_root() {
  const char* env = std::getenv("GPSELECT_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// ---------------------------------------------------------------- datasets

Dataset generate_dataset(const GeneratorSpec& spec) {
  Rng rng = derive_stream(spec.seed, 0, 0, StreamPurpose::kInit);
  Dataset ds;
  ds.generator = to_json(spec);
  if (spec.type == "bars") {
    BarsDataset b = gen_bars(spec.model, spec.N, spec.grid_side, spec.pi,
                             spec.sigma2, spec.slab_mu, spec.slab_psi, rng,
                             spec.bar_amplitude);
    ModelParams gt = b.truth.params(spec.model);
    if (spec.sigma2 <= 0.0) {
      // Noise-free data; keep the stored parameters valid.
      std::visit(
          [](auto& p) {
            if constexpr (requires { p.sigma2; }) p.sigma2 = 1e-12;
          },
          gt);
    }
    ds.Y = std::move(b.Y);
    ds.truth = GroundTruth{std::move(gt), std::move(b.truth.states)};
  } else {
    GmmDataset g = gen_gmm(spec.N, spec.C, spec.layout, spec.separation, rng, spec.dim);
    ds.Y = std::move(g.Y);
    ds.truth = GroundTruth{g.truth, g.states()};
    ds.labels = std::move(g.labels);
  }
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file_atomic(dir / "data.csv", matrix_to_csv(ds.Y));
  Json manifest{{"N", ds.Y.rows()},
                {"D", ds.Y.cols()},
                {"data_checksum", checksum(ds.Y)},
                {"files", {"data.csv"}}};
  if (!ds.generator.is_null()) {
    manifest["generator"] = ds.generator;
    manifest["seed"] = ds.generator.value("seed", std::uint64_t{0});
  }
  if (ds.truth) {
    Json gt{{"params", params_to_json(ds.truth->params)}};
    if (ds.labels.size() > 0) {
      gt["labels"] = std::vector<int>(ds.labels.data(), ds.labels.data() + ds.labels.size());
    }
    write_json(dir / "ground_truth.json", gt);
    write_file_atomic(dir / "states.csv", matrix_to_csv(ds.truth->states));
    manifest["files"].push_back("ground_truth.json");
    manifest["files"].push_back("states.csv");
  }
  write_json(dir / "manifest.json", manifest);
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Dataset ds;
  try {
    ds.Y = matrix_from_csv(read_file(dir / "data.csv"));
  } catch (const std::invalid_argument& e) {
    throw IoError((dir / "data.csv").string() + ": " + e.what());
  }
  if (ds.Y.rows() == 0) throw IoError((dir / "data.csv").string() + ": empty");
  if (fs::exists(dir / "manifest.json")) {
    const Json m = read_json(dir / "manifest.json");
    if (m.contains("generator")) ds.generator = m.at("generator");
  }
  if (fs::exists(dir / "ground_truth.json")) {
    const Json gt = read_json(dir / "ground_truth.json");
    GroundTruth truth;
    try {
      truth.params = params_from_json(gt.at("params"));
      truth.states = matrix_from_csv(read_file(dir / "states.csv"));
    } catch (const std::invalid_argument& e) {
      throw IoError("ground truth in " + dir.string() + ": " + e.what());
    }
    if (truth.states.rows() != ds.Y.rows()) {
      throw IoError("states.csv and data.csv disagree on N in " + dir.string());
    }
    if (gt.contains("labels")) {
      const auto labels = gt.at("labels").get<std::vector<int>>();
      ds.labels = Eigen::Map<const Eigen::VectorXi>(labels.data(),
                                                    static_cast<Eigen::Index>(labels.size()));
    }
    ds.truth = std::move(truth);
  }
  return ds;
}

// ---------------------------------------------------------------- commands

void cmd_generate(const Json& spec_json, const fs::path& out_dir, bool force) {
  const GeneratorSpec spec = parse_generator(spec_json);
  if (fs::exists(out_dir / "data.csv") && !force) {
    throw IoError("dataset already exists at " + out_dir.string() + "; pass --force");
  }
  write_dataset(out_dir, generate_dataset(spec));
}

RunSummary cmd_run(const Json& config_json, const RunOptions& options) {
  ExperimentConfig cfg = parse_experiment(config_json);
  if (options.jobs < 1) throw ConfigError("jobs: must be >= 1");

  Dataset ds;
  std::string dataset_ref;
  if (cfg.dataset) {
    ds = load_dataset(*cfg.dataset);
    dataset_ref = fs::absolute(*cfg.dataset).lexically_normal().string();
  } else {
    ds = generate_dataset(*cfg.generator);
    dataset_ref = "generator";
  }
  // Compatibility checks before any compute.
  if (cfg.expected_dim && *cfg.expected_dim != ds.Y.cols()) {
    throw ConfigError("D: config expects " + std::to_string(*cfg.expected_dim) +
                      " dimensions, dataset has " + std::to_string(ds.Y.cols()));
  }
  if (ds.Y.rows() < cfg.em.H) {
    throw ConfigError("H: larger than the number of data points");
  }
  if (ds.truth) {
    const bool gt_gmm = kind_of(ds.truth->params) == ModelKind::kGmm;
    const bool run_gmm = cfg.em.model_kind == ModelKind::kGmm;
    if (gt_gmm != run_gmm) {
      throw ConfigError("model: dataset ground truth is for a different model family");
    }
    if (observed_dim(ds.truth->params) != ds.Y.cols()) {
      throw ConfigError("dataset: ground truth dimension differs from data");
    }
    if (cfg.init_from_truth && latent_count(ds.truth->params) != cfg.em.H) {
      throw ConfigError("H: init=ground_truth needs H equal to the true latent count");
    }
  } else if (cfg.init_from_truth) {
    throw ConfigError("init: dataset has no ground truth");
  }

  prepare_output(cfg.output_dir, options.force, options.resume);
  if (cfg.generator) write_dataset(cfg.output_dir / "dataset", ds);
  write_json(cfg.output_dir / "config.json", cfg.resolved);

  std::vector<RepOutcome> outcomes(cfg.repetitions);
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (true) {
      const int rep = next.fetch_add(1);
      if (rep >= cfg.repetitions) return;
      {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (error) return;
      }
      try {
        outcomes[rep] = run_repetition(cfg, ds, rep, cfg.output_dir / rep_name(rep),
                                       options.resume);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int jobs = std::min(options.jobs, cfg.repetitions);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  RunSummary out;
  Json reps = Json::array();
  int successes = 0;
  int scored = 0;
  for (const auto& o : outcomes) {
    reps.push_back(o.result);
    out.any_failure = out.any_failure || o.failed;
    const Json& outcome = o.result.at("outcome");
    if (outcome.contains("success")) {
      ++scored;
      if (outcome.at("success").get<bool>()) ++successes;
    }
  }
  out.summary = Json{{"model", to_string(cfg.em.model_kind)},
                     {"selection", to_string(cfg.em.selection_mode)},
                     {"kernel", cfg.resolved.at("kernel")},
                     {"dataset", dataset_ref},
                     {"dataset_checksum", dataset_checksum(ds.Y)},
                     {"repetitions", reps},
                     {"success_count", successes},
                     {"scored_repetitions", scored},
                     {"any_failure", out.any_failure}};
  write_json(cfg.output_dir / "summary.json", out.summary);
  return out;
}

Json cmd_evaluate(const fs::path& run_dir, const fs::path& dataset_dir) {
  const Dataset ds = load_dataset(dataset_dir);
  std::vector<fs::path> reps;
  if (fs::exists(run_dir / "params.json")) {
    reps.push_back(run_dir);
  } else {
    if (!fs::is_directory(run_dir)) throw IoError("run directory not found: " + run_dir.string());
    for (const auto& e : fs::directory_iterator(run_dir)) {
      if (e.is_directory() && e.path().filename().string().rfind("rep_", 0) == 0) {
        reps.push_back(e.path());
      }
    }
    std::sort(reps.begin(), reps.end());
  }
  if (reps.empty()) throw IoError("no runs found under " + run_dir.string());

  Json rep_reports = Json::array();
  int successes = 0;
  for (const auto& dir : reps) {
    ModelParams params;
    try {
      params = params_from_json(read_json(dir / "params.json"));
    } catch (const std::invalid_argument& e) {
      throw IoError((dir / "params.json").string() + ": " + e.what());
    }
    if (observed_dim(params) != ds.Y.cols()) {
      throw ConfigError("evaluate: run and dataset dimensions differ");
    }
    EMTrace trace;
    try {
      trace = trace_from_csv(read_file(dir / "trace.csv"));
    } catch (const std::invalid_argument& e) {
      throw IoError((dir / "trace.csv").string() + ": " + e.what());
    }
    Json r{{"run", dir.filename().string()},
           {"final_free_energy",
            number_to_json(trace.empty() ? kNaN : trace.back().free_energy)}};
    if (ds.truth) {
      r["outcome"] = outcome_json(params, ds);
      if (r["outcome"].value("success", false)) ++successes;
      SelectionLog log;
      try {
        log = selections_from_csv(read_file(dir / "selections.csv"));
      } catch (const std::invalid_argument& e) {
        throw IoError((dir / "selections.csv").string() + ": " + e.what());
      }
      const ModelParams gt = as_kind(ds.truth->params, kind_of(params));
      const std::vector<int> mapping = match_latents(params, gt);
      Json hits = Json::array();
      for (std::size_t i = 0; i < log.iterations.size(); ++i) {
        if (static_cast<Eigen::Index>(log.selections[i].size()) != ds.Y.rows()) {
          throw IoError("selections.csv: iteration " + std::to_string(log.iterations[i]) +
                        " does not cover every point");
        }
        hits.push_back(Json{
            {"iteration", log.iterations[i]},
            {"hit_rate", number_to_json(selection_hit_rate(log.selections[i],
                                                           ds.truth->states, mapping))}});
      }
      r["hit_rate"] = hits;
    }
    rep_reports.push_back(r);
  }
  Json report{{"runs", rep_reports}, {"success_count", successes}};
  write_json(run_dir / "report.json", report);
  return report;
}

Json cmd_compare(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("compare: no runs given");
  struct Loaded {
    std::string label;
    Json summary;
    std::vector<EMTrace> traces;
  };
  std::vector<Loaded> runs;
  for (const auto& dir : run_dirs) {
    Loaded l;
    l.label = dir.filename().string();
    if (l.label.empty()) l.label = dir.parent_path().filename().string();
    l.summary = read_json(dir / "summary.json");
    for (const auto& rep : members(l.summary, "repetitions")) {
      const fs::path tp = dir / rep_name(rep.at("rep").get<int>()) / "trace.csv";
      try {
        l.traces.push_back(trace_from_csv(read_file(tp)));
      } catch (const std::invalid_argument& e) {
        throw IoError(tp.string() + ": " + e.what());
      }
    }
    runs.push_back(std::move(l));
  }
  const Json& ref = runs.front().summary;
  for (const auto& l : runs) {
    if (l.summary.at("model") != ref.at("model")) {
      throw ConfigError("compare: runs use different model kinds");
    }
    if (l.summary.at("dataset_checksum") != ref.at("dataset_checksum")) {
      throw ConfigError("compare: runs use different datasets");
    }
  }

  std::string csv =
      "run,rep,iteration,free_energy,hit_rate,t_affinity,t_selection,t_estep,"
      "t_mstep,t_hyperopt,t_total\n";
  auto num = [](double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
  };
  Json runs_json = Json::array();
  for (const auto& l : runs) {
    PhaseTimes mean;
    int iters = 0;
    Json finals = Json::array();
    for (std::size_t r = 0; r < l.traces.size(); ++r) {
      for (const auto& rec : l.traces[r]) {
        csv += l.label + ',' + std::to_string(r) + ',' + std::to_string(rec.iteration) +
               ',' + num(rec.free_energy) + ',' + num(rec.hit_rate) + ',' +
               num(rec.times.affinity) + ',' + num(rec.times.selection) + ',' +
               num(rec.times.estep) + ',' + num(rec.times.mstep) + ',' +
               num(rec.times.hyperopt) + ',' + num(rec.times.total) + '\n';
        mean.affinity += rec.times.affinity;
        mean.selection += rec.times.selection;
        mean.estep += rec.times.estep;
        mean.mstep += rec.times.mstep;
        mean.hyperopt += rec.times.hyperopt;
        mean.total += rec.times.total;
        ++iters;
      }
      finals.push_back(number_to_json(l.traces[r].empty() ? kNaN
                                                           : l.traces[r].back().free_energy));
    }
    const double k = std::max(iters, 1);
    runs_json.push_back(Json{{"run", l.label},
                             {"selection", l.summary.at("selection")},
                             {"kernel", l.summary.at("kernel")},
                             {"success_count", l.summary.at("success_count")},
                             {"repetitions", l.traces.size()},
                             {"final_free_energy", finals},
                             {"mean_phase_seconds_per_iteration",
                              {{"affinity", mean.affinity / k},
                               {"selection", mean.selection / k},
                               {"estep", mean.estep / k},
                               {"mstep", mean.mstep / k},
                               {"hyperopt", mean.hyperopt / k},
                               {"total", mean.total / k}}}});
  }
  // Curve differences against the first run, per repetition, on the
  // iterations both runs share.
  Json diffs = Json::array();
  const auto& base = runs.front();
  for (const auto& l : runs) {
    Json per_rep = Json::array();
    const std::size_t reps = std::min(base.traces.size(), l.traces.size());
    for (std::size_t r = 0; r < reps; ++r) {
      const std::size_t n = std::min(base.traces[r].size(), l.traces[r].size());
      double max_abs = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = base.traces[r][i].free_energy;
        const double b = l.traces[r][i].free_energy;
        if (a == b) continue;  // also covers equal infinities
        max_abs = std::max(max_abs, std::abs(a - b));
      }
      per_rep.push_back(max_abs);
    }
    diffs.push_back(Json{{"run", l.label}, {"max_abs_free_energy_diff", per_rep}});
  }
  Json out{{"reference", base.label}, {"runs", runs_json}, {"differences", diffs}};
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_file_atomic(out_dir / "comparison.csv", csv);
  write_json(out_dir / "comparison.json", out);
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  return 1;
}

}  // namespace gpselect
