#include "gpselect/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "gpselect/errors.hpp"

namespace gpselect {

namespace {

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double parse_double(const std::string& s) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

const Json& field(const Json& j, const char* key) {
  if (!j.contains(key)) {
    throw std::invalid_argument(std::string("missing field '") + key + "'");
  }
  return j.at(key);
}

}  // namespace

Json number_to_json(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return x;
}

double number_from_json(const Json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw std::invalid_argument("expected a number, got " + j.dump());
}

Json matrix_to_json(const Eigen::MatrixXd& M) {
  Json data = Json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) data.push_back(number_to_json(M(r, c)));
  }
  return Json{{"rows", M.rows()}, {"cols", M.cols()}, {"data", data}};
}

Eigen::MatrixXd matrix_from_json(const Json& j) {
  const auto rows = field(j, "rows").get<Eigen::Index>();
  const auto cols = field(j, "cols").get<Eigen::Index>();
  const Json& data = field(j, "data");
  if (rows < 0 || cols < 0 ||
      data.size() != static_cast<std::size_t>(rows * cols)) {
    throw std::invalid_argument("matrix: data length does not match rows*cols");
  }
  Eigen::MatrixXd M(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) M(r, c) = number_from_json(data[k++]);
  }
  return M;
}

Json vector_to_json(const Eigen::VectorXd& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number_to_json(v[i]));
  return out;
}

Eigen::VectorXd vector_from_json(const Json& j) {
  if (!j.is_array()) throw std::invalid_argument("expected an array");
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = number_from_json(j[i]);
  return v;
}

Json params_to_json(const ModelParams& params) {
  Json j;
  j["model"] = to_string(kind_of(params));
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          j["C"] = p.means.rows();
          j["D"] = p.means.cols();
          j["means"] = matrix_to_json(p.means);
          j["variances"] = vector_to_json(p.variances);
          j["weights"] = vector_to_json(p.weights);
        } else {
          j["D"] = p.W.rows();
          j["H"] = p.W.cols();
          j["W"] = matrix_to_json(p.W);
          j["sigma2"] = number_to_json(p.sigma2);
          j["pi"] = number_to_json(p.pi);
          if constexpr (!std::is_same_v<T, BSCParams>) {
            j["mu"] = vector_to_json(p.mu);
            j["psi"] = vector_to_json(p.psi);
          }
        }
      },
      params);
  return j;
}

ModelParams params_from_json(const Json& j) {
  const ModelKind kind = parse_model_kind(field(j, "model").get<std::string>());
  ModelParams out;
  if (kind == ModelKind::kGmm) {
    GMMParams p;
    p.means = matrix_from_json(field(j, "means"));
    p.variances = vector_from_json(field(j, "variances"));
    p.weights = vector_from_json(field(j, "weights"));
    if (field(j, "C").get<Eigen::Index>() != p.means.rows() ||
        field(j, "D").get<Eigen::Index>() != p.means.cols()) {
      throw std::invalid_argument("params: C/D disagree with means");
    }
    out = p;
  } else {
    const Eigen::MatrixXd W = matrix_from_json(field(j, "W"));
    if (field(j, "D").get<Eigen::Index>() != W.rows() ||
        field(j, "H").get<Eigen::Index>() != W.cols()) {
      throw std::invalid_argument("params: D/H disagree with W");
    }
    const double sigma2 = number_from_json(field(j, "sigma2"));
    const double pi = number_from_json(field(j, "pi"));
    if (kind == ModelKind::kBsc) {
      out = BSCParams{W, sigma2, pi};
    } else {
      const Eigen::VectorXd mu = vector_from_json(field(j, "mu"));
      const Eigen::VectorXd psi = vector_from_json(field(j, "psi"));
      if (kind == ModelKind::kSs) {
        out = SSParams{W, sigma2, pi, mu, psi};
      } else {
        out = NLSSParams{W, sigma2, pi, mu, psi};
      }
    }
  }
  validate(out);
  return out;
}

Json hyperparams_to_json(const KernelHyperparams& hp) {
  Json j = Json::object();
  for (const auto& [k, v] : to_record(hp)) j[k] = number_to_json(v);
  return j;
}

KernelHyperparams hyperparams_from_json(const Json& j) {
  std::map<std::string, double> rec;
  for (const auto& [k, v] : j.items()) rec[k] = number_from_json(v);
  return from_record(rec);
}

Json record_to_json(const IterationRecord& r) {
  return Json{
      {"iteration", r.iteration},
      {"free_energy", number_to_json(r.free_energy)},
      {"free_energy_se", number_to_json(r.free_energy_se)},
      {"hp", hyperparams_to_json(r.hp)},
      {"gp_evidence", number_to_json(r.gp_evidence)},
      {"hyperopt_ran", r.hyperopt_ran},
      {"hyperopt_evidence", number_to_json(r.hyperopt_evidence)},
      {"hyperopt_steps", r.hyperopt_steps},
      {"times",
       {{"affinity", r.times.affinity},
        {"selection", r.times.selection},
        {"estep", r.times.estep},
        {"mstep", r.times.mstep},
        {"hyperopt", r.times.hyperopt},
        {"total", r.times.total}}},
      {"hit_rate", number_to_json(r.hit_rate)},
      {"acceptance_rate", number_to_json(r.acceptance_rate)},
      {"targets_in_checksum", r.targets_in_checksum},
      {"targets_out_checksum", r.targets_out_checksum},
      {"warnings", r.warnings},
      {"snapshot", r.snapshot},
  };
}

IterationRecord record_from_json(const Json& j) {
  IterationRecord r;
  r.iteration = field(j, "iteration").get<int>();
  r.free_energy = number_from_json(field(j, "free_energy"));
  r.free_energy_se = number_from_json(field(j, "free_energy_se"));
  r.hp = hyperparams_from_json(field(j, "hp"));
  r.gp_evidence = number_from_json(field(j, "gp_evidence"));
  r.hyperopt_ran = field(j, "hyperopt_ran").get<bool>();
  r.hyperopt_evidence = number_from_json(field(j, "hyperopt_evidence"));
  r.hyperopt_steps = field(j, "hyperopt_steps").get<int>();
  const Json& t = field(j, "times");
  r.times.affinity = field(t, "affinity").get<double>();
  r.times.selection = field(t, "selection").get<double>();
  r.times.estep = field(t, "estep").get<double>();
  r.times.mstep = field(t, "mstep").get<double>();
  r.times.hyperopt = field(t, "hyperopt").get<double>();
  r.times.total = field(t, "total").get<double>();
  r.hit_rate = number_from_json(field(j, "hit_rate"));
  r.acceptance_rate = number_from_json(field(j, "acceptance_rate"));
  r.targets_in_checksum = field(j, "targets_in_checksum").get<std::uint64_t>();
  r.targets_out_checksum = field(j, "targets_out_checksum").get<std::uint64_t>();
  r.warnings = field(j, "warnings").get<std::vector<std::string>>();
  r.snapshot = field(j, "snapshot").get<std::string>();
  return r;
}

Json state_to_json(const EMState& s) {
  Json chains = Json::array();
  for (const auto& c : s.chains) {
    chains.push_back(Json{{"b", vector_to_json(c.b)}, {"z", vector_to_json(c.z)}});
  }
  Json trace = Json::array();
  for (const auto& r : s.trace) trace.push_back(record_to_json(r));
  return Json{{"completed", s.completed},
              {"params", params_to_json(s.params)},
              {"hp", hyperparams_to_json(s.hp)},
              {"targets", matrix_to_json(s.targets)},
              {"chains", chains},
              {"trace", trace}};
}

EMState state_from_json(const Json& j) {
  EMState s;
  s.completed = field(j, "completed").get<int>();
  s.params = params_from_json(field(j, "params"));
  s.hp = hyperparams_from_json(field(j, "hp"));
  s.targets = matrix_from_json(field(j, "targets"));
  for (const auto& c : field(j, "chains")) {
    s.chains.push_back(
        nlss::ChainState{vector_from_json(field(c, "b")), vector_from_json(field(c, "z"))});
  }
  for (const auto& r : field(j, "trace")) s.trace.push_back(record_from_json(r));
  if (static_cast<int>(s.trace.size()) != s.completed) {
    throw std::invalid_argument("checkpoint: trace length differs from completed");
  }
  return s;
}

const std::vector<std::string>& trace_columns() {
  static const std::vector<std::string> cols = {
      "iteration",        "free_energy",        "free_energy_se",
      "rbf_variance",     "rbf_lengthscale",    "linear_variance",
      "bias_variance",    "noise_variance",     "gp_evidence",
      "hyperopt_ran",     "hyperopt_evidence",  "hyperopt_steps",
      "t_affinity",       "t_selection",        "t_estep",
      "t_mstep",          "t_hyperopt",         "t_total",
      "hit_rate",         "acceptance_rate",    "targets_in_checksum",
      "targets_out_checksum", "warnings",       "snapshot"};
  return cols;
}

std::string trace_to_csv(const EMTrace& trace) {
  std::ostringstream out;
  const auto& cols = trace_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : trace) {
    std::string warn;
    for (std::size_t i = 0; i < r.warnings.size(); ++i) {
      warn += (i ? ";" : "") + r.warnings[i];
    }
    out << r.iteration << ',' << fmt_double(r.free_energy) << ','
        << fmt_double(r.free_energy_se) << ',' << fmt_double(r.hp.rbf_variance)
        << ',' << fmt_double(r.hp.rbf_lengthscale) << ','
        << fmt_double(r.hp.linear_variance) << ','
        << fmt_double(r.hp.bias_variance) << ','
        << fmt_double(r.hp.noise_variance) << ',' << fmt_double(r.gp_evidence)
        << ',' << (r.hyperopt_ran ? 1 : 0) << ','
        << fmt_double(r.hyperopt_evidence) << ',' << r.hyperopt_steps << ','
        << fmt_double(r.times.affinity) << ',' << fmt_double(r.times.selection)
        << ',' << fmt_double(r.times.estep) << ',' << fmt_double(r.times.mstep)
        << ',' << fmt_double(r.times.hyperopt) << ','
        << fmt_double(r.times.total) << ',' << fmt_double(r.hit_rate) << ','
        << fmt_double(r.acceptance_rate) << ',' << r.targets_in_checksum << ','
        << r.targets_out_checksum << ',' << warn << ',' << r.snapshot << '\n';
  }
  return out.str();
}

EMTrace trace_from_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw std::invalid_argument("trace: empty file");
  const auto header = split(lines[0], ',');
  if (header != trace_columns()) {
    throw std::invalid_argument("trace: unexpected header");
  }
  EMTrace trace;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    if (f.size() != header.size()) {
      throw std::invalid_argument("trace: wrong field count on line " +
                                  std::to_string(i + 1));
    }
    IterationRecord r;
    r.iteration = std::stoi(f[0]);
    r.free_energy = parse_double(f[1]);
    r.free_energy_se = parse_double(f[2]);
    r.hp.rbf_variance = parse_double(f[3]);
    r.hp.rbf_lengthscale = parse_double(f[4]);
    r.hp.linear_variance = parse_double(f[5]);
    r.hp.bias_variance = parse_double(f[6]);
    r.hp.noise_variance = parse_double(f[7]);
    r.gp_evidence = parse_double(f[8]);
    r.hyperopt_ran = f[9] == "1";
    r.hyperopt_evidence = parse_double(f[10]);
    r.hyperopt_steps = std::stoi(f[11]);
    r.times.affinity = parse_double(f[12]);
    r.times.selection = parse_double(f[13]);
    r.times.estep = parse_double(f[14]);
    r.times.mstep = parse_double(f[15]);
    r.times.hyperopt = parse_double(f[16]);
    r.times.total = parse_double(f[17]);
    r.hit_rate = parse_double(f[18]);
    r.acceptance_rate = parse_double(f[19]);
    r.targets_in_checksum = std::stoull(f[20]);
    r.targets_out_checksum = std::stoull(f[21]);
    if (!f[22].empty()) r.warnings = split(f[22], ';');
    r.snapshot = f[23];
    trace.push_back(std::move(r));
  }
  return trace;
}

std::string selection_csv_header() { return "iteration,point,selected\n"; }

std::string selection_csv_rows(int iteration,
                               const std::vector<SelectedIndices>& selection) {
  std::string out;
  for (std::size_t n = 0; n < selection.size(); ++n) {
    out += std::to_string(iteration) + ',' + std::to_string(n) + ',';
    for (std::size_t k = 0; k < selection[n].size(); ++k) {
      if (k) out += ';';
      out += std::to_string(selection[n][k]);
    }
    out += '\n';
  }
  return out;
}

SelectionLog selections_from_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] + "\n" != selection_csv_header()) {
    throw std::invalid_argument("selections: unexpected header");
  }
  SelectionLog log;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    if (f.size() != 3) throw std::invalid_argument("selections: bad line");
    const int it = std::stoi(f[0]);
    const std::size_t point = std::stoul(f[1]);
    if (log.iterations.empty() || log.iterations.back() != it) {
      if (!log.iterations.empty() && it < log.iterations.back()) {
        throw std::invalid_argument("selections: iterations out of order");
      }
      log.iterations.push_back(it);
      log.selections.emplace_back();
    }
    auto& sel = log.selections.back();
    if (point != sel.size()) throw std::invalid_argument("selections: points out of order");
    SelectedIndices idx;
    if (!f[2].empty()) {
      for (const auto& s : split(f[2], ';')) idx.push_back(std::stoi(s));
    }
    sel.push_back(std::move(idx));
  }
  return log;
}

std::string matrix_to_csv(const Eigen::MatrixXd& M) {
  std::string out;
  out.reserve(static_cast<std::size_t>(M.size()) * 24);
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) {
      if (c) out += ',';
      out += fmt_double(M(r, c));
    }
    out += '\n';
  }
  return out;
}

Eigen::MatrixXd matrix_from_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) return Eigen::MatrixXd(0, 0);
  const std::size_t cols = split(lines[0], ',').size();
  Eigen::MatrixXd M(lines.size(), cols);
  for (std::size_t r = 0; r < lines.size(); ++r) {
    const auto f = split(lines[r], ',');
    if (f.size() != cols) {
      throw std::invalid_argument("csv: ragged row " + std::to_string(r + 1));
    }
    for (std::size_t c = 0; c < cols; ++c) M(r, c) = parse_double(f[c]);
  }
  return M;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

Json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw IoError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const Json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace gpselect
