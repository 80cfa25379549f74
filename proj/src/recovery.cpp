#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "gpselect/em_engine.hpp"

namespace gpselect {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Greedy one-to-one assignment on a score matrix (rows: true, cols: learned),
// highest score first, ties to the lower (true, learned) pair.
std::vector<int> greedy_assign(const Eigen::MatrixXd& score,
                               const std::vector<bool>& usable) {
  std::vector<std::tuple<double, int, int>> pairs;
  for (Eigen::Index i = 0; i < score.rows(); ++i) {
    for (Eigen::Index j = 0; j < score.cols(); ++j) {
      if (!usable[j]) continue;
      pairs.emplace_back(score(i, j), static_cast<int>(i), static_cast<int>(j));
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    return std::get<0>(a) > std::get<0>(b);
  });
  std::vector<int> match(score.rows(), -1);
  std::vector<bool> taken(score.cols(), false);
  for (const auto& [s, i, j] : pairs) {
    if (match[i] >= 0 || taken[j]) continue;
    match[i] = j;
    taken[j] = true;
  }
  return match;
}

Eigen::MatrixXd cosine_matrix(const Eigen::MatrixXd& W_true,
                              const Eigen::MatrixXd& W_learned,
                              std::vector<bool>& usable) {
  usable.assign(W_learned.cols(), true);
  Eigen::MatrixXd C = W_true.transpose() * W_learned;
  for (Eigen::Index j = 0; j < W_learned.cols(); ++j) {
    const double nl = W_learned.col(j).norm();
    if (!(nl > 0.0) || !std::isfinite(nl)) {
      usable[j] = false;
      continue;
    }
    C.col(j) /= nl;
  }
  for (Eigen::Index i = 0; i < W_true.cols(); ++i) {
    const double nt = W_true.col(i).norm();
    if (nt > 0.0) C.row(i) /= nt;
  }
  return C;
}

}  // namespace

RecoveryReport evaluate_recovery(const Eigen::MatrixXd& W_learned,
                                 const Eigen::MatrixXd& W_true,
                                 double threshold) {
  if (W_learned.rows() != W_true.rows()) {
    throw std::invalid_argument("evaluate_recovery: dimension mismatch");
  }
  if (W_learned.cols() < W_true.cols()) {
    throw std::invalid_argument("evaluate_recovery: fewer learned than true columns");
  }
  std::vector<bool> usable;
  const Eigen::MatrixXd C = cosine_matrix(W_true, W_learned, usable);
  RecoveryReport rep;
  rep.match = greedy_assign(C, usable);
  rep.cosine.assign(W_true.cols(), kNaN);
  for (Eigen::Index i = 0; i < W_true.cols(); ++i) {
    const int j = rep.match[i];
    if (j >= 0) rep.cosine[i] = C(i, j);
    if (j < 0 || !(rep.cosine[i] >= threshold)) ++rep.unmatched;
  }
  rep.success = rep.unmatched == 0;
  return rep;
}

Eigen::MatrixXd scoring_dictionary(const ModelParams& params) {
  return std::visit(
      [](const auto& p) -> Eigen::MatrixXd {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return p.means.transpose();
        } else if constexpr (std::is_same_v<T, BSCParams>) {
          return p.W;
        } else {
          Eigen::MatrixXd W = p.W;
          for (Eigen::Index h = 0; h < W.cols(); ++h) {
            if (p.mu[h] < 0.0) W.col(h) = -W.col(h);
          }
          return W;
        }
      },
      params);
}

std::vector<int> match_latents(const ModelParams& learned,
                               const ModelParams& truth) {
  if (kind_of(learned) != kind_of(truth)) {
    throw std::invalid_argument("match_latents: model kinds differ");
  }
  if (const auto* g = std::get_if<GMMParams>(&learned)) {
    const auto& gt = std::get<GMMParams>(truth);
    Eigen::MatrixXd score(gt.means.rows(), g->means.rows());
    for (Eigen::Index i = 0; i < score.rows(); ++i) {
      for (Eigen::Index j = 0; j < score.cols(); ++j) {
        score(i, j) = -(gt.means.row(i) - g->means.row(j)).squaredNorm();
      }
    }
    return greedy_assign(score, std::vector<bool>(score.cols(), true));
  }
  std::vector<bool> usable;
  const Eigen::MatrixXd C = cosine_matrix(scoring_dictionary(truth),
                                          scoring_dictionary(learned), usable);
  return greedy_assign(C, usable);
}

double selection_hit_rate(const std::vector<SelectedIndices>& selection,
                          const Eigen::MatrixXd& true_states,
                          const std::vector<int>& mapping) {
  if (static_cast<Eigen::Index>(selection.size()) != true_states.rows()) {
    throw std::invalid_argument("selection_hit_rate: one selection per point");
  }
  if (static_cast<Eigen::Index>(mapping.size()) != true_states.cols()) {
    throw std::invalid_argument("selection_hit_rate: mapping size mismatch");
  }
  double hits = 0.0;
  double active = 0.0;
  for (Eigen::Index n = 0; n < true_states.rows(); ++n) {
    for (Eigen::Index h = 0; h < true_states.cols(); ++h) {
      if (true_states(n, h) == 0.0) continue;
      active += 1.0;
      const int m = mapping[h];
      if (m >= 0 && std::binary_search(selection[n].begin(), selection[n].end(), m)) {
        hits += 1.0;
      }
    }
  }
  return active > 0.0 ? hits / active : kNaN;
}

double label_accuracy(const Eigen::MatrixXd& responsibilities,
                      const Eigen::VectorXi& true_labels) {
  const Eigen::Index n = responsibilities.rows();
  const int c = static_cast<int>(responsibilities.cols());
  if (true_labels.size() != n || n == 0) {
    throw std::invalid_argument("label_accuracy: size mismatch");
  }
  const int c_true = std::max(c, true_labels.maxCoeff() + 1);
  // Confusion counts: predicted x true.
  Eigen::MatrixXd confusion = Eigen::MatrixXd::Zero(c_true, c_true);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index pred = 0;
    responsibilities.row(i).maxCoeff(&pred);
    confusion(pred, true_labels[i]) += 1.0;
  }
  double best = 0.0;
  if (c_true <= 8) {
    std::vector<int> perm(c_true);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double s = 0.0;
      for (int k = 0; k < c_true; ++k) s += confusion(k, perm[k]);
      best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    const std::vector<int> m =
        greedy_assign(confusion.transpose(), std::vector<bool>(c_true, true));
    for (int k = 0; k < c_true; ++k) {
      if (m[k] >= 0) best += confusion(m[k], k);
    }
  }
  return best / static_cast<double>(n);
}

KernelShares kernel_shares(const KernelHyperparams& hp, const Eigen::MatrixXd& X) {
  KernelShares s;
  s.rbf = hp.rbf_variance;
  s.linear = hp.linear_variance * X.rowwise().squaredNorm().mean();
  s.bias = hp.bias_variance;
  const double total = s.rbf + s.linear + s.bias;
  double top = s.rbf;
  s.dominant = "rbf";
  if (s.linear > top) {
    top = s.linear;
    s.dominant = "linear";
  }
  if (s.bias > top) {
    top = s.bias;
    s.dominant = "bias";
  }
  s.dominant_share = total > 0.0 ? top / total : kNaN;
  return s;
}

}  // namespace gpselect
