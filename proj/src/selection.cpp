#include "gpselect/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace gpselect {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}

Eigen::VectorXd mask_to_vector(StateMask mask, int num_latents) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(num_latents);
  for (int h = 0; h < num_latents; ++h) {
    if (mask >> h & 1U) s[h] = 1.0;
  }
  return s;
}

StateMask vector_to_mask(const Eigen::VectorXd& s) {
  if (s.size() > kMaxLatents) {
    throw std::invalid_argument("state vector exceeds 64 latents");
  }
  StateMask m = 0;
  for (Eigen::Index h = 0; h < s.size(); ++h) {
    if (s[h] != 0.0) m |= StateMask{1} << h;
  }
  return m;
}

Eigen::VectorXd StateSetRow::state(std::size_t i) const {
  return mask_to_vector(masks.at(i), num_latents);
}

int random_count(int selected, double random_fraction) {
  if (random_fraction <= 0.0 || selected <= 1) return 0;
  const int r = static_cast<int>(std::ceil(random_fraction * selected - 1e-12));
  return std::min(r, selected - 1);
}

SelectedIndices rank_and_truncate(const Eigen::Ref<const Eigen::VectorXd>& row,
                                  int selected, double random_fraction,
                                  Rng& rng) {
  const int h = static_cast<int>(row.size());
  if (selected < 1 || selected > h) {
    throw std::invalid_argument("rank_and_truncate: need 1 <= H' <= H");
  }
  if (!(random_fraction >= 0.0 && random_fraction < 1.0)) {
    throw std::invalid_argument(
        "rank_and_truncate: random_fraction must lie in [0, 1)");
  }
  std::vector<int> order(h);
  std::iota(order.begin(), order.end(), 0);
  // NaN affinities rank last.
  auto key = [&](int i) {
    const double v = row[i];
    return std::isnan(v) ? -std::numeric_limits<double>::infinity() : v;
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return key(a) > key(b); });

  const int r = random_count(selected, random_fraction);
  const int top = selected - r;
  SelectedIndices out(order.begin(), order.begin() + top);
  if (r > 0) {
    std::vector<int> pool(order.begin() + top, order.end());
    std::sort(pool.begin(), pool.end());
    // Partial Fisher-Yates.
    for (int k = 0; k < r; ++k) {
      std::uniform_int_distribution<int> pick(k, static_cast<int>(pool.size()) - 1);
      std::swap(pool[k], pool[pick(rng)]);
      out.push_back(pool[k]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

StateSetRow build_state_set(const SelectedIndices& selected, int num_latents) {
  if (num_latents < 1 || num_latents > kMaxLatents) {
    throw std::invalid_argument("build_state_set: H must be in [1, 64]");
  }
  if (selected.size() > 30) {
    throw std::invalid_argument("build_state_set: H' too large to enumerate");
  }
  StateSetRow row;
  row.num_latents = num_latents;
  row.selected = selected;
  std::sort(row.selected.begin(), row.selected.end());
  for (std::size_t i = 1; i < row.selected.size(); ++i) {
    if (row.selected[i] == row.selected[i - 1]) {
      throw std::invalid_argument("build_state_set: duplicate index");
    }
  }
  for (int idx : row.selected) {
    if (idx < 0 || idx >= num_latents) {
      throw std::invalid_argument("build_state_set: index out of range");
    }
  }
  const std::size_t count = std::size_t{1} << row.selected.size();
  row.masks.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    StateMask m = 0;
    for (std::size_t j = 0; j < row.selected.size(); ++j) {
      if (k >> j & 1U) m |= StateMask{1} << row.selected[j];
    }
    row.masks[k] = m;
  }
  return row;
}

void append_singletons(StateSetRow& row) {
  StateMask selected = 0;
  for (int idx : row.selected) selected |= StateMask{1} << idx;
  for (int h = 0; h < row.num_latents; ++h) {
    const StateMask bit = StateMask{1} << h;
    if (!(selected & bit)) row.masks.push_back(bit);
  }
}

StateMask support_mask(const StateSetRow& row) {
  StateMask m = 0;
  for (StateMask s : row.masks) m |= s;
  return m;
}

AffinityMatrix gp_affinity(const GPFit& fit) { return loo_means(fit); }

AffinityMatrix cosine_affinity(const Eigen::MatrixXd& W,
                               const Eigen::MatrixXd& Y) {
  if (W.rows() != Y.cols()) {
    throw std::invalid_argument("cosine_affinity: dimension mismatch");
  }
  AffinityMatrix A = Y * W;  // N x H
  for (Eigen::Index h = 0; h < W.cols(); ++h) {
    const double norm = W.col(h).norm();
    if (norm > 0.0) {
      A.col(h) /= norm;
    } else {
      A.col(h).setConstant(-std::numeric_limits<double>::infinity());
    }
  }
  return A;
}

AffinityMatrix singleton_affinity(const SSParams& params,
                                  const Eigen::MatrixXd& Y) {
  const Eigen::Index d = params.W.rows();
  const Eigen::Index h_count = params.W.cols();
  if (Y.cols() != d) {
    throw std::invalid_argument("singleton_affinity: dimension mismatch");
  }
  const double s2 = params.sigma2;
  AffinityMatrix A(Y.rows(), h_count);
  for (Eigen::Index h = 0; h < h_count; ++h) {
    const Eigen::VectorXd w = params.W.col(h);
    const double ww = w.squaredNorm();
    const double psi = params.psi[h];
    const double denom = s2 + psi * ww;
    // Matrix determinant lemma and Sherman-Morrison for sigma2 I + psi w w^T.
    const double logdet = static_cast<double>(d) * std::log(s2) +
                          std::log1p(psi * ww / s2);
    const Eigen::MatrixXd R = Y.rowwise() - (params.mu[h] * w).transpose();
    const Eigen::VectorXd rw = R * w;
    const Eigen::VectorXd quad =
        (R.rowwise().squaredNorm().array() - psi * rw.array().square() / denom) /
        s2;
    A.col(h) = (-0.5 * (static_cast<double>(d) * kLog2Pi + logdet) -
                0.5 * quad.array())
                   .matrix();
  }
  return A;
}

}  // namespace gpselect
