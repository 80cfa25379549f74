#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "gpselect/gp_regression.hpp"
#include "gpselect/params.hpp"
#include "gpselect/rng.hpp"

namespace gpselect {

// N x H affinities; entry (n, h) scores latent h for data point n.
using AffinityMatrix = Eigen::MatrixXd;

// Selected latent indices for one data point (0-based, sorted ascending).
using SelectedIndices = std::vector<int>;

// Binary latent states are stored as bit masks (bit h <=> s_h = 1).
using StateMask = std::uint64_t;
inline constexpr int kMaxLatents = 64;

// Truncated state set K_n of one data point.
struct StateSetRow {
  int num_latents = 0;
  SelectedIndices selected;
  std::vector<StateMask> masks;

  std::size_t size() const { return masks.size(); }
  Eigen::VectorXd state(std::size_t i) const;
};

Eigen::VectorXd mask_to_vector(StateMask mask, int num_latents);
StateMask vector_to_mask(const Eigen::VectorXd& s);

// Number of randomly drawn indices among `selected` entries. Always leaves
// at least one affinity-ranked index when selected >= 2.
int random_count(int selected, double random_fraction);

// Keeps the top (H' - R) affinities (ties to the lower index) and draws R
// further indices uniformly without replacement from the rest.
SelectedIndices rank_and_truncate(const Eigen::Ref<const Eigen::VectorXd>& row,
                                  int selected, double random_fraction,
                                  Rng& rng);

// All 2^H' configurations over the selected indices, in binary counting
// order over the ascending index list (bit j of the counter <=> index j).
StateSetRow build_state_set(const SelectedIndices& selected, int num_latents);

// Adds the one-hot states of all latents outside the selected set.
void append_singletons(StateSetRow& row);

// Union of the active bits of all states in the row.
StateMask support_mask(const StateSetRow& row);

AffinityMatrix gp_affinity(const GPFit& fit);

// <W_h, y> / |W_h|; zero-norm columns score -inf.
AffinityMatrix cosine_affinity(const Eigen::MatrixXd& W,
                               const Eigen::MatrixXd& Y);

// log N(y; mu_h W_h, sigma2 I + psi_h W_h W_h^T): the likelihood of y under
// the state with only latent h active, slab integrated out.
AffinityMatrix singleton_affinity(const SSParams& params,
                                  const Eigen::MatrixXd& Y);

}  // namespace gpselect
