#pragma once

#include <Eigen/Dense>

#include <string>

#include "gpselect/params.hpp"
#include "gpselect/rng.hpp"

namespace gpselect {

// D x H dictionary of all horizontal (first H/2 columns) and vertical bars
// on a grid_side x grid_side image, pixel (r, c) at index r * grid_side + c.
Eigen::MatrixXd bars_dictionary(int grid_side);

struct BarsGroundTruth {
  Eigen::MatrixXd W_true;  // D x H
  double pi_true = 0.0;
  double sigma2_true = 0.0;
  Eigen::VectorXd mu_true;   // H, slab models only
  Eigen::VectorXd psi_true;  // H, slab models only
  Eigen::MatrixXd states;    // N x H, 0/1
  Eigen::MatrixXd slabs;     // N x H slab draws (zeros for BSC)

  // Generating parameters in the model's own form.
  ModelParams params(ModelKind kind) const;
};

struct BarsDataset {
  ModelKind kind = ModelKind::kBsc;
  Eigen::MatrixXd Y;  // N x D
  BarsGroundTruth truth;
};

// BSC: y = W s + e; SS: y = W (s .* z) + e; NLSS: y_d = max_h s_h z_h W_dh + e
// with e ~ N(0, sigma2 I), s_h ~ Bern(pi), z_h ~ N(slab_mu, slab_psi).
// Bar pixels of W_true have value bar_amplitude.
BarsDataset gen_bars(ModelKind kind, int N, int grid_side, double pi,
                     double sigma2, double slab_mu, double slab_psi, Rng& rng,
                     double bar_amplitude = 1.0);

enum class GmmLayout { kRandom, kCollinear };

GmmLayout parse_gmm_layout(const std::string& name);
std::string to_string(GmmLayout layout);

struct GmmDataset {
  Eigen::MatrixXd Y;  // N x dim
  GMMParams truth;
  Eigen::VectorXi labels;

  // One-hot N x C label matrix.
  Eigen::MatrixXd states() const;
};

// Unit-variance isotropic clusters with equal weights. Random layout: means
// uniform in a box of side 2 * separation, redrawn until every pair is at
// least `separation` apart. Collinear layout: means `separation` apart on a
// random line, with perpendicular N(0, (0.1 separation)^2) jitter redrawn
// until the collinearity residual stays below 0.1 separation.
GmmDataset gen_gmm(int N, int C, GmmLayout layout, double separation, Rng& rng,
                   int dim = 2);

// Smallest singular value of the centered means (rows).
double collinearity_residual(const Eigen::MatrixXd& means);

}  // namespace gpselect
