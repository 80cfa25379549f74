#pragma once

#include <Eigen/Dense>

#include <string>
#include <variant>

namespace gpselect {

enum class ModelKind { kBsc, kSs, kNlss, kGmm };

ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind kind);

// Binary sparse coding: y ~ N(W s, sigma2 I), s_h ~ Bern(pi).
struct BSCParams {
  Eigen::MatrixXd W;  // D x H
  double sigma2 = 1.0;
  double pi = 0.5;
};

// Spike-and-slab sparse coding: y ~ N(W (s .* z), sigma2 I),
// z_h ~ N(mu_h, psi_h).
struct SSParams {
  Eigen::MatrixXd W;  // D x H
  double sigma2 = 1.0;
  double pi = 0.5;
  Eigen::VectorXd mu;   // H
  Eigen::VectorXd psi;  // H, diagonal slab variances
};

// Same parameters as SSParams; the observation mean is the per-dimension
// maximum max_h s_h z_h W_dh instead of the sum.
struct NLSSParams {
  Eigen::MatrixXd W;
  double sigma2 = 1.0;
  double pi = 0.5;
  Eigen::VectorXd mu;
  Eigen::VectorXd psi;
};

// Isotropic Gaussian mixture: sum_c weights_c N(y; means_c, variances_c I).
struct GMMParams {
  Eigen::MatrixXd means;      // C x D
  Eigen::VectorXd variances;  // C
  Eigen::VectorXd weights;    // C, on the simplex
};

using ModelParams = std::variant<BSCParams, SSParams, NLSSParams, GMMParams>;

ModelKind kind_of(const ModelParams& params);
// Number of latent variables (H) or clusters (C).
int latent_count(const ModelParams& params);
int observed_dim(const ModelParams& params);

// Throws std::invalid_argument when a parameter invariant is violated.
void validate(const BSCParams& p);
void validate(const SSParams& p);
void validate(const NLSSParams& p);
void validate(const GMMParams& p);
void validate(const ModelParams& p);

}  // namespace gpselect
