#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "gpselect/rng.hpp"

namespace testing {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c,
                                     gpselect::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::MatrixXd M(r, c);
  for (Eigen::Index i = 0; i < M.size(); ++i) M(i) = normal(rng);
  return M;
}

inline double uniform(gpselect::Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(gpselect::Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Multivariate normal log density through an LU determinant and solve,
// independent of the Cholesky paths under test.
inline double mvn_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean,
                         const Eigen::MatrixXd& cov) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(cov);
  const Eigen::VectorXd r = y - mean;
  const double quad = r.dot(lu.solve(r));
  return -0.5 * (static_cast<double>(y.size()) * kLog2Pi +
                 std::log(lu.determinant()) + quad);
}

inline double max_abs(const Eigen::MatrixXd& A) {
  return A.size() == 0 ? 0.0 : A.cwiseAbs().maxCoeff();
}

}  // namespace testing
