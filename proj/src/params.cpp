#include "gpselect/params.hpp"

#include <cmath>
#include <stdexcept>

namespace gpselect {

ModelKind parse_model_kind(const std::string& name) {
  if (name == "bsc") return ModelKind::kBsc;
  if (name == "ss") return ModelKind::kSs;
  if (name == "nlss") return ModelKind::kNlss;
  if (name == "gmm") return ModelKind::kGmm;
  throw std::invalid_argument("unknown model kind: " + name);
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kBsc:
      return "bsc";
    case ModelKind::kSs:
      return "ss";
    case ModelKind::kNlss:
      return "nlss";
    case ModelKind::kGmm:
      return "gmm";
  }
  return "bsc";
}

ModelKind kind_of(const ModelParams& params) {
  return static_cast<ModelKind>(params.index());
}

int latent_count(const ModelParams& params) {
  return std::visit(
      [](const auto& p) -> int {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return static_cast<int>(p.means.rows());
        } else {
          return static_cast<int>(p.W.cols());
        }
      },
      params);
}

int observed_dim(const ModelParams& params) {
  return std::visit(
      [](const auto& p) -> int {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMParams>) {
          return static_cast<int>(p.means.cols());
        } else {
          return static_cast<int>(p.W.rows());
        }
      },
      params);
}

namespace {

void check_sparse_common(const Eigen::MatrixXd& W, double sigma2, double pi) {
  if (W.size() == 0) throw std::invalid_argument("W is empty");
  if (!W.allFinite()) throw std::invalid_argument("W has non-finite entries");
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) {
    throw std::invalid_argument("sigma2 must be positive");
  }
  if (!(pi > 0.0 && pi < 1.0)) {
    throw std::invalid_argument("pi must lie in (0, 1)");
  }
}

void check_slab(const Eigen::MatrixXd& W, const Eigen::VectorXd& mu,
                const Eigen::VectorXd& psi) {
  if (mu.size() != W.cols() || psi.size() != W.cols()) {
    throw std::invalid_argument("slab parameters must have H entries");
  }
  if (!mu.allFinite()) throw std::invalid_argument("mu has non-finite entries");
  if (!psi.allFinite() || !(psi.minCoeff() > 0.0)) {
    throw std::invalid_argument("psi must be positive");
  }
}

}  // namespace

void validate(const BSCParams& p) { check_sparse_common(p.W, p.sigma2, p.pi); }

void validate(const SSParams& p) {
  check_sparse_common(p.W, p.sigma2, p.pi);
  check_slab(p.W, p.mu, p.psi);
}

void validate(const NLSSParams& p) {
  check_sparse_common(p.W, p.sigma2, p.pi);
  check_slab(p.W, p.mu, p.psi);
}

void validate(const GMMParams& p) {
  const Eigen::Index c = p.means.rows();
  if (c < 1) throw std::invalid_argument("GMM needs at least one cluster");
  if (p.variances.size() != c || p.weights.size() != c) {
    throw std::invalid_argument("GMM parameter sizes disagree");
  }
  if (!p.means.allFinite()) throw std::invalid_argument("GMM means non-finite");
  if (!(p.variances.minCoeff() > 0.0)) {
    throw std::invalid_argument("GMM variances must be positive");
  }
  if (!(p.weights.minCoeff() > 0.0) ||
      std::abs(p.weights.sum() - 1.0) > 1e-10) {
    throw std::invalid_argument("GMM weights must be positive and sum to 1");
  }
}

void validate(const ModelParams& p) {
  std::visit([](const auto& x) { validate(x); }, p);
}

}  // namespace gpselect
