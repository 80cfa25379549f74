#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "gpselect/em_engine.hpp"
#include "gpselect/kernels.hpp"
#include "gpselect/params.hpp"

namespace gpselect {

using Json = nlohmann::json;
namespace fs = std::filesystem;

// Matrices are stored as {"rows": r, "cols": c, "data": [row-major values]}.
Json matrix_to_json(const Eigen::MatrixXd& M);
Eigen::MatrixXd matrix_from_json(const Json& j);
Json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const Json& j);

// NaN and infinities are written as the strings "nan", "inf", "-inf" since
// JSON has no literal for them.
Json number_to_json(double x);
double number_from_json(const Json& j);

// Parameter schema: {"model": kind, "D": .., "H": .. | "C": .., fields...}.
Json params_to_json(const ModelParams& params);
ModelParams params_from_json(const Json& j);

Json hyperparams_to_json(const KernelHyperparams& hp);
KernelHyperparams hyperparams_from_json(const Json& j);

Json record_to_json(const IterationRecord& rec);
IterationRecord record_from_json(const Json& j);

Json state_to_json(const EMState& state);
EMState state_from_json(const Json& j);

// Column names of the trace CSV, in order.
const std::vector<std::string>& trace_columns();
std::string trace_to_csv(const EMTrace& trace);
EMTrace trace_from_csv(const std::string& text);

// "iteration,point,selected" with selected indices joined by ';'.
std::string selection_csv_header();
std::string selection_csv_rows(int iteration,
                               const std::vector<SelectedIndices>& selection);

struct SelectionLog {
  std::vector<int> iterations;  // ascending, unique
  std::vector<std::vector<SelectedIndices>> selections;  // per iteration
};
SelectionLog selections_from_csv(const std::string& text);

// Plain numeric CSV without header, %.17g.
std::string matrix_to_csv(const Eigen::MatrixXd& M);
Eigen::MatrixXd matrix_from_csv(const std::string& text);

std::string read_file(const fs::path& path);
// Writes through a temporary file and rename, so readers never observe a
// partial file.
void write_file_atomic(const fs::path& path, const std::string& contents);
Json read_json(const fs::path& path);
void write_json(const fs::path& path, const Json& j);

}  // namespace gpselect
