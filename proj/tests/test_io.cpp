#include "doctest.h"

#include <cmath>

#include "gpselect/errors.hpp"
#include "gpselect/io.hpp"
#include "support.hpp"

using namespace gpselect;
using testing::random_matrix;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("gpselect_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

IterationRecord sample_record(int it) {
  IterationRecord r;
  r.iteration = it;
  r.free_energy = -1234.5678901234567 * it;
  r.free_energy_se = 0.1 / 3.0;
  r.hp = KernelHyperparams{0.3, 1.7, 0.01, 0.0, 0.2};
  r.gp_evidence = std::nan("");
  r.hyperopt_ran = it % 2 == 0;
  r.hyperopt_evidence = r.hyperopt_ran ? 17.25 : std::nan("");
  r.hyperopt_steps = it % 2 == 0 ? 7 : 0;
  r.times = PhaseTimes{0.1, 0.2, 0.3, 0.4, 0.5, 1.5};
  r.hit_rate = 0.875;
  r.acceptance_rate = std::numeric_limits<double>::infinity();
  r.targets_in_checksum = 0xffffffffffffffffULL - it;
  r.targets_out_checksum = 42;
  r.warnings = it == 2 ? std::vector<std::string>{"a_warning", "another"}
                       : std::vector<std::string>{};
  r.snapshot = it == 2 ? "snapshots/params_0002.json" : "";
  return r;
}

void check_same(const IterationRecord& a, const IterationRecord& b) {
  CHECK(a.iteration == b.iteration);
  CHECK(a.free_energy == b.free_energy);
  CHECK(a.free_energy_se == b.free_energy_se);
  CHECK(a.hp == b.hp);
  CHECK(std::isnan(a.gp_evidence) == std::isnan(b.gp_evidence));
  CHECK(a.hyperopt_ran == b.hyperopt_ran);
  CHECK(std::isnan(a.hyperopt_evidence) == std::isnan(b.hyperopt_evidence));
  if (!std::isnan(a.hyperopt_evidence)) CHECK(a.hyperopt_evidence == b.hyperopt_evidence);
  CHECK(a.hyperopt_steps == b.hyperopt_steps);
  CHECK(a.times.total == b.times.total);
  CHECK(a.times.affinity == b.times.affinity);
  CHECK(a.hit_rate == b.hit_rate);
  CHECK(a.acceptance_rate == b.acceptance_rate);
  CHECK(a.targets_in_checksum == b.targets_in_checksum);
  CHECK(a.targets_out_checksum == b.targets_out_checksum);
  CHECK(a.warnings == b.warnings);
  CHECK(a.snapshot == b.snapshot);
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("matrices and special numbers round trip") {
  Rng rng(501);
  const Eigen::MatrixXd M = random_matrix(4, 3, rng) * 1e-7;
  CHECK(matrix_from_json(matrix_to_json(M)) == M);
  CHECK(matrix_from_csv(matrix_to_csv(M)) == M);
  CHECK(number_to_json(std::nan("")) == "nan");
  CHECK(number_from_json(number_to_json(-INFINITY)) == -INFINITY);
  CHECK(std::isnan(number_from_json(Json("nan"))));
  CHECK_THROWS(matrix_from_json(Json{{"rows", 2}, {"cols", 2}, {"data", {1.0, 2.0}}}));
}

TEST_CASE("parameters of every model round trip exactly") {
  Rng rng(502);
  BSCParams b{random_matrix(5, 3, rng), 0.7, 0.2};
  SSParams s{random_matrix(5, 3, rng), 0.7, 0.2, Eigen::Vector3d(1, 2, -3),
             Eigen::Vector3d(0.1, 0.2, 0.3)};
  NLSSParams n{random_matrix(5, 3, rng), 1.1, 0.3, Eigen::Vector3d(1, 2, 3),
               Eigen::Vector3d(0.4, 0.5, 0.6)};
  GMMParams g{random_matrix(3, 2, rng), Eigen::Vector3d(1, 2, 3),
              Eigen::Vector3d(0.2, 0.3, 0.5)};
  for (const ModelParams& p : {ModelParams{b}, ModelParams{s}, ModelParams{n}, ModelParams{g}}) {
    const Json j = params_to_json(p);
    const ModelParams back = params_from_json(Json::parse(j.dump()));
    CHECK(params_to_json(back) == j);
    CHECK(kind_of(back) == kind_of(p));
  }
  Json bad = params_to_json(b);
  bad["pi"] = 1.5;
  CHECK_THROWS(params_from_json(bad));
  bad = params_to_json(g);
  bad["weights"] = vector_to_json(Eigen::Vector3d(0.2, 0.2, 0.2));
  CHECK_THROWS(params_from_json(bad));
}

TEST_CASE("hyperparameters and records round trip") {
  const KernelHyperparams hp{0.123456789012345, 2.5, 0.0, 1e-9, 0.3};
  CHECK(hyperparams_from_json(Json::parse(hyperparams_to_json(hp).dump())) == hp);
  for (int it : {1, 2}) {
    const IterationRecord r = sample_record(it);
    check_same(record_from_json(Json::parse(record_to_json(r).dump())), r);
  }
}

TEST_CASE("trace CSV round trips and has the documented header") {
  const EMTrace trace = {sample_record(1), sample_record(2), sample_record(3)};
  const std::string csv = trace_to_csv(trace);
  const std::string header = csv.substr(0, csv.find('\n'));
  std::string expected;
  for (const auto& c : trace_columns()) expected += (expected.empty() ? "" : ",") + c;
  CHECK(header == expected);
  const EMTrace back = trace_from_csv(csv);
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) check_same(back[i], trace[i]);
  CHECK(trace_to_csv(back) == csv);
}

TEST_CASE("selection CSV round trips") {
  std::string text = selection_csv_header();
  const std::vector<SelectedIndices> s1 = {{0, 3, 5}, {1, 2, 9}};
  const std::vector<SelectedIndices> s2 = {{4, 6, 7}, {0, 1, 2}};
  text += selection_csv_rows(1, s1);
  text += selection_csv_rows(2, s2);
  CHECK(text.find("1,0,0;3;5\n") != std::string::npos);
  const SelectionLog log = selections_from_csv(text);
  CHECK(log.iterations == std::vector<int>{1, 2});
  CHECK(log.selections[0] == s1);
  CHECK(log.selections[1] == s2);
}

TEST_CASE("checkpoint state round trips") {
  Rng rng(503);
  EMState st;
  st.completed = 2;
  st.params = NLSSParams{random_matrix(4, 2, rng), 1.0, 0.3, Eigen::Vector2d(1, 2),
                         Eigen::Vector2d(1, 1)};
  st.hp = KernelHyperparams{0.5, 1.5, 0.0, 0.0, 0.1};
  st.targets = random_matrix(3, 2, rng);
  st.chains.resize(3);
  st.chains[1].b = Eigen::Vector2d(1, 0);
  st.chains[1].z = Eigen::Vector2d(0.25, -1.0 / 3.0);
  st.trace = {sample_record(1), sample_record(2)};
  const EMState back = state_from_json(Json::parse(state_to_json(st).dump()));
  CHECK(back.completed == 2);
  CHECK(params_to_json(back.params) == params_to_json(st.params));
  CHECK(back.hp == st.hp);
  CHECK(back.targets == st.targets);
  REQUIRE(back.chains.size() == 3);
  CHECK_FALSE(back.chains[0].initialized());
  CHECK(back.chains[1].z == st.chains[1].z);
  CHECK(back.chains[1].b == st.chains[1].b);
  REQUIRE(back.trace.size() == 2);
  check_same(back.trace[1], st.trace[1]);
}

TEST_CASE("files: atomic writes and missing files") {
  const fs::path dir = scratch_dir("files");
  write_file_atomic(dir / "a.txt", "hello\n");
  CHECK(read_file(dir / "a.txt") == "hello\n");
  write_json(dir / "b.json", Json{{"x", 1}});
  CHECK(read_json(dir / "b.json").at("x") == 1);
  CHECK_THROWS_AS(read_file(dir / "missing.txt"), IoError);
  try {
    read_json(dir / "missing.json");
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("missing.json") != std::string::npos);
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    CHECK(entry.path().extension() != ".tmp");
  }
  fs::remove_all(dir);
}

}  // TEST_SUITE
