// Run controller: config serialization and overrides, the full pipeline's
// determinism and replay contract, hall-of-fame behavior visible through
// the trajectory, and report serialization round-trips.
#include <catch2/catch_amalgamated.hpp>

#include "pded/orchestrator.hpp"
#include "pded/report.hpp"

#include <filesystem>

using namespace pded;

namespace {

// Small but complete configuration: every phase runs, nothing is slow.
RunConfig small_config() {
  RunConfig c;
  c.data.source = "burgers";
  c.data.sigma = 0.1;
  c.data.n_obs = 300;
  c.surrogate.hidden = {12, 12};
  c.surrogate.n_colloc = 250;
  c.surrogate.pretrain_epochs = 300;
  c.surrogate.embed_epochs = 100;
  c.surrogate.patience = 100;
  c.search.n_samples = 60;
  c.search.iterations = 2;
  c.search.rounds = 2;
  c.search.top_k = 3;
  c.selection.n_s = 30;
  c.selection.n_p = 4;
  c.seed = 11;
  return c;
}

nlohmann::json strip_timing(nlohmann::json j) {
  j["seconds_total"] = 0.0;
  j["pretrain"]["seconds"] = 0.0;
  for (auto& r : j["rounds"]) {
    r["embed"]["seconds"] = 0.0;
    r["seconds_search"] = 0.0;
  }
  return j;
}

}  // namespace

// ───────────────────────── configuration ─────────────────────────

TEST_CASE("config json round-trips losslessly") {
  const nlohmann::json j = config_to_json(RunConfig{});
  const RunConfig back = config_from_json(j);
  REQUIRE(config_to_json(back) == j);

  RunConfig c = small_config();
  c.truth = "u_t = -1*u*u_x + 0.1*u_xx";
  c.library.operators = {"+", "-", "*", "^2", "d1", "d2"};
  const nlohmann::json j2 = config_to_json(c);
  REQUIRE(config_to_json(config_from_json(j2)) == j2);
}

TEST_CASE("partial config keeps defaults for missing keys") {
  const nlohmann::json j = {{"data", {{"sigma", 0.5}}},
                            {"search", {{"rounds", 1}}}};
  const RunConfig c = config_from_json(j);
  CHECK(c.data.sigma == 0.5);
  CHECK(c.search.rounds == 1);
  const RunConfig d;
  CHECK(c.data.source == d.data.source);
  CHECK(c.search.n_samples == d.search.n_samples);
  CHECK(c.surrogate.hidden == d.surrogate.hidden);
  CHECK(c.selection.n_s == d.selection.n_s);
}

TEST_CASE("unknown or ill-typed config keys are rejected") {
  auto code = [](const nlohmann::json& j) {
    try {
      config_from_json(j);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Internal;
  };
  CHECK(code({{"bogus", 1}}) == Errc::ConfigError);
  CHECK(code({{"data", {{"sigmma", 1.0}}}}) == Errc::ConfigError);
  CHECK(code({{"search", {{"rounds", "two"}}}}) == Errc::ConfigError);
  CHECK(code({{"data", 7}}) == Errc::ConfigError);
}

TEST_CASE("set-style overrides parse typed values and create paths") {
  nlohmann::json j = nlohmann::json::object();
  apply_override(j, "data.sigma=1.5");
  apply_override(j, "data.source=fisher_kpp");
  apply_override(j, "surrogate.hidden=[8,8]");
  apply_override(j, "seed=42");
  const RunConfig c = config_from_json(j);
  CHECK(c.data.sigma == 1.5);
  CHECK(c.data.source == "fisher_kpp");
  CHECK(c.surrogate.hidden == std::vector<int>{8, 8});
  CHECK(c.seed == 42);
  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), Error);
}

TEST_CASE("config validation rejects out-of-range settings") {
  auto bad = [](auto mutate) {
    RunConfig c;
    mutate(c);
    try {
      validate_config(c);
    } catch (const Error& e) {
      return e.code() == Errc::ConfigError;
    }
    return false;
  };
  CHECK(bad([](RunConfig& c) { c.data.source = "heat"; }));
  CHECK(bad([](RunConfig& c) { c.data.source = "file"; }));
  CHECK(bad([](RunConfig& c) { c.data.sigma = -0.1; }));
  CHECK(bad([](RunConfig& c) { c.data.n_obs = 3; }));
  CHECK(bad([](RunConfig& c) { c.search.epsilon = 0.0; }));
  CHECK(bad([](RunConfig& c) { c.search.n_samples = 0; }));
  CHECK(bad([](RunConfig& c) { c.surrogate.hidden = {}; }));
  CHECK(bad([](RunConfig& c) { c.selection.n_p = 1; }));
}

// ───────────────────────── truth equations ─────────────────────────

TEST_CASE("built-in truth equations parse to the generator dynamics") {
  const TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  DataConfig d;

  d.source = "burgers";
  d.nu = 0.1;
  CoeffMap m = parse_equation(builtin_truth(d), lib);
  REQUIRE(m.size() == 2);
  CHECK(m.at("* d1 u x u") == -1.0);
  CHECK(m.at("d2 u x") == 0.1);

  d.source = "fisher_kpp";
  d.diffusion = 0.02;
  d.growth = 10.0;
  d.capacity = 1.0;
  m = parse_equation(builtin_truth(d), lib);
  REQUIRE(m.size() == 3);
  CHECK(m.at("d2 u x") == 0.02);
  CHECK(m.at("u") == 10.0);
  CHECK(m.at("^2 u") == -10.0);

  d.source = "fisher_kpp_nonlinear";
  m = parse_equation(builtin_truth(d), lib);
  REQUIRE(m.size() == 4);
  CHECK(m.at("* d2 u x u") == 0.02);
  CHECK(m.at("^2 d1 u x") == 0.02);
  CHECK(m.at("u") == 10.0);
  CHECK(m.at("^2 u") == -10.0);

  d.source = "file";
  CHECK(builtin_truth(d).empty());
}

TEST_CASE("equation rendering is stable and sign-folded") {
  const TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  PdeCandidate c;
  c.valid = true;
  TreeNode tree = to_tree(parse_traversal("+ * u d1 u x d2 u x", lib), lib);
  c.terms = split_terms(tree, lib);
  REQUIRE(c.terms.size() == 2);
  c.xi = Vec{{-0.97, 0.11}};
  CHECK(equation_string(c, lib) == "u_t = -0.97*u_x*u + 0.11*u_xx");

  PdeCandidate empty;
  empty.valid = true;
  CHECK(equation_string(empty, lib) == "u_t = 0");
  PdeCandidate invalid;
  CHECK(equation_string(invalid, lib).empty());
}

// ───────────────────────── pipeline behavior ─────────────────────────

TEST_CASE("zero search iterations yields a pretrain-only report") {
  RunConfig c;
  c.data.source = "fisher_kpp";
  c.data.n_obs = 200;
  c.surrogate.hidden = {8};
  c.surrogate.pretrain_epochs = 150;
  c.surrogate.patience = 50;
  c.search.iterations = 0;
  c.seed = 5;
  const RunReport rep = run(c);
  CHECK(rep.error.empty());
  CHECK(rep.trajectory.empty());
  CHECK(rep.rounds.empty());
  CHECK(rep.final_equation.empty());
  CHECK_FALSE(rep.final_candidate.valid);
  CHECK_FALSE(rep.score.has_value());
  CHECK(rep.pretrain.epochs > 0);
  CHECK(rep.l2_pretrain >= 0.0);
  CHECK(rep.prediction.rows() == 199);
  CHECK(rep.prediction.cols() == 99);
  CHECK_FALSE(rep.truth_equation.empty());
}

TEST_CASE("full pipeline: shape, determinism, replay, and monotone best") {
  const RunConfig c = small_config();
  const RunReport a = run(c);
  const RunReport b = run(c);

  // shape
  REQUIRE(a.trajectory.size() == 4);
  REQUIRE(a.rounds.size() == 2);
  for (const RoundReport& r : a.rounds) {
    int total = 0;
    for (int v : r.selection.votes) total += v;
    CHECK(total == c.selection.n_s);
    CHECK(r.selection.winner >= 0);
    CHECK(r.selection.winner < int(r.selection.candidates.size()));
    CHECK(int(r.selection.candidates.size()) <= c.search.top_k);
    CHECK(r.embed.epochs > 0);
    CHECK(r.l2_after_embed >= 0.0);
  }
  REQUIRE(a.final_candidate.valid);
  CHECK_FALSE(a.final_equation.empty());
  REQUIRE(a.score.has_value());
  CHECK(a.score->l2.has_value());

  // the hall-of-fame best never decreases within a round
  for (std::size_t i = 1; i < a.trajectory.size(); ++i)
    if (a.trajectory[i].round == a.trajectory[i - 1].round)
      CHECK(a.trajectory[i].best >= a.trajectory[i - 1].best);

  // two runs with the same config are identical modulo timing
  CHECK(strip_timing(report_to_json(a)) == strip_timing(report_to_json(b)));

  // the embedded config echo replays to the same trajectory and equation
  const RunReport replay = run(config_from_json(a.config));
  CHECK(replay.final_equation == a.final_equation);
  REQUIRE(replay.trajectory.size() == a.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    CHECK(replay.trajectory[i].best == a.trajectory[i].best);
    CHECK(replay.trajectory[i].top_mean == a.trajectory[i].top_mean);
  }

  // distinct seeds change the search path
  RunConfig c2 = c;
  c2.seed = 12;
  const RunReport other = run(c2);
  CHECK(strip_timing(report_to_json(other)) != strip_timing(report_to_json(a)));
}

TEST_CASE("report json round-trips and artifacts render") {
  RunConfig c = small_config();
  c.search.iterations = 1;
  c.search.rounds = 1;
  const RunReport rep = run(c);

  const nlohmann::json j = report_to_json(rep);
  const RunReport back = report_from_json(j);
  REQUIRE(report_to_json(back) == j);

  namespace fs = std::filesystem;
  const fs::path dir =
      fs::temp_directory_path() / "pded_orchestrator_artifacts";
  fs::remove_all(dir);
  write_report_artifacts(rep, dir.string());
  for (const char* name :
       {"report.json", "trajectory.csv", "reward_curve.svg",
        "votes_round1.csv", "field_reference.bmp", "field_prediction.bmp",
        "field_error.bmp"})
    CHECK(fs::exists(dir / name));

  const RunReport loaded =
      report_from_json(load_json_file((dir / "report.json").string()));
  CHECK(report_to_json(loaded) == j);
  fs::remove_all(dir);
}

TEST_CASE("errors leave a partial report with the config echo intact") {
  RunConfig c;
  c.data.source = "file";
  c.data.path = "/nonexistent/dataset.csv";
  RunReport rep;
  CHECK_THROWS_AS(run_into(c, rep), Error);
  CHECK(rep.config.is_object());
  CHECK(rep.seed == c.seed);
  CHECK(rep.trajectory.empty());
  // the partial report still serializes
  CHECK_NOTHROW(report_to_json(rep));
}
