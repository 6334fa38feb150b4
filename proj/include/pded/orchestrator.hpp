// Run controller for the full discovery loop: pretrain the surrogate on
// observations, alternate [hybrid generation + policy updates → stability
// selection → embed the winner and retrain the surrogate] for a configured
// number of rounds, then refit the winner's coefficients on the final
// surrogate and assemble a replayable report.
#pragma once

#include "pded/dynamics.hpp"
#include "pded/evolution.hpp"
#include "pded/metrics.hpp"
#include "pded/stability.hpp"
#include "pded/surrogate.hpp"

#include <chrono>
#include <functional>

namespace pded {

// ───────────────────────── configuration ─────────────────────────

// Where the field data comes from. Built-in generators solve the reference
// systems on their canonical grids; "file" loads any dataset written by the
// dataset I/O routines. Noise is applied on top of whatever the source
// holds, so file data that is already noisy should keep sigma = 0.
struct DataConfig {
  std::string source = "burgers";  // burgers | fisher_kpp |
                                   // fisher_kpp_nonlinear | file
  std::string path;                // dataset path when source == "file"
  double nu = 0.1;                 // Burgers viscosity
  double diffusion = 0.02;         // Fisher-KPP D
  double growth = 10.0;            // Fisher-KPP r
  double capacity = 1.0;           // Fisher-KPP carrying capacity k
  double sigma = 0.0;              // noise level, fraction of field std
  int n_obs = 5000;                // observations sampled from the grid
  std::string var = "u";           // observed state variable
};

struct LibraryConfig {
  std::vector<std::string> operators = {"+", "-", "*", "/", "^2", "d1", "d2"};
  std::vector<std::string> state_vars = {"u"};
  std::vector<std::string> spatial_vars = {"x"};
};

struct SurrogateConfig {
  std::vector<int> hidden = {32, 32, 32};
  int n_colloc = 2000;         // collocation points for residuals and rewards
  double lambda1 = 0.1;        // physics loss weight at collocation points
  double lambda2 = 0.0;        // physics loss weight at local-sampling points
  int local_per_obs = 10;      // local points per observation when used
  int pretrain_epochs = 20000;
  int embed_epochs = 3000;
  int patience = 500;          // validation checks without improvement
  double lr = 1e-3;
  int batch_size = 4096;
  int full_batch_cap = 20000;
  double val_fraction = 0.2;
};

struct SearchConfig {
  int n_samples = 1000;        // policy rollouts per iteration
  int iterations = 100;        // generator iterations per round
  int rounds = 2;              // alternation rounds
  int top_k = 3;               // hall-of-fame size fed to selection
  double epsilon = 0.02;       // risk-seeking quantile fraction
  double lambda_pg = 1.0;      // policy-gradient scale
  double policy_lr = 5e-4;
  int policy_hidden = 64;
  int max_len = 64;            // whole-traversal token budget
  int d_max = 4;               // function-term depth budget
  double crossover_top = 0.5;  // reward fraction eligible as parents
  int bank_capacity = 20;
  int n_sub = 10;              // bank terms subsampled per DSB draw
  double zeta_terms = 0.01;    // reward penalty per surviving term
  double zeta_depth = 0.0001;  // reward penalty per unit of term depth
  double stridge_kappa = 1e-5;
  double stridge_tol = 0.05;
};

struct RunConfig {
  DataConfig data;
  LibraryConfig library;
  SurrogateConfig surrogate;
  SearchConfig search;
  SelectionConfig selection;
  std::string truth;        // optional truth equation; overrides the built-in
  std::uint64_t seed = 0;
};

inline TokenLibrary make_library(const LibraryConfig& lc) {
  return TokenLibrary(lc.operators, lc.state_vars, lc.spatial_vars, true);
}

// ───────────────────────── config serialization ─────────────────────────

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& scope,
                       std::initializer_list<const char*> allowed) {
  require(j.is_object(), Errc::ConfigError,
          "config section '" + scope + "' must be an object");
  for (const auto& kv : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || kv.key() == k;
    require(known, Errc::ConfigError,
            "unknown config key '" +
                (scope.empty() ? kv.key() : scope + "." + kv.key()) + "'");
  }
}

template <class T>
void get_key(const nlohmann::json& j, const std::string& scope,
             const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigError,
         "bad value for '" + (scope.empty() ? std::string(key) : scope + "." + key) +
             "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["data"] = {{"source", c.data.source},     {"path", c.data.path},
               {"nu", c.data.nu},             {"diffusion", c.data.diffusion},
               {"growth", c.data.growth},     {"capacity", c.data.capacity},
               {"sigma", c.data.sigma},       {"n_obs", c.data.n_obs},
               {"var", c.data.var}};
  j["library"] = {{"operators", c.library.operators},
                  {"state_vars", c.library.state_vars},
                  {"spatial_vars", c.library.spatial_vars}};
  j["surrogate"] = {{"hidden", c.surrogate.hidden},
                    {"n_colloc", c.surrogate.n_colloc},
                    {"lambda1", c.surrogate.lambda1},
                    {"lambda2", c.surrogate.lambda2},
                    {"local_per_obs", c.surrogate.local_per_obs},
                    {"pretrain_epochs", c.surrogate.pretrain_epochs},
                    {"embed_epochs", c.surrogate.embed_epochs},
                    {"patience", c.surrogate.patience},
                    {"lr", c.surrogate.lr},
                    {"batch_size", c.surrogate.batch_size},
                    {"full_batch_cap", c.surrogate.full_batch_cap},
                    {"val_fraction", c.surrogate.val_fraction}};
  j["search"] = {{"n_samples", c.search.n_samples},
                 {"iterations", c.search.iterations},
                 {"rounds", c.search.rounds},
                 {"top_k", c.search.top_k},
                 {"epsilon", c.search.epsilon},
                 {"lambda_pg", c.search.lambda_pg},
                 {"policy_lr", c.search.policy_lr},
                 {"policy_hidden", c.search.policy_hidden},
                 {"max_len", c.search.max_len},
                 {"d_max", c.search.d_max},
                 {"crossover_top", c.search.crossover_top},
                 {"bank_capacity", c.search.bank_capacity},
                 {"n_sub", c.search.n_sub},
                 {"zeta_terms", c.search.zeta_terms},
                 {"zeta_depth", c.search.zeta_depth},
                 {"stridge_kappa", c.search.stridge_kappa},
                 {"stridge_tol", c.search.stridge_tol}};
  j["selection"] = {{"n_s", c.selection.n_s}, {"n_p", c.selection.n_p}};
  j["truth"] = c.truth;
  j["seed"] = c.seed;
  return j;
}

// Strict parse: defaults fill missing keys, unknown keys are config errors.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::get_key;
  RunConfig c;
  check_keys(j, "", {"data", "library", "surrogate", "search", "selection",
                     "truth", "seed"});
  if (j.contains("data")) {
    const nlohmann::json& d = j.at("data");
    check_keys(d, "data", {"source", "path", "nu", "diffusion", "growth",
                           "capacity", "sigma", "n_obs", "var"});
    get_key(d, "data", "source", c.data.source);
    get_key(d, "data", "path", c.data.path);
    get_key(d, "data", "nu", c.data.nu);
    get_key(d, "data", "diffusion", c.data.diffusion);
    get_key(d, "data", "growth", c.data.growth);
    get_key(d, "data", "capacity", c.data.capacity);
    get_key(d, "data", "sigma", c.data.sigma);
    get_key(d, "data", "n_obs", c.data.n_obs);
    get_key(d, "data", "var", c.data.var);
  }
  if (j.contains("library")) {
    const nlohmann::json& l = j.at("library");
    check_keys(l, "library", {"operators", "state_vars", "spatial_vars"});
    get_key(l, "library", "operators", c.library.operators);
    get_key(l, "library", "state_vars", c.library.state_vars);
    get_key(l, "library", "spatial_vars", c.library.spatial_vars);
  }
  if (j.contains("surrogate")) {
    const nlohmann::json& s = j.at("surrogate");
    check_keys(s, "surrogate",
               {"hidden", "n_colloc", "lambda1", "lambda2", "local_per_obs",
                "pretrain_epochs", "embed_epochs", "patience", "lr",
                "batch_size", "full_batch_cap", "val_fraction"});
    get_key(s, "surrogate", "hidden", c.surrogate.hidden);
    get_key(s, "surrogate", "n_colloc", c.surrogate.n_colloc);
    get_key(s, "surrogate", "lambda1", c.surrogate.lambda1);
    get_key(s, "surrogate", "lambda2", c.surrogate.lambda2);
    get_key(s, "surrogate", "local_per_obs", c.surrogate.local_per_obs);
    get_key(s, "surrogate", "pretrain_epochs", c.surrogate.pretrain_epochs);
    get_key(s, "surrogate", "embed_epochs", c.surrogate.embed_epochs);
    get_key(s, "surrogate", "patience", c.surrogate.patience);
    get_key(s, "surrogate", "lr", c.surrogate.lr);
    get_key(s, "surrogate", "batch_size", c.surrogate.batch_size);
    get_key(s, "surrogate", "full_batch_cap", c.surrogate.full_batch_cap);
    get_key(s, "surrogate", "val_fraction", c.surrogate.val_fraction);
  }
  if (j.contains("search")) {
    const nlohmann::json& s = j.at("search");
    check_keys(s, "search",
               {"n_samples", "iterations", "rounds", "top_k", "epsilon",
                "lambda_pg", "policy_lr", "policy_hidden", "max_len", "d_max",
                "crossover_top", "bank_capacity", "n_sub", "zeta_terms",
                "zeta_depth", "stridge_kappa", "stridge_tol"});
    get_key(s, "search", "n_samples", c.search.n_samples);
    get_key(s, "search", "iterations", c.search.iterations);
    get_key(s, "search", "rounds", c.search.rounds);
    get_key(s, "search", "top_k", c.search.top_k);
    get_key(s, "search", "epsilon", c.search.epsilon);
    get_key(s, "search", "lambda_pg", c.search.lambda_pg);
    get_key(s, "search", "policy_lr", c.search.policy_lr);
    get_key(s, "search", "policy_hidden", c.search.policy_hidden);
    get_key(s, "search", "max_len", c.search.max_len);
    get_key(s, "search", "d_max", c.search.d_max);
    get_key(s, "search", "crossover_top", c.search.crossover_top);
    get_key(s, "search", "bank_capacity", c.search.bank_capacity);
    get_key(s, "search", "n_sub", c.search.n_sub);
    get_key(s, "search", "zeta_terms", c.search.zeta_terms);
    get_key(s, "search", "zeta_depth", c.search.zeta_depth);
    get_key(s, "search", "stridge_kappa", c.search.stridge_kappa);
    get_key(s, "search", "stridge_tol", c.search.stridge_tol);
  }
  if (j.contains("selection")) {
    const nlohmann::json& s = j.at("selection");
    check_keys(s, "selection", {"n_s", "n_p"});
    get_key(s, "selection", "n_s", c.selection.n_s);
    get_key(s, "selection", "n_p", c.selection.n_p);
  }
  get_key(j, "", "truth", c.truth);
  get_key(j, "", "seed", c.seed);
  return c;
}

// `--set key.path=value`: value parsed as JSON when possible, else taken as
// a bare string. Creates intermediate objects along the path.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, Errc::ConfigError,
          "override must be key=value: '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* cur = &root;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string key =
        path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    require(!key.empty(), Errc::ConfigError,
            "bad override path '" + path + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      break;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

inline void validate_config(const RunConfig& c) {
  require(c.data.source == "burgers" || c.data.source == "fisher_kpp" ||
              c.data.source == "fisher_kpp_nonlinear" || c.data.source == "file",
          Errc::ConfigError, "unknown data source '" + c.data.source + "'");
  require(c.data.source != "file" || !c.data.path.empty(), Errc::ConfigError,
          "data source 'file' needs data.path");
  require(c.data.sigma >= 0, Errc::ConfigError, "sigma must be >= 0");
  require(c.data.n_obs >= 5, Errc::ConfigError, "n_obs must be >= 5");
  require(!c.surrogate.hidden.empty(), Errc::ConfigError,
          "surrogate needs at least one hidden layer");
  for (int h : c.surrogate.hidden)
    require(h >= 1, Errc::ConfigError, "hidden layer width must be >= 1");
  require(c.surrogate.n_colloc >= 2, Errc::ConfigError, "n_colloc too small");
  require(c.search.rounds >= 0 && c.search.iterations >= 0, Errc::ConfigError,
          "rounds and iterations must be >= 0");
  require(c.search.n_samples >= 1, Errc::ConfigError, "n_samples must be >= 1");
  require(c.search.top_k >= 1, Errc::ConfigError, "top_k must be >= 1");
  require(c.search.epsilon > 0 && c.search.epsilon <= 1, Errc::ConfigError,
          "epsilon must be in (0, 1]");
  require(c.selection.n_s >= 1 && c.selection.n_p >= 2, Errc::ConfigError,
          "selection needs n_s >= 1 and n_p >= 2");
}

// ───────────────────────── report types ─────────────────────────

struct TrainSummary {
  int epochs = 0;
  int best_epoch = -1;
  double best_val = 0;
  double final_train = 0;
  double seconds = 0;
};

inline TrainSummary summarize(const TrainReport& r, double seconds) {
  return {r.epochs_run, r.best_epoch, r.best_val, r.final_train_loss, seconds};
}

struct TrajectoryRow {
  int round = 0;           // 1-based
  int iteration = 0;       // 1-based within the round
  double best = kInvalidReward;      // hall-of-fame best after this iteration
  double top_mean = kInvalidReward;  // mean of the top-ε merged rewards
  double batch_mean = 0;             // mean reward of the policy's own batch
};

struct RoundReport {
  SelectionReport selection;  // winner index + votes over the hall of fame
  TrainSummary embed;
  double l2_after_embed = -1;
  double seconds_search = 0;
};

struct RunReport {
  nlohmann::json config;  // exact echo; replaying it reproduces the run
  std::uint64_t seed = 0;
  TrainSummary pretrain;
  double l2_pretrain = -1;
  std::vector<TrajectoryRow> trajectory;
  std::vector<RoundReport> rounds;
  PdeCandidate final_candidate;  // coefficients refit on the final surrogate
  std::string final_equation;    // empty when the search was skipped
  std::string truth_equation;    // truth used for scoring, empty if unknown
  std::optional<DiscoveryScore> score;
  double seconds_total = 0;
  std::string error;      // nonempty when the run aborted partway
  GridDataset reference;  // noise-free (or as-loaded) dataset
  Arr prediction;         // surrogate field on the reference grid
};

// ───────────────────────── equation rendering ─────────────────────────

namespace detail {

inline std::string fmt_g6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline void append_signed_term(std::string& s, bool first, double coeff,
                               const std::string& term) {
  if (first) {
    s += fmt_g6(coeff);
  } else {
    s += coeff < 0 ? " - " : " + ";
    s += fmt_g6(std::abs(coeff));
  }
  s += "*" + term;
}

}  // namespace detail

inline std::string equation_string(const PdeCandidate& c,
                                   const TokenLibrary& lib,
                                   const std::string& lhs_var = "u") {
  if (!c.valid) return "";
  std::string s = lhs_var + "_t = ";
  if (c.terms.empty()) return s + "0";
  for (std::size_t i = 0; i < c.terms.size(); ++i)
    detail::append_signed_term(s, i == 0, c.xi(Eigen::Index(i)),
                               pretty_infix(c.terms[i].tree, lib));
  return s;
}

// Truth equation of a built-in generator, with %.17g coefficients so the
// parsed map is exact. Empty for file sources.
inline std::string builtin_truth(const DataConfig& d) {
  auto g17 = [](double v) { return detail::fmt_g17(v); };
  if (d.source == "burgers")
    return "u_t = -1*u*u_x + " + g17(d.nu) + "*u_xx";
  const double decay = d.growth / d.capacity;
  if (d.source == "fisher_kpp")
    return "u_t = " + g17(d.diffusion) + "*u_xx + " + g17(d.growth) + "*u - " +
           g17(decay) + "*u^2";
  if (d.source == "fisher_kpp_nonlinear")
    return "u_t = " + g17(d.diffusion) + "*u*u_xx + " + g17(d.diffusion) +
           "*u_x^2 + " + g17(d.growth) + "*u - " + g17(decay) + "*u^2";
  return "";
}

// ───────────────────────── report serialization ─────────────────────────

namespace detail {

inline nlohmann::json axis_to_json(const AxisSpec& a) {
  return {{"lo", a.lo}, {"hi", a.hi}, {"n", a.n}};
}

inline AxisSpec axis_from_json(const nlohmann::json& j) {
  AxisSpec a;
  a.lo = j.at("lo").get<double>();
  a.hi = j.at("hi").get<double>();
  a.n = j.at("n").get<int>();
  return a;
}

inline nlohmann::json arr_to_json(const Arr& a) {  // row-major flat list
  nlohmann::json v = nlohmann::json::array();
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) v.push_back(a(i, j));
  return v;
}

inline Arr arr_from_json(const nlohmann::json& j, Eigen::Index rows,
                         Eigen::Index cols) {
  require(Eigen::Index(j.size()) == rows * cols, Errc::IoError,
          "field length does not match axes");
  Arr a(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) a(i, c) = j.at(k++).get<double>();
  return a;
}

inline nlohmann::json summary_to_json(const TrainSummary& s) {
  return {{"epochs", s.epochs},
          {"best_epoch", s.best_epoch},
          {"best_val", s.best_val},
          {"final_train", s.final_train},
          {"seconds", s.seconds}};
}

inline TrainSummary summary_from_json(const nlohmann::json& j) {
  TrainSummary s;
  s.epochs = j.at("epochs").get<int>();
  s.best_epoch = j.at("best_epoch").get<int>();
  s.best_val = j.at("best_val").get<double>();
  s.final_train = j.at("final_train").get<double>();
  s.seconds = j.at("seconds").get<double>();
  return s;
}

// Score matrices hold +inf for degenerate fits; JSON has no inf, so the
// sentinel -1 stands in (scores are otherwise nonnegative).
inline nlohmann::json scores_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      row.push_back(std::isfinite(m(r, c)) ? m(r, c) : -1.0);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat scores_from_json(const nlohmann::json& j) {
  const Eigen::Index rows = Eigen::Index(j.size());
  const Eigen::Index cols = rows ? Eigen::Index(j.at(0).size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    require(Eigen::Index(j.at(r).size()) == cols, Errc::IoError,
            "ragged score matrix");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double v = j.at(r).at(c).get<double>();
      m(r, c) = v < 0 ? std::numeric_limits<double>::infinity() : v;
    }
  }
  return m;
}

}  // namespace detail

inline PdeCandidate candidate_from_json(const nlohmann::json& j,
                                        const TokenLibrary& lib) {
  PdeCandidate c;
  c.traversal_key = j.at("traversal").get<std::string>();
  c.valid = j.at("valid").get<bool>();
  const double rmse = j.at("rmse").get<double>();
  c.rmse = rmse < 0 ? std::numeric_limits<double>::infinity() : rmse;
  c.reward = j.at("reward").get<double>();
  c.n_terms = j.at("n_terms").get<int>();
  c.max_depth = j.at("max_depth").get<int>();
  std::vector<double> coefs;
  for (const nlohmann::json& tj : j.at("terms")) {
    TreeNode tree =
        to_tree(parse_traversal(tj.at("key").get<std::string>(), lib), lib);
    std::vector<FunctionTerm> fts = split_terms(tree, lib);
    require(fts.size() == 1, Errc::IoError, "term key is not a single term");
    c.terms.push_back(std::move(fts[0]));
    coefs.push_back(tj.at("coefficient").get<double>());
  }
  if (!coefs.empty())
    c.xi = Eigen::Map<const Vec>(coefs.data(), Eigen::Index(coefs.size()));
  c.equation_key = term_set_key(c.terms);
  return c;
}

inline nlohmann::json report_to_json(const RunReport& rep) {
  const RunConfig cfg = config_from_json(rep.config);
  const TokenLibrary lib = make_library(cfg.library);
  nlohmann::json j;
  j["config"] = rep.config;
  j["seed"] = rep.seed;
  j["pretrain"] = detail::summary_to_json(rep.pretrain);
  j["l2_pretrain"] = rep.l2_pretrain;
  nlohmann::json traj = nlohmann::json::array();
  for (const TrajectoryRow& r : rep.trajectory)
    traj.push_back({{"round", r.round},
                    {"iteration", r.iteration},
                    {"best", r.best},
                    {"top_mean", r.top_mean},
                    {"batch_mean", r.batch_mean}});
  j["trajectory"] = std::move(traj);
  nlohmann::json rounds = nlohmann::json::array();
  for (const RoundReport& r : rep.rounds) {
    nlohmann::json rj;
    rj["selection"] = selection_to_json(r.selection, lib);
    rj["scores"] = detail::scores_to_json(r.selection.scores);
    rj["embed"] = detail::summary_to_json(r.embed);
    rj["l2_after_embed"] = r.l2_after_embed;
    rj["seconds_search"] = r.seconds_search;
    rounds.push_back(std::move(rj));
  }
  j["rounds"] = std::move(rounds);
  j["final"] = candidate_to_json(rep.final_candidate, lib);
  j["equation"] = rep.final_equation;
  j["truth"] = rep.truth_equation;
  j["score"] = rep.score ? score_to_json(*rep.score) : nlohmann::json();
  j["seconds_total"] = rep.seconds_total;
  j["error"] = rep.error;
  nlohmann::json ref;
  ref["x"] = detail::axis_to_json(rep.reference.x);
  ref["t"] = detail::axis_to_json(rep.reference.t);
  ref["vars"] = rep.reference.vars;
  nlohmann::json values = nlohmann::json::array();
  for (const Arr& f : rep.reference.fields)
    values.push_back(detail::arr_to_json(f));
  ref["values"] = std::move(values);
  ref["generator"] = rep.reference.generator;
  ref["params"] = rep.reference.params;
  j["reference"] = std::move(ref);
  j["prediction"] = rep.prediction.size()
                        ? detail::arr_to_json(rep.prediction)
                        : nlohmann::json::array();
  return j;
}

inline DiscoveryScore score_from_json(const nlohmann::json& j) {
  DiscoveryScore s;
  if (!j.at("E_percent").is_null()) s.e_coeff = j.at("E_percent").get<double>();
  s.e2 = j.at("E2").get<double>();
  s.tpr = j.at("TPR").get<double>();
  s.support_match = j.at("support_match").get<bool>();
  if (!j.at("L2").is_null()) s.l2 = j.at("L2").get<double>();
  for (const nlohmann::json& m : j.at("matched"))
    s.matched.push_back({m.at("term").get<std::string>(),
                         m.at("discovered").get<double>(),
                         m.at("truth").get<double>()});
  return s;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport rep;
  rep.config = j.at("config");
  const RunConfig cfg = config_from_json(rep.config);
  const TokenLibrary lib = make_library(cfg.library);
  rep.seed = j.at("seed").get<std::uint64_t>();
  rep.pretrain = detail::summary_from_json(j.at("pretrain"));
  rep.l2_pretrain = j.at("l2_pretrain").get<double>();
  for (const nlohmann::json& r : j.at("trajectory"))
    rep.trajectory.push_back({r.at("round").get<int>(),
                              r.at("iteration").get<int>(),
                              r.at("best").get<double>(),
                              r.at("top_mean").get<double>(),
                              r.at("batch_mean").get<double>()});
  for (const nlohmann::json& r : j.at("rounds")) {
    RoundReport rr;
    const nlohmann::json& sel = r.at("selection");
    rr.selection.winner = sel.at("winner").get<int>();
    rr.selection.votes = sel.at("votes").get<std::vector<int>>();
    for (const nlohmann::json& c : sel.at("candidates"))
      rr.selection.candidates.push_back(candidate_from_json(c, lib));
    rr.selection.scores = detail::scores_from_json(r.at("scores"));
    rr.embed = detail::summary_from_json(r.at("embed"));
    rr.l2_after_embed = r.at("l2_after_embed").get<double>();
    rr.seconds_search = r.at("seconds_search").get<double>();
    rep.rounds.push_back(std::move(rr));
  }
  rep.final_candidate = candidate_from_json(j.at("final"), lib);
  rep.final_equation = j.at("equation").get<std::string>();
  rep.truth_equation = j.at("truth").get<std::string>();
  if (!j.at("score").is_null()) rep.score = score_from_json(j.at("score"));
  rep.seconds_total = j.at("seconds_total").get<double>();
  rep.error = j.at("error").get<std::string>();
  const nlohmann::json& ref = j.at("reference");
  rep.reference.x = detail::axis_from_json(ref.at("x"));
  rep.reference.t = detail::axis_from_json(ref.at("t"));
  rep.reference.vars = ref.at("vars").get<std::vector<std::string>>();
  for (const nlohmann::json& f : ref.at("values"))
    rep.reference.fields.push_back(
        detail::arr_from_json(f, rep.reference.x.n, rep.reference.t.n));
  rep.reference.generator = ref.at("generator").get<std::string>();
  rep.reference.params = ref.at("params");
  const nlohmann::json& pred = j.at("prediction");
  if (!pred.empty())
    rep.prediction =
        detail::arr_from_json(pred, rep.reference.x.n, rep.reference.t.n);
  return rep;
}

// ───────────────────────── data staging ─────────────────────────

inline GridDataset load_reference(const DataConfig& d) {
  if (d.source == "burgers") return burgers_dataset(d.nu);
  if (d.source == "fisher_kpp")
    return solve_fisher_kpp(d.diffusion, d.growth, d.capacity, false,
                            fisher_grid(), fisher_bump);
  if (d.source == "fisher_kpp_nonlinear")
    return solve_fisher_kpp(d.diffusion, d.growth, d.capacity, true,
                            fisher_grid(), fisher_bump);
  GridDataset data = read_dataset(d.path);
  validate_dataset(data);
  return data;
}

inline Arr grid_points(const GridDataset& d) {
  Arr pts(2, Eigen::Index(d.x.n) * d.t.n);
  Eigen::Index k = 0;
  for (int i = 0; i < d.x.n; ++i)
    for (int j = 0; j < d.t.n; ++j, ++k) {
      pts(0, k) = d.x.coord(i);
      pts(1, k) = d.t.coord(j);
    }
  return pts;
}

inline Arr predict_field(const MlpModel& m, const GridDataset& d) {
  const Arr flat = mlp_predict(m, grid_points(d));
  Arr out(d.x.n, d.t.n);
  Eigen::Index k = 0;
  for (int i = 0; i < d.x.n; ++i)
    for (int j = 0; j < d.t.n; ++j, ++k) out(i, j) = flat(0, k);
  return out;
}

// ───────────────────────── run loop ─────────────────────────

namespace detail {

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

// Keep the K best valid candidates, unique by equation key, ordered by
// (reward desc, key asc) so ties resolve deterministically.
// Hall-of-fame identity is the surviving support (the discovered
// equation), not the proposed term set: distinct traversals that STRidge
// prunes to the same equation are one candidate.
inline std::string support_key(const PdeCandidate& c) {
  return term_set_key(c.terms);
}

inline bool hof_order(const PdeCandidate& a, const PdeCandidate& b) {
  if (a.reward != b.reward) return a.reward > b.reward;
  return support_key(a) < support_key(b);
}

inline void hof_offer(std::vector<PdeCandidate>& hof, const PdeCandidate& c,
                      int top_k) {
  if (!c.valid || c.terms.empty()) return;
  const std::string key = support_key(c);
  bool placed = false;
  for (PdeCandidate& h : hof) {
    if (support_key(h) == key) {
      if (c.reward <= h.reward) return;
      h = c;
      placed = true;
      break;
    }
  }
  if (!placed) hof.push_back(c);
  std::sort(hof.begin(), hof.end(), hof_order);
  if (int(hof.size()) > top_k) hof.resize(std::size_t(top_k));
}

inline void hof_sort_unique(std::vector<PdeCandidate>& hof) {
  std::sort(hof.begin(), hof.end(), hof_order);
  std::vector<PdeCandidate> out;
  for (PdeCandidate& c : hof) {
    bool dup = false;
    for (const PdeCandidate& o : out)
      dup = dup || support_key(o) == support_key(c);
    if (!dup) out.push_back(std::move(c));
  }
  hof = std::move(out);
}

inline double top_fraction_mean(const std::vector<double>& rewards,
                                double eps) {
  if (rewards.empty()) return kInvalidReward;
  std::vector<double> sorted = rewards;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  const std::size_t k = std::max<std::size_t>(
      1, std::size_t(std::ceil(eps * double(sorted.size()))));
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) sum += sorted[i];
  return sum / double(k);
}

}  // namespace detail

// Executes the full loop, filling `rep` progressively so a thrown error
// leaves a usable partial report. `model_out`, when given, receives the
// final surrogate; `log`, when given, receives one line per phase or
// iteration.
inline void run_into(const RunConfig& cfg, RunReport& rep,
                     MlpModel* model_out = nullptr,
                     const std::function<void(const std::string&)>& log = {}) {
  const detail::Stopwatch total;
  try {
    rep.config = config_to_json(cfg);
    rep.seed = cfg.seed;
    validate_config(cfg);
    const TokenLibrary lib = make_library(cfg.library);

    Rng master(cfg.seed);
    const std::uint64_t noise_seed = master.next();
    const std::uint64_t obs_seed = master.next();
    const std::uint64_t colloc_seed = master.next();
    Rng mlp_rng = master.child(1);
    const std::uint64_t pretrain_seed = master.next();
    Rng policy_rng = master.child(2);
    Rng search_rng = master.child(3);
    Rng select_rng = master.child(4);
    Rng local_rng = master.child(5);

    // data staging
    rep.reference = load_reference(cfg.data);
    const GridDataset noisy = add_noise(rep.reference, cfg.data.sigma, noise_seed);
    const ObservationSet obs = sample_observations(
        noisy, std::size_t(cfg.data.n_obs), obs_seed, cfg.data.var);
    const Arr obs_values = obs.values.transpose().array();

    // surrogate + pretraining on the data loss alone
    std::vector<int> sizes;
    sizes.push_back(2);
    for (int h : cfg.surrogate.hidden) sizes.push_back(h);
    sizes.push_back(1);
    MlpModel model = make_mlp(sizes, mlp_rng);
    fit_normalization(model, Vec{{rep.reference.x.lo, rep.reference.t.lo}},
                      Vec{{rep.reference.x.hi, rep.reference.t.hi}});
    TrainConfig tc;
    tc.max_epochs = cfg.surrogate.pretrain_epochs;
    tc.patience = cfg.surrogate.patience;
    tc.lr = cfg.surrogate.lr;
    tc.batch_size = cfg.surrogate.batch_size;
    tc.full_batch_cap = cfg.surrogate.full_batch_cap;
    tc.val_fraction = cfg.surrogate.val_fraction;
    tc.seed = pretrain_seed;
    const LossWeights weights{cfg.surrogate.lambda1, cfg.surrogate.lambda2};
    {
      const detail::Stopwatch sw;
      const TrainReport pre = train(model, obs.points, obs_values, nullptr,
                                    nullptr, nullptr, nullptr, weights, tc);
      rep.pretrain = summarize(pre, sw.seconds());
    }
    rep.prediction = predict_field(model, rep.reference);
    rep.l2_pretrain =
        field_l2(rep.prediction, rep.reference.field(cfg.data.var));
    if (model_out) *model_out = model;
    if (log)
      log("pretrain: " + std::to_string(rep.pretrain.epochs) + " epochs, val " +
          detail::fmt_g6(rep.pretrain.best_val) + ", field L2 " +
          detail::fmt_g6(rep.l2_pretrain));

    // truth for scoring, when one is known
    const std::string truth_text =
        cfg.truth.empty() ? builtin_truth(cfg.data) : cfg.truth;
    rep.truth_equation = truth_text;

    if (cfg.search.rounds <= 0 || cfg.search.iterations <= 0) {
      rep.seconds_total = total.seconds();
      return;  // pretrained surrogate only, no equation
    }

    // evaluation substrate shared by search, selection, and refits
    const Arr colloc =
        sample_collocation(noisy, std::size_t(cfg.surrogate.n_colloc), colloc_seed);
    Arr local;
    if (cfg.surrogate.lambda2 > 0) {
      const Vec side{{noisy.x.step(), noisy.t.step()}};
      local = local_sampling_points(obs.points, side,
                                    cfg.surrogate.local_per_obs, local_rng);
    }
    EvalCache cache;
    std::optional<EvalBasis> basis;
    basis.emplace(model, colloc, lib);
    const EvalConfig ecfg{
        {cfg.search.stridge_kappa, cfg.search.stridge_tol, 25},
        {cfg.search.zeta_terms, cfg.search.zeta_depth}};
    const GenLimits limits{cfg.search.max_len, cfg.search.d_max};
    HybridConfig hcfg;
    hcfg.n = cfg.search.n_samples;
    hcfg.crossover_top = cfg.search.crossover_top;
    hcfg.bank_capacity = cfg.search.bank_capacity;
    hcfg.dsb.n_sub = cfg.search.n_sub;
    {  // derivative balance pairs for every spatial-variable pairing
      const std::vector<int> sp = lib.spatial_vars();
      for (std::size_t a = 0; a < sp.size(); ++a)
        for (std::size_t b = a + 1; b < sp.size(); ++b)
          hcfg.symmetry_pairs.push_back({sp[a], sp[b]});
    }

    PolicyNetwork policy =
        make_policy(lib.size(), cfg.search.policy_hidden, policy_rng);
    PolicyTrainer trainer(policy, cfg.search.policy_lr);
    SubtreeBank bank;
    bank.capacity = cfg.search.bank_capacity;
    std::vector<PdeCandidate> hof;

    PdeCandidate last_winner;
    for (int round = 1; round <= cfg.search.rounds; ++round) {
      RoundReport rr;
      const detail::Stopwatch sw_search;
      for (int iter = 1; iter <= cfg.search.iterations; ++iter) {
        const PdeCandidate* best = hof.empty() ? nullptr : &hof[0];
        HybridResult hr = hybrid_generate(policy, bank, *basis, &cache, best,
                                          limits, ecfg, hcfg, search_rng);
        for (const PdeCandidate& c : hr.evals)
          detail::hof_offer(hof, c, cfg.search.top_k);
        trainer.step(hr.rl, lib, limits, cfg.search.epsilon,
                     cfg.search.lambda_pg);
        TrajectoryRow row;
        row.round = round;
        row.iteration = iter;
        row.best = hof.empty() ? kInvalidReward : hof[0].reward;
        row.top_mean =
            detail::top_fraction_mean(hr.merged_rewards, cfg.search.epsilon);
        row.batch_mean = hr.rl_mean_reward;
        rep.trajectory.push_back(row);
        if (log)
          log("round " + std::to_string(round) + " it " + std::to_string(iter) +
              "/" + std::to_string(cfg.search.iterations) + ": best " +
              detail::fmt_g6(row.best) + ", top mean " +
              detail::fmt_g6(row.top_mean));
      }
      rr.seconds_search = sw_search.seconds();

      require(!hof.empty(), Errc::EmptyBank,
              "search produced no valid candidate");
      rr.selection = select(hof, *basis, &cache, cfg.selection, select_rng);
      last_winner = rr.selection.candidates[std::size_t(rr.selection.winner)];
      if (log)
        log("round " + std::to_string(round) + " winner (" +
            std::to_string(rr.selection.votes[std::size_t(rr.selection.winner)]) +
            "/" + std::to_string(cfg.selection.n_s) + " votes): " +
            equation_string(last_winner, lib, cfg.library.state_vars[0]));

      // embed the winner and retrain with the physics loss
      TrainConfig etc = tc;
      etc.max_epochs = cfg.surrogate.embed_epochs;
      etc.seed = master.next();
      {
        const detail::Stopwatch sw;
        const TrainReport er =
            train(model, obs.points, obs_values, &last_winner, &lib, &colloc,
                  cfg.surrogate.lambda2 > 0 ? &local : nullptr, weights, etc);
        rr.embed = summarize(er, sw.seconds());
      }
      rep.prediction = predict_field(model, rep.reference);
      rr.l2_after_embed =
          field_l2(rep.prediction, rep.reference.field(cfg.data.var));
      if (model_out) *model_out = model;
      if (log)
        log("round " + std::to_string(round) + " embed: " +
            std::to_string(rr.embed.epochs) + " epochs, field L2 " +
            detail::fmt_g6(rr.l2_after_embed));

      // the improved surrogate re-scores the hall of fame
      cache.bump_generation();
      basis.emplace(model, colloc, lib);
      for (PdeCandidate& c : hof)
        c = evaluate_candidate(parse_traversal(c.traversal_key, lib), *basis,
                               &cache, ecfg);
      detail::hof_sort_unique(hof);

      rep.rounds.push_back(std::move(rr));
    }

    // final coefficient refit of the selected support on the final surrogate
    rep.final_candidate =
        evaluate_terms(last_winner.terms, last_winner.traversal_key, *basis,
                       &cache, ecfg);
    rep.final_equation =
        equation_string(rep.final_candidate, lib, cfg.library.state_vars[0]);

    if (!truth_text.empty() && rep.final_candidate.valid) {
      DiscoveryScore s = score_discovery(
          candidate_coeffs(rep.final_candidate), parse_equation(truth_text, lib));
      s.l2 = field_l2(rep.prediction, rep.reference.field(cfg.data.var));
      rep.score = s;
    }
    rep.seconds_total = total.seconds();
  } catch (...) {
    rep.seconds_total = total.seconds();
    throw;
  }
}

inline RunReport run(const RunConfig& cfg) {
  RunReport rep;
  run_into(cfg, rep);
  return rep;
}

}  // namespace pded
