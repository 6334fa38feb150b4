// Command-line front end: simulate reference datasets, run the discovery
// pipeline, score a saved report against a stated truth equation, and
// render report artifacts. Exit codes: 0 success, 1 runtime failure,
// 2 usage error.
#include "pded/orchestrator.hpp"
#include "pded/report.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace {

using namespace pded;

// ───────────────────────── simulate ─────────────────────────

struct SimulateArgs {
  std::string equation = "burgers";
  double nu = 0.1;
  double diffusion = 0.02;
  double growth = 10.0;
  double capacity = 1.0;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  std::string out = "data";
  std::string format = "csv";
};

// Interior-residual check of the generated field against its own dynamics;
// reported so a bad grid or parameter choice is visible immediately.
double residual_ratio(const GridDataset& clean, const SimulateArgs& a) {
  const CentralDerivs d = central_derivatives(clean);
  Arr rhs;
  if (a.equation == "burgers") {
    rhs = -d.u * d.ux + a.nu * d.uxx;
  } else {
    const double decay = a.growth / a.capacity;
    rhs = a.diffusion * d.uxx + a.growth * d.u - decay * d.u.square();
    if (a.equation == "fisher_kpp_nonlinear")
      rhs = a.diffusion * d.u * d.uxx + a.diffusion * d.ux.square() +
            a.growth * d.u - decay * d.u.square();
  }
  const double num = std::sqrt((d.ut - rhs).square().mean());
  const double den = std::sqrt(d.ut.square().mean());
  return num / den;
}

int cmd_simulate(const SimulateArgs& a) {
  DataConfig dc;
  dc.source = a.equation;
  dc.nu = a.nu;
  dc.diffusion = a.diffusion;
  dc.growth = a.growth;
  dc.capacity = a.capacity;
  const GridDataset clean = load_reference(dc);
  const GridDataset noisy = add_noise(clean, a.sigma, a.seed);

  std::error_code ec;
  std::filesystem::create_directories(a.out, ec);
  require(!ec, Errc::IoError, "cannot create directory '" + a.out + "'");
  const std::string ext = a.format == "binary" ? ".bin" : ".csv";
  const std::string path =
      (std::filesystem::path(a.out) / ("dataset" + ext)).string();
  if (a.format == "binary")
    write_dataset_binary(noisy, path);
  else
    write_dataset_csv(noisy, path);

  std::cout << "wrote " << path << " (" << noisy.x.n << "x" << noisy.t.n
            << " grid, sigma " << a.sigma << ")\n";
  std::cout << "solver residual ratio " << residual_ratio(clean, a) << "\n";
  return 0;
}

// ───────────────────────── discover ─────────────────────────

struct DiscoverArgs {
  std::string config;
  std::string data;
  std::string out = "out";
  std::vector<std::string> sets;
  bool has_seed = false;
  std::uint64_t seed = 0;
  bool has_rounds = false;
  int rounds = 0;
  bool quiet = false;
};

void print_score(const DiscoveryScore& s) {
  std::cout << "E   = "
            << (s.e_coeff ? detail::fmt_g6(*s.e_coeff) + "%"
                          : std::string("n/a (support mismatch)"))
            << "\n";
  std::cout << "E2  = " << detail::fmt_g6(s.e2) << "\n";
  std::cout << "TPR = " << detail::fmt_g6(s.tpr) << "\n";
  if (s.l2) std::cout << "L2  = " << detail::fmt_g6(*s.l2) << "\n";
}

int cmd_discover(const DiscoverArgs& a) {
  RunConfig cfg;
  try {  // bad keys or values in the assembled config are usage errors
    nlohmann::json raw = nlohmann::json::object();
    if (!a.config.empty()) raw = load_json_file(a.config);
    if (!a.data.empty()) {
      raw["data"]["source"] = "file";
      raw["data"]["path"] = a.data;
    }
    if (a.has_seed) raw["seed"] = a.seed;
    if (a.has_rounds) raw["search"]["rounds"] = a.rounds;
    for (const std::string& kv : a.sets) apply_override(raw, kv);
    cfg = config_from_json(raw);
    validate_config(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  RunReport rep;
  MlpModel model;
  const auto log = [&](const std::string& line) {
    if (!a.quiet) std::cerr << line << "\n";
  };
  int rc = 0;
  try {
    run_into(cfg, rep, &model, log);
  } catch (const std::exception& e) {
    rep.error = e.what();
    rc = 1;
  }
  write_report_artifacts(rep, a.out);
  if (!model.W.empty())
    save_json_file(mlp_to_json(model),
                   (std::filesystem::path(a.out) / "surrogate.json").string());

  if (rc != 0) {
    std::cerr << "error: " << rep.error << "\n";
    std::cerr << "partial report written to " << a.out << "/report.json\n";
    return rc;
  }
  std::cout << "report written to " << a.out << "/report.json\n";
  if (!rep.final_equation.empty()) {
    std::cout << "discovered: " << rep.final_equation << "\n";
    if (!rep.truth_equation.empty())
      std::cout << "truth:      " << rep.truth_equation << "\n";
    if (rep.score) print_score(*rep.score);
  } else {
    std::cout << "no search configured; pretrained surrogate only (L2 "
              << detail::fmt_g6(rep.l2_pretrain) << ")\n";
  }
  return 0;
}

// ───────────────────────── score ─────────────────────────

int cmd_score(const std::string& report_path, const std::string& truth) {
  const RunReport rep = report_from_json(load_json_file(report_path));
  require(rep.final_candidate.valid, Errc::ConfigError,
          "report has no discovered equation to score");
  const RunConfig cfg = config_from_json(rep.config);
  const TokenLibrary lib = make_library(cfg.library);
  DiscoveryScore s = score_discovery(candidate_coeffs(rep.final_candidate),
                                     parse_equation(truth, lib));
  if (rep.prediction.size() && !rep.reference.fields.empty())
    s.l2 = field_l2(rep.prediction, rep.reference.field(cfg.data.var));
  std::cout << "discovered: " << rep.final_equation << "\n";
  std::cout << "truth:      " << truth << "\n";
  print_score(s);
  return 0;
}

// ───────────────────────── report ─────────────────────────

int cmd_report(const std::string& report_path, const std::string& out) {
  const RunReport rep = report_from_json(load_json_file(report_path));
  write_report_artifacts(rep, out);
  std::cout << "artifacts written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-driven PDE discovery pipeline"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "Generate a reference dataset with optional noise");
  simulate->add_option("--equation", sim.equation, "System to solve")
      ->check(CLI::IsMember({"burgers", "fisher_kpp", "fisher_kpp_nonlinear"}))
      ->capture_default_str();
  simulate->add_option("--nu", sim.nu, "Burgers viscosity")
      ->capture_default_str();
  simulate->add_option("--diffusion", sim.diffusion, "Fisher-KPP D")
      ->capture_default_str();
  simulate->add_option("--growth", sim.growth, "Fisher-KPP r")
      ->capture_default_str();
  simulate->add_option("--capacity", sim.capacity, "Fisher-KPP k")
      ->capture_default_str();
  simulate->add_option("--sigma", sim.sigma, "Noise level")
      ->capture_default_str();
  simulate->add_option("--seed", sim.seed, "Noise seed")
      ->capture_default_str();
  simulate->add_option("--out", sim.out, "Output directory")
      ->capture_default_str();
  simulate->add_option("--format", sim.format, "Dataset format")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();

  DiscoverArgs dis;
  CLI::App* discover =
      app.add_subcommand("discover", "Run the full discovery pipeline");
  discover->add_option("--config", dis.config, "Run configuration JSON");
  discover->add_option("--data", dis.data, "Dataset file (sets data source)");
  discover->add_option("--out", dis.out, "Output directory")
      ->capture_default_str();
  CLI::Option* seed_opt =
      discover->add_option("--seed", dis.seed, "Master seed override");
  CLI::Option* rounds_opt =
      discover->add_option("--rounds", dis.rounds, "Alternation rounds override");
  discover->add_option("--set", dis.sets,
                       "Config override key.path=value (repeatable)");
  discover->add_flag("--quiet", dis.quiet, "Suppress progress lines");

  std::string score_report, score_truth;
  CLI::App* score =
      app.add_subcommand("score", "Score a report against a truth equation");
  score->add_option("--report", score_report, "report.json path")->required();
  score->add_option("--truth", score_truth, "Truth equation, e.g. "
                    "\"u_t = -1*u*u_x + 0.1*u_xx\"")
      ->required();

  std::string render_report, render_out = "out";
  CLI::App* render =
      app.add_subcommand("report", "Render plots and CSVs from a report");
  render->add_option("--report", render_report, "report.json path")->required();
  render->add_option("--out", render_out, "Output directory")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim);
    if (discover->parsed()) {
      dis.has_seed = seed_opt->count() > 0;
      dis.has_rounds = rounds_opt->count() > 0;
      return cmd_discover(dis);
    }
    if (score->parsed()) return cmd_score(score_report, score_truth);
    if (render->parsed()) return cmd_report(render_report, render_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
