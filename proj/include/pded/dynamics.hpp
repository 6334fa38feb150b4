// Synthetic ground-truth generation: explicit finite-difference reference
// solvers for Burgers and Fisher-KPP dynamics, Gaussian noise injection,
// observation/collocation sampling, and grid-dataset file I/O.
//
// Solvers run forward Euler with central space differences on the
// endpoint-inclusive output grid, substepping at a quarter of the explicit
// stability bound. A solve that goes non-finite is retried with the substep
// halved (three retries) before failing; a substep so small that an output
// interval exceeds the step budget fails immediately, since retries only
// shrink it further.
#pragma once

#include "pded/common.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace pded {

// ───────────────────────── grid container ─────────────────────────

// Endpoint-inclusive uniform axis.
struct AxisSpec {
  double lo = 0.0;
  double hi = 1.0;
  int n = 2;

  double step() const { return (hi - lo) / double(n - 1); }
  double coord(int i) const { return lo + step() * double(i); }
};

// Space-time grid with one field per state variable. Fields are n_x × n_t;
// the flat row-major index of node (i, j) is i * n_t + j.
struct GridDataset {
  AxisSpec x;
  AxisSpec t;
  std::vector<std::string> vars;
  std::vector<Arr> fields;
  std::string generator;                            // provenance
  nlohmann::json params = nlohmann::json::object(); // provenance
  double sigma = 0.0;                               // noise level applied
  std::uint64_t seed = 0;                           // noise seed

  const Arr& field(const std::string& name) const {
    for (std::size_t i = 0; i < vars.size(); ++i)
      if (vars[i] == name) return fields[i];
    throw Error(Errc::UnsupportedVariable, "dataset has no field '" + name + "'");
  }
};

inline void validate_dataset(const GridDataset& d) {
  if (!(d.x.lo < d.x.hi) || d.x.n < 2 || !(d.t.lo < d.t.hi) || d.t.n < 2)
    throw Error(Errc::ConfigError, "axes must be increasing with >= 2 points");
  if (d.vars.empty() || d.vars.size() != d.fields.size())
    throw Error(Errc::DimensionMismatch, "one field required per state variable");
  for (const Arr& f : d.fields) {
    if (f.rows() != d.x.n || f.cols() != d.t.n)
      throw Error(Errc::DimensionMismatch, "field shape does not match axes");
    if (!f.allFinite())
      throw Error(Errc::NonFiniteColumn, "dataset field has non-finite values");
  }
}

// ───────────────────────── reference solvers ─────────────────────────

enum class Boundary { Periodic, ZeroFlux };

struct SolveGrid {
  AxisSpec x;
  AxisSpec t;
};

using ScalarFn = std::function<double(double)>;

namespace detail {

// Shifted neighbor copies with boundary closure on the inclusive grid:
// periodic identifies node 0 with node n-1, so the wrap skips the duplicate
// endpoint; zero-flux mirrors across the boundary node.
inline void neighbor_shift(const Eigen::ArrayXd& u, Boundary bc,
                           Eigen::ArrayXd& up, Eigen::ArrayXd& um) {
  const Eigen::Index n = u.size();
  up.resize(n);
  um.resize(n);
  up.head(n - 1) = u.tail(n - 1);
  um.tail(n - 1) = u.head(n - 1);
  if (bc == Boundary::Periodic) {
    up(n - 1) = u(1);
    um(0) = u(n - 2);
  } else {
    up(n - 1) = u(n - 2);
    um(0) = u(1);
  }
}

// One forward-Euler pass at a fixed substep factor. Returns false as soon
// as an output column goes non-finite. `rhs(u, ux, uxx, du)` fills the time
// derivative; `stab(u)` returns the current explicit stability bound.
template <class Rhs, class Stab>
bool integrate_attempt(const SolveGrid& g, Boundary bc, const Eigen::ArrayXd& u0,
                       double factor, Rhs&& rhs, Stab&& stab, Arr& out) {
  const int nx = g.x.n;
  const int nt = g.t.n;
  const double h = g.x.step();
  const double dt_out = g.t.step();
  const std::size_t max_substeps = 1000000;
  Eigen::ArrayXd u = u0, up, um, ux, uxx, du;
  out = Arr::Zero(nx, nt);
  out.col(0) = u;
  if (!u.allFinite()) return false;
  for (int k = 1; k < nt; ++k) {
    double tcur = 0.0;
    std::size_t steps = 0;
    while (tcur < dt_out - 1e-12) {
      if (++steps > max_substeps)
        throw Error(Errc::UnstableSolve, "substep budget exhausted");
      const double dt = std::min(stab(u) / factor, dt_out - tcur);
      neighbor_shift(u, bc, up, um);
      ux = (up - um) / (2.0 * h);
      uxx = (up - 2.0 * u + um) / (h * h);
      rhs(u, ux, uxx, du);
      u += dt * du;
      tcur += dt;
    }
    if (bc == Boundary::Periodic) u(nx - 1) = u(0);
    out.col(k) = u;
    if (!u.allFinite()) return false;
  }
  return true;
}

template <class Rhs, class Stab>
Arr integrate_retry(const SolveGrid& g, Boundary bc, const Eigen::ArrayXd& u0,
                    double factor0, Rhs&& rhs, Stab&& stab, double& factor_used) {
  double factor = factor0;
  for (int attempt = 0; attempt < 4; ++attempt, factor *= 2.0) {
    Arr out;
    if (integrate_attempt(g, bc, u0, factor, rhs, stab, out)) {
      factor_used = factor;
      return out;
    }
  }
  throw Error(Errc::UnstableSolve, "non-finite field after substep retries");
}

inline Eigen::ArrayXd eval_ic(const AxisSpec& x, const ScalarFn& ic) {
  Eigen::ArrayXd u0(x.n);
  for (int i = 0; i < x.n; ++i) u0(i) = ic(x.coord(i));
  return u0;
}

}  // namespace detail

// u_t = -u u_x + nu u_xx.
inline GridDataset solve_burgers(double nu, const SolveGrid& g, const ScalarFn& ic,
                                 Boundary bc = Boundary::Periodic,
                                 double substep_factor = 4.0) {
  if (g.x.n < 3 || g.t.n < 2) throw Error(Errc::ConfigError, "grid too small");
  if (nu < 0.0) throw Error(Errc::ConfigError, "nu must be >= 0");
  const double h = g.x.step();
  auto rhs = [nu](const Eigen::ArrayXd& u, const Eigen::ArrayXd& ux,
                  const Eigen::ArrayXd& uxx, Eigen::ArrayXd& du) {
    du = -u * ux + nu * uxx;
  };
  auto stab = [nu, h](const Eigen::ArrayXd& u) {
    const double umax = std::max(1e-12, u.abs().maxCoeff());
    const double adv = h / umax;
    return nu > 0.0 ? std::min(adv, h * h / (2.0 * nu)) : adv;
  };
  double used = substep_factor;
  GridDataset d;
  d.x = g.x;
  d.t = g.t;
  d.vars = {"u"};
  d.fields.push_back(
      detail::integrate_retry(g, bc, detail::eval_ic(g.x, ic), substep_factor, rhs, stab, used));
  d.generator = "burgers";
  d.params = {{"nu", nu}, {"substep_factor", used}};
  return d;
}

// Classical: u_t = D u_xx + r u - (r/k) u^2.
// Nonlinear-diffusion variant: u_t = D u u_xx + D u_x^2 + r u - (r/k) u^2.
inline GridDataset solve_fisher_kpp(double D, double r, double k, bool nonlinear,
                                    const SolveGrid& g, const ScalarFn& ic,
                                    Boundary bc = Boundary::ZeroFlux,
                                    double substep_factor = 4.0) {
  if (g.x.n < 3 || g.t.n < 2) throw Error(Errc::ConfigError, "grid too small");
  if (D < 0.0 || k <= 0.0) throw Error(Errc::ConfigError, "need D >= 0 and k > 0");
  const double h = g.x.step();
  const double rk = r / k;
  auto rhs = [D, r, rk, nonlinear](const Eigen::ArrayXd& u, const Eigen::ArrayXd& ux,
                                   const Eigen::ArrayXd& uxx, Eigen::ArrayXd& du) {
    if (nonlinear)
      du = D * u * uxx + D * ux.square() + r * u - rk * u.square();
    else
      du = D * uxx + r * u - rk * u.square();
  };
  auto stab = [D, r, h, nonlinear](const Eigen::ArrayXd& u) {
    const double dcoef = std::max(nonlinear ? D * u.abs().maxCoeff() : D, 1e-12);
    return std::min(h * h / (2.0 * dcoef), 1.0 / (2.0 * std::abs(r)));
  };
  double used = substep_factor;
  GridDataset d;
  d.x = g.x;
  d.t = g.t;
  d.vars = {"u"};
  d.fields.push_back(
      detail::integrate_retry(g, bc, detail::eval_ic(g.x, ic), substep_factor, rhs, stab, used));
  d.generator = nonlinear ? "fisher_kpp_nonlinear" : "fisher_kpp";
  d.params = {{"D", D}, {"r", r}, {"k", k}, {"substep_factor", used}};
  return d;
}

// Canonical datasets: grids and ICs the acceptance runs use throughout.
inline SolveGrid burgers_grid() { return {{-8.0, 8.0, 256}, {0.0, 10.0, 101}}; }
inline SolveGrid fisher_grid() { return {{-1.0, 1.0, 199}, {0.0, 1.0, 99}}; }

inline double burgers_bump(double x) { return std::exp(-(x + 1.0) * (x + 1.0)); }
inline double fisher_bump(double x) { return 0.5 * std::exp(-25.0 * x * x); }

inline GridDataset burgers_dataset(double nu = 0.1) {
  return solve_burgers(nu, burgers_grid(), burgers_bump);
}

inline GridDataset fisher_dataset(bool nonlinear) {
  return solve_fisher_kpp(0.02, 10.0, 1.0, nonlinear, fisher_grid(), fisher_bump);
}

// ───────────────────────── noise injection ─────────────────────────

// u += sigma * std(u) * N(0,1) per point, std over the whole clean field.
// sigma = 0 leaves fields bitwise intact. Drawing order is field-major,
// then row-major over the grid.
inline GridDataset add_noise(const GridDataset& data, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw Error(Errc::ConfigError, "sigma must be >= 0");
  GridDataset d = data;
  d.sigma = sigma;
  d.seed = seed;
  if (sigma == 0.0) return d;
  Rng rng(seed);
  for (Arr& f : d.fields) {
    const double mu = f.mean();
    const double scale = sigma * std::sqrt((f - mu).square().mean());
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (Eigen::Index j = 0; j < f.cols(); ++j) f(i, j) += scale * rng.normal();
  }
  return d;
}

// ───────────────────────── point sampling ─────────────────────────

struct ObservationSet {
  Arr points;                        // 2 × N: row 0 = x, row 1 = t
  Vec values;                        // N
  std::vector<std::size_t> indices;  // unique flat grid indices (i * n_t + j)
  double sigma = 0.0;
};

// Uniform draw without replacement over the grid nodes of one variable.
inline ObservationSet sample_observations(const GridDataset& data, std::size_t n_m,
                                          std::uint64_t seed,
                                          const std::string& var = "u") {
  const Arr& f = data.field(var);
  const std::size_t total = std::size_t(f.size());
  if (n_m > total)
    throw Error(Errc::TooManyRequested,
                "requested " + std::to_string(n_m) + " of " + std::to_string(total) +
                    " grid points");
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(n_m);
  const std::size_t nt = std::size_t(data.t.n);
  ObservationSet obs;
  obs.points = Arr(2, Eigen::Index(n_m));
  obs.values = Vec(Eigen::Index(n_m));
  obs.sigma = data.sigma;
  for (std::size_t p = 0; p < n_m; ++p) {
    const std::size_t i = idx[p] / nt;
    const std::size_t j = idx[p] % nt;
    obs.points(0, Eigen::Index(p)) = data.x.coord(int(i));
    obs.points(1, Eigen::Index(p)) = data.t.coord(int(j));
    obs.values(Eigen::Index(p)) = f(Eigen::Index(i), Eigen::Index(j));
  }
  obs.indices = std::move(idx);
  return obs;
}

// Uniform continuous points over the open interior of the space-time box.
inline Arr sample_collocation(const AxisSpec& x, const AxisSpec& t, std::size_t n_c,
                              std::uint64_t seed) {
  Rng rng(seed);
  auto open_uniform = [&rng](double lo, double hi) {
    double v = rng.uniform(lo, hi);
    while (v == lo || v == hi) v = rng.uniform(lo, hi);
    return v;
  };
  Arr pts(2, Eigen::Index(n_c));
  for (std::size_t p = 0; p < n_c; ++p) {
    pts(0, Eigen::Index(p)) = open_uniform(x.lo, x.hi);
    pts(1, Eigen::Index(p)) = open_uniform(t.lo, t.hi);
  }
  return pts;
}

inline Arr sample_collocation(const GridDataset& data, std::size_t n_c,
                              std::uint64_t seed) {
  return sample_collocation(data.x, data.t, n_c, seed);
}

// ───────────────────────── discretization check ─────────────────────────

// Interior central differences of a gridded field; blocks are
// (n_x - 2) × (n_t - 2).
struct CentralDerivs {
  Arr u, ut, ux, uxx;
};

inline CentralDerivs central_derivatives(const GridDataset& d,
                                         const std::string& var = "u") {
  const Arr& f = d.field(var);
  const Eigen::Index nx = f.rows();
  const Eigen::Index nt = f.cols();
  if (nx < 3 || nt < 3)
    throw Error(Errc::DimensionMismatch, "grid too small for interior differences");
  const double h = d.x.step();
  const double dt = d.t.step();
  CentralDerivs c;
  c.u = f.block(1, 1, nx - 2, nt - 2);
  c.ut = (f.block(1, 2, nx - 2, nt - 2) - f.block(1, 0, nx - 2, nt - 2)) / (2.0 * dt);
  c.ux = (f.block(2, 1, nx - 2, nt - 2) - f.block(0, 1, nx - 2, nt - 2)) / (2.0 * h);
  c.uxx = (f.block(2, 1, nx - 2, nt - 2) - 2.0 * f.block(1, 1, nx - 2, nt - 2) +
           f.block(0, 1, nx - 2, nt - 2)) /
          (h * h);
  return c;
}

// ───────────────────────── file round-trip ─────────────────────────

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline double parse_double(const std::string& s) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end == t.c_str() || *end != '\0')
    throw Error(Errc::IoError, "bad numeric field '" + s + "'");
  return v;
}

// "axes: x:min:max:n, t:min:max:n; vars: u; sigma: s; seed: n"
inline std::string header_record(const GridDataset& d) {
  std::string vars;
  for (std::size_t i = 0; i < d.vars.size(); ++i) vars += (i ? "," : "") + d.vars[i];
  return "axes: x:" + fmt_g17(d.x.lo) + ":" + fmt_g17(d.x.hi) + ":" +
         std::to_string(d.x.n) + ", t:" + fmt_g17(d.t.lo) + ":" + fmt_g17(d.t.hi) +
         ":" + std::to_string(d.t.n) + "; vars: " + vars +
         "; sigma: " + fmt_g17(d.sigma) + "; seed: " + std::to_string(d.seed);
}

inline std::string provenance_record(const GridDataset& d) {
  return "generator: " + d.generator + "; params: " + d.params.dump();
}

inline AxisSpec parse_axis(const std::string& seg, const char* name) {
  const std::vector<std::string> parts = split(trim(seg), ':');
  if (parts.size() != 4 || parts[0] != name)
    throw Error(Errc::IoError, "bad axis record '" + seg + "'");
  AxisSpec a;
  a.lo = parse_double(parts[1]);
  a.hi = parse_double(parts[2]);
  a.n = int(parse_double(parts[3]));
  return a;
}

inline void parse_header(const std::string& rec, GridDataset& d) {
  bool have_axes = false, have_vars = false;
  for (const std::string& raw : split(rec, ';')) {
    const std::string sec = trim(raw);
    if (sec.rfind("axes: ", 0) == 0) {
      const std::vector<std::string> axes = split(sec.substr(6), ',');
      if (axes.size() != 2) throw Error(Errc::IoError, "expected x and t axes");
      d.x = parse_axis(axes[0], "x");
      d.t = parse_axis(axes[1], "t");
      have_axes = true;
    } else if (sec.rfind("vars: ", 0) == 0) {
      d.vars.clear();
      for (const std::string& v : split(sec.substr(6), ','))
        d.vars.push_back(trim(v));
      have_vars = !d.vars.empty();
    } else if (sec.rfind("sigma: ", 0) == 0) {
      d.sigma = parse_double(sec.substr(7));
    } else if (sec.rfind("seed: ", 0) == 0) {
      try {
        d.seed = std::stoull(trim(sec.substr(6)));
      } catch (const std::exception&) {
        throw Error(Errc::IoError, "bad seed field '" + sec + "'");
      }
    }
  }
  if (!have_axes || !have_vars)
    throw Error(Errc::IoError, "header record missing axes or vars");
}

inline void parse_provenance(const std::string& rec, GridDataset& d) {
  if (rec.rfind("generator: ", 0) != 0) return;
  const std::size_t cut = rec.find("; params: ");
  if (cut == std::string::npos) return;
  d.generator = rec.substr(11, cut - 11);
  try {
    d.params = nlohmann::json::parse(rec.substr(cut + 10));
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::IoError, "bad provenance params");
  }
}

}  // namespace detail

inline void write_dataset_csv(const GridDataset& d, std::ostream& out) {
  validate_dataset(d);
  out << "# " << detail::header_record(d) << "\n";
  out << "# " << detail::provenance_record(d) << "\n";
  for (int i = 0; i < d.x.n; ++i) {
    const std::string xs = detail::fmt_g17(d.x.coord(i));
    for (int j = 0; j < d.t.n; ++j) {
      out << xs << ',' << detail::fmt_g17(d.t.coord(j));
      for (const Arr& f : d.fields) out << ',' << detail::fmt_g17(f(i, j));
      out << '\n';
    }
  }
}

inline GridDataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0)
    throw Error(Errc::IoError, "missing dataset header");
  GridDataset d;
  detail::parse_header(detail::trim(line.substr(2)), d);
  const std::size_t nvars = d.vars.size();
  const std::size_t total = std::size_t(d.x.n) * std::size_t(d.t.n);
  d.fields.assign(nvars, Arr::Zero(d.x.n, d.t.n));
  std::size_t row = 0;
  while (std::getline(in, line)) {
    const std::string rec = detail::trim(line);
    if (rec.empty()) continue;
    if (rec.rfind("# ", 0) == 0 || rec[0] == '#') {
      detail::parse_provenance(detail::trim(rec.substr(1)), d);
      continue;
    }
    const std::vector<std::string> cols = detail::split(rec, ',');
    if (cols.size() != 2 + nvars)
      throw Error(Errc::IoError, "expected " + std::to_string(2 + nvars) +
                                     " columns, got " + std::to_string(cols.size()));
    if (row >= total) throw Error(Errc::IoError, "more rows than grid points");
    const Eigen::Index i = Eigen::Index(row / std::size_t(d.t.n));
    const Eigen::Index j = Eigen::Index(row % std::size_t(d.t.n));
    for (std::size_t v = 0; v < nvars; ++v)
      d.fields[v](i, j) = detail::parse_double(cols[2 + v]);
    ++row;
  }
  if (row != total)
    throw Error(Errc::IoError, "expected " + std::to_string(total) + " rows, got " +
                                   std::to_string(row));
  validate_dataset(d);
  return d;
}

// Compact binary variant carrying the same header record.
inline void write_dataset_binary(const GridDataset& d, std::ostream& out) {
  validate_dataset(d);
  const std::string header = detail::header_record(d);
  const std::string prov = detail::provenance_record(d);
  auto put_u32 = [&out](std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  };
  out.write("PDEDGRID", 8);
  put_u32(1);
  put_u32(std::uint32_t(header.size()));
  out.write(header.data(), std::streamsize(header.size()));
  put_u32(std::uint32_t(prov.size()));
  out.write(prov.data(), std::streamsize(prov.size()));
  std::vector<double> buf;
  buf.reserve(std::size_t(d.x.n) * std::size_t(d.t.n));
  for (const Arr& f : d.fields) {
    buf.clear();
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (Eigen::Index j = 0; j < f.cols(); ++j) buf.push_back(f(i, j));
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size() * sizeof(double)));
  }
}

inline GridDataset read_dataset_binary(std::istream& in) {
  char magic[8] = {};
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "PDEDGRID", 8) != 0)
    throw Error(Errc::IoError, "not a binary dataset");
  auto get_u32 = [&in]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw Error(Errc::IoError, "truncated binary dataset");
    return v;
  };
  if (get_u32() != 1) throw Error(Errc::IoError, "unsupported binary version");
  auto get_str = [&in, &get_u32]() {
    std::string s(get_u32(), '\0');
    in.read(s.data(), std::streamsize(s.size()));
    if (!in) throw Error(Errc::IoError, "truncated binary dataset");
    return s;
  };
  GridDataset d;
  detail::parse_header(get_str(), d);
  detail::parse_provenance(get_str(), d);
  const std::size_t per_var = std::size_t(d.x.n) * std::size_t(d.t.n);
  std::vector<double> buf(per_var);
  for (std::size_t v = 0; v < d.vars.size(); ++v) {
    in.read(reinterpret_cast<char*>(buf.data()),
            std::streamsize(per_var * sizeof(double)));
    if (!in) throw Error(Errc::IoError, "truncated binary dataset");
    Arr f(d.x.n, d.t.n);
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (Eigen::Index j = 0; j < f.cols(); ++j)
        f(i, j) = buf[std::size_t(i) * std::size_t(d.t.n) + std::size_t(j)];
    d.fields.push_back(std::move(f));
  }
  validate_dataset(d);
  return d;
}

inline void write_dataset_csv(const GridDataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  write_dataset_csv(d, out);
}

inline void write_dataset_binary(const GridDataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  write_dataset_binary(d, out);
}

// Reads either format, sniffing the binary magic.
inline GridDataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  char magic[8] = {};
  in.read(magic, 8);
  in.clear();
  in.seekg(0);
  if (std::memcmp(magic, "PDEDGRID", 8) == 0) return read_dataset_binary(in);
  return read_dataset_csv(in);
}

}  // namespace pded
