// Candidate evaluation against a frozen surrogate: term columns via
// generalized-Leibniz tree interpretation, the Θ/u_t system, STRidge
// coefficient fitting, the parsimony-penalized reward, and the
// generation-scoped evaluation caches.
//
// Terms are compositions of network outputs and coordinates. A term's
// spatial derivative therefore follows from the chain rule over the tree
// with network derivative rows as leaf seeds, so evaluating a term costs
// elementwise vector math only; network passes happen once per generation
// inside EvalBasis and are shared by every term and candidate.
#pragma once

#include "pded/expr.hpp"
#include "pded/mlp.hpp"

#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <unordered_map>

namespace pded {

// ───────────────────────── axis mapping ─────────────────────────

// Point-matrix row layout: spatial variables in library order, time last.
struct AxisMap {
  std::vector<int> spatial_ords;  // lib ordinal per spatial axis
  int time_axis = -1;
  int n_axes = 0;
  std::unordered_map<int, int> axis_of_ord;
  std::unordered_map<int, int> state_row_of_ord;

  explicit AxisMap(const TokenLibrary& lib) {
    for (int ord : lib.spatial_vars()) {
      axis_of_ord[ord] = n_axes++;
      spatial_ords.push_back(ord);
    }
    time_axis = n_axes++;
    for (int i = 0; i < lib.size(); ++i)
      if (lib.kind(i) == TokenKind::TimeVar) axis_of_ord[i] = time_axis;
    int r = 0;
    for (int ord : lib.state_vars()) state_row_of_ord[ord] = r++;
  }
};

using Alpha = std::vector<int>;  // derivative order per input axis

namespace detail {
inline std::string alpha_key(const Alpha& a) {
  std::string s;
  for (int v : a) { s += char('0' + v); }
  return s;
}
inline double binom(int n, int k) {
  double r = 1;
  for (int i = 1; i <= k; ++i) r = r * double(n - k + i) / double(i);
  return r;
}
// All β with 0 ≤ β_i ≤ a_i, with the product of per-axis binomials.
inline void sub_indices(const Alpha& a, std::vector<std::pair<Alpha, double>>& out) {
  out.clear();
  out.push_back({Alpha(a.size(), 0), 1.0});
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0) continue;
    std::vector<std::pair<Alpha, double>> next;
    for (const auto& [b, c] : out) {
      for (int v = 0; v <= a[i]; ++v) {
        Alpha nb = b;
        nb[i] = v;
        next.push_back({std::move(nb), c * binom(a[i], v)});
      }
    }
    out = std::move(next);
  }
}
}  // namespace detail

// ───────────────────────── evaluation basis ─────────────────────────

// Frozen surrogate snapshot instantiated at one collocation set. Derivative
// rows build lazily (one graph-backward ladder per new multi-index) and are
// memoized; safe for concurrent readers.
class EvalBasis {
 public:
  EvalBasis(const MlpModel& model, Arr points, const TokenLibrary& lib)
      : model_(model), axes_(lib), lib_(&lib) {
    require(points.rows() == axes_.n_axes, Errc::DimensionMismatch,
            "points rows != spatial axes + time");
    require(model_.input_dim() == axes_.n_axes, Errc::DimensionMismatch,
            "model input dim != axes");
    n_ = int(points.cols());
    graph_.emplace(tape_, model_, std::move(points));
  }
  EvalBasis(const EvalBasis&) = delete;
  EvalBasis& operator=(const EvalBasis&) = delete;

  int n_points() const { return n_; }
  const AxisMap& axes() const { return axes_; }
  const TokenLibrary& lib() const { return *lib_; }
  const MlpModel& model() const { return model_; }
  const Arr& points() const { return tape_.value(graph_->input()); }

  // Network builds performed (one per distinct derivative multi-index).
  int network_builds() const { return builds_; }

  // D^alpha of state-variable row; alpha spans all axes including time.
  const Eigen::ArrayXd& state_row(int state, const Alpha& alpha) {
    const std::string key = std::to_string(state) + ":" + detail::alpha_key(alpha);
    {
      std::lock_guard<std::mutex> lk(mtx_);
      auto it = rows_.find(key);
      if (it != rows_.end()) return it->second;
    }
    // build outside the map lookup but under the same lock: tape mutation
    // must be exclusive
    std::lock_guard<std::mutex> lk(mtx_);
    auto it = rows_.find(key);
    if (it != rows_.end()) return it->second;
    NodeId node = graph_->state_derivative(state, alpha);
    ++builds_;
    Eigen::ArrayXd col = tape_.value(node).row(0).transpose();
    return rows_.emplace(key, std::move(col)).first->second;
  }

  const Eigen::ArrayXd& coord_row(int axis) {
    std::lock_guard<std::mutex> lk(mtx_);
    auto it = coords_.find(axis);
    if (it != coords_.end()) return it->second;
    Eigen::ArrayXd col = points().row(axis).transpose();
    return coords_.emplace(axis, std::move(col)).first->second;
  }

  // u_t of the target (first) state variable.
  const Eigen::ArrayXd& ut() {
    Alpha a(std::size_t(axes_.n_axes), 0);
    a[std::size_t(axes_.time_axis)] = 1;
    return state_row(0, a);
  }

 private:
  MlpModel model_;  // private copy: frozen snapshot
  AxisMap axes_;
  const TokenLibrary* lib_;
  Tape tape_;
  std::optional<NetGraph> graph_;
  int n_ = 0;
  int builds_ = 0;
  std::map<std::string, Eigen::ArrayXd> rows_;
  std::map<int, Eigen::ArrayXd> coords_;
  std::mutex mtx_;
};

// ───────────────────────── term interpretation ─────────────────────────

// Generic recursion shared by the numeric evaluator here and the
// tape-graph builder used for physics residuals. Backend supplies the value
// type and primitive operations.
template <class B>
typename B::V eval_term_rec(B& b, const TreeNode& n, const Alpha& alpha) {
  using V = typename B::V;
  if (auto hit = b.memo_find(&n, alpha)) return *hit;
  const TokenLibrary& lib = b.lib();
  const AxisMap& axes = b.axes();
  V out;
  switch (lib.kind(n.ord)) {
    case TokenKind::StateVar:
      out = b.state(axes.state_row_of_ord.at(n.ord), alpha);
      break;
    case TokenKind::SpatialVar:
    case TokenKind::TimeVar: {
      const int axis = axes.axis_of_ord.at(n.ord);
      const int total = std::accumulate(alpha.begin(), alpha.end(), 0);
      if (total == 0) out = b.coord(axis);
      else if (total == 1 && alpha[std::size_t(axis)] == 1) out = b.ones();
      else out = b.zeros();
      break;
    }
    case TokenKind::DerivativeOp: {
      const int axis = axes.axis_of_ord.at(n.kids[1].ord);
      Alpha a2 = alpha;
      a2[std::size_t(axis)] += lib.tok(n.ord).deriv_order;
      out = eval_term_rec(b, n.kids[0], a2);
      break;
    }
    case TokenKind::UnaryOp: {  // ^2 = product of the child with itself
      std::vector<std::pair<Alpha, double>> subs;
      detail::sub_indices(alpha, subs);
      bool first = true;
      for (const auto& [beta, c] : subs) {
        Alpha rem(alpha.size());
        for (std::size_t i = 0; i < alpha.size(); ++i)
          rem[i] = alpha[i] - beta[i];
        V piece = b.mul(eval_term_rec(b, n.kids[0], beta),
                        eval_term_rec(b, n.kids[0], rem));
        if (c != 1.0) piece = b.scale(piece, c);
        out = first ? piece : b.add(out, piece);
        first = false;
      }
      break;
    }
    case TokenKind::BinaryOp: {
      const std::string& sym = lib.symbol(n.ord);
      if (sym == "+" || sym == "-") {
        V l = eval_term_rec(b, n.kids[0], alpha);
        V r = eval_term_rec(b, n.kids[1], alpha);
        out = sym == "+" ? b.add(l, r) : b.sub(l, r);
      } else if (sym == "*") {
        std::vector<std::pair<Alpha, double>> subs;
        detail::sub_indices(alpha, subs);
        bool first = true;
        for (const auto& [beta, c] : subs) {
          Alpha rem(alpha.size());
          for (std::size_t i = 0; i < alpha.size(); ++i)
            rem[i] = alpha[i] - beta[i];
          V piece = b.mul(eval_term_rec(b, n.kids[0], beta),
                          eval_term_rec(b, n.kids[1], rem));
          if (c != 1.0) piece = b.scale(piece, c);
          out = first ? piece : b.add(out, piece);
          first = false;
        }
      } else {  // '/': generalized quotient rule
        const int total = std::accumulate(alpha.begin(), alpha.end(), 0);
        if (total == 0) {
          out = b.div(eval_term_rec(b, n.kids[0], alpha),
                      eval_term_rec(b, n.kids[1], alpha));
        } else {
          // D^a q = (D^a num − Σ_{β<a} C(a,β) D^β q · D^{a−β} den) / den
          std::vector<std::pair<Alpha, double>> subs;
          detail::sub_indices(alpha, subs);
          V acc = eval_term_rec(b, n.kids[0], alpha);
          for (const auto& [beta, c] : subs) {
            if (beta == alpha) continue;
            Alpha rem(alpha.size());
            for (std::size_t i = 0; i < alpha.size(); ++i)
              rem[i] = alpha[i] - beta[i];
            V piece = b.mul(eval_term_rec(b, n, beta),
                            eval_term_rec(b, n.kids[1], rem));
            if (c != 1.0) piece = b.scale(piece, c);
            acc = b.sub(acc, piece);
          }
          Alpha zero(alpha.size(), 0);
          out = b.div(acc, eval_term_rec(b, n.kids[1], zero));
        }
      }
      break;
    }
  }
  b.memo_store(&n, alpha, out);
  return out;
}

// Numeric backend over an EvalBasis. Division guards throw NonFiniteColumn.
class ValueBackend {
 public:
  using V = Eigen::ArrayXd;
  explicit ValueBackend(EvalBasis& basis) : basis_(&basis) {}

  const TokenLibrary& lib() const { return basis_->lib(); }
  const AxisMap& axes() const { return basis_->axes(); }

  V state(int row, const Alpha& a) { return basis_->state_row(row, a); }
  V coord(int axis) { return basis_->coord_row(axis); }
  V ones() const { return V::Ones(basis_->n_points()); }
  V zeros() const { return V::Zero(basis_->n_points()); }
  V add(const V& a, const V& b) const { return a + b; }
  V sub(const V& a, const V& b) const { return a - b; }
  V mul(const V& a, const V& b) const { return a * b; }
  V scale(const V& a, double c) const { return c * a; }
  V div(const V& a, const V& b) const {
    require((b.abs() >= 1e-8).all(), Errc::NonFiniteColumn,
            "division by near-zero");
    return a / b;
  }

  const V* memo_find(const TreeNode* n, const Alpha& a) const {
    auto it = memo_.find(key(n, a));
    return it == memo_.end() ? nullptr : &it->second;
  }
  void memo_store(const TreeNode* n, const Alpha& a, const V& v) {
    memo_.emplace(key(n, a), v);
  }

 private:
  static std::string key(const TreeNode* n, const Alpha& a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%p:", static_cast<const void*>(n));
    return buf + detail::alpha_key(a);
  }
  EvalBasis* basis_;
  std::unordered_map<std::string, V> memo_;
};

// One term at every basis point; throws NonFiniteColumn on guard trips or
// non-finite output.
inline Eigen::ArrayXd eval_term_column(EvalBasis& basis, const FunctionTerm& term) {
  ValueBackend b(basis);
  Alpha zero(std::size_t(basis.axes().n_axes), 0);
  Eigen::ArrayXd col = eval_term_rec(b, term.tree, zero);
  require(col.isFinite().all(), Errc::NonFiniteColumn,
          "term '" + term.key + "' produced non-finite values");
  return col;
}

// ───────────────────────── caches ─────────────────────────

struct PdeCandidate {
  std::vector<FunctionTerm> terms;  // surviving terms, sorted by key
  Vec xi;                           // aligned physical-scale coefficients
  double rmse = std::numeric_limits<double>::infinity();
  double reward = -1.0;
  int n_terms = 0;
  int max_depth = 0;
  std::string traversal_key;  // originating prefix text
  std::string equation_key;   // sorted canonical term keys
  bool valid = false;
};

// Generation-scoped memo: term columns plus finished candidates. A
// generation ends when surrogate weights or collocation points change.
class EvalCache {
 public:
  std::uint64_t generation() const { return gen_; }
  void bump_generation() {
    std::lock_guard<std::mutex> lk(mtx_);
    ++gen_;
    columns_.clear();
    candidates_.clear();
  }

  bool column(const std::string& key, Eigen::ArrayXd& out) {
    std::lock_guard<std::mutex> lk(mtx_);
    auto it = columns_.find(key);
    if (it == columns_.end()) return false;
    out = it->second;
    return true;
  }
  void store_column(const std::string& key, const Eigen::ArrayXd& col) {
    std::lock_guard<std::mutex> lk(mtx_);
    columns_.emplace(key, col);
  }

  bool candidate(const std::string& eq_key, PdeCandidate& out) {
    std::lock_guard<std::mutex> lk(mtx_);
    auto it = candidates_.find(eq_key);
    if (it == candidates_.end()) return false;
    out = it->second;
    return true;
  }
  void store_candidate(const PdeCandidate& c) {
    std::lock_guard<std::mutex> lk(mtx_);
    candidates_.emplace(c.equation_key, c);
  }

 private:
  std::uint64_t gen_ = 0;
  std::unordered_map<std::string, Eigen::ArrayXd> columns_;
  std::unordered_map<std::string, PdeCandidate> candidates_;
  std::mutex mtx_;
};

// ───────────────────────── Θ and STRidge ─────────────────────────

struct ThetaSystem {
  Mat theta;  // N×n, column per term
  Vec ut;     // N
};

inline ThetaSystem build_theta(const std::vector<FunctionTerm>& terms,
                               EvalBasis& basis, EvalCache* cache) {
  require(!terms.empty(), Errc::Internal, "build_theta with no terms");
  ThetaSystem sys;
  sys.theta.resize(basis.n_points(), Eigen::Index(terms.size()));
  for (std::size_t j = 0; j < terms.size(); ++j) {
    Eigen::ArrayXd col;
    if (!cache || !cache->column(terms[j].key, col)) {
      col = eval_term_column(basis, terms[j]);
      if (cache) cache->store_column(terms[j].key, col);
    }
    sys.theta.col(Eigen::Index(j)) = col.matrix();
  }
  sys.ut = basis.ut().matrix();
  return sys;
}

struct StridgeConfig {
  double kappa = 1e-5;
  double tol = 0.05;
  int max_iters = 25;
};

// Sequentially thresholded ridge regression. Columns are normalized to unit
// 2-norm internally; thresholding applies to normalized coefficients; once
// the active set stops changing, the support gets a final unpenalized
// least-squares refit (the ridge penalty selects terms, it must not bias the
// reported coefficients). Returned vector is in physical scale with exact
// zeros off-support.
inline Vec stridge(const Mat& theta, const Vec& y, const StridgeConfig& cfg) {
  const Eigen::Index n = theta.cols();
  require(theta.rows() == y.size(), Errc::DimensionMismatch, "theta rows != y");
  Vec norms(n);
  std::vector<int> active;
  for (Eigen::Index j = 0; j < n; ++j) {
    norms(j) = theta.col(j).norm();
    if (norms(j) > 1e-12) active.push_back(int(j));
  }
  require(!active.empty(), Errc::AllTermsEliminated, "all columns degenerate");

  Mat tn = theta;
  for (Eigen::Index j = 0; j < n; ++j)
    if (norms(j) > 1e-12) tn.col(j) /= norms(j);
  const Mat gram = tn.transpose() * tn;
  const Vec rhs = tn.transpose() * y;

  auto solve = [&](const std::vector<int>& act) {
    const Eigen::Index m = Eigen::Index(act.size());
    Mat g(m, m);
    Vec r(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      r(i) = rhs(act[std::size_t(i)]);
      for (Eigen::Index j = 0; j < m; ++j)
        g(i, j) = gram(act[std::size_t(i)], act[std::size_t(j)]);
      g(i, i) += cfg.kappa;
    }
    Vec w = g.ldlt().solve(r);
    require(w.allFinite(), Errc::SingularSystem, "ridge solve failed");
    return w;
  };

  Vec w = solve(active);
  for (int it = 0; it < cfg.max_iters; ++it) {
    std::vector<int> next;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (std::abs(w(Eigen::Index(i))) >= cfg.tol) next.push_back(active[i]);
    if (next.size() == active.size()) break;
    require(!next.empty(), Errc::AllTermsEliminated, "threshold removed all terms");
    active = std::move(next);
    w = solve(active);
  }

  Mat sub(theta.rows(), Eigen::Index(active.size()));
  for (std::size_t i = 0; i < active.size(); ++i)
    sub.col(Eigen::Index(i)) = tn.col(active[i]);
  w = sub.colPivHouseholderQr().solve(y);
  require(w.allFinite(), Errc::SingularSystem, "final refit failed");

  Vec xi = Vec::Zero(n);
  for (std::size_t i = 0; i < active.size(); ++i) {
    const int j = active[i];
    xi(j) = w(Eigen::Index(i)) / norms(j);
  }
  return xi;
}

// ───────────────────────── reward ─────────────────────────

struct RewardConfig {
  double zeta_terms = 0.01;    // penalty per surviving term
  double zeta_depth = 0.0001;  // penalty per unit of max term depth
};

inline double reward_value(double rmse, int n_terms, int max_depth,
                           const RewardConfig& rc) {
  return (1.0 - rc.zeta_depth * double(max_depth) -
          rc.zeta_terms * double(n_terms)) / (1.0 + rmse);
}

inline constexpr double kInvalidReward = -1.0;

// ───────────────────────── candidate evaluation ─────────────────────────

struct EvalConfig {
  StridgeConfig stridge;
  RewardConfig reward;
};

inline PdeCandidate evaluate_terms(std::vector<FunctionTerm> terms,
                                   const std::string& traversal_key,
                                   EvalBasis& basis, EvalCache* cache,
                                   const EvalConfig& cfg) {
  PdeCandidate c;
  c.traversal_key = traversal_key;
  c.equation_key = term_set_key(terms);
  if (cache) {
    PdeCandidate hit;
    if (cache->candidate(c.equation_key, hit)) {
      hit.traversal_key = traversal_key;
      return hit;
    }
  }
  c.terms = std::move(terms);
  try {
    ThetaSystem sys = build_theta(c.terms, basis, cache);
    Vec xi = stridge(sys.theta, sys.ut, cfg.stridge);
    std::vector<FunctionTerm> kept;
    std::vector<double> coefs;
    for (std::size_t j = 0; j < c.terms.size(); ++j) {
      if (xi(Eigen::Index(j)) != 0.0) {
        kept.push_back(c.terms[j]);
        coefs.push_back(xi(Eigen::Index(j)));
      }
    }
    const Vec resid = sys.theta * xi - sys.ut;
    c.rmse = std::sqrt(resid.squaredNorm() / double(resid.size()));
    c.terms = std::move(kept);
    c.xi = Eigen::Map<const Vec>(coefs.data(), Eigen::Index(coefs.size()));
    c.n_terms = int(c.terms.size());
    c.max_depth = 0;
    for (const auto& t : c.terms) c.max_depth = std::max(c.max_depth, t.depth);
    c.reward = reward_value(c.rmse, c.n_terms, c.max_depth, cfg.reward);
    c.valid = true;
  } catch (const Error&) {
    c.xi.resize(0);
    c.rmse = std::numeric_limits<double>::infinity();
    c.reward = kInvalidReward;
    c.valid = false;
  }
  if (cache) cache->store_candidate(c);
  return c;
}

inline PdeCandidate evaluate_candidate(const Traversal& t, EvalBasis& basis,
                                       EvalCache* cache, const EvalConfig& cfg) {
  const TokenLibrary& lib = basis.lib();
  TreeNode tree = to_tree(t, lib);
  return evaluate_terms(split_terms(tree, lib), traversal_text(t, lib), basis,
                        cache, cfg);
}

inline nlohmann::json candidate_to_json(const PdeCandidate& c,
                                        const TokenLibrary& lib) {
  nlohmann::json j;
  j["traversal"] = c.traversal_key;
  j["valid"] = c.valid;
  j["rmse"] = c.rmse == std::numeric_limits<double>::infinity() ? -1.0 : c.rmse;
  j["reward"] = c.reward;
  j["n_terms"] = c.n_terms;
  j["max_depth"] = c.max_depth;
  for (int i = 0; i < c.n_terms; ++i) {
    nlohmann::json tj;
    tj["term"] = pretty_infix(c.terms[std::size_t(i)].tree, lib);
    tj["key"] = c.terms[std::size_t(i)].key;
    tj["coefficient"] = c.xi(i);
    j["terms"].push_back(tj);
  }
  if (c.n_terms == 0) j["terms"] = nlohmann::json::array();
  return j;
}

}  // namespace pded
