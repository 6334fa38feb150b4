// Symbolic grammar for candidate PDE right-hand sides: token library,
// prefix traversals, expression trees, term splitting, canonical keys, and
// the legality mask that keeps sampled traversals well-formed.
//
// Derivative operators are binary: left child is the differentiated
// expression (never a bare spatial-variable leaf), right child is a single
// spatial-variable leaf. Higher orders nest. Everything here is immutable
// after construction and safe to share across threads.
#pragma once

#include "pded/common.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <unordered_map>

namespace pded {

// ───────────────────────── tokens ─────────────────────────

enum class TokenKind : std::uint8_t {
  BinaryOp, UnaryOp, DerivativeOp, StateVar, SpatialVar, TimeVar,
};

struct Token {
  std::string symbol;
  TokenKind kind;
  int arity = 0;        // 2 for binary/derivative, 1 for unary, 0 for vars
  int deriv_order = 0;  // ≥1 iff derivative op
};

class TokenLibrary {
 public:
  TokenLibrary(std::vector<std::string> operators,
               std::vector<std::string> state_vars,
               std::vector<std::string> spatial_vars,
               bool with_time = true) {
    for (const auto& s : operators) add(make_operator(s));
    for (const auto& s : state_vars) add({s, TokenKind::StateVar, 0, 0});
    for (const auto& s : spatial_vars) add({s, TokenKind::SpatialVar, 0, 0});
    if (with_time) add({"t", TokenKind::TimeVar, 0, 0});
    bool has_state = false, has_spatial = false, has_deriv = false;
    bool has_plus = false, has_times = false;
    for (const Token& t : toks_) {
      has_state |= t.kind == TokenKind::StateVar;
      has_spatial |= t.kind == TokenKind::SpatialVar;
      has_deriv |= t.kind == TokenKind::DerivativeOp;
      has_plus |= t.symbol == "+";
      has_times |= t.symbol == "*";
    }
    require(has_state && has_spatial && has_deriv && has_plus && has_times,
            Errc::ConfigError,
            "library needs a state var, a spatial var, a derivative op, "
            "'+' and '*'");
  }

  static TokenLibrary standard(std::vector<std::string> state_vars,
                               std::vector<std::string> spatial_vars,
                               bool with_time = true) {
    return TokenLibrary({"+", "-", "*", "/", "^2", "d1", "d2"},
                        std::move(state_vars), std::move(spatial_vars),
                        with_time);
  }

  int size() const { return int(toks_.size()); }
  const Token& tok(int i) const { return toks_[std::size_t(i)]; }
  const std::string& symbol(int i) const { return toks_[std::size_t(i)].symbol; }
  int arity(int i) const { return toks_[std::size_t(i)].arity; }
  TokenKind kind(int i) const { return toks_[std::size_t(i)].kind; }
  bool is_spatial(int i) const { return kind(i) == TokenKind::SpatialVar; }
  bool is_state(int i) const { return kind(i) == TokenKind::StateVar; }
  bool is_deriv(int i) const { return kind(i) == TokenKind::DerivativeOp; }
  bool is_plus_minus(int i) const {
    return symbol(i) == "+" || symbol(i) == "-";
  }

  // Unicode and ASCII aliases both resolve; -1 when unknown.
  int find(const std::string& sym) const {
    auto it = index_.find(normalize(sym));
    return it == index_.end() ? -1 : it->second;
  }
  int require_find(const std::string& sym) const {
    const int i = find(sym);
    require(i >= 0, Errc::UnknownSymbol, "symbol '" + sym + "'");
    return i;
  }

  std::vector<int> spatial_vars() const { return of_kind(TokenKind::SpatialVar); }
  std::vector<int> state_vars() const { return of_kind(TokenKind::StateVar); }

  static std::string normalize(const std::string& s) {
    if (s == "∂") return "d1";                    // ∂
    if (s == "∂²" || s == "∂ 2") return "d2";  // ∂²
    if (s == "×") return "*";                     // ×
    if (s == "÷") return "/";                     // ÷
    if (s == "−") return "-";                     // −
    return s;
  }

 private:
  std::vector<Token> toks_;
  std::unordered_map<std::string, int> index_;

  static Token make_operator(const std::string& raw) {
    const std::string s = normalize(raw);
    if (s == "+" || s == "-" || s == "*" || s == "/")
      return {s, TokenKind::BinaryOp, 2, 0};
    if (s == "^2") return {s, TokenKind::UnaryOp, 1, 0};
    if (s == "d1") return {s, TokenKind::DerivativeOp, 2, 1};
    if (s == "d2") return {s, TokenKind::DerivativeOp, 2, 2};
    fail(Errc::ConfigError, "unknown operator '" + raw + "'");
  }

  void add(Token t) {
    require(index_.count(t.symbol) == 0, Errc::ConfigError,
            "duplicate symbol '" + t.symbol + "'");
    index_[t.symbol] = int(toks_.size());
    toks_.push_back(std::move(t));
  }

  std::vector<int> of_kind(TokenKind k) const {
    std::vector<int> v;
    for (int i = 0; i < size(); ++i)
      if (kind(i) == k) v.push_back(i);
    return v;
  }
};

struct GenLimits {
  int max_len = 64;  // whole-traversal token budget
  int d_max = 4;     // function-term depth budget (nodes on root-leaf path)
};

// ───────────────────────── trees & traversals ─────────────────────────

struct TreeNode {
  int ord = -1;
  std::vector<TreeNode> kids;
};

struct Traversal {
  std::vector<int> ords;
};

inline int tree_length(const TreeNode& n) {
  int c = 1;
  for (const auto& k : n.kids) c += tree_length(k);
  return c;
}

// Longest root-to-leaf path measured in nodes (single leaf → 1).
inline int tree_depth(const TreeNode& n) {
  int d = 0;
  for (const auto& k : n.kids) d = std::max(d, tree_depth(k));
  return d + 1;
}

inline void flatten(const TreeNode& n, std::vector<int>& out) {
  out.push_back(n.ord);
  for (const auto& k : n.kids) flatten(k, out);
}

inline Traversal to_traversal(const TreeNode& tree) {
  Traversal t;
  flatten(tree, t.ords);
  return t;
}

namespace detail {
inline TreeNode build_tree(const std::vector<int>& ords, std::size_t& pos,
                           const TokenLibrary& lib) {
  require(pos < ords.size(), Errc::IncompleteExpression, "traversal ended early");
  TreeNode n;
  n.ord = ords[pos++];
  const int a = lib.arity(n.ord);
  n.kids.reserve(std::size_t(a));
  for (int i = 0; i < a; ++i) n.kids.push_back(build_tree(ords, pos, lib));
  return n;
}

inline void check_derivative_children(const TreeNode& n, const TokenLibrary& lib) {
  if (lib.is_deriv(n.ord)) {
    const TreeNode& left = n.kids[0];
    const TreeNode& right = n.kids[1];
    require(right.kids.empty() && lib.is_spatial(right.ord),
            Errc::InvalidDerivativeChild,
            "derivative needs a spatial-variable right child");
    require(!(left.kids.empty() && lib.is_spatial(left.ord)),
            Errc::InvalidDerivativeChild,
            "derivative left child may not be a bare spatial variable");
  }
  for (const auto& k : n.kids) check_derivative_children(k, lib);
}
}  // namespace detail

inline TreeNode to_tree(const Traversal& t, const TokenLibrary& lib) {
  std::size_t pos = 0;
  TreeNode n = detail::build_tree(t.ords, pos, lib);
  require(pos == t.ords.size(), Errc::TrailingTokens, "tokens after expression end");
  return n;
}

// Structural validity: arity completeness plus derivative-child rules.
inline void validate_tree(const TreeNode& n, const TokenLibrary& lib) {
  detail::check_derivative_children(n, lib);
}

inline Traversal parse_symbols(const std::vector<std::string>& symbols,
                               const TokenLibrary& lib) {
  Traversal t;
  t.ords.reserve(symbols.size());
  for (const auto& s : symbols) t.ords.push_back(lib.require_find(s));
  TreeNode tree = to_tree(t, lib);  // arity completeness
  validate_tree(tree, lib);
  return t;
}

inline Traversal parse_traversal(const std::string& text,
                                 const TokenLibrary& lib) {
  std::istringstream in(text);
  std::vector<std::string> syms;
  std::string s;
  while (in >> s) syms.push_back(s);
  require(!syms.empty(), Errc::IncompleteExpression, "empty traversal");
  return parse_symbols(syms, lib);
}

inline std::string traversal_text(const Traversal& t, const TokenLibrary& lib) {
  std::string out;
  for (std::size_t i = 0; i < t.ords.size(); ++i) {
    if (i) out += ' ';
    out += lib.symbol(t.ords[i]);
  }
  return out;
}

// ───────────────────────── canonical form ─────────────────────────

inline std::string canonical_key(const TreeNode& n, const TokenLibrary& lib);

// Children of commutative '+' and '*' are sorted by canonical key.
inline TreeNode canonical_tree(const TreeNode& n, const TokenLibrary& lib) {
  TreeNode out;
  out.ord = n.ord;
  out.kids.reserve(n.kids.size());
  for (const auto& k : n.kids) out.kids.push_back(canonical_tree(k, lib));
  const std::string& sym = lib.symbol(n.ord);
  if ((sym == "+" || sym == "*") && out.kids.size() == 2) {
    if (canonical_key(out.kids[1], lib) < canonical_key(out.kids[0], lib))
      std::swap(out.kids[0], out.kids[1]);
  }
  return out;
}

inline std::string canonical_key(const TreeNode& n, const TokenLibrary& lib) {
  const TreeNode c = canonical_tree(n, lib);
  Traversal t = to_traversal(c);
  return traversal_text(t, lib);
}

// ───────────────────────── term splitting ─────────────────────────

struct FunctionTerm {
  TreeNode tree;     // canonical form, root is never '+'/'-'
  std::string key;   // canonical prefix text; parses back to the tree
  int depth = 1;     // nodes on the longest root-to-leaf path
};

inline bool contains_state_var(const TreeNode& n, const TokenLibrary& lib) {
  if (lib.is_state(n.ord)) return true;
  for (const auto& k : n.kids)
    if (contains_state_var(k, lib)) return true;
  return false;
}

namespace detail {
inline void collect_terms(const TreeNode& n, const TokenLibrary& lib,
                          std::vector<const TreeNode*>& out) {
  if (lib.is_plus_minus(n.ord)) {
    collect_terms(n.kids[0], lib, out);
    collect_terms(n.kids[1], lib, out);
  } else {
    out.push_back(&n);
  }
}
}  // namespace detail

// Count of pre-dedup terms: 1 + number of top-level '+'/'-' nodes.
inline int raw_term_count(const TreeNode& tree, const TokenLibrary& lib) {
  std::vector<const TreeNode*> raw;
  detail::collect_terms(tree, lib, raw);
  return int(raw.size());
}

// Signs are dropped; duplicates merge; output sorted by canonical key.
inline std::vector<FunctionTerm> split_terms(const TreeNode& tree,
                                             const TokenLibrary& lib) {
  std::vector<const TreeNode*> raw;
  detail::collect_terms(tree, lib, raw);
  std::map<std::string, FunctionTerm> by_key;
  for (const TreeNode* n : raw) {
    TreeNode c = canonical_tree(*n, lib);
    std::string key = traversal_text(to_traversal(c), lib);
    if (by_key.count(key)) continue;
    FunctionTerm ft;
    ft.depth = tree_depth(c);
    ft.tree = std::move(c);
    ft.key = key;
    by_key.emplace(std::move(key), std::move(ft));
  }
  std::vector<FunctionTerm> out;
  out.reserve(by_key.size());
  for (auto& [k, v] : by_key) out.push_back(std::move(v));
  return out;
}

// Deterministic key for a candidate equation: sorted term keys joined.
inline std::string term_set_key(const std::vector<FunctionTerm>& terms) {
  std::string out;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (i) out += " | ";
    out += terms[i].key;
  }
  return out;
}

// Left-leaning '+' chain over terms (already sorted by caller or not).
inline TreeNode join_terms(const std::vector<FunctionTerm>& terms,
                           const TokenLibrary& lib) {
  require(!terms.empty(), Errc::Internal, "join_terms on empty list");
  const int plus = lib.require_find("+");
  TreeNode acc = terms[0].tree;
  for (std::size_t i = 1; i < terms.size(); ++i) {
    TreeNode p;
    p.ord = plus;
    p.kids.push_back(std::move(acc));
    p.kids.push_back(terms[i].tree);
    acc = std::move(p);
  }
  return acc;
}

// ───────────────────────── generation mask ─────────────────────────

// Incremental prefix builder. Tracks open slots with enough context to
// compute the legality mask and the policy's parent/sibling conditioning.
class PartialBuilder {
 public:
  PartialBuilder(const TokenLibrary& lib, GenLimits limits)
      : lib_(&lib), limits_(limits) {
    Slot root;
    root.parent_ord = -1;
    root.child_index = 0;
    root.sibling_ord = -1;
    root.spine = true;
    root.depth = 0;
    stack_.push_back(root);
  }

  bool complete() const { return stack_.empty(); }
  int length() const { return int(ords_.size()); }
  const std::vector<int>& ords() const { return ords_; }

  // Parent/sibling ordinals of the current open slot; -1 means none.
  int parent_ord() const { return stack_.empty() ? -1 : stack_.back().parent_ord; }
  int sibling_ord() const { return stack_.empty() ? -1 : stack_.back().sibling_ord; }

  // mask[i] = appending token i keeps the traversal completable and legal.
  std::vector<char> legal_mask() const {
    std::vector<char> m(std::size_t(lib_->size()), 0);
    require(!stack_.empty(), Errc::Internal, "mask on complete traversal");
    const Slot& s = stack_.back();
    const int open = int(stack_.size());
    const int remaining = limits_.max_len - length();
    for (int i = 0; i < lib_->size(); ++i) {
      const int a = lib_->arity(i);
      // completable within budget: every open slot costs at least 1 token
      if (open - 1 + a > remaining - 1) continue;
      if (s.parent_ord >= 0 && lib_->is_deriv(s.parent_ord)) {
        if (s.child_index == 1 && !lib_->is_spatial(i)) continue;
        if (s.child_index == 0 && a == 0 && lib_->is_spatial(i)) continue;
      }
      const bool spine_ext = s.spine && lib_->is_plus_minus(i);
      if (!spine_ext) {
        const int d = s.spine ? 1 : s.depth;
        if (a == 0 && d > limits_.d_max) continue;
        if (a > 0 && d + 1 > limits_.d_max) continue;
      }
      m[std::size_t(i)] = 1;
    }
    return m;
  }

  void push(int ord) {
    require(!stack_.empty(), Errc::TrailingTokens, "push on complete traversal");
    const Slot s = stack_.back();
    stack_.pop_back();
    ords_.push_back(ord);
    // expose this subtree's root to its right sibling's slot
    if (!stack_.empty() && stack_.back().parent_id == s.parent_id &&
        stack_.back().child_index == 1 && s.child_index == 0) {
      stack_.back().sibling_ord = ord;
    }
    const int a = lib_->arity(ord);
    if (a == 0) return;
    const bool spine_ext = s.spine && lib_->is_plus_minus(ord);
    const int child_depth = spine_ext ? 0 : (s.spine ? 2 : s.depth + 1);
    const int id = next_id_++;
    for (int c = a - 1; c >= 0; --c) {
      Slot k;
      k.parent_ord = ord;
      k.parent_id = id;
      k.child_index = c;
      k.sibling_ord = -1;
      k.spine = spine_ext;
      k.depth = child_depth;
      stack_.push_back(k);
    }
  }

  Traversal traversal() const {
    require(complete(), Errc::IncompleteExpression, "traversal not complete");
    Traversal t;
    t.ords = ords_;
    return t;
  }

 private:
  struct Slot {
    int parent_ord = -1;
    int parent_id = -1;  // identity of the owning node instance
    int child_index = 0;
    int sibling_ord = -1;
    bool spine = true;
    int depth = 0;  // child term depth when the slot is inside a term
  };
  const TokenLibrary* lib_;
  GenLimits limits_;
  std::vector<Slot> stack_;
  std::vector<int> ords_;
  int next_id_ = 0;
};

inline std::vector<char> legal_token_mask(const std::vector<int>& prefix,
                                          const TokenLibrary& lib,
                                          GenLimits limits) {
  PartialBuilder b(lib, limits);
  for (int o : prefix) b.push(o);
  return b.legal_mask();
}

// Limit compliance for trees produced by tree edits (mutation/crossover).
inline bool within_limits(const TreeNode& tree, const TokenLibrary& lib,
                          GenLimits limits) {
  if (tree_length(tree) > limits.max_len) return false;
  std::vector<const TreeNode*> raw;
  detail::collect_terms(tree, lib, raw);
  for (const TreeNode* t : raw)
    if (tree_depth(*t) > limits.d_max) return false;
  return true;
}

// ───────────────────────── pretty printing ─────────────────────────

namespace detail {
// Subscript chain for pure nested derivatives of a leaf: d2(d1(u,x),x) → u_xxx.
inline bool subscript_form(const TreeNode& n, const TokenLibrary& lib,
                           std::string& base, std::string& subs) {
  if (n.kids.empty()) {
    base = lib.symbol(n.ord);
    subs.clear();
    return true;
  }
  if (!lib.is_deriv(n.ord)) return false;
  std::string b, s;
  if (!subscript_form(n.kids[0], lib, b, s)) return false;
  const int order = lib.tok(n.ord).deriv_order;
  base = b;
  subs = s + std::string(std::size_t(order), lib.symbol(n.kids[1].ord)[0]);
  return true;
}

inline std::string infix(const TreeNode& n, const TokenLibrary& lib, int parent_prec);

inline std::string deriv_infix(const TreeNode& n, const TokenLibrary& lib) {
  std::string base, subs;
  if (subscript_form(n, lib, base, subs) && !subs.empty())
    return base + "_" + subs;
  const TreeNode& inner = n.kids[0];
  const int order = lib.tok(n.ord).deriv_order;
  std::string out = "(" + infix(inner, lib, 0) + ")_";
  out += std::string(std::size_t(order), lib.symbol(n.kids[1].ord)[0]);
  return out;
}

inline std::string infix(const TreeNode& n, const TokenLibrary& lib,
                         int parent_prec) {
  const std::string& sym = lib.symbol(n.ord);
  if (n.kids.empty()) return sym;
  if (lib.is_deriv(n.ord)) return deriv_infix(n, lib);
  if (sym == "^2") {
    const TreeNode& c = n.kids[0];
    if (c.kids.empty() || lib.is_deriv(c.ord))
      return infix(c, lib, 0) + "^2";
    return "(" + infix(c, lib, 0) + ")^2";
  }
  int prec = (sym == "+" || sym == "-") ? 1 : 2;
  std::string l = infix(n.kids[0], lib, prec);
  std::string r = infix(n.kids[1], lib, prec + 1);  // left-assoc
  std::string out = l + (prec == 1 ? " " + sym + " " : sym) + r;
  if (prec < parent_prec) out = "(" + out + ")";
  return out;
}
}  // namespace detail

inline std::string pretty_infix(const TreeNode& tree, const TokenLibrary& lib) {
  return detail::infix(tree, lib, 0);
}

inline std::string pretty_infix(const Traversal& t, const TokenLibrary& lib) {
  return pretty_infix(to_tree(t, lib), lib);
}

// ───────────────────────── token swaps ─────────────────────────

// Replace ordinals per `map` (identity when absent). Used by the spatial
// symmetry correction.
inline TreeNode swap_tokens(const TreeNode& n, const std::map<int, int>& map) {
  TreeNode out;
  auto it = map.find(n.ord);
  out.ord = it == map.end() ? n.ord : it->second;
  out.kids.reserve(n.kids.size());
  for (const auto& k : n.kids) out.kids.push_back(swap_tokens(k, map));
  return out;
}

}  // namespace pded
