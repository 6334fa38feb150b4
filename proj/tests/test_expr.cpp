// Grammar checks: parsing (including unicode aliases), tree round-trips,
// term splitting, canonical keys, the generation mask, and pretty printing.
#include <catch2/catch_amalgamated.hpp>

#include "pded/expr.hpp"

#include <set>

using namespace pded;

namespace {

TokenLibrary burgers_lib() { return TokenLibrary::standard({"u"}, {"x"}); }

bool tree_equal(const TreeNode& a, const TreeNode& b) {
  if (a.ord != b.ord || a.kids.size() != b.kids.size()) return false;
  for (std::size_t i = 0; i < a.kids.size(); ++i)
    if (!tree_equal(a.kids[i], b.kids[i])) return false;
  return true;
}

// Uniform mask-guided rollout; must terminate within the budget.
Traversal random_rollout(const TokenLibrary& lib, GenLimits lim, Rng& rng) {
  PartialBuilder b(lib, lim);
  while (!b.complete()) {
    const auto mask = b.legal_mask();
    std::vector<int> legal;
    for (int i = 0; i < lib.size(); ++i)
      if (mask[std::size_t(i)]) legal.push_back(i);
    REQUIRE(!legal.empty());
    b.push(legal[rng.index(legal.size())]);
  }
  return b.traversal();
}

}  // namespace

TEST_CASE("parse accepts the canonical two-term example, unicode included", "[expr]") {
  auto lib = burgers_lib();
  const std::vector<std::string> syms = {"+", "∂²", "u", "x",
                                         "×", "u", "∂", "u", "x"};
  Traversal t = parse_symbols(syms, lib);
  REQUIRE(t.ords.size() == 9);
  REQUIRE(traversal_text(t, lib) == "+ d2 u x * u d1 u x");

  TreeNode tree = to_tree(t, lib);
  REQUIRE(lib.symbol(tree.ord) == "+");
  REQUIRE(lib.symbol(tree.kids[0].ord) == "d2");
  REQUIRE(lib.symbol(tree.kids[1].ord) == "*");
  REQUIRE(lib.symbol(tree.kids[1].kids[1].ord) == "d1");

  auto terms = split_terms(tree, lib);
  REQUIRE(terms.size() == 2);
  std::set<std::string> keys;
  for (const auto& ft : terms) keys.insert(ft.key);
  REQUIRE(keys == std::set<std::string>{"d2 u x", "* d1 u x u"});

  REQUIRE(pretty_infix(tree, lib) == "u_xx + u*u_x");
}

TEST_CASE("parse error taxonomy", "[expr]") {
  auto lib = burgers_lib();
  auto code = [&](const std::string& text) {
    try {
      parse_traversal(text, lib);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Internal;
  };
  REQUIRE_NOTHROW(parse_traversal("u", lib));
  REQUIRE(code("+ u") == Errc::IncompleteExpression);
  REQUIRE(code("u u") == Errc::TrailingTokens);
  REQUIRE(code("u q") == Errc::UnknownSymbol);
  REQUIRE(code("d1 x x") == Errc::InvalidDerivativeChild);
  REQUIRE(code("d1 u u") == Errc::InvalidDerivativeChild);
  REQUIRE(code("d2 u t") == Errc::InvalidDerivativeChild);
  REQUIRE_NOTHROW(parse_traversal("d1 ^2 x x", lib));  // composite of x is fine
}

TEST_CASE("round-trip identity on random rollouts", "[expr]") {
  auto lib = TokenLibrary::standard({"u", "v"}, {"x", "y"});
  GenLimits lim;
  Rng rng(123);
  for (int it = 0; it < 500; ++it) {
    Traversal t = random_rollout(lib, lim, rng);
    REQUIRE(int(t.ords.size()) <= lim.max_len);
    TreeNode tree = to_tree(t, lib);
    REQUIRE_NOTHROW(validate_tree(tree, lib));
    Traversal back = to_traversal(tree);
    REQUIRE(back.ords == t.ords);
    REQUIRE(within_limits(tree, lib, lim));
  }
}

TEST_CASE("mask-guided sampling always terminates validly", "[expr]") {
  auto lib = burgers_lib();
  GenLimits lim;
  lim.max_len = 16;
  Rng rng(7);
  for (int it = 0; it < 10000; ++it) {
    Traversal t = random_rollout(lib, lim, rng);
    REQUIRE(int(t.ords.size()) <= 16);
    REQUIRE_NOTHROW(validate_tree(to_tree(t, lib), lib));
  }
}

TEST_CASE("canonical key: commutative invariance, structural discrimination", "[expr]") {
  auto lib = burgers_lib();
  auto key = [&](const std::string& s) {
    return canonical_key(to_tree(parse_traversal(s, lib), lib), lib);
  };
  REQUIRE(key("+ u d2 u x") == key("+ d2 u x u"));
  REQUIRE(key("* u d1 u x") == key("* d1 u x u"));
  REQUIRE(key("- u t") != key("- t u"));
  REQUIRE(key("/ u t") != key("/ t u"));
  REQUIRE(key("* u * u u") == key("* * u u u"));  // same multiset? no: nested
  // nested commutative sort is per-node, so these differ structurally:
  REQUIRE(key("* u ^2 u") != key("* u * u u"));

  // random pairs: key equality iff canonical trees equal
  Rng rng(99);
  GenLimits lim;
  lim.max_len = 12;
  for (int it = 0; it < 2000; ++it) {
    PartialBuilder a(lib, lim), b(lib, lim);
    Traversal ta, tb;
    {
      Rng r1 = rng.child(1 + std::uint64_t(it));
      PartialBuilder pa(lib, lim);
      while (!pa.complete()) {
        auto m = pa.legal_mask();
        std::vector<int> legal;
        for (int i = 0; i < lib.size(); ++i)
          if (m[std::size_t(i)]) legal.push_back(i);
        pa.push(legal[r1.index(legal.size())]);
      }
      ta = pa.traversal();
      PartialBuilder pb(lib, lim);
      while (!pb.complete()) {
        auto m = pb.legal_mask();
        std::vector<int> legal;
        for (int i = 0; i < lib.size(); ++i)
          if (m[std::size_t(i)]) legal.push_back(i);
        pb.push(legal[r1.index(legal.size())]);
      }
      tb = pb.traversal();
    }
    TreeNode ca = canonical_tree(to_tree(ta, lib), lib);
    TreeNode cb = canonical_tree(to_tree(tb, lib), lib);
    const bool keys_eq =
        canonical_key(ca, lib) == canonical_key(cb, lib);
    REQUIRE(keys_eq == tree_equal(ca, cb));
  }
}

TEST_CASE("split_terms: count, dedup, sign dropping, ordering", "[expr]") {
  auto lib = burgers_lib();
  auto tree = [&](const std::string& s) {
    return to_tree(parse_traversal(s, lib), lib);
  };
  REQUIRE(raw_term_count(tree("+ u u"), lib) == 2);
  REQUIRE(split_terms(tree("+ u u"), lib).size() == 1);  // duplicate merge
  REQUIRE(split_terms(tree("^2 u"), lib).size() == 1);

  // signs dropped: a - b yields both terms regardless of sign
  auto terms = split_terms(tree("- d2 u x * u d1 u x"), lib);
  REQUIRE(terms.size() == 2);

  // deterministic order sorted by key
  auto t2 = split_terms(tree("+ * u d1 u x d2 u x"), lib);
  REQUIRE(t2[0].key <= t2[1].key);

  // raw count = 1 + top-level +/- nodes; '-' inside a term does not split
  auto mixed = tree("+ u * u - u t");
  REQUIRE(raw_term_count(mixed, lib) == 2);
  REQUIRE(split_terms(mixed, lib).size() == 2);

  // depth bookkeeping: single leaf is depth 1, u*u_x is depth 3
  auto d = split_terms(tree("* u d1 u x"), lib);
  REQUIRE(d.size() == 1);
  REQUIRE(d[0].depth == 3);
  REQUIRE(split_terms(tree("u"), lib)[0].depth == 1);
}

TEST_CASE("legality mask: derivative slots, budget, depth", "[expr]") {
  auto lib = burgers_lib();
  GenLimits lim;

  // open slot = right child of d1: only spatial vars
  {
    auto m = legal_token_mask({lib.require_find("d1"), lib.require_find("u")},
                              lib, lim);
    for (int i = 0; i < lib.size(); ++i)
      REQUIRE(bool(m[std::size_t(i)]) == lib.is_spatial(i));
  }
  // open slot = left child of d1: spatial leaves illegal, operators legal
  {
    auto m = legal_token_mask({lib.require_find("d1")}, lib, lim);
    REQUIRE(!m[std::size_t(lib.require_find("x"))]);
    REQUIRE(m[std::size_t(lib.require_find("u"))]);
    REQUIRE(m[std::size_t(lib.require_find("t"))]);
    REQUIRE(m[std::size_t(lib.require_find("^2"))]);
  }
  // length budget 1: only operands
  {
    GenLimits tight;
    tight.max_len = 1;
    auto m = legal_token_mask({}, lib, tight);
    for (int i = 0; i < lib.size(); ++i)
      REQUIRE(bool(m[std::size_t(i)]) == (lib.arity(i) == 0));
  }
  // depth budget: inside a term at depth d_max, only leaves
  {
    GenLimits shallow;
    shallow.d_max = 2;
    auto m = legal_token_mask({lib.require_find("^2")}, lib, shallow);
    for (int i = 0; i < lib.size(); ++i)
      REQUIRE(bool(m[std::size_t(i)]) == (lib.arity(i) == 0));
  }
  // the top-level +/- spine is exempt from term depth accounting
  {
    GenLimits shallow;
    shallow.d_max = 2;
    std::vector<int> prefix;
    for (int k = 0; k < 6; ++k) prefix.push_back(lib.require_find("+"));
    auto m = legal_token_mask(prefix, lib, shallow);
    REQUIRE(m[std::size_t(lib.require_find("+"))]);
    REQUIRE(m[std::size_t(lib.require_find("d1"))]);
  }
}

TEST_CASE("mask never all-false over exhaustive reachable prefixes", "[expr]") {
  auto lib = TokenLibrary::standard({"u", "v"}, {"x"}, false);  // 10 tokens
  REQUIRE(lib.size() == 10);
  GenLimits lim;
  lim.max_len = 8;
  std::vector<std::vector<int>> frontier = {{}};
  for (int depth = 0; depth <= 6; ++depth) {
    std::vector<std::vector<int>> next;
    for (const auto& prefix : frontier) {
      PartialBuilder b(lib, lim);
      for (int o : prefix) b.push(o);
      if (b.complete()) continue;
      auto m = b.legal_mask();
      int legal = 0;
      for (int i = 0; i < lib.size(); ++i) legal += m[std::size_t(i)];
      REQUIRE(legal > 0);
      for (int i = 0; i < lib.size(); ++i) {
        if (!m[std::size_t(i)]) continue;
        auto p = prefix;
        p.push_back(i);
        next.push_back(std::move(p));
      }
    }
    frontier = std::move(next);
  }
}

TEST_CASE("parent and sibling conditioning context", "[expr]") {
  auto lib = burgers_lib();
  GenLimits lim;
  PartialBuilder b(lib, lim);
  REQUIRE(b.parent_ord() == -1);
  REQUIRE(b.sibling_ord() == -1);
  b.push(lib.require_find("+"));
  REQUIRE(b.parent_ord() == lib.require_find("+"));
  REQUIRE(b.sibling_ord() == -1);
  b.push(lib.require_find("d2"));
  REQUIRE(b.parent_ord() == lib.require_find("d2"));
  b.push(lib.require_find("u"));
  // right child of d2: parent d2, sibling = left child root u
  REQUIRE(b.parent_ord() == lib.require_find("d2"));
  REQUIRE(b.sibling_ord() == lib.require_find("u"));
  b.push(lib.require_find("x"));
  // back to '+': second child slot, sibling = first child root d2
  REQUIRE(b.parent_ord() == lib.require_find("+"));
  REQUIRE(b.sibling_ord() == lib.require_find("d2"));
  b.push(lib.require_find("u"));
  REQUIRE(b.complete());
}

TEST_CASE("pretty printing", "[expr]") {
  auto lib = burgers_lib();
  auto pp = [&](const std::string& s) {
    return pretty_infix(parse_traversal(s, lib), lib);
  };
  REQUIRE(pp("d2 u x") == "u_xx");
  REQUIRE(pp("d2 d2 u x x") == "u_xxxx");
  REQUIRE(pp("^2 - u x") == "(u - x)^2");
  REQUIRE(pp("^2 d1 u x") == "u_x^2");
  REQUIRE(pp("d2 * u d1 u x x") == "(u*u_x)_xx");
  REQUIRE(pp("/ u t") == "u/t");
  REQUIRE(pp("* u + u t") == "u*(u + t)");
  REQUIRE(pp("- u - u t") == "u - (u - t)");
}

TEST_CASE("token swaps relabel variables", "[expr]") {
  auto lib = TokenLibrary::standard({"u", "v"}, {"x", "y"});
  auto t = to_tree(parse_traversal("* u d1 v x", lib), lib);
  std::map<int, int> swap = {
      {lib.require_find("x"), lib.require_find("y")},
      {lib.require_find("y"), lib.require_find("x")},
  };
  auto s = swap_tokens(t, swap);
  REQUIRE(traversal_text(to_traversal(s), lib) == "* u d1 v y");
}
