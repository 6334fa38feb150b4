// Genetic operators, the subtree bank, exact ℓ0 regression, symmetry
// correction, and the merged generation pipeline.
#include <catch2/catch_amalgamated.hpp>

#include "pded/evolution.hpp"

#include <set>

using namespace pded;

namespace {

// Surrogate whose output is exactly a*x + b*t + c (single affine layer).
MlpModel affine_model(double a, double b, double c) {
  MlpModel m;
  m.sizes = {2, 1};
  m.W.push_back(Arr(1, 2));
  m.W[0] << a, b;
  m.b.push_back(Arr::Constant(1, 1, c));
  m.in_scale = Vec::Ones(2);
  m.in_shift = Vec::Zero(2);
  return m;
}

Arr grid_points(int nx, int nt) {
  Arr p(2, nx * nt);
  int k = 0;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < nt; ++j, ++k) {
      p(0, k) = i / double(nx - 1);
      p(1, k) = j / double(nt - 1);
    }
  return p;
}

TreeNode parse_tree(const std::string& text, const TokenLibrary& lib) {
  return to_tree(parse_traversal(text, lib), lib);
}

std::set<std::string> term_keys(const TreeNode& t, const TokenLibrary& lib) {
  std::set<std::string> out;
  for (const FunctionTerm& ft : split_terms(t, lib)) out.insert(ft.key);
  return out;
}

bool tree_ok(const TreeNode& t, const TokenLibrary& lib, GenLimits lim) {
  try {
    validate_tree(t, lib);
  } catch (const Error&) {
    return false;
  }
  return within_limits(t, lib, lim);
}

}  // namespace

// ───────────────────────── crossover ─────────────────────────

TEST_CASE("crossover of single-term parents swaps them outright",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  TreeNode a = parse_tree("d2 u x", lib);
  TreeNode b = parse_tree("* u d1 u x", lib);
  Rng rng(1);
  auto [ca, cb] = crossover(a, b, lib, lim, rng);
  REQUIRE(canonical_key(ca, lib) == canonical_key(b, lib));
  REQUIRE(canonical_key(cb, lib) == canonical_key(a, lib));
}

TEST_CASE("crossover swaps one top-level term and preserves spine signs",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  TreeNode a = parse_tree("- u d2 u x", lib);       // u - u_xx
  TreeNode b = parse_tree("+ d1 u x ^2 u", lib);    // u_x + u^2
  std::set<std::string> pool_a = term_keys(a, lib);
  std::set<std::string> pool_b = term_keys(b, lib);

  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    Rng rng(seed);
    auto [ca, cb] = crossover(a, b, lib, lim, rng);
    REQUIRE(tree_ok(ca, lib, lim));
    REQUIRE(tree_ok(cb, lib, lim));
    REQUIRE(raw_term_count(ca, lib) == 2);
    REQUIRE(raw_term_count(cb, lib) == 2);
    // child a holds exactly one term from b, child b one from a
    int from_b = 0;
    for (const auto& k : term_keys(ca, lib)) from_b += pool_b.count(k);
    REQUIRE(from_b == 1);
    int from_a = 0;
    for (const auto& k : term_keys(cb, lib)) from_a += pool_a.count(k);
    REQUIRE(from_a == 1);
    // the minus spine survives in child a
    REQUIRE(lib.symbol(ca.ord) == "-");
  }
}

TEST_CASE("crossover keeps a parent when the child would break limits",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits tight;
  tight.max_len = 5;
  TreeNode a = parse_tree("u", lib);
  TreeNode b = parse_tree("* u * u d1 u x", lib);  // 7 tokens as one term
  bool swapped_ok = false, reverted = false;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    auto [ca, cb] = crossover(a, b, lib, tight, rng);
    REQUIRE(tree_length(ca) <= tight.max_len);
    // child a would become the 7-token term: must revert to parent a
    if (canonical_key(ca, lib) == canonical_key(a, lib)) reverted = true;
    if (canonical_key(cb, lib) == canonical_key(a, lib)) swapped_ok = true;
  }
  REQUIRE(reverted);
  REQUIRE(swapped_ok);  // b-side child (1 token) is always legal
}

TEST_CASE("random crossovers always produce valid children", "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  lim.max_len = 20;
  Rng init(3);
  PolicyNetwork pol = make_policy(lib.size(), 12, init);
  Rng rng(2025);
  SampledBatch pool = sample_batch(pol, lib, 2000, lim, rng);
  std::vector<TreeNode> trees;
  for (const Traversal& tau : pool.traversals)
    trees.push_back(to_tree(tau, lib));

  for (int rep = 0; rep < 10000; ++rep) {
    const std::size_t i = rng.index(trees.size());
    const std::size_t j = rng.index(trees.size());
    auto [ca, cb] = crossover(trees[i], trees[j], lib, lim, rng);
    if (!tree_ok(ca, lib, lim) || !tree_ok(cb, lib, lim)) {
      REQUIRE(tree_ok(ca, lib, lim));
      REQUIRE(tree_ok(cb, lib, lim));
    }
  }
  SUCCEED("10^4 crossovers valid");
}

// ───────────────────────── mutation ─────────────────────────

TEST_CASE("mutating a lone leaf draws another legal operand", "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  TreeNode u = parse_tree("u", lib);
  std::set<std::string> seen;
  Rng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    TreeNode child = mutate(u, lib, lim, rng);
    REQUIRE(child.kids.empty());
    REQUIRE(child.ord != u.ord);
    seen.insert(lib.symbol(child.ord));
  }
  REQUIRE(seen == std::set<std::string>{"x", "t"});
}

TEST_CASE("mutation never places a spatial leaf under a derivative's left "
          "child",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  TreeNode d = parse_tree("d1 u x", lib);
  Rng rng(6);
  for (int rep = 0; rep < 500; ++rep) {
    TreeNode child = mutate(d, lib, lim, rng);
    REQUIRE(tree_ok(child, lib, lim));
    if (lib.is_deriv(child.ord)) {
      REQUIRE(!(child.kids[0].kids.empty() &&
                lib.is_spatial(child.kids[0].ord)));
    }
  }
}

TEST_CASE("mutating a '+' root yields another binary operator legal there",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  TreeNode plus = parse_tree("+ u u", lib);
  std::set<std::string> roots;
  Rng rng(7);
  for (int rep = 0; rep < 400; ++rep) {
    TreeNode child = mutate(plus, lib, lim, rng);
    REQUIRE(tree_ok(child, lib, lim));
    if (child.ord != plus.ord && !child.kids.empty() &&
        child.kids[0].kids.empty() && child.kids[1].kids.empty() &&
        child.kids[0].ord == child.kids[1].ord)
      roots.insert(lib.symbol(child.ord));
  }
  // right child 'u' is not spatial, so derivative ops are excluded
  REQUIRE(roots.count("-") == 1);
  REQUIRE(roots.count("*") == 1);
  REQUIRE(roots.count("/") == 1);
  REQUIRE(roots.count("d1") == 0);
  REQUIRE(roots.count("d2") == 0);
}

TEST_CASE("random mutations change at most one node and stay valid",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  GenLimits lim;
  lim.max_len = 20;
  Rng init(9);
  PolicyNetwork pol = make_policy(lib.size(), 12, init);
  Rng rng(31337);
  SampledBatch pool = sample_batch(pol, lib, 2000, lim, rng);

  for (int rep = 0; rep < 10000; ++rep) {
    const Traversal& tau = pool.traversals[rng.index(pool.traversals.size())];
    TreeNode parent = to_tree(tau, lib);
    TreeNode child = mutate(parent, lib, lim, rng);
    if (!tree_ok(child, lib, lim)) REQUIRE(tree_ok(child, lib, lim));
    Traversal tp = to_traversal(parent), tc = to_traversal(child);
    REQUIRE(tp.ords.size() == tc.ords.size());
    int hamming = 0;
    for (std::size_t k = 0; k < tp.ords.size(); ++k)
      hamming += tp.ords[k] != tc.ords[k];
    REQUIRE(hamming <= 1);
  }
  SUCCEED("10^4 mutations valid");
}

// ───────────────────────── subtree bank ─────────────────────────

TEST_CASE("bank ranks terms by frequency with deterministic tie-breaks",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  std::vector<Traversal> merged;
  auto add = [&](const std::string& text, int copies) {
    for (int i = 0; i < copies; ++i) merged.push_back(parse_traversal(text, lib));
  };
  add("+ d2 u x * u d1 u x", 5);  // u_xx and u*u_x appear together 5 times
  add("d2 u x", 2);               // u_xx alone twice more -> 7 total
  add("+ u d1 u x", 3);           // u and u_x three times

  SubtreeBank bank;
  bank.capacity = 3;
  update_bank(bank, merged, lib);
  REQUIRE(bank.entries.size() == 3);
  REQUIRE(bank.entries[0].term.key == "d2 u x");
  REQUIRE(bank.entries[0].count == 7);
  REQUIRE(bank.entries[1].term.key == "* d1 u x u");
  REQUIRE(bank.entries[1].count == 5);
  // tie at 3 between "u" and "d1 u x": shorter key wins
  REQUIRE(bank.entries[2].term.key == "u");
  REQUIRE(bank.entries[2].count == 3);
  REQUIRE(bank.generation == 1);

  bank.capacity = 1;
  update_bank(bank, merged, lib);
  REQUIRE(bank.entries.size() == 1);
  REQUIRE(bank.entries[0].term.key == "d2 u x");
  REQUIRE(bank.generation == 2);

  update_bank(bank, {}, lib);
  REQUIRE(bank.entries.empty());
}

// ───────────────────────── exact ℓ0 ─────────────────────────

TEST_CASE("support enumeration matches an independent per-support solver",
          "[evolution]") {
  Rng rng(77);
  for (int inst = 0; inst < 100; ++inst) {
    const int n = 40, k = 5;
    Mat theta(n, k);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) theta(i, j) = rng.normal();
    Vec y(n);
    for (int i = 0; i < n; ++i) y(i) = rng.normal();
    const double lambda = std::pow(10.0, rng.uniform(-4.0, 0.0));

    L0Result got = l0_exhaustive(theta, y, lambda);

    // oracle: QR least squares on every support, scored the same way
    double best_score = y.squaredNorm() / double(n);
    std::vector<int> best_sup;
    Vec best_xi;
    for (std::uint32_t m = 1; m < (1u << k); ++m) {
      std::vector<int> sup;
      for (int j = 0; j < k; ++j)
        if (m & (1u << j)) sup.push_back(j);
      Mat sub(n, Eigen::Index(sup.size()));
      for (std::size_t j = 0; j < sup.size(); ++j)
        sub.col(Eigen::Index(j)) = theta.col(sup[j]);
      Vec xi = sub.colPivHouseholderQr().solve(y);
      const double score = (sub * xi - y).squaredNorm() / double(n) +
                           lambda * double(sup.size());
      if (score < best_score) {
        best_score = score;
        best_sup = sup;
        best_xi = xi;
      }
    }
    REQUIRE(got.support == best_sup);
    REQUIRE(std::abs(got.score - best_score) < 1e-9);
    for (Eigen::Index j = 0; j < got.xi.size(); ++j)
      REQUIRE(std::abs(got.xi(j) - best_xi(j)) < 1e-8);
  }
}

TEST_CASE("l0 penalty limits: zero keeps full support, huge empties it",
          "[evolution]") {
  Rng rng(13);
  const int n = 60, k = 4;
  Mat theta(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) theta(i, j) = rng.normal();
  Vec y(n);
  for (int i = 0; i < n; ++i) y(i) = rng.normal();

  L0Result free = l0_exhaustive(theta, y, 0.0);
  REQUIRE(free.support == std::vector<int>{0, 1, 2, 3});

  L0Result crushed = l0_exhaustive(theta, y, 1e9);
  REQUIRE(crushed.support.empty());
}

// ───────────────────────── DSB generation ─────────────────────────

TEST_CASE("DSB draws converge on the exactly-fitting bank term",
          "[evolution]") {
  // u = 2x + 0.5t + 1 exactly, so u_t = 0.25 * u_x with zero residual
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  MlpModel m = affine_model(2.0, 0.5, 1.0);
  EvalBasis basis(m, grid_points(12, 12), lib);
  EvalConfig ecfg;

  SubtreeBank bank;
  update_bank(bank, {parse_traversal("+ u d1 u x", lib)}, lib);
  REQUIRE(bank.entries.size() == 2);

  // a deliberately poor "best so far" gives the draws a positive λ scale
  TreeNode u_tree = parse_tree("u", lib);
  PdeCandidate poor = evaluate_terms(split_terms(u_tree, lib), "u", basis,
                                     nullptr, ecfg);
  REQUIRE(poor.valid);
  REQUIRE(poor.rmse > 1e-3);

  DsbConfig dcfg;
  dcfg.n_draws = 64;
  Rng rng(19);
  std::vector<Traversal> out = dsb_generate(bank, basis, nullptr, poor, dcfg, rng);
  REQUIRE(out.size() == 64);
  for (const Traversal& tau : out)
    REQUIRE(traversal_text(tau, lib) == "d1 u x");
}

TEST_CASE("DSB refuses an empty bank", "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  MlpModel m = affine_model(1.0, 1.0, 0.0);
  EvalBasis basis(m, grid_points(6, 6), lib);
  SubtreeBank bank;
  PdeCandidate best;
  Rng rng(1);
  REQUIRE_THROWS_AS(dsb_generate(bank, basis, nullptr, best, DsbConfig{}, rng),
                    Error);
}

// ───────────────────────── symmetry correction ─────────────────────────

TEST_CASE("symmetry correction emits deletion and addition variants",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"w", "u", "v"}, {"x", "y"});
  const int u = lib.require_find("u"), v = lib.require_find("v");
  // u*w_x + v*w_y + w_xx: the advective pair balances under (x,y)+(u,v)
  // swap, the lone diffusion term does not
  Traversal in = parse_traversal("+ + * u d1 w x * v d1 w y d2 w x", lib);
  std::vector<Traversal> out = symmetry_correct(in, lib, {{u, v}});
  REQUIRE(out.size() == 2);

  std::set<std::string> eq_keys;
  for (const Traversal& tau : out)
    eq_keys.insert(term_set_key(split_terms(to_tree(tau, lib), lib)));
  const std::string adv_pair = "* d1 w x u | * d1 w y v";
  REQUIRE(eq_keys.count(adv_pair) == 1);  // deletion variant
  bool has_addition = false;
  for (const auto& k : eq_keys)
    has_addition |= k.find("d2 w x") != std::string::npos &&
                    k.find("d2 w y") != std::string::npos;
  REQUIRE(has_addition);

  // closure: for each variant, swapping maps its term set onto itself or
  // removes the imbalance entirely
  const int x = lib.require_find("x"), yv = lib.require_find("y");
  std::map<int, int> swp = {{x, yv}, {yv, x}, {u, v}, {v, u}};
  for (const Traversal& tau : out) {
    TreeNode t = to_tree(tau, lib);
    std::set<std::string> ks = term_keys(t, lib);
    std::set<std::string> swapped;
    for (const FunctionTerm& ft : split_terms(t, lib))
      swapped.insert(canonical_key(swap_tokens(ft.tree, swp), lib));
    REQUIRE(ks == swapped);
  }
}

TEST_CASE("balanced and single-axis inputs pass through symmetry correction",
          "[evolution]") {
  TokenLibrary lib2 = TokenLibrary::standard({"w", "u", "v"}, {"x", "y"});
  const int u = lib2.require_find("u"), v = lib2.require_find("v");
  Traversal balanced = parse_traversal("+ d2 w x d2 w y", lib2);
  std::vector<Traversal> same = symmetry_correct(balanced, lib2, {{u, v}});
  REQUIRE(same.size() == 1);
  REQUIRE(traversal_text(same[0], lib2) == traversal_text(balanced, lib2));

  TokenLibrary lib1 = TokenLibrary::standard({"u"}, {"x"});
  Traversal one = parse_traversal("d2 u x", lib1);
  std::vector<Traversal> id = symmetry_correct(one, lib1);
  REQUIRE(id.size() == 1);
  REQUIRE(traversal_text(id[0], lib1) == "d2 u x");
}

// ───────────────────────── hybrid pipeline ─────────────────────────

TEST_CASE("hybrid generation obeys the cardinality and filter contracts",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  MlpModel m = affine_model(1.5, -0.5, 2.0);
  EvalBasis basis(m, grid_points(10, 10), lib);
  EvalCache cache;
  EvalConfig ecfg;
  GenLimits lim;
  lim.max_len = 16;
  Rng init(23);
  PolicyNetwork pol = make_policy(lib.size(), 16, init);

  HybridConfig hcfg;
  hcfg.n = 40;
  hcfg.dsb.n_sub = 6;

  SubtreeBank bank;
  Rng rng(404);
  HybridResult res =
      hybrid_generate(pol, bank, basis, &cache, nullptr, lim, ecfg, hcfg, rng);

  REQUIRE(res.n_kept >= 1);
  REQUIRE(res.n_kept <= hcfg.n);
  REQUIRE(int(res.traversals.size()) <= 2 * hcfg.n);
  REQUIRE(res.traversals.size() == res.evals.size());
  REQUIRE(res.n_kept + res.n_dsb == int(res.traversals.size()));
  REQUIRE(int(res.merged_rewards.size()) == 4 * hcfg.n);

  // every training traversal is structurally valid and unique
  std::set<std::string> texts;
  for (const Traversal& tau : res.traversals) {
    REQUIRE(tree_ok(to_tree(tau, lib), lib, lim));
    REQUIRE(texts.insert(traversal_text(tau, lib)).second);
  }

  // filter: the kept multiset dominates everything discarded
  std::vector<double> sorted = res.merged_rewards;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  const double min_kept = sorted[std::size_t(hcfg.n - 1)];
  const double max_dropped = sorted[std::size_t(hcfg.n)];
  REQUIRE(min_kept >= max_dropped);

  // bank was rebuilt from the kept set
  REQUIRE(!bank.entries.empty());
  REQUIRE(bank.generation == 1);
  REQUIRE(int(bank.entries.size()) <= hcfg.bank_capacity);

  // RL reward stats are populated and consistent
  REQUIRE(res.rl_best_reward >= res.rl_mean_reward);
}

TEST_CASE("hybrid generation is deterministic under a fixed seed",
          "[evolution]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  MlpModel m = affine_model(0.8, 0.3, 1.2);
  EvalBasis basis(m, grid_points(8, 8), lib);
  EvalCache cache;
  EvalConfig ecfg;
  GenLimits lim;
  lim.max_len = 12;
  Rng init(2);
  PolicyNetwork pol = make_policy(lib.size(), 12, init);
  HybridConfig hcfg;
  hcfg.n = 24;
  hcfg.dsb.n_sub = 5;

  auto run = [&]() {
    SubtreeBank bank;
    Rng rng(777);
    HybridResult r =
        hybrid_generate(pol, bank, basis, &cache, nullptr, lim, ecfg, hcfg, rng);
    std::vector<std::string> texts;
    for (const Traversal& tau : r.traversals)
      texts.push_back(traversal_text(tau, lib));
    return texts;
  };
  std::vector<std::string> first = run();
  std::vector<std::string> second = run();  // warm cache second time
  REQUIRE(first == second);
}
