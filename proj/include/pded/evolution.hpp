// Genetic refinement of sampled expressions: term-level crossover,
// node-level mutation, a per-iteration subtree bank of frequent terms,
// exact ℓ0 sparse regression over bank subsamples, spatial symmetry
// correction, and the merge/filter pipeline tying them together.
#pragma once

#include "pded/policy.hpp"
#include "pded/term_eval.hpp"

#include <map>
#include <set>

namespace pded {

// ───────────────────────── signed term spines ─────────────────────────

namespace detail {

struct SignedTerm {
  bool plus = true;
  TreeNode tree;
};

inline void collect_signed(const TreeNode& n, const TokenLibrary& lib,
                           bool plus, std::vector<SignedTerm>& out) {
  if (lib.is_plus_minus(n.ord)) {
    const bool minus = lib.symbol(n.ord) == "-";
    collect_signed(n.kids[0], lib, plus, out);
    collect_signed(n.kids[1], lib, minus ? !plus : plus, out);
  } else {
    out.push_back({plus, n});
  }
}

// Left-leaning rebuild; the leftmost term of any spine is positive, so the
// first entry's sign is always '+'.
inline TreeNode rebuild_spine(std::vector<SignedTerm> terms,
                              const TokenLibrary& lib) {
  require(!terms.empty() && terms[0].plus, Errc::Internal, "bad spine");
  const int plus = lib.require_find("+");
  const int minus = lib.require_find("-");
  TreeNode acc = std::move(terms[0].tree);
  for (std::size_t i = 1; i < terms.size(); ++i) {
    TreeNode p;
    p.ord = terms[i].plus ? plus : minus;
    p.kids.push_back(std::move(acc));
    p.kids.push_back(std::move(terms[i].tree));
    acc = std::move(p);
  }
  return acc;
}

}  // namespace detail

// ───────────────────────── crossover ─────────────────────────

// Swaps one uniformly chosen top-level term of each parent (signs stay with
// their spine positions). A child that breaks the length or depth limits is
// replaced by its own un-swapped parent.
inline std::pair<TreeNode, TreeNode> crossover(const TreeNode& a,
                                               const TreeNode& b,
                                               const TokenLibrary& lib,
                                               GenLimits limits, Rng& rng) {
  std::vector<detail::SignedTerm> ta, tb;
  detail::collect_signed(a, lib, true, ta);
  detail::collect_signed(b, lib, true, tb);
  const std::size_t ia = rng.index(ta.size());
  const std::size_t ib = rng.index(tb.size());
  std::swap(ta[ia].tree, tb[ib].tree);
  TreeNode ca = detail::rebuild_spine(std::move(ta), lib);
  TreeNode cb = detail::rebuild_spine(std::move(tb), lib);
  if (!within_limits(ca, lib, limits)) ca = a;
  if (!within_limits(cb, lib, limits)) cb = b;
  return {std::move(ca), std::move(cb)};
}

// ───────────────────────── mutation ─────────────────────────

namespace detail {

struct NodeRef {
  TreeNode* node;
  int parent_ord;   // -1 at the root
  int child_index;  // position under the parent
};

inline void collect_nodes(TreeNode& n, int parent_ord, int child_index,
                          std::vector<NodeRef>& out) {
  out.push_back({&n, parent_ord, child_index});
  for (std::size_t c = 0; c < n.kids.size(); ++c)
    collect_nodes(n.kids[c], n.ord, int(c), out);
}

// Same-arity tokens legal at this position, before the whole-tree limit
// check. Derivative-child rules are enforced both for the slot this node
// occupies and for the children the new token would inherit.
inline std::vector<int> replacement_tokens(const NodeRef& ref,
                                           const TokenLibrary& lib) {
  const TreeNode& n = *ref.node;
  const bool leaf = n.kids.empty();
  std::vector<int> out;
  for (int j = 0; j < lib.size(); ++j) {
    if (j == n.ord || lib.arity(j) != lib.arity(n.ord)) continue;
    if (ref.parent_ord >= 0 && lib.is_deriv(ref.parent_ord)) {
      if (ref.child_index == 1 && !lib.is_spatial(j)) continue;
      if (ref.child_index == 0 && leaf && lib.is_spatial(j)) continue;
    }
    if (lib.is_deriv(j)) {
      const TreeNode& l = n.kids[0];
      const TreeNode& r = n.kids[1];
      if (!(r.kids.empty() && lib.is_spatial(r.ord))) continue;
      if (l.kids.empty() && lib.is_spatial(l.ord)) continue;
    }
    out.push_back(j);
  }
  return out;
}

}  // namespace detail

// Replaces one uniformly chosen mutable node with a different same-arity
// token legal in that position. Replacements that break the length/depth
// limits are discarded and redrawn; a tree with no mutable node is returned
// unchanged.
inline TreeNode mutate(const TreeNode& parent, const TokenLibrary& lib,
                       GenLimits limits, Rng& rng) {
  TreeNode tree = parent;
  std::vector<detail::NodeRef> refs;
  detail::collect_nodes(tree, -1, 0, refs);

  std::vector<std::size_t> mutable_idx;
  std::vector<std::vector<int>> options(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    options[i] = detail::replacement_tokens(refs[i], lib);
    if (!options[i].empty()) mutable_idx.push_back(i);
  }
  while (!mutable_idx.empty()) {
    const std::size_t pick = rng.index(mutable_idx.size());
    const std::size_t ni = mutable_idx[pick];
    std::vector<int>& opts = options[ni];
    while (!opts.empty()) {
      const std::size_t ti = rng.index(opts.size());
      const int saved = refs[ni].node->ord;
      refs[ni].node->ord = opts[ti];
      if (within_limits(tree, lib, limits)) return tree;
      refs[ni].node->ord = saved;
      opts.erase(opts.begin() + std::ptrdiff_t(ti));
    }
    mutable_idx.erase(mutable_idx.begin() + std::ptrdiff_t(pick));
  }
  return tree;  // nothing mutable under the limits
}

// ───────────────────────── subtree bank ─────────────────────────

struct BankEntry {
  FunctionTerm term;
  int count = 0;
};

// Short-term memory of frequent function terms, fully rebuilt every
// iteration from the current best-N set.
struct SubtreeBank {
  std::vector<BankEntry> entries;  // ranked: count desc, shorter key, lex
  int capacity = 20;
  std::uint64_t generation = 0;
};

inline void update_bank(SubtreeBank& bank,
                        const std::vector<Traversal>& merged,
                        const TokenLibrary& lib) {
  std::map<std::string, BankEntry> counts;
  for (const Traversal& tau : merged) {
    TreeNode tree = to_tree(tau, lib);
    for (FunctionTerm& ft : split_terms(tree, lib)) {
      auto it = counts.find(ft.key);
      if (it == counts.end()) {
        std::string key = ft.key;
        counts.emplace(std::move(key), BankEntry{std::move(ft), 1});
      } else {
        it->second.count++;
      }
    }
  }
  bank.entries.clear();
  bank.entries.reserve(counts.size());
  for (auto& [k, e] : counts) bank.entries.push_back(std::move(e));
  std::sort(bank.entries.begin(), bank.entries.end(),
            [](const BankEntry& a, const BankEntry& b) {
              if (a.count != b.count) return a.count > b.count;
              if (a.term.key.size() != b.term.key.size())
                return a.term.key.size() < b.term.key.size();
              return a.term.key < b.term.key;
            });
  if (int(bank.entries.size()) > bank.capacity)
    bank.entries.resize(std::size_t(bank.capacity));
  bank.generation++;
}

inline nlohmann::json bank_to_json(const SubtreeBank& bank,
                                   const TokenLibrary& lib) {
  nlohmann::json j = nlohmann::json::array();
  for (const BankEntry& e : bank.entries) {
    nlohmann::json t;
    t["term"] = pretty_infix(e.term.tree, lib);
    t["key"] = e.term.key;
    t["count"] = e.count;
    j.push_back(t);
  }
  return j;
}

// ───────────────────────── exact ℓ0 regression ─────────────────────────

struct L0Result {
  std::vector<int> support;  // ascending column indices; empty allowed
  Vec xi;                    // aligned with support
  double score = 0;          // mean squared residual + lambda * |support|
};

// Minimizes (1/n)‖Θξ − y‖² + λ‖ξ‖₀ by enumerating all supports. Solves
// each support through the shared Gram matrix; supports whose normal
// equations come out non-finite are skipped. Ties keep the earlier
// (smaller) support mask, so the empty support wins exact ties.
inline L0Result l0_exhaustive(const Mat& theta, const Vec& y, double lambda) {
  const Eigen::Index n = theta.rows();
  const Eigen::Index k = theta.cols();
  require(n > 0 && y.size() == n, Errc::DimensionMismatch, "l0 shapes");
  require(k >= 1 && k <= 20, Errc::ConfigError, "l0 enumeration width");
  const Mat G = theta.transpose() * theta;
  const Vec b = theta.transpose() * y;
  const double yy = y.squaredNorm();

  L0Result best;
  best.score = yy / double(n);
  best.xi.resize(0);
  for (std::uint32_t maskbits = 1; maskbits < (1u << int(k)); ++maskbits) {
    std::vector<int> sup;
    for (int j = 0; j < int(k); ++j)
      if (maskbits & (1u << j)) sup.push_back(j);
    const Eigen::Index s = Eigen::Index(sup.size());
    Mat Gs(s, s);
    Vec bs(s);
    for (Eigen::Index r = 0; r < s; ++r) {
      bs(r) = b(sup[std::size_t(r)]);
      for (Eigen::Index c = 0; c < s; ++c)
        Gs(r, c) = G(sup[std::size_t(r)], sup[std::size_t(c)]);
    }
    const Vec xi = Gs.ldlt().solve(bs);
    if (!xi.allFinite()) continue;
    const double rss = yy - 2.0 * xi.dot(bs) + xi.dot(Gs * xi);
    const double score = rss / double(n) + lambda * double(s);
    if (score < best.score) {
      best.score = score;
      best.support = std::move(sup);
      best.xi = xi;
    }
  }
  return best;
}

// ───────────────────────── DSB generation ─────────────────────────

struct DsbConfig {
  int n_draws = 1000;      // one candidate traversal attempted per draw
  int n_sub = 10;          // bank terms subsampled per draw
  double tol = 1e-3;       // coefficient prune on unit-normalized columns
  double delta_lo = 0.1;   // λ = δ·MSE(best), δ ~ U(delta_lo, delta_hi)
  double delta_hi = 0.5;
};

namespace detail {

// Frequency-weighted subsample without replacement.
inline std::vector<int> weighted_subsample(const SubtreeBank& bank, int n_sub,
                                           Rng& rng) {
  const int k = int(bank.entries.size());
  std::vector<int> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  if (k <= n_sub) return idx;
  std::vector<double> w(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) w[std::size_t(i)] = double(bank.entries[std::size_t(i)].count);
  std::vector<int> out;
  out.reserve(std::size_t(n_sub));
  double total = 0;
  for (double v : w) total += v;
  for (int draw = 0; draw < n_sub; ++draw) {
    double r = rng.uniform() * total;
    std::size_t pick = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      pick = i;
      r -= w[i];
      if (r < 0) break;
    }
    out.push_back(idx[pick]);
    total -= w[pick];
    idx.erase(idx.begin() + std::ptrdiff_t(pick));
    w.erase(w.begin() + std::ptrdiff_t(pick));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

// For each draw: sample δ, set λ = δ·MSE(best fit), subsample bank terms,
// solve the exact ℓ0 problem, prune small normalized coefficients, and emit
// the '+'-joined traversal of the survivors. Draws whose support or pruned
// support is empty emit nothing.
inline std::vector<Traversal> dsb_generate(const SubtreeBank& bank,
                                           EvalBasis& basis, EvalCache* cache,
                                           const PdeCandidate& best,
                                           const DsbConfig& cfg, Rng& rng) {
  require(!bank.entries.empty(), Errc::EmptyBank, "subtree bank is empty");
  const TokenLibrary& lib = basis.lib();

  std::vector<FunctionTerm> terms;
  terms.reserve(bank.entries.size());
  for (const BankEntry& e : bank.entries) terms.push_back(e.term);
  const ThetaSystem sys = build_theta(terms, basis, cache);
  const Eigen::Index n = sys.theta.rows();
  const Mat G = sys.theta.transpose() * sys.theta;
  const Vec bvec = sys.theta.transpose() * sys.ut;
  const double yy = sys.ut.squaredNorm();
  Vec col_norms(sys.theta.cols());
  for (Eigen::Index j = 0; j < sys.theta.cols(); ++j)
    col_norms(j) = sys.theta.col(j).norm();

  // λ scale: mean squared residual of the best candidate on these points
  double mse_best = yy / double(n);
  if (best.valid && best.n_terms > 0) {
    const ThetaSystem bsys = build_theta(best.terms, basis, cache);
    mse_best = (bsys.theta * best.xi - bsys.ut).squaredNorm() / double(n);
  }

  std::vector<Traversal> out;
  for (int d = 0; d < cfg.n_draws; ++d) {
    Rng stream = rng.child(std::uint64_t(d));
    const double delta = stream.uniform(cfg.delta_lo, cfg.delta_hi);
    const double lambda = delta * mse_best;
    const std::vector<int> sub =
        detail::weighted_subsample(bank, cfg.n_sub, stream);
    const int k = int(sub.size());

    // enumerate supports over the subsample through the shared Gram
    std::vector<int> best_sup;
    Vec best_xi;
    double best_score = yy / double(n);
    for (std::uint32_t maskbits = 1; maskbits < (1u << k); ++maskbits) {
      std::vector<int> sup;
      for (int j = 0; j < k; ++j)
        if (maskbits & (1u << j)) sup.push_back(sub[std::size_t(j)]);
      const Eigen::Index s = Eigen::Index(sup.size());
      Mat Gs(s, s);
      Vec bs(s);
      for (Eigen::Index r = 0; r < s; ++r) {
        bs(r) = bvec(sup[std::size_t(r)]);
        for (Eigen::Index c = 0; c < s; ++c)
          Gs(r, c) = G(sup[std::size_t(r)], sup[std::size_t(c)]);
      }
      const Vec xi = Gs.ldlt().solve(bs);
      if (!xi.allFinite()) continue;
      const double rss = yy - 2.0 * xi.dot(bs) + xi.dot(Gs * xi);
      const double score = rss / double(n) + lambda * double(s);
      if (score < best_score) {
        best_score = score;
        best_sup = std::move(sup);
        best_xi = xi;
      }
    }
    if (best_sup.empty()) continue;

    std::vector<FunctionTerm> kept;
    for (std::size_t j = 0; j < best_sup.size(); ++j) {
      const int col = best_sup[j];
      if (std::abs(best_xi(Eigen::Index(j))) * col_norms(col) > cfg.tol)
        kept.push_back(terms[std::size_t(col)]);
    }
    if (kept.empty()) continue;
    std::sort(kept.begin(), kept.end(),
              [](const FunctionTerm& a, const FunctionTerm& b) {
                return a.key < b.key;
              });
    out.push_back(to_traversal(join_terms(kept, lib)));
  }
  return out;
}

// ───────────────────────── symmetry correction ─────────────────────────

// For every term that is not invariant under a spatial-variable swap and
// whose swapped partner is absent, emits a deletion variant (term removed)
// and an addition variant (partner appended). The swap exchanges each pair
// of spatial variables and, with them, any state variables declared as
// paired (velocity components transform with their axes, so u·w_x and
// v·w_y are partners). Balanced inputs and problems with fewer than two
// spatial variables return the input unchanged.
inline std::vector<Traversal> symmetry_correct(
    const Traversal& tau, const TokenLibrary& lib,
    const std::vector<std::pair<int, int>>& state_pairs = {}) {
  const std::vector<int> sp = lib.spatial_vars();
  if (sp.size() < 2) return {tau};
  const TreeNode tree = to_tree(tau, lib);
  const std::vector<FunctionTerm> terms = split_terms(tree, lib);
  std::set<std::string> keys;
  for (const FunctionTerm& t : terms) keys.insert(t.key);

  struct Unbalanced {
    std::size_t index;
    FunctionTerm partner;
  };
  std::vector<Unbalanced> fixes;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    for (std::size_t a = 0; a < sp.size(); ++a) {
      for (std::size_t b = a + 1; b < sp.size(); ++b) {
        std::map<int, int> swap_map = {{sp[a], sp[b]}, {sp[b], sp[a]}};
        for (const auto& [s1, s2] : state_pairs) {
          swap_map[s1] = s2;
          swap_map[s2] = s1;
        }
        TreeNode swapped =
            canonical_tree(swap_tokens(terms[i].tree, swap_map), lib);
        std::string skey = traversal_text(to_traversal(swapped), lib);
        if (skey == terms[i].key || keys.count(skey)) continue;
        FunctionTerm partner;
        partner.depth = tree_depth(swapped);
        partner.tree = std::move(swapped);
        partner.key = std::move(skey);
        fixes.push_back({i, std::move(partner)});
      }
    }
  }
  if (fixes.empty()) return {tau};

  std::vector<Traversal> out;
  std::set<std::string> seen;
  auto emit = [&](std::vector<FunctionTerm> ts) {
    if (ts.empty()) return;
    std::sort(ts.begin(), ts.end(),
              [](const FunctionTerm& a, const FunctionTerm& b) {
                return a.key < b.key;
              });
    Traversal v = to_traversal(join_terms(ts, lib));
    std::string text = traversal_text(v, lib);
    if (seen.insert(std::move(text)).second) out.push_back(std::move(v));
  };
  for (const Unbalanced& fx : fixes) {
    std::vector<FunctionTerm> del;
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (i != fx.index) del.push_back(terms[i]);
    emit(std::move(del));
    std::vector<FunctionTerm> add = terms;
    add.push_back(fx.partner);
    emit(std::move(add));
  }
  return out;
}

// ───────────────────────── hybrid pipeline ─────────────────────────

struct HybridConfig {
  int n = 1000;                 // population per phase
  double crossover_top = 0.5;   // reward fraction eligible as parents
  int bank_capacity = 20;
  DsbConfig dsb;                // n_draws is overridden with n
  std::vector<std::pair<int, int>> symmetry_pairs;  // paired state vars
};

struct HybridResult {
  std::vector<Traversal> traversals;  // kept set first, then DSB additions
  std::vector<PdeCandidate> evals;    // aligned with traversals
  int n_kept = 0;                     // size of the filtered best-N set
  int n_dsb = 0;                      // additions that survived dedup
  double rl_mean_reward = 0;
  double rl_best_reward = kInvalidReward;
  std::vector<double> merged_rewards;  // the 4N pool, for diagnostics
  SampledBatch rl;  // the policy's own rollouts with rewards, for the PG step
};

// One outer-iteration generation pass: policy rollouts; one mutation per
// rollout; 2N crossover children from the top reward fraction; merge,
// evaluate, keep the best N; rebuild the bank from the kept set; ℓ0 draws
// from the bank with symmetry correction; return kept ∪ DSB deduplicated
// by traversal text.
inline HybridResult hybrid_generate(const PolicyNetwork& policy,
                                    SubtreeBank& bank, EvalBasis& basis,
                                    EvalCache* cache,
                                    const PdeCandidate* global_best,
                                    GenLimits limits, const EvalConfig& ecfg,
                                    const HybridConfig& hcfg, Rng& rng) {
  const TokenLibrary& lib = basis.lib();
  const int N = hcfg.n;

  // 1. policy rollouts
  SampledBatch rl = sample_batch(policy, lib, N, limits, rng);
  std::vector<TreeNode> trees;
  trees.reserve(std::size_t(N));
  for (const Traversal& tau : rl.traversals) trees.push_back(to_tree(tau, lib));

  std::vector<Traversal> pool = rl.traversals;
  std::vector<PdeCandidate> pool_evals;
  pool_evals.reserve(std::size_t(4 * N));
  for (const Traversal& tau : rl.traversals)
    pool_evals.push_back(evaluate_candidate(tau, basis, cache, ecfg));

  HybridResult res;
  double sum = 0;
  for (const PdeCandidate& c : pool_evals) {
    sum += c.reward;
    res.rl_best_reward = std::max(res.rl_best_reward, c.reward);
  }
  res.rl_mean_reward = sum / double(N);
  rl.rewards = Vec(N);
  for (int i = 0; i < N; ++i) rl.rewards(i) = pool_evals[std::size_t(i)].reward;
  res.rl = std::move(rl);

  // 2. one mutation per rollout
  for (int i = 0; i < N; ++i) {
    Rng stream = rng.child(std::uint64_t(i));
    pool.push_back(
        to_traversal(mutate(trees[std::size_t(i)], lib, limits, stream)));
  }

  // 3. 2N crossover children from the top reward fraction
  std::vector<int> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pool_evals[std::size_t(a)].reward > pool_evals[std::size_t(b)].reward;
  });
  const int top =
      std::min(N, std::max(1, int(std::ceil(double(N) * hcfg.crossover_top))));
  for (int p = 0; p < N; ++p) {
    Rng stream = rng.child(std::uint64_t(N + p));
    const int ia = order[stream.index(std::size_t(top))];
    const int ib = order[stream.index(std::size_t(top))];
    auto [ca, cb] = crossover(trees[std::size_t(ia)], trees[std::size_t(ib)],
                              lib, limits, stream);
    pool.push_back(to_traversal(ca));
    pool.push_back(to_traversal(cb));
  }

  // 4. evaluate the merged 4N pool, keep the best N
  for (std::size_t i = std::size_t(N); i < pool.size(); ++i)
    pool_evals.push_back(evaluate_candidate(pool[i], basis, cache, ecfg));
  res.merged_rewards.reserve(pool_evals.size());
  for (const PdeCandidate& c : pool_evals) res.merged_rewards.push_back(c.reward);

  std::vector<int> rank(pool.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) {
    return pool_evals[std::size_t(a)].reward > pool_evals[std::size_t(b)].reward;
  });
  // the kept multiset T feeds the bank (duplicates count toward term
  // frequency); the returned training set is deduplicated by traversal text
  std::set<std::string> seen;
  std::vector<Traversal> kept;
  for (int i = 0; i < N; ++i) {
    const int id = rank[std::size_t(i)];
    kept.push_back(pool[std::size_t(id)]);
    if (!seen.insert(pool_evals[std::size_t(id)].traversal_key).second)
      continue;
    res.traversals.push_back(pool[std::size_t(id)]);
    res.evals.push_back(pool_evals[std::size_t(id)]);
  }
  res.n_kept = int(res.traversals.size());

  // 5. rebuild the bank from the kept set
  bank.capacity = hcfg.bank_capacity;
  update_bank(bank, kept, lib);

  // 6. ℓ0 draws from the bank, symmetry-corrected, capped at N
  const PdeCandidate* best = global_best;
  if (!best || !best->valid) best = &res.evals[0];
  DsbConfig dcfg = hcfg.dsb;
  dcfg.n_draws = N;
  if (!bank.entries.empty()) {
    std::vector<Traversal> dsb_raw =
        dsb_generate(bank, basis, cache, *best, dcfg, rng);
    std::vector<Traversal> dsb;
    for (const Traversal& tau : dsb_raw) {
      for (Traversal& v : symmetry_correct(tau, lib, hcfg.symmetry_pairs)) {
        if (int(dsb.size()) >= N) break;
        dsb.push_back(std::move(v));
      }
      if (int(dsb.size()) >= N) break;
    }
    // 7. dedup against the kept set by traversal text
    for (const Traversal& tau : dsb) {
      std::string text = traversal_text(tau, lib);
      if (!seen.insert(std::move(text)).second) continue;
      res.traversals.push_back(tau);
      res.evals.push_back(evaluate_candidate(tau, basis, cache, ecfg));
      res.n_dsb++;
    }
  }
  return res;
}

}  // namespace pded
