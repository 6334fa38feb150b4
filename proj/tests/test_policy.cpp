// Policy rollouts and risk-seeking updates: mask compliance, determinism,
// log-likelihood consistency between sampling and tape replay, quantile
// semantics, and end-to-end learning on a bandit reduction.
#include <catch2/catch_amalgamated.hpp>

#include "pded/policy.hpp"

#include <set>

using namespace pded;

namespace {

PolicyNetwork zero_policy(int lib_size, int hidden) {
  Rng rng(3);
  PolicyNetwork p = make_policy(lib_size, hidden, rng);
  for (Arr* a : p.params()) a->setZero();
  return p;
}

bool same_params(const PolicyNetwork& a, const PolicyNetwork& b) {
  auto sa = a.snapshot(), sb = b.snapshot();
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (!(sa[i] == sb[i]).all()) return false;
  return true;
}

}  // namespace

TEST_CASE("same seed reproduces traversals and log-likelihoods exactly",
          "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(11);
  PolicyNetwork p = make_policy(lib.size(), 24, init);
  GenLimits lim;
  lim.max_len = 16;

  Rng r1(77), r2(77);
  SampledBatch a = sample_batch(p, lib, 64, lim, r1);
  SampledBatch b = sample_batch(p, lib, 64, lim, r2);
  REQUIRE(a.traversals.size() == 64);
  for (std::size_t i = 0; i < 64; ++i)
    REQUIRE(a.traversals[i].ords == b.traversals[i].ords);
  REQUIRE((a.logp.array() == b.logp.array()).all());

  // a different seed changes at least one rollout
  Rng r3(78);
  SampledBatch c = sample_batch(p, lib, 64, lim, r3);
  bool differs = false;
  for (std::size_t i = 0; i < 64 && !differs; ++i)
    differs = a.traversals[i].ords != c.traversals[i].ords;
  REQUIRE(differs);
}

TEST_CASE("every sampled traversal is complete, legal, and within limits",
          "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(5);
  PolicyNetwork p = make_policy(lib.size(), 32, init);
  GenLimits lim;  // library defaults: max_len 64, d_max 4

  Rng rng(123);
  SampledBatch batch = sample_batch(p, lib, 1000, lim, rng);
  for (const Traversal& tau : batch.traversals) {
    REQUIRE(!tau.ords.empty());
    REQUIRE(int(tau.ords.size()) <= lim.max_len);
    TreeNode tree = to_tree(tau, lib);  // throws on arity violations
    REQUIRE_NOTHROW(validate_tree(tree, lib));
    REQUIRE(within_limits(tree, lib, lim));
  }
}

TEST_CASE("zero-weight policy draws the first token uniformly over legal set",
          "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  PolicyNetwork p = zero_policy(lib.size(), 16);
  GenLimits lim;
  lim.max_len = 8;

  // at the root every token is legal under these limits
  PartialBuilder probe(lib, lim);
  const std::vector<char> mask = probe.legal_mask();
  int n_legal = 0;
  for (char c : mask) n_legal += c;
  REQUIRE(n_legal == lib.size());

  const int N = 10000;
  Rng rng(2024);
  SampledBatch batch = sample_batch(p, lib, N, lim, rng);
  std::vector<int> counts(std::size_t(lib.size()), 0);
  for (const Traversal& tau : batch.traversals)
    counts[std::size_t(tau.ords[0])]++;
  const double expect = double(N) / n_legal;
  const double sigma = std::sqrt(double(N) * (1.0 / n_legal) * (1.0 - 1.0 / n_legal));
  for (int c : counts) {
    REQUIRE(double(c) > expect - 3 * sigma);
    REQUIRE(double(c) < expect + 3 * sigma);
  }
}

TEST_CASE("tape replay reproduces the sampling-time log-likelihood",
          "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(9);
  PolicyNetwork p = make_policy(lib.size(), 24, init);
  GenLimits lim;
  lim.max_len = 12;

  Rng rng(31);
  SampledBatch batch = sample_batch(p, lib, 16, lim, rng);
  for (int i = 0; i < 16; ++i) {
    Tape t;
    NodeId lp = policy_logprob_graph(t, p, batch.traversals[std::size_t(i)],
                                     lib, lim);
    REQUIRE(std::abs(t.value(lp)(0, 0) - batch.logp(i)) < 1e-9);
    REQUIRE(batch.logp(i) <= 0.0);
  }
}

TEST_CASE("log-likelihood gradient matches finite differences", "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(13);
  PolicyNetwork p = make_policy(lib.size(), 12, init);
  GenLimits lim;
  lim.max_len = 10;

  Rng rng(41);
  SampledBatch batch = sample_batch(p, lib, 8, lim, rng);
  std::size_t pick = 0;
  for (std::size_t i = 0; i < batch.traversals.size(); ++i)
    if (batch.traversals[i].ords.size() >
        batch.traversals[pick].ords.size())
      pick = i;
  REQUIRE(batch.traversals[pick].ords.size() >= 3);

  Tape t;
  NodeId lp = policy_logprob_graph(t, p, batch.traversals[pick], lib, lim);
  t.backward_numeric(lp);

  Rng idx_rng(7);
  const double h = 1e-6;
  for (Arr* pa : p.params()) {
    const Arr g = t.grad(t.external(pa));
    for (int rep = 0; rep < 2; ++rep) {
      const Eigen::Index k = Eigen::Index(idx_rng.index(std::size_t(pa->size())));
      double* cell = pa->data() + k;
      const double saved = *cell;
      *cell = saved + h;
      t.forward();
      const double fp = t.value(lp)(0, 0);
      *cell = saved - h;
      t.forward();
      const double fm = t.value(lp)(0, 0);
      *cell = saved;
      const double fd = (fp - fm) / (2 * h);
      const double an = *(g.data() + k);
      REQUIRE(std::abs(fd - an) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
  t.forward();  // restore values for hygiene
}

TEST_CASE("replaying a masked token is rejected", "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(2);
  PolicyNetwork p = make_policy(lib.size(), 8, init);
  Traversal bad;
  bad.ords = {lib.require_find("d1"), lib.require_find("x"),
              lib.require_find("x")};
  Tape t;
  REQUIRE_THROWS_AS(policy_logprob_graph(t, p, bad, lib, GenLimits{}), Error);
}

TEST_CASE("risk quantile follows nearest-rank semantics", "[policy]") {
  Vec r(100);
  for (int i = 0; i < 100; ++i) r(i) = double(100 - i);  // 100..1 shuffled-ish
  REQUIRE(risk_quantile(r, 0.1) == 91.0);
  int retained = 0;
  for (int i = 0; i < 100; ++i) retained += r(i) >= 91.0;
  REQUIRE(retained == 10);

  REQUIRE(risk_quantile(r, 1.0) == 1.0);  // degenerate eps keeps everything

  Vec same = Vec::Constant(17, 0.25);
  REQUIRE(risk_quantile(same, 0.3) == 0.25);

  Vec small(8);
  small << 30, 10, 80, 50, 20, 70, 40, 60;
  REQUIRE(risk_quantile(small, 0.25) == 70.0);
  retained = 0;
  for (int i = 0; i < 8; ++i) retained += small(i) >= 70.0;
  REQUIRE(retained == 2);
}

TEST_CASE("equal rewards leave the policy bitwise unchanged", "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(21);
  PolicyNetwork p = make_policy(lib.size(), 16, init);
  GenLimits lim;
  lim.max_len = 10;

  Rng rng(55);
  SampledBatch batch = sample_batch(p, lib, 12, lim, rng);
  batch.rewards = Vec::Constant(12, 0.37);

  PolicyNetwork before = p;
  PolicyTrainer trainer(p, 5e-4);
  const double q = trainer.step(batch, lib, lim, 0.1);
  REQUIRE(q == 0.37);
  REQUIRE(same_params(p, before));

  // a second no-op batch still changes nothing
  trainer.step(batch, lib, lim, 1.0);
  REQUIRE(same_params(p, before));
}

TEST_CASE("masked distribution entropy is positive with several legal tokens",
          "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  PolicyNetwork p = zero_policy(lib.size(), 8);
  GenLimits lim;
  lim.max_len = 8;

  PartialBuilder b(lib, lim);
  Arr x(p.in_dim, 1);
  encode_slot(b.parent_ord(), b.sibling_ord(), p.lib_size, x.col(0));
  Arr h = gru_step(p, x, Arr::Zero(p.hidden, 1));
  Eigen::ArrayXd logits = policy_logits(p, h).col(0);
  Eigen::ArrayXd probs = masked_softmax(logits, b.legal_mask());
  const double ent = masked_entropy(probs);
  REQUIRE(ent > 0.0);
  REQUIRE(std::isfinite(ent));
  REQUIRE(std::abs(ent - std::log(double(lib.size()))) < 1e-12);

  // one legal token only: entropy collapses to zero
  std::vector<char> one(std::size_t(lib.size()), 0);
  one[2] = 1;
  REQUIRE(masked_entropy(masked_softmax(logits, one)) == 0.0);
}

TEST_CASE("risk-seeking updates solve a three-armed bandit", "[policy]") {
  // max_len = 1 admits only the leaf tokens u, v, x: a bandit in disguise
  TokenLibrary lib = TokenLibrary::standard({"u", "v"}, {"x"}, false);
  GenLimits lim;
  lim.max_len = 1;
  const int ord_u = lib.require_find("u");

  PartialBuilder probe(lib, lim);
  const std::vector<char> mask = probe.legal_mask();
  int n_legal = 0;
  for (char c : mask) n_legal += c;
  REQUIRE(n_legal == 3);

  Rng init(17);
  PolicyNetwork p = make_policy(lib.size(), 16, init);
  PolicyTrainer trainer(p, 0.02);
  Rng rng(99);
  for (int step = 0; step < 300; ++step) {
    SampledBatch batch = sample_batch(p, lib, 50, lim, rng);
    for (int i = 0; i < 50; ++i)
      batch.rewards(i) =
          batch.traversals[std::size_t(i)].ords[0] == ord_u ? 1.0 : 0.0;
    trainer.step(batch, lib, lim, 1.0);
  }

  PartialBuilder b(lib, lim);
  Arr x(p.in_dim, 1);
  encode_slot(b.parent_ord(), b.sibling_ord(), p.lib_size, x.col(0));
  Arr h = gru_step(p, x, Arr::Zero(p.hidden, 1));
  Eigen::ArrayXd probs =
      masked_softmax(policy_logits(p, h).col(0), b.legal_mask());
  REQUIRE(probs(ord_u) > 0.95);
}

TEST_CASE("policy checkpoints round-trip bitwise", "[policy]") {
  TokenLibrary lib = TokenLibrary::standard({"u"}, {"x"});
  Rng init(29);
  PolicyNetwork p = make_policy(lib.size(), 24, init);
  nlohmann::json j = policy_to_json(p);
  REQUIRE(j["kind"] == "gru_policy");
  PolicyNetwork q = policy_from_json(j);
  REQUIRE(q.lib_size == p.lib_size);
  REQUIRE(q.hidden == p.hidden);
  REQUIRE(same_params(p, q));

  nlohmann::json bad = j;
  bad["kind"] = "mlp";
  REQUIRE_THROWS_AS(policy_from_json(bad), Error);
}
