// Autoregressive token policy: a single gated recurrent cell conditioned on
// the (parent, sibling) pair of the current open slot, projecting to masked
// logits over the token library. Batched numeric rollouts generate
// traversals; training replays chosen traversals on a tape and ascends the
// risk-seeking policy gradient over the top-ε reward fraction.
#pragma once

#include "pded/expr.hpp"
#include "pded/mlp.hpp"
#include "pded/tape.hpp"

#include <json.hpp>

namespace pded {

// ───────────────────────── network ─────────────────────────

struct PolicyNetwork {
  int lib_size = 0;
  int hidden = 64;
  int in_dim = 0;  // 2*(lib_size+1): one-hot parent ⊕ one-hot sibling
  Arr Wz, Uz, bz;  // update gate
  Arr Wr, Ur, br;  // reset gate
  Arr Wn, Un, bn;  // candidate state
  Arr Wo, bo;      // output projection to logits

  std::vector<Arr*> params() {
    return {&Wz, &Uz, &bz, &Wr, &Ur, &br, &Wn, &Un, &bn, &Wo, &bo};
  }
  std::vector<Arr> snapshot() const {
    return {Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn, Wo, bo};
  }
  void restore(const std::vector<Arr>& s) {
    std::size_t k = 0;
    for (Arr* p : params()) *p = s[k++];
  }
};

inline PolicyNetwork make_policy(int lib_size, int hidden, Rng& rng) {
  PolicyNetwork p;
  p.lib_size = lib_size;
  p.hidden = hidden;
  p.in_dim = 2 * (lib_size + 1);
  auto init = [&](int r, int c) {
    const double lim = std::sqrt(6.0 / double(r + c));
    Arr a(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a(i, j) = rng.uniform(-lim, lim);
    return a;
  };
  p.Wz = init(hidden, p.in_dim); p.Uz = init(hidden, hidden);
  p.Wr = init(hidden, p.in_dim); p.Ur = init(hidden, hidden);
  p.Wn = init(hidden, p.in_dim); p.Un = init(hidden, hidden);
  p.bz = Arr::Zero(hidden, 1); p.br = Arr::Zero(hidden, 1);
  p.bn = Arr::Zero(hidden, 1);
  p.Wo = init(lib_size, hidden);
  p.bo = Arr::Zero(lib_size, 1);
  return p;
}

// Same curve the tape's Sigmoid op uses, so numeric rollouts and tape
// replays agree to the last bit.
inline Arr sigmoid_arr(const Arr& x) { return 0.5 * (1.0 + (0.5 * x).tanh()); }

// One-hot slot encoding; index lib_size is the "none" slot.
inline void encode_slot(int parent_ord, int sibling_ord, int lib_size,
                        Eigen::Ref<Eigen::ArrayXd> col) {
  col.setZero();
  col(parent_ord < 0 ? lib_size : parent_ord) = 1.0;
  const int base = lib_size + 1;
  col(base + (sibling_ord < 0 ? lib_size : sibling_ord)) = 1.0;
}

// Batched numeric cell step: X is in_dim×B, H is hidden×B.
inline Arr gru_step(const PolicyNetwork& p, const Arr& X, const Arr& H) {
  const Arr z = sigmoid_arr(((p.Wz.matrix() * X.matrix() +
                              p.Uz.matrix() * H.matrix()).array().colwise() +
                             p.bz.col(0)));
  const Arr r = sigmoid_arr(((p.Wr.matrix() * X.matrix() +
                              p.Ur.matrix() * H.matrix()).array().colwise() +
                             p.br.col(0)));
  const Arr n = (((p.Wn.matrix() * X.matrix()).array() +
                  (p.Un.matrix() * (r * H).matrix()).array()).colwise() +
                 p.bn.col(0)).tanh();
  return (1.0 - z) * n + z * H;
}

inline Arr policy_logits(const PolicyNetwork& p, const Arr& H) {
  return (p.Wo.matrix() * H.matrix()).array().colwise() + p.bo.col(0);
}

// Masked softmax over one logit column; illegal entries get probability 0.
inline Eigen::ArrayXd masked_softmax(const Eigen::ArrayXd& logits,
                                     const std::vector<char>& mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < logits.size(); ++i)
    if (mask[std::size_t(i)]) mx = std::max(mx, logits(i));
  require(std::isfinite(mx), Errc::Internal, "mask admits no token");
  Eigen::ArrayXd p = Eigen::ArrayXd::Zero(logits.size());
  double z = 0;
  for (int i = 0; i < logits.size(); ++i)
    if (mask[std::size_t(i)]) z += (p(i) = std::exp(logits(i) - mx));
  return p / z;
}

inline double masked_entropy(const Eigen::ArrayXd& probs) {
  double h = 0;
  for (int i = 0; i < probs.size(); ++i)
    if (probs(i) > 0) h -= probs(i) * std::log(probs(i));
  return h;
}

// ───────────────────────── sampling ─────────────────────────

struct SampledBatch {
  std::vector<Traversal> traversals;
  Vec logp;     // sum of stepwise masked log-probabilities used when drawing
  Vec rewards;  // filled after evaluation
};

// N masked rollouts with per-traversal child RNG streams. Batches the cell
// across all unfinished rollouts per step; the draws themselves depend only
// on each rollout's own stream, not on batch order.
inline SampledBatch sample_batch(const PolicyNetwork& p,
                                 const TokenLibrary& lib, int N,
                                 GenLimits limits, Rng& rng) {
  require(N >= 1, Errc::ConfigError, "batch size");
  require(p.lib_size == lib.size(), Errc::DimensionMismatch,
          "policy/library size");
  SampledBatch out;
  out.traversals.resize(std::size_t(N));
  out.logp = Vec::Zero(N);
  out.rewards = Vec::Zero(N);

  std::vector<Rng> streams;
  streams.reserve(std::size_t(N));
  for (int i = 0; i < N; ++i) streams.push_back(rng.child(std::uint64_t(i)));

  std::vector<PartialBuilder> builders(std::size_t(N),
                                       PartialBuilder(lib, limits));
  Arr H = Arr::Zero(p.hidden, N);
  std::vector<int> active(static_cast<std::size_t>(N));
  std::iota(active.begin(), active.end(), 0);

  Arr X, Ha;
  while (!active.empty()) {
    const int A = int(active.size());
    X.resize(p.in_dim, A);
    Ha.resize(p.hidden, A);
    for (int k = 0; k < A; ++k) {
      const PartialBuilder& b = builders[std::size_t(active[std::size_t(k)])];
      encode_slot(b.parent_ord(), b.sibling_ord(), p.lib_size, X.col(k));
      Ha.col(k) = H.col(active[std::size_t(k)]);
    }
    const Arr Hn = gru_step(p, X, Ha);
    const Arr logits = policy_logits(p, Hn);

    std::vector<int> still;
    for (int k = 0; k < A; ++k) {
      const int i = active[std::size_t(k)];
      PartialBuilder& b = builders[std::size_t(i)];
      const std::vector<char> mask = b.legal_mask();
      // draw from the masked categorical with this rollout's stream,
      // using the same max-shift arithmetic as the tape's logprob op
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < p.lib_size; ++j)
        if (mask[std::size_t(j)]) mx = std::max(mx, logits(j, k));
      double z = 0;
      for (int j = 0; j < p.lib_size; ++j)
        if (mask[std::size_t(j)]) z += std::exp(logits(j, k) - mx);
      const double u = streams[std::size_t(i)].uniform() * z;
      double cum = 0;
      int chosen = -1;
      for (int j = 0; j < p.lib_size; ++j) {
        if (!mask[std::size_t(j)]) continue;
        cum += std::exp(logits(j, k) - mx);
        chosen = j;
        if (u < cum) break;
      }
      out.logp(i) += logits(chosen, k) - mx - std::log(z);
      b.push(chosen);
      H.col(i) = Hn.col(k);
      if (!b.complete()) still.push_back(i);
    }
    active = std::move(still);
  }
  for (int i = 0; i < N; ++i)
    out.traversals[std::size_t(i)] = builders[std::size_t(i)].traversal();
  return out;
}

// ───────────────────────── training ─────────────────────────

// Nearest-rank (1−ε) quantile; samples with reward ≥ the returned value are
// the retained top-ε fraction.
inline double risk_quantile(const Vec& rewards, double eps) {
  require(rewards.size() > 0, Errc::ConfigError, "empty rewards");
  require(eps > 0.0 && eps <= 1.0, Errc::ConfigError, "eps in (0,1]");
  const Eigen::Index n = rewards.size();
  std::vector<double> r(rewards.data(), rewards.data() + n);
  Eigen::Index k =
      Eigen::Index(std::floor((1.0 - eps) * double(n) + 1e-9)) + 1;
  k = std::min(n, std::max<Eigen::Index>(1, k));
  std::nth_element(r.begin(), r.begin() + (k - 1), r.end());
  return r[std::size_t(k - 1)];
}

// Replays one traversal through the cell on a tape and returns the scalar
// log-likelihood node; masks are rebuilt from the prefix, so they match the
// ones used during sampling.
inline NodeId policy_logprob_graph(Tape& t, const PolicyNetwork& p,
                                   const Traversal& tau,
                                   const TokenLibrary& lib, GenLimits limits) {
  NodeId Wz = t.external(&p.Wz), Uz = t.external(&p.Uz), bz = t.external(&p.bz);
  NodeId Wr = t.external(&p.Wr), Ur = t.external(&p.Ur), br = t.external(&p.br);
  NodeId Wn = t.external(&p.Wn), Un = t.external(&p.Un), bn = t.external(&p.bn);
  NodeId Wo = t.external(&p.Wo), bo = t.external(&p.bo);

  PartialBuilder b(lib, limits);
  NodeId h = t.constant(Arr::Zero(p.hidden, 1));
  NodeId ones = t.constant(Arr::Ones(p.hidden, 1));
  NodeId acc = kNoNode;
  for (int ord : tau.ords) {
    require(!b.complete(), Errc::TrailingTokens, "tokens after completion");
    Arr x(p.in_dim, 1);
    encode_slot(b.parent_ord(), b.sibling_ord(), p.lib_size, x.col(0));
    NodeId xn = t.constant(std::move(x));
    NodeId z = t.sigmoid_(t.add(t.add(t.matmul(Wz, xn), t.matmul(Uz, h)), bz));
    NodeId r = t.sigmoid_(t.add(t.add(t.matmul(Wr, xn), t.matmul(Ur, h)), br));
    NodeId n = t.tanh_(
        t.add(t.add(t.matmul(Wn, xn), t.matmul(Un, t.mul(r, h))), bn));
    h = t.add(t.mul(t.sub(ones, z), n), t.mul(z, h));
    NodeId logits = t.add(t.matmul(Wo, h), bo);

    const std::vector<char> mask = b.legal_mask();
    require(mask[std::size_t(ord)] != 0, Errc::InvalidTraversal,
            "replayed token is masked out");
    Arr m(p.lib_size, 1);
    for (int j = 0; j < p.lib_size; ++j) m(j, 0) = mask[std::size_t(j)] ? 1 : 0;
    NodeId lp = t.masked_logprob(logits, std::move(m), {ord});
    acc = acc == kNoNode ? lp : t.add(acc, lp);
    b.push(ord);
  }
  require(b.complete(), Errc::IncompleteExpression, "traversal incomplete");
  return acc;
}

// Risk-seeking ascent: only samples with R ≥ q̃ contribute, each weighted by
// (R − q̃)·λ_pg/(ε·N). Owns the optimizer so moments persist across
// iterations. A batch with zero total advantage leaves the parameters and
// the optimizer state bitwise untouched.
class PolicyTrainer {
 public:
  PolicyTrainer(PolicyNetwork& p, double lr = 5e-4)
      : policy_(&p), opt_(p.params(), lr) {}

  double last_quantile() const { return last_q_; }

  double step(const SampledBatch& batch, const TokenLibrary& lib,
              GenLimits limits, double eps, double lambda_pg = 1.0) {
    const Eigen::Index n = batch.rewards.size();
    require(n == Eigen::Index(batch.traversals.size()), Errc::DimensionMismatch,
            "rewards/traversals");
    const double q = risk_quantile(batch.rewards, eps);
    last_q_ = q;
    std::vector<int> keep;
    bool any_adv = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (batch.rewards(i) >= q) {
        keep.push_back(int(i));
        any_adv = any_adv || batch.rewards(i) > q;
      }
    }
    if (!any_adv) return q;

    const double scale = lambda_pg / (eps * double(n));
    Tape t;
    std::vector<NodeId> pids;
    for (Arr* pa : policy_->params()) pids.push_back(t.external(pa));
    NodeId loss = kNoNode;
    for (int i : keep) {
      const double adv = batch.rewards(i) - q;
      if (adv == 0.0) continue;
      NodeId lp = policy_logprob_graph(t, *policy_, batch.traversals[std::size_t(i)],
                                       lib, limits);
      NodeId term = t.affine(lp, -scale * adv, 0.0);  // ascent via negated loss
      loss = loss == kNoNode ? term : t.add(loss, term);
    }
    t.backward_numeric(loss);
    std::vector<const Arr*> grads;
    grads.reserve(pids.size());
    for (NodeId id : pids) grads.push_back(&t.grad(id));
    opt_.step(grads);
    return q;
  }

 private:
  PolicyNetwork* policy_;
  Adam opt_;
  double last_q_ = 0;
};

// ───────────────────────── checkpoints ─────────────────────────

inline nlohmann::json policy_to_json(const PolicyNetwork& p) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = "gru_policy";
  j["lib_size"] = p.lib_size;
  j["hidden"] = p.hidden;
  j["in_dim"] = p.in_dim;
  auto dump = [&](const char* name, const Arr& a) {
    nlohmann::json e;
    e["rows"] = a.rows();
    e["cols"] = a.cols();
    std::vector<double> d;
    d.reserve(std::size_t(a.size()));
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (Eigen::Index c = 0; c < a.cols(); ++c) d.push_back(a(r, c));
    e["data"] = d;
    j["arrays"][name] = e;
  };
  const PolicyNetwork& cp = p;
  const std::vector<std::pair<const char*, const Arr*>> named = {
      {"Wz", &cp.Wz}, {"Uz", &cp.Uz}, {"bz", &cp.bz}, {"Wr", &cp.Wr},
      {"Ur", &cp.Ur}, {"br", &cp.br}, {"Wn", &cp.Wn}, {"Un", &cp.Un},
      {"bn", &cp.bn}, {"Wo", &cp.Wo}, {"bo", &cp.bo}};
  for (auto& [name, arr] : named) dump(name, *arr);
  return j;
}

inline PolicyNetwork policy_from_json(const nlohmann::json& j) {
  require(j.value("kind", "") == std::string("gru_policy"), Errc::IoError,
          "not a policy checkpoint");
  require(j.value("format_version", 0) == 1, Errc::IoError,
          "unknown checkpoint version");
  PolicyNetwork p;
  p.lib_size = j.at("lib_size").get<int>();
  p.hidden = j.at("hidden").get<int>();
  p.in_dim = j.at("in_dim").get<int>();
  auto load = [&](const char* name, Arr& a) {
    const nlohmann::json& e = j.at("arrays").at(name);
    const Eigen::Index r = e.at("rows").get<Eigen::Index>();
    const Eigen::Index c = e.at("cols").get<Eigen::Index>();
    const std::vector<double> d = e.at("data").get<std::vector<double>>();
    require(Eigen::Index(d.size()) == r * c, Errc::IoError, "array size");
    a.resize(r, c);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index jc = 0; jc < c; ++jc) a(i, jc) = d[k++];
  };
  load("Wz", p.Wz); load("Uz", p.Uz); load("bz", p.bz);
  load("Wr", p.Wr); load("Ur", p.Ur); load("br", p.br);
  load("Wn", p.Wn); load("Un", p.Un); load("bn", p.bn);
  load("Wo", p.Wo); load("bo", p.bo);
  return p;
}

}  // namespace pded
