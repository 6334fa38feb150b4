// Surrogate training: supervised pretraining on noisy observations plus
// optional embedded-equation physics losses, with early stopping on a held
// out validation split. The physics residual is built by running the same
// term recursion used for candidate evaluation, but emitting tape nodes, so
// the residual is differentiable in the network parameters and its gradient
// flows through the nested input-derivative graphs.
#pragma once

#include "pded/term_eval.hpp"

namespace pded {

// ───────────────────────── tape-emitting term backend ─────────────────────

// Mirrors ValueBackend but produces graph nodes on a shared tape; division
// denominators are checked at build time against current network values.
class TapeBackend {
 public:
  TapeBackend(Tape& t, NetGraph& g, const TokenLibrary& lib, const AxisMap& axes)
      : tape_(&t), graph_(&g), lib_(&lib), axes_(&axes),
        n_(g.n_points()) {}

  using V = NodeId;

  const TokenLibrary& lib() const { return *lib_; }
  const AxisMap& axes() const { return *axes_; }

  V state(int row, const Alpha& a) { return graph_->state_derivative(row, a); }
  V coord(int axis) { return graph_->coord(axis); }
  V ones() {
    if (ones_ == kNoNode) ones_ = tape_->constant(Arr::Ones(1, n_));
    return ones_;
  }
  V zeros() {
    if (zeros_ == kNoNode) zeros_ = tape_->constant(Arr::Zero(1, n_));
    return zeros_;
  }
  V add(V a, V b) { return tape_->add(a, b); }
  V sub(V a, V b) { return tape_->sub(a, b); }
  V mul(V a, V b) { return tape_->mul(a, b); }
  V scale(V a, double c) { return tape_->affine(a, c, 0.0); }
  V div(V a, V b) {
    require((tape_->value(b).abs() >= 1e-8).all(), Errc::NonFiniteResidual,
            "residual division by near-zero");
    return tape_->div(a, b);
  }

  const V* memo_find(const TreeNode* n, const Alpha& a) const {
    auto it = memo_.find(key(n, a));
    return it == memo_.end() ? nullptr : &it->second;
  }
  void memo_store(const TreeNode* n, const Alpha& a, V v) {
    memo_.emplace(key(n, a), v);
  }

 private:
  static std::string key(const TreeNode* n, const Alpha& a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%p:", static_cast<const void*>(n));
    return buf + detail::alpha_key(a);
  }
  Tape* tape_;
  NetGraph* graph_;
  const TokenLibrary* lib_;
  const AxisMap* axes_;
  int n_;
  V ones_ = kNoNode, zeros_ = kNoNode;
  std::unordered_map<std::string, V> memo_;
};

// u_t − Θξ as a 1×N tape node over an existing network graph.
inline NodeId residual_node(Tape& t, NetGraph& g, const TokenLibrary& lib,
                            const AxisMap& axes, const PdeCandidate& pde) {
  require(pde.n_terms == int(pde.terms.size()) &&
              pde.xi.size() == Eigen::Index(pde.n_terms),
          Errc::DimensionMismatch, "candidate terms/coefficients misaligned");
  Alpha et(std::size_t(axes.n_axes), 0);
  et[std::size_t(axes.time_axis)] = 1;
  NodeId ut = g.state_derivative(0, et);
  TapeBackend tb(t, g, lib, axes);
  NodeId acc = kNoNode;
  for (int j = 0; j < pde.n_terms; ++j) {
    NodeId term = eval_term_rec(tb, pde.terms[std::size_t(j)].tree,
                                Alpha(std::size_t(axes.n_axes), 0));
    NodeId scaled = t.affine(term, pde.xi(j), 0.0);
    acc = (acc == kNoNode) ? scaled : t.add(acc, scaled);
  }
  return acc == kNoNode ? ut : t.sub(ut, acc);
}

// Residual values at arbitrary points for a frozen model.
inline Vec physics_residual(const MlpModel& m, const PdeCandidate& pde,
                            const Arr& points, const TokenLibrary& lib) {
  Tape t;
  NetGraph g(t, m, points);
  AxisMap axes(lib);
  NodeId r = residual_node(t, g, lib, axes, pde);
  Eigen::ArrayXd v = t.value(r).row(0).transpose();
  require(v.isFinite().all(), Errc::NonFiniteResidual,
          "non-finite residual value");
  return v.matrix();
}

// ───────────────────────── local sampling ─────────────────────────

// `per_obs` points uniform in the axis-aligned box centered on each
// observation with side length side(i) along axis i (Eq. 14 smoothing trick).
inline Arr local_sampling_points(const Arr& obs_points, const Vec& side,
                                 int per_obs, Rng& rng) {
  require(side.size() == obs_points.rows(), Errc::DimensionMismatch,
          "side lengths per axis");
  Arr out(obs_points.rows(), obs_points.cols() * per_obs);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < obs_points.cols(); ++i)
    for (int r = 0; r < per_obs; ++r, ++k)
      for (Eigen::Index a = 0; a < obs_points.rows(); ++a)
        out(a, k) = obs_points(a, i) + side(a) * rng.uniform(-0.5, 0.5);
  return out;
}

// ───────────────────────── training ─────────────────────────

struct LossWeights {
  double lambda1 = 0.1;  // physics loss
  double lambda2 = 0.0;  // local-sampling loss
};

struct TrainConfig {
  int max_epochs = 20000;
  int patience = 500;        // validation checks without improvement
  double lr = 1e-3;
  int full_batch_cap = 20000;
  int batch_size = 4096;
  double val_fraction = 0.2;
  int log_every = 50;
  std::uint64_t seed = 0;
};

struct TrainReport {
  int epochs_run = 0;
  double final_train_loss = 0, final_val_loss = 0;
  double best_val = 0;
  int best_epoch = -1;
  std::vector<int> logged_epochs;
  std::vector<double> log_ld, log_lp, log_ll, log_val;
  std::vector<int> train_idx, val_idx;
};

// Full training loss as a static graph: data term on a (mini)batch leaf,
// plus optional residual mean-squares at fixed collocation and local points.
// Built once; each step is set_batch + forward + backward.
class TrainGraph {
 public:
  TrainGraph(MlpModel& m, int batch_width, const PdeCandidate* pde,
             const TokenLibrary* lib, const Arr* colloc, const Arr* local,
             LossWeights w)
      : model_(&m) {
    xtr_ = tape_.variable(Arr::Zero(m.input_dim(), batch_width));
    ytr_ = tape_.variable(Arr::Zero(m.output_dim(), batch_width));
    NodeId out = mlp_forward(tape_, m, xtr_, &param_ids_);
    ld_ = tape_.affine(tape_.sum(tape_.square(tape_.sub(out, ytr_))),
                       1.0 / batch_width, 0.0);
    NodeId total = ld_;
    if (pde && colloc && w.lambda1 > 0) {
      require(lib, Errc::Internal, "embedded pde needs a token library");
      axes_.emplace(*lib);
      cg_.emplace(tape_, m, *colloc);
      NodeId r = residual_node(tape_, *cg_, *lib, *axes_, *pde);
      lp_ = tape_.affine(tape_.sum(tape_.square(r)), 1.0 / colloc->cols(), 0.0);
      total = tape_.add(total, tape_.affine(lp_, w.lambda1, 0.0));
    }
    if (pde && local && w.lambda2 > 0) {
      require(lib, Errc::Internal, "embedded pde needs a token library");
      if (!axes_) axes_.emplace(*lib);
      lg_.emplace(tape_, m, *local);
      NodeId r = residual_node(tape_, *lg_, *lib, *axes_, *pde);
      ll_ = tape_.affine(tape_.sum(tape_.square(r)), 1.0 / local->cols(), 0.0);
      total = tape_.add(total, tape_.affine(ll_, w.lambda2, 0.0));
    }
    total_ = total;
  }
  TrainGraph(const TrainGraph&) = delete;
  TrainGraph& operator=(const TrainGraph&) = delete;

  void set_batch(const Arr& x, const Arr& y) {
    tape_.set_value(xtr_, x);
    tape_.set_value(ytr_, y);
  }
  double forward() {
    tape_.forward();
    return tape_.value(total_)(0, 0);
  }
  void backward() { tape_.backward_numeric(total_); }
  std::vector<const Arr*> param_grads() {
    std::vector<const Arr*> g;
    g.reserve(param_ids_.size());
    for (NodeId id : param_ids_) g.push_back(&tape_.grad(id));
    return g;
  }
  double ld() const { return tape_.value(ld_)(0, 0); }
  double lp() const { return lp_ == kNoNode ? 0.0 : tape_.value(lp_)(0, 0); }
  double ll() const { return ll_ == kNoNode ? 0.0 : tape_.value(ll_)(0, 0); }
  double total() const { return tape_.value(total_)(0, 0); }
  MlpModel& model() { return *model_; }

 private:
  MlpModel* model_;
  Tape tape_;
  std::vector<NodeId> param_ids_;
  NodeId xtr_, ytr_;
  NodeId ld_ = kNoNode, lp_ = kNoNode, ll_ = kNoNode, total_ = kNoNode;
  std::optional<AxisMap> axes_;
  std::optional<NetGraph> cg_, lg_;
};

// Minimizes L_d + λ1 L_p + λ2 L_l. Observations are split 8:2 into
// train/validation by a seeded shuffle; early stopping watches validation
// L_d; the model is left holding the best-validation weights. A non-finite
// loss aborts with the last finite weights restored and DivergedLoss raised.
inline TrainReport train(MlpModel& m, const Arr& obs_points,
                         const Arr& obs_values, const PdeCandidate* pde,
                         const TokenLibrary* lib, const Arr* colloc,
                         const Arr* local, LossWeights w, TrainConfig cfg) {
  require(obs_points.cols() == obs_values.cols(), Errc::DimensionMismatch,
          "observations points/values");
  require(obs_points.rows() == m.input_dim() &&
              obs_values.rows() == m.output_dim(),
          Errc::DimensionMismatch, "observation dims vs model");
  const int n_obs = int(obs_points.cols());
  require(n_obs >= 5, Errc::ConfigError, "too few observations to split");

  Rng rng(cfg.seed);
  std::vector<int> idx(static_cast<std::size_t>(n_obs));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  const int n_val = std::max(1, int(std::floor(cfg.val_fraction * n_obs)));
  const int n_tr = n_obs - n_val;

  TrainReport rep;
  rep.val_idx.assign(idx.begin(), idx.begin() + n_val);
  rep.train_idx.assign(idx.begin() + n_val, idx.end());

  auto gather = [&](const std::vector<int>& which, const Arr& src) {
    Arr out(src.rows(), Eigen::Index(which.size()));
    for (std::size_t i = 0; i < which.size(); ++i)
      out.col(Eigen::Index(i)) = src.col(which[std::size_t(i)]);
    return out;
  };
  Arr xtr = gather(rep.train_idx, obs_points);
  Arr ytr = gather(rep.train_idx, obs_values);
  Arr xva = gather(rep.val_idx, obs_points);
  Arr yva = gather(rep.val_idx, obs_values);

  const bool full_batch = n_tr <= cfg.full_batch_cap;
  const int width = full_batch ? n_tr : cfg.batch_size;
  TrainGraph graph(m, width, pde, lib, colloc, local, w);

  // validation data loss on its own tape, reading the live weights
  Tape vt;
  NodeId vx = vt.variable(xva);
  NodeId vout = mlp_forward(vt, m, vx);
  NodeId vloss = vt.affine(
      vt.sum(vt.square(vt.sub(vout, vt.constant(yva)))), 1.0 / n_val, 0.0);
  auto val_loss = [&]() {
    vt.forward();
    return vt.value(vloss)(0, 0);
  };

  Adam opt(m.params(), cfg.lr);
  std::vector<Arr> best = m.snapshot(), last_finite = m.snapshot();
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<int> order(static_cast<std::size_t>(n_tr));
  std::iota(order.begin(), order.end(), 0);
  Arr bx(m.input_dim(), width), by(m.output_dim(), width);

  if (full_batch) graph.set_batch(xtr, ytr);

  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    double epoch_loss = 0;
    int steps = 0;
    if (full_batch) {
      epoch_loss = graph.forward();
      if (!std::isfinite(epoch_loss)) {
        m.restore(last_finite);
        fail(Errc::DivergedLoss, "training loss non-finite");
      }
      graph.backward();
      opt.step(graph.param_grads());
      steps = 1;
    } else {
      rng.shuffle(order);
      const int n_steps = (n_tr + width - 1) / width;
      for (int s = 0; s < n_steps; ++s) {
        for (int j = 0; j < width; ++j) {
          const int src = order[std::size_t((s * width + j) % n_tr)];
          bx.col(j) = xtr.col(src);
          by.col(j) = ytr.col(src);
        }
        graph.set_batch(bx, by);
        const double l = graph.forward();
        if (!std::isfinite(l)) {
          m.restore(last_finite);
          fail(Errc::DivergedLoss, "training loss non-finite");
        }
        graph.backward();
        opt.step(graph.param_grads());
        epoch_loss += l;
        ++steps;
      }
      epoch_loss /= steps;
    }
    last_finite = m.snapshot();

    const double v = val_loss();
    if (!std::isfinite(v)) {
      m.restore(last_finite);
      fail(Errc::DivergedLoss, "validation loss non-finite");
    }
    if (v < best_val) {
      best_val = v;
      best = m.snapshot();
      rep.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }

    if (epoch % cfg.log_every == 0 || epoch + 1 == cfg.max_epochs) {
      rep.logged_epochs.push_back(epoch);
      rep.log_ld.push_back(graph.ld());
      rep.log_lp.push_back(graph.lp());
      rep.log_ll.push_back(graph.ll());
      rep.log_val.push_back(v);
    }
    rep.final_train_loss = epoch_loss;
    rep.final_val_loss = v;

    if (since_best >= cfg.patience) {
      ++epoch;
      break;
    }
  }
  rep.epochs_run = epoch;
  rep.best_val = best_val;
  m.restore(best);
  return rep;
}

}  // namespace pded
