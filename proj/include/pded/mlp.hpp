// Feed-forward surrogate u(x,t): dense tanh network with an input
// normalization stage baked into the autodiff graph, so derivatives taken
// with respect to the raw input leaf come out in physical units.
//
// The model owns its parameters as plain arrays; tapes reference them via
// external leaves, which lets one weight store back any number of training
// or evaluation graphs simultaneously.
#pragma once

#include "pded/tape.hpp"

#include <json.hpp>

#include <fstream>

namespace pded {

struct MlpModel {
  std::vector<int> sizes;          // [input, hidden..., output]
  std::string activation = "tanh";
  std::vector<Arr> W;              // per layer, out×in
  std::vector<Arr> b;              // per layer, out×1
  Vec in_scale, in_shift;          // normalized input = scale∘x + shift

  int input_dim() const { return sizes.front(); }
  int output_dim() const { return sizes.back(); }
  std::size_t layer_count() const { return W.size(); }

  std::vector<Arr*> params() {
    std::vector<Arr*> p;
    for (auto& w : W) p.push_back(&w);
    for (auto& v : b) p.push_back(&v);
    return p;
  }
  std::vector<Arr> snapshot() const {
    std::vector<Arr> s;
    s.reserve(W.size() + b.size());
    for (const auto& w : W) s.push_back(w);
    for (const auto& v : b) s.push_back(v);
    return s;
  }
  void restore(const std::vector<Arr>& s) {
    std::size_t k = 0;
    for (auto& w : W) w = s[k++];
    for (auto& v : b) v = s[k++];
  }
};

// Xavier-uniform initialization; identity input map until normalization is
// fitted to a domain.
inline MlpModel make_mlp(std::vector<int> sizes, Rng& rng,
                         std::string activation = "tanh") {
  require(sizes.size() >= 2, Errc::ConfigError, "mlp needs >= 2 layers");
  require(activation == "tanh", Errc::ConfigError,
          "unsupported activation '" + activation + "'");
  MlpModel m;
  m.sizes = std::move(sizes);
  m.activation = std::move(activation);
  for (std::size_t l = 0; l + 1 < m.sizes.size(); ++l) {
    const int in = m.sizes[l], out = m.sizes[l + 1];
    const double lim = std::sqrt(6.0 / double(in + out));
    Arr w(out, in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) w(i, j) = rng.uniform(-lim, lim);
    m.W.push_back(std::move(w));
    m.b.push_back(Arr::Zero(out, 1));
  }
  m.in_scale = Vec::Ones(m.input_dim());
  m.in_shift = Vec::Zero(m.input_dim());
  return m;
}

// Affine map sending [lo_i, hi_i] to [-1, 1] per input axis.
inline void fit_normalization(MlpModel& m, const Vec& lo, const Vec& hi) {
  require(lo.size() == m.input_dim() && hi.size() == m.input_dim(),
          Errc::DimensionMismatch, "normalization bounds");
  for (int i = 0; i < m.input_dim(); ++i) {
    const double span = hi(i) - lo(i);
    m.in_scale(i) = span > 0 ? 2.0 / span : 1.0;
    m.in_shift(i) = span > 0 ? -(hi(i) + lo(i)) / span : 0.0;
  }
}

// ───────────────────────── graph construction ─────────────────────────

// Network forward pass appended to a tape; `input` is a d_in×N node holding
// physical coordinates. When `param_ids` is given it receives the external
// leaf ids aligned with m.params() order (weights first, then biases), which
// is what optimizer steps read gradients from.
inline NodeId mlp_forward(Tape& t, const MlpModel& m, NodeId input,
                          std::vector<NodeId>* param_ids = nullptr) {
  NodeId h = t.row_affine(input, m.in_scale, m.in_shift);
  std::vector<NodeId> wid, bid;
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    wid.push_back(t.external(&m.W[l]));
    bid.push_back(t.external(&m.b[l]));
    NodeId z = t.add_colvec(t.matmul(wid.back(), h), bid.back());
    h = (l + 1 < m.layer_count()) ? t.tanh_(z) : z;
  }
  if (param_ids) {
    param_ids->clear();
    param_ids->insert(param_ids->end(), wid.begin(), wid.end());
    param_ids->insert(param_ids->end(), bid.begin(), bid.end());
  }
  return h;
}

// A network instantiated at a fixed point set, with lazily built
// input-derivative nodes shared by every consumer on the same tape.
//
// Multi-indices run over the input axes; entry i is the derivative order in
// input axis i (spatial axes and time alike).
class NetGraph {
 public:
  NetGraph(Tape& t, const MlpModel& m, Arr points)
      : tape_(&t), model_(&m) {
    require(points.rows() == m.input_dim(), Errc::DimensionMismatch,
            "points rows != input dim");
    input_ = t.variable(std::move(points));
    output_ = mlp_forward(t, m, input_);
  }

  Tape& tape() const { return *tape_; }
  NodeId input() const { return input_; }
  NodeId output() const { return output_; }
  int n_points() const { return int(tape_->value(input_).cols()); }

  // Physical coordinate row for input axis i.
  NodeId coord(int axis) {
    auto it = coords_.find(axis);
    if (it != coords_.end()) return it->second;
    NodeId r = tape_->row(input_, axis);
    coords_.emplace(axis, r);
    return r;
  }

  // D^alpha of state-variable row `out_row`, 1×N node in physical units.
  NodeId state_derivative(int out_row, const std::vector<int>& alpha) {
    const Key key{out_row, alpha};
    auto it = derivs_.find(key);
    if (it != derivs_.end()) return it->second;
    NodeId node;
    int axis = -1;
    for (std::size_t i = 0; i < alpha.size(); ++i)
      if (alpha[i] > 0) { axis = int(i); break; }
    if (axis < 0) {
      node = tape_->row(output_, out_row);
    } else {
      auto lower = alpha;
      lower[std::size_t(axis)] -= 1;
      NodeId prev = state_derivative(out_row, lower);
      NodeId s = tape_->sum(prev);
      NodeId adj = tape_->backward_graph(s, {input_})[0];
      node = tape_->row(adj, axis);
    }
    derivs_.emplace(key, node);
    return node;
  }

 private:
  struct Key {
    int row;
    std::vector<int> alpha;
    bool operator<(const Key& o) const {
      if (row != o.row) return row < o.row;
      return alpha < o.alpha;
    }
  };
  Tape* tape_;
  const MlpModel* model_;
  NodeId input_, output_;
  std::map<Key, NodeId> derivs_;
  std::map<int, NodeId> coords_;
};

// ───────────────────────── inference entry points ─────────────────────────

// Plain forward evaluation, no tape.
inline Arr mlp_predict(const MlpModel& m, const Arr& points) {
  require(points.rows() == m.input_dim(), Errc::DimensionMismatch,
          "points rows != input dim");
  Arr h = (points.colwise() * m.in_scale.array()).colwise() +
          m.in_shift.array();
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    Arr z = (m.W[l].matrix() * h.matrix()).array().colwise() + m.b[l].col(0);
    h = (l + 1 < m.layer_count()) ? z.tanh() : z;
  }
  return h;
}

// Exact network derivative d^order(u_row)/d(axis)^order at each point.
inline Arr mlp_grad(const MlpModel& m, const Arr& points, int axis,
                    int order = 1) {
  require(axis >= 0 && axis < m.input_dim(), Errc::UnsupportedVariable,
          "derivative axis out of range");
  require(order == 1 || order == 2, Errc::ConfigError, "order must be 1 or 2");
  Tape t;
  NetGraph g(t, m, points);
  Arr out(m.output_dim(), points.cols());
  std::vector<int> alpha(std::size_t(m.input_dim()), 0);
  alpha[std::size_t(axis)] = order;
  for (int r = 0; r < m.output_dim(); ++r)
    out.row(r) = t.value(g.state_derivative(r, alpha)).row(0);
  return out;
}

// ───────────────────────── optimizer ─────────────────────────

// Adam with bias correction; state arrays mirror the parameter list.
class Adam {
 public:
  Adam(std::vector<Arr*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (Arr* p : params_) {
      m_.push_back(Arr::Zero(p->rows(), p->cols()));
      v_.push_back(Arr::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<const Arr*>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Arr& g = *grads[i];
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.square();
      *params_[i] -= lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps_);
    }
  }

  int steps() const { return t_; }

 private:
  std::vector<Arr*> params_;
  std::vector<Arr> m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

// ───────────────────────── checkpoints ─────────────────────────

inline nlohmann::json mlp_to_json(const MlpModel& m) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = "mlp";
  j["layer_sizes"] = m.sizes;
  j["activation"] = m.activation;
  j["in_scale"] = std::vector<double>(m.in_scale.data(),
                                      m.in_scale.data() + m.in_scale.size());
  j["in_shift"] = std::vector<double>(m.in_shift.data(),
                                      m.in_shift.data() + m.in_shift.size());
  auto dump = [](const Arr& a) {
    std::vector<double> v;
    v.reserve(std::size_t(a.size()));
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index k = 0; k < a.cols(); ++k) v.push_back(a(i, k));
    return v;
  };
  for (const auto& w : m.W) j["weights"].push_back(dump(w));
  for (const auto& v : m.b) j["biases"].push_back(dump(v));
  return j;
}

inline MlpModel mlp_from_json(const nlohmann::json& j) {
  require(j.value("kind", "") == "mlp", Errc::IoError, "not an mlp checkpoint");
  require(j.value("format_version", 0) == 1, Errc::IoError,
          "unsupported checkpoint version");
  MlpModel m;
  m.sizes = j.at("layer_sizes").get<std::vector<int>>();
  m.activation = j.at("activation").get<std::string>();
  const auto sc = j.at("in_scale").get<std::vector<double>>();
  const auto sh = j.at("in_shift").get<std::vector<double>>();
  m.in_scale = Eigen::Map<const Vec>(sc.data(), Eigen::Index(sc.size()));
  m.in_shift = Eigen::Map<const Vec>(sh.data(), Eigen::Index(sh.size()));
  auto load = [](const std::vector<double>& v, int rows, int cols) {
    require(int(v.size()) == rows * cols, Errc::IoError, "weight size mismatch");
    Arr a(rows, cols);
    std::size_t k = 0;
    for (int i = 0; i < rows; ++i)
      for (int c = 0; c < cols; ++c) a(i, c) = v[k++];
    return a;
  };
  const auto& ws = j.at("weights");
  const auto& bs = j.at("biases");
  require(ws.size() + 1 == m.sizes.size() && bs.size() == ws.size(),
          Errc::IoError, "layer count mismatch");
  for (std::size_t l = 0; l + 1 < m.sizes.size(); ++l) {
    m.W.push_back(load(ws[l].get<std::vector<double>>(), m.sizes[l + 1],
                       m.sizes[l]));
    m.b.push_back(load(bs[l].get<std::vector<double>>(), m.sizes[l + 1], 1));
  }
  return m;
}

inline void save_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  require(bool(out), Errc::IoError, "cannot write " + path);
  out << j.dump(2) << "\n";
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), Errc::IoError, "cannot read " + path);
  return nlohmann::json::parse(in);
}

}  // namespace pded
