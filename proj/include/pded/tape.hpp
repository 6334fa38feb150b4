// Reverse-mode automatic differentiation over dense double matrices.
//
// Nodes live on an append-only tape in topological order; building a node
// evaluates it eagerly. Two backward flavours:
//   backward_graph():   appends adjoint *nodes*, so derivatives are
//                       themselves differentiable (nested input derivatives
//                       such as d2u/dx2 stay on the tape),
//   backward_numeric(): accumulates values into per-node gradient buffers
//                       for optimizer steps, allocation-free after warmup.
// forward() re-evaluates every node in place, so a tape built once acts as a
// static training step: rebuild-free epochs over changing leaf contents.
//
// Shapes are fixed at build time. masked_logprob supports numeric backward
// only; asking for its graph adjoint throws.
#pragma once

#include "pded/common.hpp"

#include <cstring>
#include <iterator>
#include <map>
#include <memory>

namespace pded {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xffffffffu;

enum class Op : std::uint8_t {
  ConstLeaf,   // owned constant
  ExtLeaf,     // reads *ext each forward (model parameters)
  VarLeaf,     // owned, settable between forwards (data buffers)
  Matmul,      // op(A)*op(B) with per-input transpose flags
  Add, Sub, Mul, Div,
  Tanh, Sigmoid, Square,
  Affine,      // c0*x + c1 elementwise
  RowAffine,   // per-row scale/shift: diag(rs)*x + rh (broadcast over cols)
  AddColVec,   // (m×n) + (m×1) broadcast over columns
  BroadcastCol,// (m×1) -> (m×n)
  BroadcastFull,// (1×1) -> (m×n)
  RowSum,      // (m×n) -> (m×1)
  Row,         // extract row irow as (1×n)
  ScatterRow,  // (1×n) -> (m×n), zeros except row irow
  Sum, Mean,   // (m×n) -> (1×1)
  MaskedLogProb, // per-column log softmax of chosen entry over legal set
};

struct MaskedAux {
  Arr mask;                  // 1 = legal, 0 = illegal; same shape as logits
  std::vector<int> chosen;   // per column; must point at a legal entry
  Arr softmax;               // forward cache for numeric backward
};

struct Node {
  Op op;
  NodeId a = kNoNode, b = kNoNode;
  Arr value;
  Arr grad;                  // numeric-backward buffer
  std::uint32_t stamp = 0;   // sweep marker: grad valid iff stamp == tape's
  double c0 = 0.0, c1 = 0.0;
  int irow = 0, rows = 0, cols = 0;
  bool tA = false, tB = false;
  const Arr* ext = nullptr;
  Vec rs, rh;
  std::shared_ptr<MaskedAux> ml;
};

class Tape {
 public:
  // ── leaves ──
  NodeId constant(Arr v) {
    Node n; n.op = Op::ConstLeaf; n.value = std::move(v);
    return push(std::move(n));
  }
  NodeId scalar(double v) { return constant(Arr::Constant(1, 1, v)); }
  // One leaf per distinct pointer: repeated registration returns the same
  // node, so numeric-backward gradients accumulate the total derivative even
  // when several subgraphs (data loss, residual losses) read the same array.
  NodeId external(const Arr* p) {
    auto it = ext_index_.find(p);
    if (it != ext_index_.end()) return it->second;
    Node n; n.op = Op::ExtLeaf; n.ext = p; n.value = *p;
    NodeId id = push(std::move(n));
    ext_index_.emplace(p, id);
    return id;
  }
  NodeId variable(Arr v) {
    Node n; n.op = Op::VarLeaf; n.value = std::move(v);
    return push(std::move(n));
  }
  void set_value(NodeId id, const Arr& v) {
    Node& n = node(id);
    require(n.op == Op::VarLeaf, Errc::Internal, "set_value on non-VarLeaf");
    require(v.rows() == n.value.rows() && v.cols() == n.value.cols(),
            Errc::Internal, "set_value shape change");
    n.value = v;
  }

  // ── ops ──
  NodeId matmul(NodeId a, NodeId b, bool tA = false, bool tB = false) {
    Node n; n.op = Op::Matmul; n.a = a; n.b = b; n.tA = tA; n.tB = tB;
    return push(std::move(n));
  }
  NodeId add(NodeId a, NodeId b) { return bin(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return bin(Op::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return bin(Op::Mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return bin(Op::Div, a, b); }
  NodeId tanh_(NodeId a) { return un(Op::Tanh, a); }
  NodeId sigmoid_(NodeId a) { return un(Op::Sigmoid, a); }
  NodeId square(NodeId a) { return un(Op::Square, a); }
  NodeId affine(NodeId a, double k, double c) {
    Node n; n.op = Op::Affine; n.a = a; n.c0 = k; n.c1 = c;
    return push(std::move(n));
  }
  NodeId neg(NodeId a) { return affine(a, -1.0, 0.0); }
  NodeId row_affine(NodeId a, Vec scale, Vec shift) {
    Node n; n.op = Op::RowAffine; n.a = a;
    n.rs = std::move(scale); n.rh = std::move(shift);
    return push(std::move(n));
  }
  NodeId add_colvec(NodeId a, NodeId b) { return bin(Op::AddColVec, a, b); }
  NodeId broadcast_col(NodeId a, int cols) {
    Node n; n.op = Op::BroadcastCol; n.a = a; n.cols = cols;
    return push(std::move(n));
  }
  NodeId broadcast_full(NodeId a, int rows, int cols) {
    Node n; n.op = Op::BroadcastFull; n.a = a; n.rows = rows; n.cols = cols;
    return push(std::move(n));
  }
  NodeId rowsum(NodeId a) { return un(Op::RowSum, a); }
  NodeId row(NodeId a, int i) {
    Node n; n.op = Op::Row; n.a = a; n.irow = i;
    return push(std::move(n));
  }
  NodeId scatter_row(NodeId a, int i, int rows) {
    Node n; n.op = Op::ScatterRow; n.a = a; n.irow = i; n.rows = rows;
    return push(std::move(n));
  }
  NodeId sum(NodeId a) { return un(Op::Sum, a); }
  NodeId mean(NodeId a) { return un(Op::Mean, a); }
  NodeId masked_logprob(NodeId logits, Arr mask, std::vector<int> chosen) {
    Node n; n.op = Op::MaskedLogProb; n.a = logits;
    n.ml = std::make_shared<MaskedAux>();
    n.ml->mask = std::move(mask); n.ml->chosen = std::move(chosen);
    return push(std::move(n));
  }

  // ── access ──
  const Arr& value(NodeId id) const { return nodes_[id].value; }
  const Arr& grad(NodeId id) const {
    const Node& n = nodes_[id];
    require(n.stamp == sweep_, Errc::Internal, "grad not produced this sweep");
    return n.grad;
  }
  bool has_grad(NodeId id) const { return nodes_[id].stamp == sweep_; }
  std::size_t size() const { return nodes_.size(); }
  void truncate(std::size_t sz) {
    require(sz <= nodes_.size(), Errc::Internal, "truncate grows tape");
    nodes_.resize(sz);
    for (auto it = ext_index_.begin(); it != ext_index_.end();)
      it = it->second >= sz ? ext_index_.erase(it) : std::next(it);
  }

  // Re-evaluate every node in tape order.
  void forward() { for (std::size_t i = 0; i < nodes_.size(); ++i) eval(NodeId(i)); }
  void forward_from(NodeId first) {
    for (std::size_t i = first; i < nodes_.size(); ++i) eval(NodeId(i));
  }

  // Numeric reverse sweep from a scalar root. Gradients are read with
  // grad(); buffers persist so repeated sweeps do not allocate.
  void backward_numeric(NodeId root) {
    const Node& r = nodes_[root];
    require(r.value.size() == 1, Errc::Internal, "backward root must be scalar");
    ++sweep_;
    seed(root, Arr::Constant(1, 1, 1.0));
    for (std::int64_t i = root; i >= 0; --i) step_numeric(NodeId(i));
  }

  // Append adjoint nodes for d(root)/d(wrt[k]); returns one id per wrt
  // (a zero constant if root does not depend on it). The appended subgraph
  // is itself differentiable, enabling nested derivatives.
  std::vector<NodeId> backward_graph(NodeId root, const std::vector<NodeId>& wrt) {
    require(nodes_[root].value.size() == 1, Errc::Internal,
            "backward root must be scalar");
    std::vector<NodeId> adj(root + 1, kNoNode);
    adj[root] = scalar(1.0);
    for (std::int64_t i = root; i >= 0; --i) {
      if (adj[i] == kNoNode) continue;
      step_graph(NodeId(i), adj);
    }
    std::vector<NodeId> out;
    out.reserve(wrt.size());
    for (NodeId w : wrt) {
      if (w <= root && adj[w] != kNoNode) {
        out.push_back(adj[w]);
      } else {
        const Arr& v = nodes_[w].value;
        out.push_back(constant(Arr::Zero(v.rows(), v.cols())));
      }
    }
    return out;
  }

 private:
  std::vector<Node> nodes_;
  std::map<const Arr*, NodeId> ext_index_;
  std::uint32_t sweep_ = 0;

  Node& node(NodeId id) { return nodes_[id]; }

  NodeId bin(Op op, NodeId a, NodeId b) {
    Node n; n.op = op; n.a = a; n.b = b;
    return push(std::move(n));
  }
  NodeId un(Op op, NodeId a) {
    Node n; n.op = op; n.a = a;
    return push(std::move(n));
  }

  NodeId push(Node n) {
    require(nodes_.size() < kNoNode, Errc::Internal, "tape overflow");
    nodes_.push_back(std::move(n));
    const NodeId id = NodeId(nodes_.size() - 1);
    eval(id);
    return id;
  }

  const Arr& V(NodeId id) const { return nodes_[id].value; }

  void eval(NodeId id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::ConstLeaf: break;
      case Op::ExtLeaf: n.value = *n.ext; break;
      case Op::VarLeaf: break;
      case Op::Matmul: {
        const auto& A = V(n.a).matrix();
        const auto& B = V(n.b).matrix();
        Mat r;
        if (!n.tA && !n.tB)      r = A * B;
        else if (n.tA && !n.tB)  r = A.transpose() * B;
        else if (!n.tA && n.tB)  r = A * B.transpose();
        else                     r = A.transpose() * B.transpose();
        n.value = r.array();
        break;
      }
      case Op::Add: n.value = V(n.a) + V(n.b); break;
      case Op::Sub: n.value = V(n.a) - V(n.b); break;
      case Op::Mul: n.value = V(n.a) * V(n.b); break;
      case Op::Div: n.value = V(n.a) / V(n.b); break;
      case Op::Tanh: n.value = V(n.a).tanh(); break;
      case Op::Sigmoid: n.value = 0.5 * (1.0 + (0.5 * V(n.a)).tanh()); break;
      case Op::Square: n.value = V(n.a).square(); break;
      case Op::Affine: n.value = n.c0 * V(n.a) + n.c1; break;
      case Op::RowAffine:
        n.value = (V(n.a).colwise() * n.rs.array()).colwise() + n.rh.array();
        break;
      case Op::AddColVec: n.value = V(n.a).colwise() + V(n.b).col(0); break;
      case Op::BroadcastCol:
        n.value = V(n.a).col(0).replicate(1, n.cols);
        break;
      case Op::BroadcastFull:
        n.value = Arr::Constant(n.rows, n.cols, V(n.a)(0, 0));
        break;
      case Op::RowSum: n.value = V(n.a).rowwise().sum(); break;
      case Op::Row: n.value = V(n.a).row(n.irow); break;
      case Op::ScatterRow: {
        n.value = Arr::Zero(n.rows, V(n.a).cols());
        n.value.row(n.irow) = V(n.a).row(0);
        break;
      }
      case Op::Sum: n.value = Arr::Constant(1, 1, V(n.a).sum()); break;
      case Op::Mean: n.value = Arr::Constant(1, 1, V(n.a).mean()); break;
      case Op::MaskedLogProb: {
        const Arr& lg = V(n.a);
        MaskedAux& ax = *n.ml;
        const Arr masked =
            (ax.mask > 0.5).select(lg, Arr::Constant(lg.rows(), lg.cols(),
                                                     -1e300));
        const Eigen::ArrayXd mx = masked.colwise().maxCoeff().transpose();
        Arr ex = (masked.rowwise() - mx.transpose()).exp();
        ex = (ax.mask > 0.5).select(ex, Arr::Zero(lg.rows(), lg.cols()));
        const Eigen::ArrayXd z = ex.colwise().sum().transpose();
        ax.softmax = ex.rowwise() / z.transpose();
        n.value.resize(1, lg.cols());
        for (Eigen::Index j = 0; j < lg.cols(); ++j) {
          const int c = ax.chosen[std::size_t(j)];
          n.value(0, j) = lg(c, j) - mx(j) - std::log(z(j));
        }
        break;
      }
    }
  }

  void seed(NodeId id, const Arr& g) {
    Node& n = nodes_[id];
    if (n.stamp == sweep_) {
      n.grad += g;
    } else {
      n.grad = g;
      n.stamp = sweep_;
    }
  }

  void step_numeric(NodeId id) {
    Node& n = nodes_[id];
    if (n.stamp != sweep_) return;
    const Arr& g = n.grad;
    switch (n.op) {
      case Op::ConstLeaf: case Op::ExtLeaf: case Op::VarLeaf: break;
      case Op::Matmul: {
        const auto& gm = g.matrix();
        const auto& A = V(n.a).matrix();
        const auto& B = V(n.b).matrix();
        Mat dA, dB;
        if (!n.tA) { if (n.tB) dA = gm * B; else dA = gm * B.transpose(); }
        else       { if (n.tB) dA = B.transpose() * gm.transpose();
                     else      dA = B * gm.transpose(); }
        if (!n.tB) { if (n.tA) dB = A * gm; else dB = A.transpose() * gm; }
        else       { if (n.tA) dB = gm.transpose() * A.transpose();
                     else      dB = gm.transpose() * A; }
        seed(n.a, dA.array());
        seed(n.b, dB.array());
        break;
      }
      case Op::Add: seed(n.a, g); seed(n.b, g); break;
      case Op::Sub: seed(n.a, g); seed(n.b, Arr(-g)); break;
      case Op::Mul: seed(n.a, Arr(g * V(n.b))); seed(n.b, Arr(g * V(n.a))); break;
      case Op::Div:
        seed(n.a, Arr(g / V(n.b)));
        seed(n.b, Arr(-g * n.value / V(n.b)));
        break;
      case Op::Tanh: seed(n.a, Arr(g * (1.0 - n.value.square()))); break;
      case Op::Sigmoid: seed(n.a, Arr(g * n.value * (1.0 - n.value))); break;
      case Op::Square: seed(n.a, Arr(g * 2.0 * V(n.a))); break;
      case Op::Affine: seed(n.a, Arr(n.c0 * g)); break;
      case Op::RowAffine: seed(n.a, Arr(g.colwise() * n.rs.array())); break;
      case Op::AddColVec:
        seed(n.a, g);
        seed(n.b, Arr(g.rowwise().sum()));
        break;
      case Op::BroadcastCol: seed(n.a, Arr(g.rowwise().sum())); break;
      case Op::BroadcastFull: seed(n.a, Arr::Constant(1, 1, g.sum())); break;
      case Op::RowSum: seed(n.a, Arr(g.col(0).replicate(1, V(n.a).cols()))); break;
      case Op::Row: {
        Arr d = Arr::Zero(V(n.a).rows(), V(n.a).cols());
        d.row(n.irow) = g.row(0);
        seed(n.a, d);
        break;
      }
      case Op::ScatterRow: seed(n.a, Arr(g.row(n.irow))); break;
      case Op::Sum: seed(n.a, Arr::Constant(V(n.a).rows(), V(n.a).cols(), g(0, 0))); break;
      case Op::Mean:
        seed(n.a, Arr::Constant(V(n.a).rows(), V(n.a).cols(),
                                g(0, 0) / double(V(n.a).size())));
        break;
      case Op::MaskedLogProb: {
        const MaskedAux& ax = *n.ml;
        Arr d = -ax.softmax;
        for (Eigen::Index j = 0; j < d.cols(); ++j)
          d(ax.chosen[std::size_t(j)], j) += 1.0;
        seed(n.a, Arr(d.rowwise() * g.row(0).array()));
        break;
      }
    }
  }

  // Accumulate adjoint-node contributions: adj[i] combines via add().
  void acc(std::vector<NodeId>& adj, NodeId target, NodeId contrib) {
    if (adj[target] == kNoNode) adj[target] = contrib;
    else adj[target] = add(adj[target], contrib);
  }

  void step_graph(NodeId id, std::vector<NodeId>& adj) {
    // Snapshot fields: appending adjoint nodes may reallocate nodes_.
    const Op op = nodes_[id].op;
    const NodeId a = nodes_[id].a, b = nodes_[id].b;
    const double c0 = nodes_[id].c0;
    const int irow = nodes_[id].irow;
    const bool tA = nodes_[id].tA, tB = nodes_[id].tB;
    const Vec rs = nodes_[id].rs;
    const int acols = (a != kNoNode) ? int(nodes_[a].value.cols()) : 0;
    const int arows = (a != kNoNode) ? int(nodes_[a].value.rows()) : 0;
    const NodeId g = adj[id];
    switch (op) {
      case Op::ConstLeaf: case Op::ExtLeaf: case Op::VarLeaf: break;
      case Op::Matmul: {
        NodeId dA, dB;
        if (!tA) dA = matmul(g, b, false, !tB);
        else     dA = matmul(b, g, tB, true);
        if (!tB) dB = matmul(a, g, !tA, false);
        else     dB = matmul(g, a, true, tA);
        acc(adj, a, dA);
        acc(adj, b, dB);
        break;
      }
      case Op::Add: acc(adj, a, g); acc(adj, b, g); break;
      case Op::Sub: acc(adj, a, g); acc(adj, b, neg(g)); break;
      case Op::Mul: acc(adj, a, mul(g, b)); acc(adj, b, mul(g, a)); break;
      case Op::Div:
        acc(adj, a, div(g, b));
        acc(adj, b, neg(mul(g, div(id, b))));
        break;
      case Op::Tanh:
        acc(adj, a, mul(g, affine(square(id), -1.0, 1.0)));
        break;
      case Op::Sigmoid:
        acc(adj, a, mul(g, mul(id, affine(id, -1.0, 1.0))));
        break;
      case Op::Square: acc(adj, a, mul(g, affine(a, 2.0, 0.0))); break;
      case Op::Affine: acc(adj, a, affine(g, c0, 0.0)); break;
      case Op::RowAffine:
        acc(adj, a, row_affine(g, rs, Vec::Zero(rs.size())));
        break;
      case Op::AddColVec:
        acc(adj, a, g);
        acc(adj, b, rowsum(g));
        break;
      case Op::BroadcastCol: acc(adj, a, rowsum(g)); break;
      case Op::BroadcastFull: acc(adj, a, sum(g)); break;
      case Op::RowSum: acc(adj, a, broadcast_col(g, acols)); break;
      case Op::Row: acc(adj, a, scatter_row(g, irow, arows)); break;
      case Op::ScatterRow: acc(adj, a, row(g, irow)); break;
      case Op::Sum:
        acc(adj, a, broadcast_full(g, arows, acols));
        break;
      case Op::Mean:
        acc(adj, a, broadcast_full(affine(g, 1.0 / double(arows * acols), 0.0),
                                   arows, acols));
        break;
      case Op::MaskedLogProb:
        fail(Errc::Internal, "masked_logprob has no graph adjoint");
    }
  }
};

}  // namespace pded
