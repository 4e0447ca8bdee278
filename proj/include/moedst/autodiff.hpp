#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "moedst/tensor.hpp"

namespace moedst {

using NodeId = int32_t;

// Reverse-mode tape. Forward rules run eagerly as ops are recorded;
// backward() replays the records in exact reverse order and accumulates
// gradients into each op's inputs. A tape belongs to one thread.
class Tape {
 public:
  // ---- leaves ----

  // Leaf that participates in differentiation (a parameter).
  NodeId param(const Tensor& t) { return push_leaf(t, true); }

  // Leaf treated as a constant (inputs, masks, frozen activations).
  NodeId constant(const Tensor& t) { return push_leaf(t, false); }

  // ---- primitives ----

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rank() == 2 && tb.rank() == 2 && ta.cols() == tb.rows(), "matmul: shape mismatch");
    Tensor out({ta.rows(), tb.cols()});
    mm_nn_acc(ta.data.data(), tb.data.data(), out.data.data(), ta.rows(), ta.cols(), tb.cols());
    return push_op(Op::matmul, {a, b}, std::move(out));
  }

  // a * b^T; b is n x k, result m x n.
  NodeId matmul_nt(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rank() == 2 && tb.rank() == 2 && ta.cols() == tb.cols(), "matmul_nt: shape mismatch");
    Tensor out({ta.rows(), tb.rows()});
    mm_nt_acc(ta.data.data(), tb.data.data(), out.data.data(), ta.rows(), ta.cols(), tb.rows());
    return push_op(Op::matmul_nt, {a, b}, std::move(out));
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "add: shape mismatch");
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    return push_op(Op::add, {a, b}, std::move(out));
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "mul: shape mismatch");
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    return push_op(Op::mul, {a, b}, std::move(out));
  }

  NodeId scale(NodeId a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    NodeId id = push_op(Op::scale, {a}, std::move(out));
    nodes_[static_cast<size_t>(id)].scalar = c;
    return id;
  }

  // x: m x n, bias: rank-1 length n, added to every row.
  NodeId add_row_bias(NodeId x, NodeId bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    require(tx.rank() == 2 && tb.rank() == 1 && tb.shape[0] == tx.cols(),
            "add_row_bias: shape mismatch");
    Tensor out = tx;
    int n = tx.cols();
    for (int i = 0; i < tx.rows(); ++i)
      for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += tb.data[j];
    return push_op(Op::add_row_bias, {x, bias}, std::move(out));
  }

  // Gathers rows of table (V x d) at the given indices.
  NodeId embedding(NodeId table, const std::vector<int>& ids) {
    const Tensor& tt = value(table);
    require(tt.rank() == 2, "embedding: table must be rank-2");
    require(!ids.empty(), "embedding: empty index list");
    int d = tt.cols();
    Tensor out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
      int id = ids[i];
      if (id < 0 || id >= tt.rows()) throw std::out_of_range("embedding: index out of range");
      std::copy_n(&tt.data[static_cast<size_t>(id) * d], d, &out.data[i * d]);
    }
    NodeId node = push_op(Op::embedding, {table}, std::move(out));
    nodes_[static_cast<size_t>(node)].ints = ids;
    return node;
  }

  // Row-wise layer normalization with learned gain and bias (both rank-1 of
  // length n = cols).
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    require(tx.rank() == 2 && tg.rank() == 1 && tb.rank() == 1 && tg.shape[0] == tx.cols() &&
                tb.shape[0] == tx.cols(),
            "layer_norm: shape mismatch");
    int m = tx.rows(), n = tx.cols();
    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> rstd(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      const double* row = &tx.data[static_cast<size_t>(i) * n];
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += row[j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= n;
      double r = 1.0 / std::sqrt(var + kLnEps);
      rstd[static_cast<size_t>(i)] = r;
      for (int j = 0; j < n; ++j) {
        double xh = (row[j] - mean) * r;
        xhat.data[static_cast<size_t>(i) * n + j] = xh;
        out.data[static_cast<size_t>(i) * n + j] = xh * tg.data[j] + tb.data[j];
      }
    }
    NodeId node = push_op(Op::layer_norm, {x, gain, bias}, std::move(out));
    nodes_[static_cast<size_t>(node)].saved = std::move(xhat);
    nodes_[static_cast<size_t>(node)].saved_vec = std::move(rstd);
    return node;
  }

  NodeId gelu(NodeId x) {
    Tensor out = value(x);
    for (double& v : out.data) v = gelu_fwd(v);
    return push_op(Op::gelu, {x}, std::move(out));
  }

  // Row softmax with max-subtraction; rows sum to 1.
  NodeId softmax_rows(NodeId x) {
    const Tensor& tx = value(x);
    if (tx.rank() != 2) throw std::invalid_argument("softmax_rows: input must be rank-2");
    Tensor out = softmax_rows_value(tx);
    return push_op(Op::softmax_rows, {x}, std::move(out));
  }

  // Mean over positions of -log softmax(logits)[target]. Returns a 1x1 node.
  NodeId cross_entropy(NodeId logits, const std::vector<int>& targets) {
    const Tensor& tl = value(logits);
    require(tl.rank() == 2, "cross_entropy: logits must be rank-2");
    require(static_cast<int>(targets.size()) == tl.rows(),
            "cross_entropy: one target per logit row");
    for (int t : targets)
      if (t < 0 || t >= tl.cols()) throw std::out_of_range("cross_entropy: target out of range");
    Tensor probs = softmax_rows_value(tl);
    int n = tl.cols();
    double loss = 0.0;
    for (int i = 0; i < tl.rows(); ++i) {
      double p = probs.data[static_cast<size_t>(i) * n + targets[static_cast<size_t>(i)]];
      loss -= std::log(std::max(p, 1e-300));
    }
    loss /= tl.rows();
    NodeId node = push_op(Op::cross_entropy, {logits}, Tensor({1, 1}, {loss}));
    nodes_[static_cast<size_t>(node)].saved = std::move(probs);
    nodes_[static_cast<size_t>(node)].ints = targets;
    return node;
  }

  NodeId slice_cols(NodeId x, int begin, int count) {
    const Tensor& tx = value(x);
    require(tx.rank() == 2 && begin >= 0 && count > 0 && begin + count <= tx.cols(),
            "slice_cols: range out of bounds");
    int m = tx.rows(), n = tx.cols();
    Tensor out({m, count});
    for (int i = 0; i < m; ++i)
      std::copy_n(&tx.data[static_cast<size_t>(i) * n + begin], count,
                  &out.data[static_cast<size_t>(i) * count]);
    NodeId node = push_op(Op::slice_cols, {x}, std::move(out));
    nodes_[static_cast<size_t>(node)].ints = {begin, count};
    return node;
  }

  NodeId concat_cols(std::span<const NodeId> xs) {
    require(!xs.empty(), "concat_cols: no inputs");
    int m = value(xs[0]).rows();
    int total = 0;
    for (NodeId x : xs) {
      require(value(x).rank() == 2 && value(x).rows() == m, "concat_cols: row mismatch");
      total += value(x).cols();
    }
    Tensor out({m, total});
    int off = 0;
    for (NodeId x : xs) {
      const Tensor& tx = value(x);
      int n = tx.cols();
      for (int i = 0; i < m; ++i)
        std::copy_n(&tx.data[static_cast<size_t>(i) * n], n,
                    &out.data[static_cast<size_t>(i) * total + off]);
      off += n;
    }
    return push_op(Op::concat_cols, std::vector<NodeId>(xs.begin(), xs.end()), std::move(out));
  }

  // ---- access ----

  const Tensor& value(NodeId id) const { return nodes_[check_id(id)].value; }

  // Gradient of the last backward() target w.r.t. this node. Zero for nodes
  // the loss does not reach.
  const Tensor& grad(NodeId id) const {
    const Node& n = nodes_[check_id(id)];
    if (n.grad.data.empty()) {
      zero_like_ = Tensor(n.value.shape);
      return zero_like_;
    }
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  // ---- backward ----

  void backward(NodeId loss) {
    const Node& ln = nodes_[check_id(loss)];
    if (ln.value.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar node");
    for (Node& n : nodes_) {
      if (!n.grad.data.empty()) n.grad.fill(0.0);
    }
    ensure_grad(loss).data[0] = 1.0;
    for (int32_t i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.kind == Op::leaf || !n.requires_grad || n.grad.data.empty()) continue;
      backward_op(n);
    }
  }

  static double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
  }

  static double gelu_bwd(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
  }

  static Tensor softmax_rows_value(const Tensor& x) {
    Tensor out = x;
    int m = x.rows(), n = x.cols();
    for (int i = 0; i < m; ++i) {
      double* row = &out.data[static_cast<size_t>(i) * n];
      double mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (int j = 0; j < n; ++j) row[j] /= sum;
    }
    return out;
  }

 private:
  enum class Op {
    leaf,
    matmul,
    matmul_nt,
    add,
    mul,
    scale,
    add_row_bias,
    embedding,
    layer_norm,
    gelu,
    softmax_rows,
    cross_entropy,
    slice_cols,
    concat_cols,
  };

  struct Node {
    Op kind = Op::leaf;
    Tensor value;
    Tensor grad;
    std::vector<NodeId> in;
    std::vector<int> ints;
    double scalar = 0.0;
    Tensor saved;
    std::vector<double> saved_vec;
    bool requires_grad = false;
  };

  static constexpr double kLnEps = 1e-5;

  std::vector<Node> nodes_;
  mutable Tensor zero_like_;

  static void require(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  }

  size_t check_id(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
      throw std::out_of_range("tape: bad node id");
    return static_cast<size_t>(id);
  }

  NodeId push_leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.kind = Op::leaf;
    n.value = t;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_op(Op kind, std::vector<NodeId> in, Tensor out) {
    Node n;
    n.kind = kind;
    n.value = std::move(out);
    n.in = std::move(in);
    for (NodeId i : n.in) n.requires_grad = n.requires_grad || nodes_[check_id(i)].requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  Tensor& ensure_grad(NodeId id) {
    Node& n = nodes_[check_id(id)];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }

  // Accumulate into input grads only where the input requires grad.
  bool wants_grad(NodeId id) const { return nodes_[check_id(id)].requires_grad; }

  void backward_op(Node& n) {
    const Tensor& g = n.grad;
    switch (n.kind) {
      case Op::matmul: {
        const Tensor& a = value(n.in[0]);
        const Tensor& b = value(n.in[1]);
        if (wants_grad(n.in[0])) {
          Tensor& da = ensure_grad(n.in[0]);
          mm_nt_acc(g.data.data(), b.data.data(), da.data.data(), g.rows(), g.cols(), b.rows());
        }
        if (wants_grad(n.in[1])) {
          Tensor& db = ensure_grad(n.in[1]);
          mm_tn_acc(a.data.data(), g.data.data(), db.data.data(), a.cols(), a.rows(), g.cols());
        }
        break;
      }
      case Op::matmul_nt: {
        // c = a b^T, g: m x n, a: m x k, b: n x k
        const Tensor& a = value(n.in[0]);
        const Tensor& b = value(n.in[1]);
        if (wants_grad(n.in[0])) {
          Tensor& da = ensure_grad(n.in[0]);
          mm_nn_acc(g.data.data(), b.data.data(), da.data.data(), g.rows(), g.cols(), b.cols());
        }
        if (wants_grad(n.in[1])) {
          Tensor& db = ensure_grad(n.in[1]);
          mm_tn_acc(g.data.data(), a.data.data(), db.data.data(), g.cols(), g.rows(), a.cols());
        }
        break;
      }
      case Op::add: {
        for (int s = 0; s < 2; ++s) {
          if (!wants_grad(n.in[static_cast<size_t>(s)])) continue;
          Tensor& d = ensure_grad(n.in[static_cast<size_t>(s)]);
          for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
        }
        break;
      }
      case Op::mul: {
        const Tensor& a = value(n.in[0]);
        const Tensor& b = value(n.in[1]);
        if (wants_grad(n.in[0])) {
          Tensor& da = ensure_grad(n.in[0]);
          for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * b.data[i];
        }
        if (wants_grad(n.in[1])) {
          Tensor& db = ensure_grad(n.in[1]);
          for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * a.data[i];
        }
        break;
      }
      case Op::scale: {
        if (wants_grad(n.in[0])) {
          Tensor& d = ensure_grad(n.in[0]);
          for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * n.scalar;
        }
        break;
      }
      case Op::add_row_bias: {
        int m = g.rows(), w = g.cols();
        if (wants_grad(n.in[0])) {
          Tensor& dx = ensure_grad(n.in[0]);
          for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
        }
        if (wants_grad(n.in[1])) {
          Tensor& db = ensure_grad(n.in[1]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) db.data[j] += g.data[static_cast<size_t>(i) * w + j];
        }
        break;
      }
      case Op::embedding: {
        if (wants_grad(n.in[0])) {
          Tensor& dt = ensure_grad(n.in[0]);
          int d = g.cols();
          for (size_t i = 0; i < n.ints.size(); ++i) {
            double* drow = &dt.data[static_cast<size_t>(n.ints[i]) * d];
            const double* grow = &g.data[i * static_cast<size_t>(d)];
            for (int j = 0; j < d; ++j) drow[j] += grow[j];
          }
        }
        break;
      }
      case Op::layer_norm: {
        const Tensor& xhat = n.saved;
        const Tensor& tg = value(n.in[1]);
        int m = g.rows(), w = g.cols();
        for (int i = 0; i < m; ++i) {
          const double* grow = &g.data[static_cast<size_t>(i) * w];
          const double* xrow = &xhat.data[static_cast<size_t>(i) * w];
          double r = n.saved_vec[static_cast<size_t>(i)];
          double sum_d = 0.0, sum_dx = 0.0;
          for (int j = 0; j < w; ++j) {
            double dxh = grow[j] * tg.data[j];
            sum_d += dxh;
            sum_dx += dxh * xrow[j];
          }
          if (wants_grad(n.in[0])) {
            Tensor& dx = ensure_grad(n.in[0]);
            double* dxrow = &dx.data[static_cast<size_t>(i) * w];
            for (int j = 0; j < w; ++j) {
              double dxh = grow[j] * tg.data[j];
              dxrow[j] += r * (dxh - sum_d / w - xrow[j] * sum_dx / w);
            }
          }
          if (wants_grad(n.in[1])) {
            Tensor& dgain = ensure_grad(n.in[1]);
            for (int j = 0; j < w; ++j) dgain.data[j] += grow[j] * xrow[j];
          }
          if (wants_grad(n.in[2])) {
            Tensor& dbias = ensure_grad(n.in[2]);
            for (int j = 0; j < w; ++j) dbias.data[j] += grow[j];
          }
        }
        break;
      }
      case Op::gelu: {
        if (wants_grad(n.in[0])) {
          const Tensor& x = value(n.in[0]);
          Tensor& dx = ensure_grad(n.in[0]);
          for (size_t i = 0; i < g.data.size(); ++i)
            dx.data[i] += g.data[i] * gelu_bwd(x.data[i]);
        }
        break;
      }
      case Op::softmax_rows: {
        if (wants_grad(n.in[0])) {
          const Tensor& y = n.value;
          Tensor& dx = ensure_grad(n.in[0]);
          int m = y.rows(), w = y.cols();
          for (int i = 0; i < m; ++i) {
            const double* yrow = &y.data[static_cast<size_t>(i) * w];
            const double* grow = &g.data[static_cast<size_t>(i) * w];
            double dot = 0.0;
            for (int j = 0; j < w; ++j) dot += yrow[j] * grow[j];
            double* drow = &dx.data[static_cast<size_t>(i) * w];
            for (int j = 0; j < w; ++j) drow[j] += yrow[j] * (grow[j] - dot);
          }
        }
        break;
      }
      case Op::cross_entropy: {
        if (wants_grad(n.in[0])) {
          const Tensor& probs = n.saved;
          Tensor& dl = ensure_grad(n.in[0]);
          int m = probs.rows(), w = probs.cols();
          double gs = g.data[0] / m;
          for (int i = 0; i < m; ++i) {
            const double* prow = &probs.data[static_cast<size_t>(i) * w];
            double* drow = &dl.data[static_cast<size_t>(i) * w];
            for (int j = 0; j < w; ++j) drow[j] += gs * prow[j];
            drow[n.ints[static_cast<size_t>(i)]] -= gs;
          }
        }
        break;
      }
      case Op::slice_cols: {
        if (wants_grad(n.in[0])) {
          Tensor& dx = ensure_grad(n.in[0]);
          int m = g.rows(), w = g.cols(), full = dx.cols(), begin = n.ints[0];
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              dx.data[static_cast<size_t>(i) * full + begin + j] +=
                  g.data[static_cast<size_t>(i) * w + j];
        }
        break;
      }
      case Op::concat_cols: {
        int m = g.rows(), total = g.cols();
        int off = 0;
        for (NodeId src : n.in) {
          int w = value(src).cols();
          if (wants_grad(src)) {
            Tensor& dx = ensure_grad(src);
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < w; ++j)
                dx.data[static_cast<size_t>(i) * w + j] +=
                    g.data[static_cast<size_t>(i) * total + off + j];
          }
          off += w;
        }
        break;
      }
      case Op::leaf:
        break;
    }
  }
};

// log softmax of a single row vector, max-subtracted.
inline std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

struct GradCheckOptions {
  double h = 1e-4;
  int coords_per_param = 0;  // 0 means every coordinate
  uint64_t seed = 17;
};

// Max over sampled coordinates of |analytic - central difference| /
// (|analytic| + |difference| + 1e-12). loss_fn must be deterministic in the
// current parameter contents; grad_fn returns one gradient tensor per
// parameter, computed independently of the perturbations.
inline double check_gradients(std::span<Tensor* const> params,
                              const std::function<double()>& loss_fn,
                              const std::function<std::vector<Tensor>()>& grad_fn,
                              const GradCheckOptions& opt = {}) {
  std::vector<Tensor> analytic = grad_fn();
  if (analytic.size() != params.size())
    throw std::invalid_argument("check_gradients: one gradient per parameter expected");
  Rng rng(opt.seed);
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    int64_t n = t.numel();
    int64_t samples = (opt.coords_per_param <= 0) ? n : std::min<int64_t>(n, opt.coords_per_param);
    for (int64_t s = 0; s < samples; ++s) {
      int64_t i = (opt.coords_per_param <= 0) ? s : static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n)));
      double orig = t.data[static_cast<size_t>(i)];
      t.data[static_cast<size_t>(i)] = orig + opt.h;
      double up = loss_fn();
      t.data[static_cast<size_t>(i)] = orig - opt.h;
      double down = loss_fn();
      t.data[static_cast<size_t>(i)] = orig;
      double diff = (up - down) / (2.0 * opt.h);
      double a = analytic[p].data[static_cast<size_t>(i)];
      double err = std::abs(a - diff) / (std::abs(a) + std::abs(diff) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace moedst
