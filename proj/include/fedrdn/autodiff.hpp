/**
 * Copyright 2026 The FedRDN Simulator Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Tape-based reverse-mode differentiation over whole-tensor ops.
//
// A Graph owns every node it creates. Nodes are appended in evaluation order,
// so a reverse sweep over the node list is a valid topological order for the
// backward pass. Graphs are cheap and meant to be built per call; nothing is
// shared between graphs, which keeps forward/backward free of hidden state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedrdn/tensor.hpp"

namespace fedrdn::ad {

class Graph;

/// Handle to a node inside a Graph.
struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Input node. Gradients are accumulated for it only when `requires_grad`.
  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, requires_grad});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() root w.r.t. `v`; zeros if `v` did not influence it.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape backwards. `root` must be a scalar.
  void backward(Var root) {
    Node& r = nodes_.at(root.id);
    if (r.value.size() != 1) throw MisuseError("backward() needs a scalar root, got " + shape_str(r.value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    r.grad = Tensor::filled(r.value.shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Op implementation helpers.

  /// Appends an op result. The node needs gradients iff any parent does.
  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, const char* op) {
    if constexpr (kCheckFiniteEveryOp) require_finite(value, op);
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_.at(p).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, std::move(parents), needs ? std::move(backward) : nullptr, needs});
    return Var{nodes_.size() - 1};
  }

  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t parent(std::size_t id, std::size_t k) const { return nodes_[id].parents[k]; }

  /// Mutable gradient buffer of a parent, or nullptr when the parent does not need one.
  Tensor* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw MisuseError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Var add(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "add");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return g.push(std::move(out), {a.id, b.id},
                [](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  for (std::size_t k = 0; k < 2; ++k)
                    if (Tensor* gp = gr.grad_sink(gr.parent(self, k)))
                      for (std::size_t i = 0; i < go.size(); ++i) (*gp)[i] += go[i];
                },
                "add");
}

inline Var sub(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "sub");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return g.push(std::move(out), {a.id, b.id},
                [](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  if (Tensor* ga = gr.grad_sink(gr.parent(self, 0)))
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  if (Tensor* gb = gr.grad_sink(gr.parent(self, 1)))
                    for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
                },
                "sub");
}

/// Elementwise product.
inline Var mul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return g.push(std::move(out), {a.id, b.id},
                [](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  const std::size_t ia = gr.parent(self, 0), ib = gr.parent(self, 1);
                  const Tensor& xa = gr.node_value(ia);
                  const Tensor& xb = gr.node_value(ib);
                  if (Tensor* ga = gr.grad_sink(ia))
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * xb[i];
                  if (Tensor* gb = gr.grad_sink(ib))
                    for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * xa[i];
                },
                "mul");
}

inline Var scale(Graph& g, Var a, double s) {
  const Tensor& x = g.value(a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  return g.push(std::move(out), {a.id},
                [s](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  if (Tensor* gp = gr.grad_sink(gr.parent(self, 0)))
                    for (std::size_t i = 0; i < go.size(); ++i) (*gp)[i] += s * go[i];
                },
                "scale");
}

/// Sum of all elements, as a shape-[1] tensor.
inline Var sum(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return g.push(Tensor({1}, {acc}), {a.id},
                [](Graph& gr, std::size_t self) {
                  const double go = gr.node_grad(self)[0];
                  if (Tensor* gp = gr.grad_sink(gr.parent(self, 0)))
                    for (double& v : gp->data()) v += go;
                },
                "sum");
}

inline Var relu(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return g.push(std::move(out), {a.id},
                [](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  const std::size_t ip = gr.parent(self, 0);
                  const Tensor& xin = gr.node_value(ip);
                  if (Tensor* gp = gr.grad_sink(ip))
                    for (std::size_t i = 0; i < go.size(); ++i)
                      if (xin[i] > 0.0) (*gp)[i] += go[i];
                },
                "relu");
}

inline Var tanh(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return g.push(std::move(out), {a.id},
                [](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  const Tensor& y = gr.node_value(self);
                  if (Tensor* gp = gr.grad_sink(gr.parent(self, 0)))
                    for (std::size_t i = 0; i < go.size(); ++i) (*gp)[i] += go[i] * (1.0 - y[i] * y[i]);
                },
                "tanh");
}

inline Var reshape(Graph& g, Var a, Shape shape) {
  Tensor out = g.value(a).reshaped(std::move(shape));
  return g.push(std::move(out), {a.id},
                [](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  if (Tensor* gp = gr.grad_sink(gr.parent(self, 0)))
                    for (std::size_t i = 0; i < go.size(); ++i) (*gp)[i] += go[i];
                },
                "reshape");
}

/// y[B,O] = x[B,I] * W[O,I]^T + b[O]
inline Var linear(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || wv.dim(1) != xv.dim(1) || bv.dim(0) != wv.dim(0))
    throw MisuseError("linear: incompatible shapes x" + shape_str(xv.shape()) + " W" + shape_str(wv.shape()) + " b" +
                      shape_str(bv.shape()));
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  Tensor out({batch, out_dim});
  for (std::size_t n = 0; n < batch; ++n) {
    const double* xr = &xv.data()[n * in];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = &wv.data()[o * in];
      double acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[n * out_dim + o] = acc;
    }
  }
  return g.push(std::move(out), {x.id, w.id, b.id},
                [batch, in, out_dim](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  const std::size_t ix = gr.parent(self, 0), iw = gr.parent(self, 1), ib = gr.parent(self, 2);
                  const Tensor& xv2 = gr.node_value(ix);
                  const Tensor& wv2 = gr.node_value(iw);
                  if (Tensor* gx = gr.grad_sink(ix))
                    for (std::size_t n = 0; n < batch; ++n)
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        const double gno = go[n * out_dim + o];
                        double* gxr = &gx->data()[n * in];
                        const double* wr = &wv2.data()[o * in];
                        for (std::size_t i = 0; i < in; ++i) gxr[i] += gno * wr[i];
                      }
                  if (Tensor* gw = gr.grad_sink(iw))
                    for (std::size_t n = 0; n < batch; ++n)
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        const double gno = go[n * out_dim + o];
                        double* gwr = &gw->data()[o * in];
                        const double* xr = &xv2.data()[n * in];
                        for (std::size_t i = 0; i < in; ++i) gwr[i] += gno * xr[i];
                      }
                  if (Tensor* gb = gr.grad_sink(ib))
                    for (std::size_t n = 0; n < batch; ++n)
                      for (std::size_t o = 0; o < out_dim; ++o) (*gb)[o] += go[n * out_dim + o];
                },
                "linear");
}

/// Stride-1 2D convolution with symmetric zero padding.
/// x[B,C,H,W], w[O,C,k,k], b[O] -> y[B,O,H+2p-k+1,W+2p-k+1]
inline Var conv2d(Graph& g, Var x, Var w, Var b, std::size_t pad) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3) ||
      bv.dim(0) != wv.dim(0))
    throw MisuseError("conv2d: incompatible shapes x" + shape_str(xv.shape()) + " W" + shape_str(wv.shape()) + " b" +
                      shape_str(bv.shape()));
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  if (h + 2 * pad < k || wd + 2 * pad < k) throw MisuseError("conv2d: kernel larger than padded input");
  const std::size_t oh = h + 2 * pad - k + 1, ow = wd + 2 * pad - k + 1;

  // Valid output range along one axis for kernel offset `kk`: input index = o + kk - pad in [0, n).
  struct Range {
    std::size_t lo, hi;
  };
  auto valid = [pad](std::size_t kk, std::size_t n, std::size_t on) {
    const long shift = static_cast<long>(kk) - static_cast<long>(pad);
    const long lo = std::max<long>(0, -shift);
    const long hi = std::min<long>(static_cast<long>(on), static_cast<long>(n) - shift);
    return Range{static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
  };
  // Flat input offset of output column 0 in output row `r` for kernel tap (ki, kj); may be negative.
  auto offset = [pad, wd](std::size_t r, std::size_t ki, std::size_t kj) {
    const auto sp = static_cast<std::ptrdiff_t>(pad);
    return (static_cast<std::ptrdiff_t>(r + ki) - sp) * static_cast<std::ptrdiff_t>(wd) +
           static_cast<std::ptrdiff_t>(kj) - sp;
  };

  Tensor out({batch, cout, oh, ow});
  const double* xp = xv.data().data();
  const double* wp = wv.data().data();
  double* yp = out.data().data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < cout; ++o) {
      double* yo = yp + (n * cout + o) * oh * ow;
      std::fill(yo, yo + oh * ow, bv[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xc = xp + (n * cin + c) * h * wd;
        for (std::size_t ki = 0; ki < k; ++ki) {
          const Range ri = valid(ki, h, oh);
          for (std::size_t kj = 0; kj < k; ++kj) {
            const Range rj = valid(kj, wd, ow);
            const double wgt = wp[((o * cin + c) * k + ki) * k + kj];
            for (std::size_t r = ri.lo; r < ri.hi; ++r) {
              const std::ptrdiff_t base = offset(r, ki, kj);
              double* yrow = yo + r * ow;
              for (std::size_t s = rj.lo; s < rj.hi; ++s) yrow[s] += wgt * xc[base + static_cast<std::ptrdiff_t>(s)];
            }
          }
        }
      }
    }

  return g.push(
      std::move(out), {x.id, w.id, b.id},
      [=](Graph& gr, std::size_t self) {
        const Tensor& go = gr.node_grad(self);
        const std::size_t ix = gr.parent(self, 0), iw = gr.parent(self, 1), ib = gr.parent(self, 2);
        const double* xq = gr.node_value(ix).data().data();
        const double* wq = gr.node_value(iw).data().data();
        const double* gq = go.data().data();
        Tensor* gx = gr.grad_sink(ix);
        Tensor* gw = gr.grad_sink(iw);
        Tensor* gb = gr.grad_sink(ib);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t o = 0; o < cout; ++o) {
            const double* go_o = gq + (n * cout + o) * oh * ow;
            if (gb) {
              double acc = 0.0;
              for (std::size_t i = 0; i < oh * ow; ++i) acc += go_o[i];
              (*gb)[o] += acc;
            }
            for (std::size_t c = 0; c < cin; ++c) {
              const double* xc = xq + (n * cin + c) * h * wd;
              double* gxc = gx ? gx->data().data() + (n * cin + c) * h * wd : nullptr;
              for (std::size_t ki = 0; ki < k; ++ki) {
                const Range ri = valid(ki, h, oh);
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const Range rj = valid(kj, wd, ow);
                  const std::size_t widx = ((o * cin + c) * k + ki) * k + kj;
                  const double wgt = wq[widx];
                  double wacc = 0.0;
                  for (std::size_t r = ri.lo; r < ri.hi; ++r) {
                    const std::ptrdiff_t base = offset(r, ki, kj);
                    const double* grow = go_o + r * ow;
                    for (std::size_t s = rj.lo; s < rj.hi; ++s)
                      wacc += grow[s] * xc[base + static_cast<std::ptrdiff_t>(s)];
                    if (gxc)
                      for (std::size_t s = rj.lo; s < rj.hi; ++s)
                        gxc[base + static_cast<std::ptrdiff_t>(s)] += wgt * grow[s];
                  }
                  if (gw) (*gw)[widx] += wacc;
                }
              }
            }
          }
      },
      "conv2d");
}

/// Non-overlapping max pooling with window = stride = `k`. Trailing rows/cols that
/// do not fill a window are dropped. Ties resolve to the first element in row-major order.
inline Var max_pool2d(Graph& g, Var x, std::size_t k) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 4 || k == 0 || xv.dim(2) < k || xv.dim(3) < k)
    throw MisuseError("max_pool2d: input " + shape_str(xv.shape()) + " too small for window " + std::to_string(k));
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t oh = h / k, ow = wd / k;
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = p * h * wd + (i * k) * wd + j * k;
        for (std::size_t di = 0; di < k; ++di)
          for (std::size_t dj = 0; dj < k; ++dj) {
            const std::size_t idx = p * h * wd + (i * k + di) * wd + (j * k + dj);
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = xv[best];
        argmax[o] = best;
      }
  return g.push(std::move(out), {x.id},
                [argmax = std::move(argmax)](Graph& gr, std::size_t self) {
                  const Tensor& go = gr.node_grad(self);
                  if (Tensor* gp = gr.grad_sink(gr.parent(self, 0)))
                    for (std::size_t o = 0; o < go.size(); ++o) (*gp)[argmax[o]] += go[o];
                },
                "max_pool2d");
}

/// Mean over the batch of -sum_c t[b,c] * log softmax(z[b])_c.
/// Targets may be soft and need not sum to one.
inline Var softmax_cross_entropy(Graph& g, Var logits, const Tensor& targets) {
  const Tensor& z = g.value(logits);
  if (z.rank() != 2 || targets.shape() != z.shape())
    throw MisuseError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs targets " +
                      shape_str(targets.shape()));
  const std::size_t batch = z.dim(0), classes = z.dim(1);
  Tensor probs(z.shape());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const double* zr = &z.data()[n * classes];
    const double zmax = *std::max_element(zr, zr + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(zr[c] - zmax);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) {
      const double logp = zr[c] - zmax - log_denom;
      probs[n * classes + c] = std::exp(logp);
      loss -= targets[n * classes + c] * logp;
    }
  }
  loss /= static_cast<double>(batch);
  return g.push(Tensor({1}, {loss}), {logits.id},
                [probs = std::move(probs), targets, batch, classes](Graph& gr, std::size_t self) {
                  const double go = gr.node_grad(self)[0] / static_cast<double>(batch);
                  if (Tensor* gp = gr.grad_sink(gr.parent(self, 0)))
                    for (std::size_t n = 0; n < batch; ++n) {
                      double tsum = 0.0;
                      for (std::size_t c = 0; c < classes; ++c) tsum += targets[n * classes + c];
                      for (std::size_t c = 0; c < classes; ++c) {
                        const std::size_t i = n * classes + c;
                        (*gp)[i] += go * (probs[i] * tsum - targets[i]);
                      }
                    }
                },
                "softmax_cross_entropy");
}

}  // namespace fedrdn::ad
