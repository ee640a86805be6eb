#include "attmil/autodiff.hpp"

#include "attmil/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace attmil {

namespace {

std::atomic<std::uint64_t> g_node_counter{0};

void require_rank(const Var& x, Index rank, const char* op) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

// Gradient sink of the i-th parent, or nullptr when it does not need one.
Tensor* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents()[i];
  return p.requires_grad() ? &p.grad() : nullptr;
}

}  // namespace

Node::Node(std::string op, Tensor value, std::vector<std::shared_ptr<Node>> parents,
           BackwardFn backward, bool requires_grad)
    : op_(std::move(op)),
      value_(std::move(value)),
      parents_(std::move(parents)),
      backward_(std::move(backward)),
      requires_grad_(requires_grad),
      order_(g_node_counter.fetch_add(1, std::memory_order_relaxed)) {}

Tensor& Node::grad() {
  if (grad_.numel() == 0) grad_ = Tensor(value_.shape());
  return grad_;
}

void Node::zero_grad() {
  if (grad_.numel() != 0) grad_.data().setZero();
}

Var Var::parameter(Tensor value) {
  return Var(std::make_shared<Node>("parameter", std::move(value), std::vector<std::shared_ptr<Node>>{},
                                    BackwardFn{}, true));
}

Var Var::constant(Tensor value) {
  return Var(std::make_shared<Node>("constant", std::move(value), std::vector<std::shared_ptr<Node>>{},
                                    BackwardFn{}, false));
}

double Var::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
  return value()[0];
}

Var make_op(std::string op, Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  std::vector<std::shared_ptr<Node>> ptrs;
  ptrs.reserve(parents.size());
  for (const Var& p : parents) {
    needs = needs || p.requires_grad();
    ptrs.push_back(p.ptr());
  }
  if (!needs) {
    // Nothing upstream is trainable: keep the value, drop the graph.
    ptrs.clear();
    backward = nullptr;
  }
  return Var(std::make_shared<Node>(std::move(op), std::move(value), std::move(ptrs), std::move(backward),
                                    needs));
}

void backward(const Var& loss) {
  if (!loss) throw ArgumentError("backward on empty Var");
  if (loss.numel() != 1) {
    throw ArgumentError("backward requires a scalar root, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{&loss.node()};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents()) {
      if (p->requires_grad() && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // A node is always constructed after its parents, so descending order is a
  // reverse topological order and fixes the accumulation sequence.
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->order() > b->order(); });

  for (Node* n : nodes) {
    if (!n->is_leaf()) n->zero_grad();
  }
  loss.node().grad().data()[0] += 1.0;
  for (Node* n : nodes) {
    if (!n->is_leaf()) n->run_backward();
  }
}

// Linear algebra ------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return make_op("matmul", std::move(out), {a, b}, [](Node& self) {
    const auto g = self.grad().matrix();
    const auto& av = self.parents()[0]->value();
    const auto& bv = self.parents()[1]->value();
    if (Tensor* ga = parent_grad(self, 0)) ga->matrix().noalias() += g * bv.matrix().transpose();
    if (Tensor* gb = parent_grad(self, 1)) gb->matrix().noalias() += av.matrix().transpose() * g;
  });
}

Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const Index n = x.shape()[0], d = x.shape()[1], m = weight.shape()[0];
  if (weight.shape()[1] != d) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->shape()[0] != m)) {
    throw DimensionError("linear: bias " + shape_string(bias->shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  Tensor out({n, m});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  if (bias) out.matrix().rowwise() += bias->value().data().transpose();

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_op("linear", std::move(out), parents, [](Node& self) {
    const auto g = self.grad().matrix();
    const auto& xv = self.parents()[0]->value();
    const auto& wv = self.parents()[1]->value();
    if (Tensor* gx = parent_grad(self, 0)) gx->matrix().noalias() += g * wv.matrix();
    if (Tensor* gw = parent_grad(self, 1)) gw->matrix().noalias() += g.transpose() * xv.matrix();
    if (self.parents().size() > 2) {
      if (Tensor* gb = parent_grad(self, 2)) gb->data() += g.colwise().sum().transpose();
    }
  });
}

Var dense(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 1, "dense");
  return reshape(linear(reshape(x, {1, x.shape()[0]}), weight, bias), {weight.shape()[0]});
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         " differ");
  }
  Tensor out(a.shape(), a.value().data() + b.value().data());
  return make_op("add", std::move(out), {a, b}, [](Node& self) {
    const auto& g = self.grad().data();
    if (Tensor* ga = parent_grad(self, 0)) ga->data() += g;
    if (Tensor* gb = parent_grad(self, 1)) gb->data() += g;
  });
}

Var scale(const Var& x, double factor) {
  Tensor out(x.shape(), x.value().data() * factor);
  return make_op("scale", std::move(out), {x}, [factor](Node& self) {
    if (Tensor* gx = parent_grad(self, 0)) gx->data() += factor * self.grad().data();
  });
}

Var sum(const Var& x) {
  Tensor out(Shape{}, Eigen::VectorXd::Constant(1, x.value().data().sum()));
  return make_op("sum", std::move(out), {x}, [](Node& self) {
    if (Tensor* gx = parent_grad(self, 0)) gx->data().array() += self.grad()[0];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op("reshape", std::move(out), {x}, [](Node& self) {
    if (Tensor* gx = parent_grad(self, 0)) gx->data() += self.grad().data();
  });
}

// Convolution & pooling -----------------------------------------------------

namespace {

struct Spatial {
  Index batch, channels, height, width;
  bool batched;
};

Spatial spatial_of(const Var& x, const char* op) {
  const auto& s = x.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_string(s));
}

// Index ranges of one kernel tap (i, j) that fall inside the unpadded input.
struct Tap {
  Index ox_lo, ox_hi, offset_x;
};

Tap tap_range(Index j, Index ow, Index width, Index stride, Index padding) {
  const Index shift = j - padding;
  Index lo = 0;
  while (lo < ow && lo * stride + shift < 0) ++lo;
  Index hi = ow;
  while (hi > lo && (hi - 1) * stride + shift >= width) --hi;
  return {lo, hi, shift};
}

struct ConvGeom {
  Index channels, height, width, kh, kw, oh, ow, stride, padding;
};

// Writes the [C*kh*kw, oh*ow] column block of one image into `cols`, whose
// rows are `ld` apart.
void im2col(const double* x, const ConvGeom& g, double* cols, Index ld) {
  for (Index ch = 0; ch < g.channels; ++ch) {
    const double* plane = x + ch * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        double* row = cols + ((ch * g.kh + i) * g.kw + j) * ld;
        const Tap t = tap_range(j, g.ow, g.width, g.stride, g.padding);
        for (Index oy = 0; oy < g.oh; ++oy) {
          double* dst = row + oy * g.ow;
          const Index iy = oy * g.stride + i - g.padding;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          std::fill(dst, dst + t.ox_lo, 0.0);
          const double* src = plane + iy * g.width + t.offset_x;
          if (g.stride == 1) {
            for (Index ox = t.ox_lo; ox < t.ox_hi; ++ox) dst[ox] = src[ox];
          } else {
            for (Index ox = t.ox_lo; ox < t.ox_hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + t.ox_hi, dst + g.ow, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates column gradients back onto the image.
void col2im(const double* cols, Index ld, const ConvGeom& g, double* x) {
  for (Index ch = 0; ch < g.channels; ++ch) {
    double* plane = x + ch * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const double* row = cols + ((ch * g.kh + i) * g.kw + j) * ld;
        const Tap t = tap_range(j, g.ow, g.width, g.stride, g.padding);
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride + i - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          const double* src = row + oy * g.ow;
          double* dst = plane + iy * g.width + t.offset_x;
          if (g.stride == 1) {
            for (Index ox = t.ox_lo; ox < t.ox_hi; ++ox) dst[ox] += src[ox];
          } else {
            for (Index ox = t.ox_lo; ox < t.ox_hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& kernels, const Var& bias, Index stride, Index padding) {
  const Spatial in = spatial_of(x, "conv2d");
  require_rank(kernels, 4, "conv2d");
  const Index f = kernels.shape()[0], kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kernels.shape()[1] != in.channels) {
    throw DimensionError("conv2d: kernels " + shape_string(kernels.shape()) + " do not match input " +
                         shape_string(x.shape()));
  }
  if (bias.value().rank() != 1 || bias.shape()[0] != f) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " does not match kernels " +
                         shape_string(kernels.shape()));
  }
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  if (padding < 0) throw ArgumentError("conv2d: padding must be >= 0");
  if (kh > in.height + 2 * padding || kw > in.width + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_string(kernels.shape()) + " larger than padded input " +
                         shape_string(x.shape()));
  }
  const Index oh = (in.height + 2 * padding - kh) / stride + 1;
  const Index ow = (in.width + 2 * padding - kw) / stride + 1;
  const Index patch = in.channels * kh * kw;
  const Index opix = oh * ow;
  const Index ipix = in.height * in.width;

  const ConvGeom geom{in.channels, in.height, in.width, kh, kw, oh, ow, stride, padding};

  // Column matrix [patch, batch * opix], kept for the backward pass.
  auto cols = std::make_shared<RowMatrix>(patch, in.batch * opix);
  const double* xd = x.value().data().data();
  const auto kmat = kernels.value().matrix(f, patch);
  Shape out_shape = in.batched ? Shape{in.batch, f, oh, ow} : Shape{f, oh, ow};
  Tensor out(out_shape);
  auto om = out.matrix(in.batch * f, opix);
  for (Index n = 0; n < in.batch; ++n) {
    im2col(xd + n * in.channels * ipix, geom, cols->data() + n * opix, in.batch * opix);
    auto on = om.middleRows(n * f, f);
    on.noalias() = kmat * cols->middleCols(n * opix, opix);
    on.colwise() += bias.value().data();
  }

  return make_op("conv2d", std::move(out), {x, kernels, bias},
                 [in, f, geom, patch, opix, ipix, cols](Node& self) {
                   const auto g = self.grad().matrix(in.batch * f, opix);
                   const auto& kv = self.parents()[1]->value();
                   Tensor* gx = parent_grad(self, 0);
                   Tensor* gk = parent_grad(self, 1);
                   Tensor* gb = parent_grad(self, 2);
                   RowMatrix dcols(patch, opix);
                   for (Index n = 0; n < in.batch; ++n) {
                     const auto gn = g.middleRows(n * f, f);
                     if (gk) gk->matrix(f, patch).noalias() += gn * cols->middleCols(n * opix, opix).transpose();
                     if (gb) gb->data() += gn.rowwise().sum();
                     if (!gx) continue;
                     dcols.noalias() = kv.matrix(f, patch).transpose() * gn;
                     col2im(dcols.data(), opix, geom, gx->data().data() + n * in.channels * ipix);
                   }
                 });
}

Var maxpool2d(const Var& x, Index window, Index stride) {
  const Spatial in = spatial_of(x, "maxpool2d");
  if (window < 1 || stride < 1) throw ArgumentError("maxpool2d: window and stride must be >= 1");
  if (window > in.height || window > in.width) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds spatial extent of " +
                         shape_string(x.shape()));
  }
  const Index oh = (in.height - window) / stride + 1;
  const Index ow = (in.width - window) / stride + 1;
  const Index planes = in.batch * in.channels;
  Shape out_shape = in.batched ? Shape{in.batch, in.channels, oh, ow} : Shape{in.channels, oh, ow};
  Tensor out(out_shape);
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.numel()));

  const double* xd = x.value().data().data();
  Index o = 0;
  for (Index p = 0; p < planes; ++p) {
    const Index base = p * in.height * in.width;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Index best = base + (oy * stride) * in.width + ox * stride;
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) {
            const Index idx = base + (oy * stride + i) * in.width + ox * stride + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        out[o] = xd[best];
        (*argmax)[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return make_op("maxpool2d", std::move(out), {x}, [argmax](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& g = self.grad().data();
    for (Index o = 0; o < g.size(); ++o) (*gx)[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
  });
}

Var max_over_rows(const Var& x) {
  require_rank(x, 2, "max_over_rows");
  const Index n = x.shape()[0], m = x.shape()[1];
  const auto xm = x.value().matrix();
  Tensor out({m});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(m));
  for (Index c = 0; c < m; ++c) {
    Index best = 0;
    for (Index r = 1; r < n; ++r) {
      if (xm(r, c) > xm(best, c)) best = r;
    }
    out[c] = xm(best, c);
    (*argmax)[static_cast<std::size_t>(c)] = best;
  }
  return make_op("max_over_rows", std::move(out), {x}, [argmax, m](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    auto gm = gx->matrix();
    for (Index c = 0; c < m; ++c) gm((*argmax)[static_cast<std::size_t>(c)], c) += self.grad()[c];
  });
}

// Activations ---------------------------------------------------------------

Var relu(const Var& x) {
  Tensor out(x.shape(), x.value().data().cwiseMax(0.0));
  return make_op("relu", std::move(out), {x}, [](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents()[0]->value().data();
    gx->data().array() += (xv.array() > 0.0).select(self.grad().data().array(), 0.0);
  });
}

Var tanh(const Var& x) {
  Tensor out(x.shape(), x.value().data().array().tanh().matrix());
  return make_op("tanh", std::move(out), {x}, [](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto y = self.value().data().array();
    gx->data().array() += self.grad().data().array() * (1.0 - y.square());
  });
}

Var softmax(const Var& x) {
  require_rank(x, 1, "softmax");
  if (x.numel() < 1) throw ArgumentError("softmax: empty input");
  const auto& xv = x.value().data();
  Eigen::VectorXd e = (xv.array() - xv.maxCoeff()).exp().matrix();
  e /= e.sum();
  Tensor out(x.shape(), std::move(e));
  return make_op("softmax", std::move(out), {x}, [](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& y = self.value().data();
    const auto& g = self.grad().data();
    const double dot = g.dot(y);
    gx->data().array() += y.array() * (g.array() - dot);
  });
}

// Losses --------------------------------------------------------------------

Var cross_entropy(const Var& logits, Index label) {
  require_rank(logits, 1, "cross_entropy");
  const Index k = logits.shape()[0];
  if (label < 0 || label >= k) {
    throw ArgumentError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) +
                        ")");
  }
  const auto& z = logits.value().data();
  const double zmax = z.maxCoeff();
  auto probs = std::make_shared<Eigen::VectorXd>((z.array() - zmax).exp().matrix());
  const double total = probs->sum();
  *probs /= total;
  const double loss = zmax + std::log(total) - z[label];
  Tensor out(Shape{}, Eigen::VectorXd::Constant(1, loss));
  return make_op("cross_entropy", std::move(out), {logits}, [probs, label](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    const double g = self.grad()[0];
    gx->data() += g * *probs;
    (*gx)[label] -= g;
  });
}

Var mean_cross_entropy(const Var& logits, Index label) {
  require_rank(logits, 2, "mean_cross_entropy");
  const Index n = logits.shape()[0], k = logits.shape()[1];
  if (label < 0 || label >= k) {
    throw ArgumentError("mean_cross_entropy: label " + std::to_string(label) + " outside [0," +
                        std::to_string(k) + ")");
  }
  const auto z = logits.value().matrix();
  auto probs = std::make_shared<RowMatrix>(n, k);
  double total_loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const double zmax = z.row(r).maxCoeff();
    probs->row(r) = (z.row(r).array() - zmax).exp().matrix();
    const double s = probs->row(r).sum();
    probs->row(r) /= s;
    total_loss += zmax + std::log(s) - z(r, label);
  }
  Tensor out(Shape{}, Eigen::VectorXd::Constant(1, total_loss / static_cast<double>(n)));
  return make_op("mean_cross_entropy", std::move(out), {logits}, [probs, label, n](Node& self) {
    Tensor* gx = parent_grad(self, 0);
    if (!gx) return;
    const double g = self.grad()[0] / static_cast<double>(n);
    auto gm = gx->matrix();
    gm += g * *probs;
    gm.col(label).array() -= g;
  });
}

// Regularisation ------------------------------------------------------------

Var dropout(const Var& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must lie in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<Eigen::VectorXd>(x.numel());
  for (Index i = 0; i < x.numel(); ++i) (*mask)[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
  Tensor out(x.shape(), x.value().data().cwiseProduct(*mask));
  return make_op("dropout", std::move(out), {x}, [mask](Node& self) {
    if (Tensor* gx = parent_grad(self, 0)) gx->data() += self.grad().data().cwiseProduct(*mask);
  });
}

}  // namespace attmil
