#include "laga/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace laga {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

void check_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + " tensor, got shape " +
                     shape_str(t.shape()));
  }
}

// Unified (N, C, S) view of (N,C), (C,H,W) and (N,C,H,W) layouts used by the
// channel-axis ops.
struct ChannelLayout {
  int n;
  int c;
  int s;  // spatial positions per channel
};

ChannelLayout channel_layout(const Tensor& x, const char* what) {
  const Shape& sh = x.shape();
  if (sh.size() == 2) return {sh[0], sh[1], 1};
  if (sh.size() == 3) return {1, sh[0], sh[1] * sh[2]};
  if (sh.size() == 4) return {sh[0], sh[1], sh[2] * sh[3]};
  throw ShapeError(std::string(what) + ": expected rank 2, 3 or 4, got shape " +
                   shape_str(x.shape()));
}

// Spatial (N, C, H, W) view of (C,H,W) / (N,C,H,W).
struct SpatialLayout {
  int n;
  int c;
  int h;
  int w;
  bool batched;
};

SpatialLayout spatial_layout(const Tensor& x, const char* what) {
  const Shape& sh = x.shape();
  if (sh.size() == 3) return {1, sh[0], sh[1], sh[2], false};
  if (sh.size() == 4) return {sh[0], sh[1], sh[2], sh[3], true};
  throw ShapeError(std::string(what) + ": expected rank 3 or 4, got shape " +
                   shape_str(x.shape()));
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(shape_size(shape), value);
  n->shape = std::move(shape);
  return wrap(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> data) {
  Tensor t = from_data(std::move(shape), std::move(data));
  t.node()->requires_grad = true;
  return t;
}

Tensor Tensor::wrap(std::shared_ptr<TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

double Tensor::value() const {
  if (size() != 1) {
    throw UsageError("value() requires a scalar tensor, got shape " +
                     shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& sh = node_->shape;
  if (idx.size() != sh.size()) {
    throw ShapeError("index rank " + std::to_string(idx.size()) +
                     " does not match tensor shape " + shape_str(sh));
  }
  std::size_t flat = 0;
  std::size_t k = 0;
  for (int i : idx) {
    if (i < 0 || i >= sh[k]) {
      throw ShapeError("index out of bounds for shape " + shape_str(sh));
    }
    flat = flat * static_cast<std::size_t>(sh[k]) + static_cast<std::size_t>(i);
    ++k;
  }
  return node_->data[flat];
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.size() != node_->data.size()) {
    throw UsageError("gradient not materialized; call backward() first");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->data.size(), 0.0);
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

namespace detail {

Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (g_grad_enabled) {
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.node()->requires_grad;
    if (needs) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (Tensor& p : parents) n->parents.push_back(p.node());
      n->backward = std::move(backward);
    }
  }
  return Tensor::wrap(std::move(n));
}

}  // namespace detail

void backward(const Tensor& scalar_output) {
  if (!scalar_output.defined()) {
    throw UsageError("backward() on an undefined tensor");
  }
  auto root = scalar_output.node();
  if (root->data.size() != 1) {
    throw UsageError("backward() requires a scalar output, got shape " +
                     shape_str(root->shape));
  }
  if (!root->requires_grad) {
    throw UsageError("backward() output does not require grad");
  }

  // Iterative post-order DFS over parent edges; the reversed order visits
  // every consumer before its inputs.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : topo) n->grad.assign(n->data.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    ConstMap am(a.data().data(), m, k);
    ConstMap bm(b.data().data(), k, n);
    MutMap cm(out.data(), m, n);
    cm.noalias() = am * bm;
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        ConstMap dc(self.grad.data(), m, n);
        if (an->requires_grad) {
          MutMap da(an->grad.data(), m, k);
          ConstMap bm(bn->data.data(), k, n);
          da.noalias() += dc * bm.transpose();
        }
        if (bn->requires_grad) {
          MutMap db(bn->grad.data(), k, n);
          ConstMap am(an->data.data(), m, k);
          db.noalias() += am.transpose() * dc;
        }
      });
}

Tensor transpose(const Tensor& m) {
  check_rank(m, 2, "transpose");
  const int r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.size());
  const double* src = m.data().data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<std::size_t>(j) * r + i] =
          src[static_cast<std::size_t>(i) * c + j];
    }
  }
  auto mn = m.node();
  return detail::make_op({c, r}, std::move(out), {m},
                         [mn, r, c](TensorNode& self) {
                           if (!mn->requires_grad) return;
                           for (int i = 0; i < r; ++i) {
                             for (int j = 0; j < c; ++j) {
                               mn->grad[static_cast<std::size_t>(i) * c + j] +=
                                   self.grad[static_cast<std::size_t>(j) * r +
                                             i];
                             }
                           }
                         });
}

Tensor softmax_rows(const Tensor& m) {
  check_rank(m, 2, "softmax_rows");
  const int r = m.dim(0), c = m.dim(1);
  const double* src = m.data().data();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(src[i])) {
      throw NumericError("softmax_rows: non-finite input entry at flat index " +
                         std::to_string(i));
    }
  }
  std::vector<double> out(m.size());
  for (int i = 0; i < r; ++i) {
    const double* row = src + static_cast<std::size_t>(i) * c;
    double* orow = out.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= denom;
  }
  auto mn = m.node();
  return detail::make_op(
      {r, c}, std::move(out), {m}, [mn, r, c](TensorNode& self) {
        if (!mn->requires_grad) return;
        for (int i = 0; i < r; ++i) {
          const double* y = self.data.data() + static_cast<std::size_t>(i) * c;
          const double* dy = self.grad.data() + static_cast<std::size_t>(i) * c;
          double dot = 0.0;
          for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
          double* dx = mn->grad.data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(a.shape(), std::move(out), {a, b},
                         [an, bn](TensorNode& self) {
                           if (an->requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] += self.grad[i];
                           }
                         });
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("subtract shape mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(a.shape(), std::move(out), {a, b},
                         [an, bn](TensorNode& self) {
                           if (an->requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] -= self.grad[i];
                           }
                         });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * px[i];
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(out), {x},
                         [xn, factor](TensorNode& self) {
                           if (!xn->requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             xn->grad[i] += factor * self.grad[i];
                         });
}

Tensor scale_by(const Tensor& x, const Tensor& gamma) {
  if (gamma.size() != 1) {
    throw ShapeError("scale_by expects a 1-element gate, got shape " +
                     shape_str(gamma.shape()));
  }
  const double g = gamma.data()[0];
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g * px[i];
  auto xn = x.node();
  auto gn = gamma.node();
  return detail::make_op(x.shape(), std::move(out), {x, gamma},
                         [xn, gn](TensorNode& self) {
                           const double gv = gn->data[0];
                           if (xn->requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               xn->grad[i] += gv * self.grad[i];
                           }
                           if (gn->requires_grad) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               acc += self.grad[i] * xn->data[i];
                             gn->grad[0] += acc;
                           }
                         });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > 0 ? px[i] : 0;
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(out), {x},
                         [xn](TensorNode& self) {
                           if (!xn->requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             if (xn->data[i] > 0) xn->grad[i] += self.grad[i];
                           }
                         });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = px[i] > 0 ? px[i] : slope * px[i];
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(out), {x},
                         [xn, slope](TensorNode& self) {
                           if (!xn->requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             xn->grad[i] += (xn->data[i] > 0 ? 1.0 : slope) *
                                            self.grad[i];
                           }
                         });
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must be in [0,1), got " +
                      std::to_string(p));
  }
  if (mode == Mode::kEval) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<unsigned char> mask(x.size());
  std::vector<double> out(x.size());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() >= p ? 1 : 0;
    out[i] = mask[i] ? px[i] * keep_scale : 0.0;
  }
  auto xn = x.node();
  return detail::make_op(
      x.shape(), std::move(out), {x},
      [xn, mask = std::move(mask), keep_scale](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (mask[i]) xn->grad[i] += keep_scale * self.grad[i];
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape from " + shape_str(x.shape()) + " to " +
                     shape_str(shape) + " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return detail::make_op(std::move(shape), std::move(out), {x},
                         [xn](TensorNode& self) {
                           if (!xn->requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             xn->grad[i] += self.grad[i];
                         });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return detail::make_op({1}, {acc}, {x}, [xn](TensorNode& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < xn->grad.size(); ++i)
      xn->grad[i] += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  auto xn = x.node();
  return detail::make_op({1}, {acc * inv}, {x}, [xn, inv](TensorNode& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < xn->grad.size(); ++i)
      xn->grad[i] += inv * self.grad[0];
  });
}

Tensor concat_features(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_features: empty input");
  const int rank = parts[0].rank();
  if (rank != 1 && rank != 2) {
    throw ShapeError("concat_features expects rank-1 or rank-2 parts");
  }
  const int n = rank == 2 ? parts[0].dim(0) : 1;
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank || (rank == 2 && p.dim(0) != n)) {
      throw ShapeError("concat_features: inconsistent part shapes");
    }
    total += p.dim(rank - 1);
  }
  std::vector<double> out(static_cast<std::size_t>(n) * total);
  int off = 0;
  for (const Tensor& p : parts) {
    const int c = p.dim(rank - 1);
    const double* src = p.data().data();
    for (int i = 0; i < n; ++i) {
      std::memcpy(out.data() + static_cast<std::size_t>(i) * total + off,
                  src + static_cast<std::size_t>(i) * c,
                  static_cast<std::size_t>(c) * sizeof(double));
    }
    off += c;
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(rank - 1));
  }
  Shape out_shape = rank == 2 ? Shape{n, total} : Shape{total};
  return detail::make_op(
      std::move(out_shape), std::move(out), parts,
      [nodes, widths, n, total](TensorNode& self) {
        int off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          const int c = widths[k];
          if (nodes[k]->requires_grad) {
            for (int i = 0; i < n; ++i) {
              const double* dsrc =
                  self.grad.data() + static_cast<std::size_t>(i) * total + off;
              double* dst =
                  nodes[k]->grad.data() + static_cast<std::size_t>(i) * c;
              for (int j = 0; j < c; ++j) dst[j] += dsrc[j];
            }
          }
          off += c;
        }
      });
}

Tensor sample(const Tensor& x, int n) {
  check_rank(x, 4, "sample");
  if (n < 0 || n >= x.dim(0)) {
    throw ShapeError("sample index " + std::to_string(n) +
                     " out of range for shape " + shape_str(x.shape()));
  }
  const std::size_t per = x.size() / static_cast<std::size_t>(x.dim(0));
  std::vector<double> out(per);
  std::memcpy(out.data(), x.data().data() + per * static_cast<std::size_t>(n),
              per * sizeof(double));
  auto xn = x.node();
  return detail::make_op({x.dim(1), x.dim(2), x.dim(3)}, std::move(out), {x},
                         [xn, n, per](TensorNode& self) {
                           if (!xn->requires_grad) return;
                           double* dst =
                               xn->grad.data() + per * static_cast<std::size_t>(n);
                           for (std::size_t i = 0; i < per; ++i)
                             dst[i] += self.grad[i];
                         });
}

Tensor stack(const std::vector<Tensor>& samples) {
  if (samples.empty()) throw UsageError("stack: empty input");
  const Shape& s0 = samples[0].shape();
  if (s0.size() != 3) throw ShapeError("stack expects rank-3 samples");
  for (const Tensor& t : samples) {
    if (t.shape() != s0) {
      throw ShapeError("stack: inconsistent sample shapes " + shape_str(s0) +
                       " vs " + shape_str(t.shape()));
    }
  }
  const std::size_t per = samples[0].size();
  std::vector<double> out(per * samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::memcpy(out.data() + per * i, samples[i].data().data(),
                per * sizeof(double));
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const Tensor& t : samples) nodes.push_back(t.node());
  return detail::make_op(
      {static_cast<int>(samples.size()), s0[0], s0[1], s0[2]}, std::move(out),
      samples, [nodes, per](TensorNode& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          const double* dsrc = self.grad.data() + per * i;
          for (std::size_t j = 0; j < per; ++j) nodes[i]->grad[j] += dsrc[j];
        }
      });
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  BatchNormState& state, Mode mode, double momentum,
                  double eps) {
  const ChannelLayout lay = channel_layout(x, "batch_norm");
  const int c = lay.c;
  auto check_param = [&](const Tensor& t, const char* name) {
    if (t.rank() != 1 || t.dim(0) != c) {
      throw ShapeError(std::string("batch_norm ") + name + " shape " +
                       shape_str(t.shape()) + " does not match channel count " +
                       std::to_string(c) + " of input " +
                       shape_str(x.shape()));
    }
  };
  check_param(gain, "gain");
  check_param(bias, "bias");
  check_param(state.running_mean, "running_mean");
  check_param(state.running_var, "running_var");

  const int n = lay.n, s = lay.s;
  const std::size_t count = static_cast<std::size_t>(n) * s;
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();

  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  auto idx = [c, s](int ni, int ci, int si) {
    return (static_cast<std::size_t>(ni) * c + ci) * s + si;
  };

  if (mode == Mode::kTrain) {
    for (int ci = 0; ci < c; ++ci) {
      double mean = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int si = 0; si < s; ++si) mean += px[idx(ni, ci, si)];
      mean /= static_cast<double>(count);
      double var = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int si = 0; si < s; ++si) {
          const double d = px[idx(ni, ci, si)] - mean;
          var += d * d;
        }
      var /= static_cast<double>(count);
      inv_std[ci] = 1.0 / std::sqrt(var + eps);
      for (int ni = 0; ni < n; ++ni)
        for (int si = 0; si < s; ++si)
          xhat[idx(ni, ci, si)] = (px[idx(ni, ci, si)] - mean) * inv_std[ci];
      // Running buffers are detached state, not graph nodes.
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean;
      rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var;
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (int ci = 0; ci < c; ++ci) {
      inv_std[ci] = 1.0 / std::sqrt(rv[ci] + eps);
      for (int ni = 0; ni < n; ++ni)
        for (int si = 0; si < s; ++si)
          xhat[idx(ni, ci, si)] = (px[idx(ni, ci, si)] - rm[ci]) * inv_std[ci];
    }
  }

  std::vector<double> out(x.size());
  for (int ci = 0; ci < c; ++ci)
    for (int ni = 0; ni < n; ++ni)
      for (int si = 0; si < s; ++si) {
        const std::size_t i = idx(ni, ci, si);
        out[i] = pg[ci] * xhat[i] + pb[ci];
      }

  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  const bool train = mode == Mode::kTrain;
  return detail::make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c,
       s, count, train, idx](TensorNode& self) {
        for (int ci = 0; ci < c; ++ci) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int ni = 0; ni < n; ++ni)
            for (int si = 0; si < s; ++si) {
              const std::size_t i = idx(ni, ci, si);
              sum_dy += self.grad[i];
              sum_dy_xhat += self.grad[i] * xhat[i];
            }
          if (gn->requires_grad) gn->grad[ci] += sum_dy_xhat;
          if (bn->requires_grad) bn->grad[ci] += sum_dy;
          if (xn->requires_grad) {
            const double g = gn->data[ci];
            if (train) {
              const double m_dy = sum_dy / static_cast<double>(count);
              const double m_dy_xhat = sum_dy_xhat / static_cast<double>(count);
              for (int ni = 0; ni < n; ++ni)
                for (int si = 0; si < s; ++si) {
                  const std::size_t i = idx(ni, ci, si);
                  xn->grad[i] += g * inv_std[ci] *
                                 (self.grad[i] - m_dy - xhat[i] * m_dy_xhat);
                }
            } else {
              for (int ni = 0; ni < n; ++ni)
                for (int si = 0; si < s; ++si) {
                  const std::size_t i = idx(ni, ci, si);
                  xn->grad[i] += g * inv_std[ci] * self.grad[i];
                }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace {

Tensor pointwise_conv_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
  const SpatialLayout lay = spatial_layout(x, "pointwise_conv");
  check_rank(w, 2, "pointwise_conv weight");
  const int cout = w.dim(0), cin = w.dim(1);
  if (cin != lay.c) {
    throw ShapeError("pointwise_conv channel mismatch: input " +
                     shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  if (b != nullptr) {
    check_rank(*b, 1, "pointwise_conv bias");
    if (b->dim(0) != cout) {
      throw ShapeError("pointwise_conv bias shape " + shape_str(b->shape()) +
                       " does not match " + std::to_string(cout) + " outputs");
    }
  }
  const int hw = lay.h * lay.w;
  const std::size_t in_per = static_cast<std::size_t>(lay.c) * hw;
  const std::size_t out_per = static_cast<std::size_t>(cout) * hw;
  std::vector<double> out(out_per * lay.n);
  {
    ConstMap wm(w.data().data(), cout, cin);
    for (int ni = 0; ni < lay.n; ++ni) {
      ConstMap xm(x.data().data() + in_per * ni, cin, hw);
      MutMap om(out.data() + out_per * ni, cout, hw);
      om.noalias() = wm * xm;
      if (b != nullptr) {
        om.colwise() +=
            Eigen::Map<const Eigen::VectorXd>(b->data().data(), cout);
      }
    }
  }
  Shape out_shape = lay.batched ? Shape{lay.n, cout, lay.h, lay.w}
                                : Shape{cout, lay.h, lay.w};
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b != nullptr ? b->node() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b != nullptr) parents.push_back(*b);
  return detail::make_op(
      std::move(out_shape), std::move(out), std::move(parents),
      [xn, wn, bn, nb = lay.n, cout, cin, hw, in_per,
       out_per](TensorNode& self) {
        for (int ni = 0; ni < nb; ++ni) {
          ConstMap dy(self.grad.data() + out_per * ni, cout, hw);
          if (xn->requires_grad) {
            ConstMap wm(wn->data.data(), cout, cin);
            MutMap dx(xn->grad.data() + in_per * ni, cin, hw);
            dx.noalias() += wm.transpose() * dy;
          }
          if (wn->requires_grad) {
            ConstMap xs(xn->data.data() + in_per * ni, cin, hw);
            MutMap dw(wn->grad.data(), cout, cin);
            dw.noalias() += dy * xs.transpose();
          }
          if (bn && bn->requires_grad) {
            Eigen::Map<Eigen::VectorXd> db(bn->grad.data(), cout);
            db.noalias() += dy.rowwise().sum();
          }
        }
      });
}

}  // namespace

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  return pointwise_conv_impl(x, w, &b);
}

Tensor pointwise_conv(const Tensor& x, const Tensor& w) {
  return pointwise_conv_impl(x, w, nullptr);
}

namespace {

struct ConvDims {
  int n, cin, h, w, cout, kh, kw, ho, wo, stride, pad;
  bool batched;
};

void im2col(const double* x, const ConvDims& d, double* col) {
  // col is (cin*kh*kw) x (ho*wo)
  const int how = d.ho * d.wo;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row = col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                             static_cast<std::size_t>(ki) * d.kw + kj) *
                                how;
        for (int oi = 0; oi < d.ho; ++oi) {
          const int ii = oi * d.stride + ki - d.pad;
          for (int oj = 0; oj < d.wo; ++oj) {
            const int jj = oj * d.stride + kj - d.pad;
            row[oi * d.wo + oj] =
                (ii >= 0 && ii < d.h && jj >= 0 && jj < d.w)
                    ? x[(static_cast<std::size_t>(c) * d.h + ii) * d.w + jj]
                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* dx) {
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row = col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                                   static_cast<std::size_t>(ki) * d.kw + kj) *
                                      (d.ho * d.wo);
        for (int oi = 0; oi < d.ho; ++oi) {
          const int ii = oi * d.stride + ki - d.pad;
          if (ii < 0 || ii >= d.h) continue;
          for (int oj = 0; oj < d.wo; ++oj) {
            const int jj = oj * d.stride + kj - d.pad;
            if (jj < 0 || jj >= d.w) continue;
            dx[(static_cast<std::size_t>(c) * d.h + ii) * d.w + jj] +=
                row[oi * d.wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

namespace {

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* b,
                   int stride, int padding) {
  const SpatialLayout lay = spatial_layout(x, "conv2d");
  check_rank(w, 4, "conv2d weight");
  if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d padding must be >= 0");
  ConvDims d;
  d.n = lay.n;
  d.cin = lay.c;
  d.h = lay.h;
  d.w = lay.w;
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = padding;
  d.batched = lay.batched;
  if (w.dim(1) != d.cin) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  if (b != nullptr) {
    check_rank(*b, 1, "conv2d bias");
    if (b->dim(0) != d.cout) {
      throw ShapeError("conv2d bias shape " + shape_str(b->shape()) +
                       " does not match " + std::to_string(d.cout) +
                       " outputs");
    }
  }
  d.ho = (d.h + 2 * d.pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * d.pad - d.kw) / stride + 1;
  if (d.h + 2 * d.pad < d.kh || d.w + 2 * d.pad < d.kw) {
    throw ShapeError("conv2d kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }

  const int k = d.cin * d.kh * d.kw;
  const int how = d.ho * d.wo;
  const std::size_t in_per = static_cast<std::size_t>(d.cin) * d.h * d.w;
  const std::size_t out_per = static_cast<std::size_t>(d.cout) * how;
  std::vector<double> out(out_per * d.n);
  std::vector<double> col(static_cast<std::size_t>(k) * how);
  {
    ConstMap wm(w.data().data(), d.cout, k);
    for (int ni = 0; ni < d.n; ++ni) {
      im2col(x.data().data() + in_per * ni, d, col.data());
      ConstMap cm(col.data(), k, how);
      MutMap om(out.data() + out_per * ni, d.cout, how);
      om.noalias() = wm * cm;
      if (b != nullptr) {
        om.colwise() +=
            Eigen::Map<const Eigen::VectorXd>(b->data().data(), d.cout);
      }
    }
  }
  Shape out_shape = d.batched ? Shape{d.n, d.cout, d.ho, d.wo}
                              : Shape{d.cout, d.ho, d.wo};
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b != nullptr ? b->node() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b != nullptr) parents.push_back(*b);
  // The im2col buffer is recomputed from the saved input in backward; this
  // trades a cheap pass for not retaining N copies of it.
  return detail::make_op(
      std::move(out_shape), std::move(out), std::move(parents),
      [xn, wn, bn, d, k, how, in_per, out_per](TensorNode& self) {
        std::vector<double> col(static_cast<std::size_t>(k) * how);
        std::vector<double> dcol;
        if (xn->requires_grad) dcol.resize(col.size());
        for (int ni = 0; ni < d.n; ++ni) {
          ConstMap dy(self.grad.data() + out_per * ni, d.cout, how);
          if (wn->requires_grad) {
            im2col(xn->data.data() + in_per * ni, d, col.data());
            ConstMap cm(col.data(), k, how);
            MutMap dw(wn->grad.data(), d.cout, k);
            dw.noalias() += dy * cm.transpose();
          }
          if (bn && bn->requires_grad) {
            Eigen::Map<Eigen::VectorXd> db(bn->grad.data(), d.cout);
            db.noalias() += dy.rowwise().sum();
          }
          if (xn->requires_grad) {
            ConstMap wm(wn->data.data(), d.cout, k);
            MutMap dc(dcol.data(), k, how);
            dc.noalias() = wm.transpose() * dy;
            col2im_add(dcol.data(), d, xn->grad.data() + in_per * ni);
          }
        }
      });
}

Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
  check_rank(w, 2, "linear weight");
  const bool batched = x.rank() == 2;
  if (!batched) check_rank(x, 1, "linear input");
  const int n = batched ? x.dim(0) : 1;
  const int in = batched ? x.dim(1) : x.dim(0);
  const int out_dim = w.dim(0);
  if (w.dim(1) != in) {
    throw ShapeError("linear shape mismatch: input " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  if (b != nullptr) {
    check_rank(*b, 1, "linear bias");
    if (b->dim(0) != out_dim) {
      throw ShapeError("linear bias shape " + shape_str(b->shape()) +
                       " does not match " + std::to_string(out_dim) +
                       " outputs");
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n) * out_dim);
  {
    ConstMap xm(x.data().data(), n, in);
    ConstMap wm(w.data().data(), out_dim, in);
    MutMap om(out.data(), n, out_dim);
    om.noalias() = xm * wm.transpose();
    if (b != nullptr) {
      om.rowwise() +=
          Eigen::Map<const Eigen::RowVectorXd>(b->data().data(), out_dim);
    }
  }
  Shape out_shape = batched ? Shape{n, out_dim} : Shape{out_dim};
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b != nullptr ? b->node() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b != nullptr) parents.push_back(*b);
  return detail::make_op(
      std::move(out_shape), std::move(out), std::move(parents),
      [xn, wn, bn, n, in, out_dim](TensorNode& self) {
        ConstMap dy(self.grad.data(), n, out_dim);
        if (xn->requires_grad) {
          MutMap dx(xn->grad.data(), n, in);
          ConstMap wm(wn->data.data(), out_dim, in);
          dx.noalias() += dy * wm;
        }
        if (wn->requires_grad) {
          MutMap dw(wn->grad.data(), out_dim, in);
          ConstMap xm(xn->data.data(), n, in);
          dw.noalias() += dy.transpose() * xm;
        }
        if (bn && bn->requires_grad) {
          Eigen::Map<Eigen::VectorXd> db(bn->grad.data(), out_dim);
          db.noalias() += dy.colwise().sum().transpose();
        }
      });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  return conv2d_impl(x, w, &b, stride, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  return conv2d_impl(x, w, nullptr, stride, padding);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return linear_impl(x, w, &b);
}

Tensor linear(const Tensor& x, const Tensor& w) {
  return linear_impl(x, w, nullptr);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor gap(const Tensor& x) {
  const SpatialLayout lay = spatial_layout(x, "gap");
  return band_mean(x, 0, lay.h);
}

Tensor band_mean(const Tensor& x, int row_begin, int row_end) {
  const SpatialLayout lay = spatial_layout(x, "band_mean");
  if (row_begin < 0 || row_end > lay.h || row_begin >= row_end) {
    throw ShapeError("band_mean rows [" + std::to_string(row_begin) + "," +
                     std::to_string(row_end) + ") invalid for height " +
                     std::to_string(lay.h));
  }
  const int band = row_end - row_begin;
  const double inv = 1.0 / (static_cast<double>(band) * lay.w);
  const std::size_t per = static_cast<std::size_t>(lay.c) * lay.h * lay.w;
  std::vector<double> out(static_cast<std::size_t>(lay.n) * lay.c);
  const double* px = x.data().data();
  for (int ni = 0; ni < lay.n; ++ni) {
    for (int ci = 0; ci < lay.c; ++ci) {
      double acc = 0.0;
      const double* ch = px + per * ni +
                         static_cast<std::size_t>(ci) * lay.h * lay.w;
      for (int i = row_begin; i < row_end; ++i)
        for (int j = 0; j < lay.w; ++j) acc += ch[i * lay.w + j];
      out[static_cast<std::size_t>(ni) * lay.c + ci] = acc * inv;
    }
  }
  Shape out_shape = lay.batched ? Shape{lay.n, lay.c} : Shape{lay.c};
  auto xn = x.node();
  return detail::make_op(
      std::move(out_shape), std::move(out), {x},
      [xn, lay, row_begin, row_end, inv, per](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (int ni = 0; ni < lay.n; ++ni) {
          for (int ci = 0; ci < lay.c; ++ci) {
            const double g =
                self.grad[static_cast<std::size_t>(ni) * lay.c + ci] * inv;
            double* ch = xn->grad.data() + per * ni +
                         static_cast<std::size_t>(ci) * lay.h * lay.w;
            for (int i = row_begin; i < row_end; ++i)
              for (int j = 0; j < lay.w; ++j) ch[i * lay.w + j] += g;
          }
        }
      });
}

std::vector<Tensor> stripe_pool(const Tensor& x, int n_stripes) {
  const SpatialLayout lay = spatial_layout(x, "stripe_pool");
  if (n_stripes < 1) throw ConfigError("stripe_pool needs n_stripes >= 1");
  if (lay.h % n_stripes != 0) {
    throw ConfigError("stripe_pool: height " + std::to_string(lay.h) +
                      " not divisible by " + std::to_string(n_stripes) +
                      " stripes");
  }
  const int band = lay.h / n_stripes;
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(n_stripes));
  for (int i = 0; i < n_stripes; ++i) {
    out.push_back(band_mean(x, i * band, (i + 1) * band));
  }
  return out;
}

}  // namespace laga
