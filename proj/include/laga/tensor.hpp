#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "laga/errors.hpp"
#include "laga/rng.hpp"

namespace laga {

enum class Mode { kTrain, kEval };

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

// One node of the computation graph. `backward` reads this node's grad and
// accumulates into the parents' grads; it is only set while grad recording
// is enabled and some parent requires grad.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;
};

// Dense 64-bit tensor, row-major. Value-semantics handle over a shared node:
// copying a Tensor aliases the same storage. Tensors detached from the graph
// (requires_grad false, no parents) are plain immutable values.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  // Leaf that participates in differentiation.
  static Tensor param(Shape shape, std::vector<double> data);
  static Tensor wrap(std::shared_ptr<TensorNode> node);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // In-place mutation is only meaningful for leaves and buffers; graph nodes
  // must be treated as immutable once created.
  std::span<double> mutable_data() { return node_->data; }

  double value() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  std::span<const double> grad() const;
  void zero_grad();

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Thread-local switch for graph recording; evaluation paths disable it to
// skip building backward closures.
class GradMode {
 public:
  static bool enabled();
  static void set(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {
// Factory for differentiable ops. The output requires grad iff recording is
// on and any parent requires grad; only then are parents and the closure
// retained.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward);
}  // namespace detail

// Reverse-mode sweep from a scalar output. Visits recorded ops in reverse
// topological order; leaf grads are valid until the next backward() over a
// graph that reaches them.
void backward(const Tensor& scalar_output);

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);

// Row-wise softmax with per-row max subtraction. Rejects non-finite input.
Tensor softmax_rows(const Tensor& m);

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// y = gamma * x with a learnable 1-element gate.
Tensor scale_by(const Tensor& x, const Tensor& gamma);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);

// Inverted dropout: train mode zeroes entries w.p. p and scales survivors by
// 1/(1-p); eval mode is the identity.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Concatenates feature vectors: all rank-1 -> rank-1, or all rank-2 with a
// shared leading batch dim -> rank-2.
Tensor concat_features(const std::vector<Tensor>& parts);

// Batch slicing: (N,C,H,W) <-> per-sample (C,H,W).
Tensor sample(const Tensor& x, int n);
Tensor stack(const std::vector<Tensor>& samples);

struct BatchNormState {
  Tensor running_mean;  // buffers; never receive gradient
  Tensor running_var;
};

// Channel-axis batch norm over (N,C), (C,H,W) or (N,C,H,W). Train mode uses
// batch statistics and updates the running buffers with `momentum`; eval mode
// uses the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  BatchNormState& state, Mode mode, double momentum = 0.1,
                  double eps = 1e-5);

// 1x1 convolution: w is (C_out, C_in), b is (C_out). The bias-free form is
// for projections that feed straight into batch norm, where a bias is a dead
// parameter.
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor pointwise_conv(const Tensor& x, const Tensor& w);

// KxK convolution via im2col: w is (C_out, C_in, KH, KW), b is (C_out).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Fully connected: x is (N,in) or (in), w is (out,in), b is (out).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w);

// Per-channel spatial mean: (C,H,W) -> (C), (N,C,H,W) -> (N,C).
Tensor gap(const Tensor& x);
// Per-channel mean over rows [row_begin, row_end).
Tensor band_mean(const Tensor& x, int row_begin, int row_end);
// n contiguous equal horizontal bands, top first.
std::vector<Tensor> stripe_pool(const Tensor& x, int n_stripes);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) {
  return subtract(a, b);
}
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

}  // namespace laga
