#include "laga/attention.hpp"

#include <cmath>
#include <utility>

namespace laga {

namespace {

std::vector<double> normal_init(std::size_t n, double stddev, Rng rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

// Kaiming fan-in for the 1x1 projections.
std::vector<double> proj_init(int c_out, int c_in, Rng rng) {
  return normal_init(static_cast<std::size_t>(c_out) * c_in,
                     std::sqrt(2.0 / c_in), std::move(rng));
}

BatchNormState make_bn(ParamStore& store, const std::string& prefix, int c,
                       Tensor& gain, Tensor& bias) {
  gain = store.declare(prefix + ".gain", {c}, std::vector<double>(c, 1.0),
                       true);
  bias = store.declare(prefix + ".bias", {c}, std::vector<double>(c, 0.0),
                       true);
  BatchNormState s;
  s.running_mean = store.declare(prefix + ".running_mean", {c},
                                 std::vector<double>(c, 0.0), false);
  s.running_var = store.declare(prefix + ".running_var", {c},
                                std::vector<double>(c, 1.0), false);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// CAM
// ---------------------------------------------------------------------------

CamParams make_cam_params(ParamStore& store, const std::string& prefix) {
  CamParams p;
  p.gamma = store.declare(prefix + ".gamma", {1}, {0.0}, true);
  return p;
}

namespace {

// gamma * (softmax_rows(K Q^T) V) + x for one (C,H,W) sample, with
// K = Q = V = reshape(x).
Tensor cam_sample(const Tensor& x, const CamParams& p, Tensor* attention) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor kqv = reshape(x, {c, h * w});
  Tensor attn = softmax_rows(matmul(kqv, transpose(kqv)));
  if (attention) *attention = attn;
  Tensor weighted = reshape(matmul(attn, kqv), {c, h, w});
  return add(scale_by(weighted, p.gamma), x);
}

}  // namespace

Tensor cam_forward(const Tensor& input, const CamParams& p) {
  if (input.rank() == 3) return cam_sample(input, p, nullptr);
  if (input.rank() != 4) {
    throw ShapeError("cam_forward expects rank 3 or 4, got shape " +
                     shape_str(input.shape()));
  }
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(input.dim(0)));
  for (int n = 0; n < input.dim(0); ++n) {
    outs.push_back(cam_sample(sample(input, n), p, nullptr));
  }
  return stack(outs);
}

CamTrace cam_forward_traced(const Tensor& input, const CamParams& p) {
  CamTrace t;
  if (input.rank() == 3) {
    t.output = cam_sample(input, p, &t.attention);
    return t;
  }
  std::vector<Tensor> outs;
  for (int n = 0; n < input.dim(0); ++n) {
    outs.push_back(
        cam_sample(sample(input, n), p, n == 0 ? &t.attention : nullptr));
  }
  t.output = stack(outs);
  return t;
}

// ---------------------------------------------------------------------------
// Re-indexing mask
// ---------------------------------------------------------------------------

int ReindexMask::table_rows() const {
  return 2 * (axis == Axis::kHeight ? height : width) - 1;
}

Tensor ReindexMask::tensor() const {
  return Tensor::from_data({height * width, table_rows()}, m);
}

ReindexMask build_reindex(Axis axis, int height, int width) {
  if (height < 1 || width < 1) {
    throw ConfigError("build_reindex needs height, width >= 1");
  }
  ReindexMask mask;
  mask.axis = axis;
  mask.height = height;
  mask.width = width;
  const int l = axis == Axis::kHeight ? height : width;
  const int cols = 2 * l - 1;
  mask.m.assign(static_cast<std::size_t>(height) * width * cols, 0.0);
  for (int h = 0; h < height; ++h) {
    for (int i = 0; i < width; ++i) {
      const int shift = axis == Axis::kHeight ? i - h : h - i;
      if (shift >= -(l - 1) && shift <= l - 1) {
        const std::size_t row = static_cast<std::size_t>(h) * width + i;
        mask.m[row * cols + (shift + l - 1)] = 1.0;
      }
    }
  }
  return mask;
}

Tensor rel_pos_term(const ReindexMask& mask, const Tensor& table,
                    const Tensor& q, const Tensor& v) {
  const int hw = mask.height * mask.width;
  const int rows = mask.table_rows();
  if (table.rank() != 2 || table.dim(0) != rows) {
    throw ShapeError("rel_pos_term table shape " + shape_str(table.shape()) +
                     " does not match " + std::to_string(rows) +
                     " relative shifts");
  }
  const int dk = table.dim(1);
  if (q.rank() != 2 || q.dim(0) != dk || q.dim(1) != hw) {
    throw ShapeError("rel_pos_term query shape " + shape_str(q.shape()) +
                     " does not match (" + std::to_string(dk) + "x" +
                     std::to_string(hw) + ")");
  }
  if (v.rank() != 2 || v.dim(1) != hw) {
    throw ShapeError("rel_pos_term value shape " + shape_str(v.shape()) +
                     " does not span " + std::to_string(hw) + " positions");
  }
  Tensor p = matmul(mask.tensor(), table);          // HW x d_k
  Tensor out = matmul(v, matmul(p, q));             // C x HW
  return reshape(out, {v.dim(0), mask.height, mask.width});
}

// ---------------------------------------------------------------------------
// SAM-RPE
// ---------------------------------------------------------------------------

SamRpeParams make_sam_rpe_params(ParamStore& store, const std::string& prefix,
                                 int channels, int height, int width,
                                 const Rng& init_rng) {
  if (channels % 8 != 0) {
    throw ConfigError("sam_rpe needs channels divisible by 8 (d_k = C/8); got " +
                      std::to_string(channels));
  }
  SamRpeParams p;
  p.channels = channels;
  p.d_k = channels / 8;
  p.height = height;
  p.width = width;

  auto stream = [&](const std::string& name) {
    return init_rng.child(prefix + "." + name);
  };

  p.wk_w = store.declare(prefix + ".w_k.w", {p.d_k, channels},
                         proj_init(p.d_k, channels, stream("w_k.w")), true);
  p.wk_bn = make_bn(store, prefix + ".w_k.bn", p.d_k, p.wk_bn_gain,
                    p.wk_bn_bias);

  p.wq_w = store.declare(prefix + ".w_q.w", {p.d_k, channels},
                         proj_init(p.d_k, channels, stream("w_q.w")), true);
  p.wq_bn = make_bn(store, prefix + ".w_q.bn", p.d_k, p.wq_bn_gain,
                    p.wq_bn_bias);

  p.wv_w = store.declare(prefix + ".w_v.w", {channels, channels},
                         proj_init(channels, channels, stream("w_v.w")), true);
  p.wv_bn = make_bn(store, prefix + ".w_v.bn", channels, p.wv_bn_gain,
                    p.wv_bn_bias);

  p.r_h = store.declare(
      prefix + ".r_h", {2 * height - 1, p.d_k},
      normal_init(static_cast<std::size_t>(2 * height - 1) * p.d_k, 0.01,
                  stream("r_h")),
      true);
  p.r_w = store.declare(
      prefix + ".r_w", {2 * width - 1, p.d_k},
      normal_init(static_cast<std::size_t>(2 * width - 1) * p.d_k, 0.01,
                  stream("r_w")),
      true);

  p.bnh = make_bn(store, prefix + ".bn_h", channels, p.bnh_gain, p.bnh_bias);
  p.bnw = make_bn(store, prefix + ".bn_w", channels, p.bnw_gain, p.bnw_bias);

  p.gamma = store.declare(prefix + ".gamma", {1}, {0.0}, true);

  p.mask_h = build_reindex(Axis::kHeight, height, width);
  p.mask_w = build_reindex(Axis::kWidth, height, width);
  p.mask_h_t = p.mask_h.tensor();
  p.mask_w_t = p.mask_w.tensor();
  return p;
}

namespace {

struct SamPieces {
  Tensor content;  // (N,C,H,W)
  Tensor e_h;      // (N,C,H,W)
  Tensor e_w;
  Tensor attention;  // sample 0
};

SamPieces sam_pieces(const Tensor& x4, SamRpeParams& p, Mode mode) {
  const int n = x4.dim(0), c = x4.dim(1), h = x4.dim(2), w = x4.dim(3);
  if (c != p.channels || h != p.height || w != p.width) {
    throw ShapeError("sam_rpe input " + shape_str(x4.shape()) +
                     " does not match module built for (" +
                     std::to_string(p.channels) + "x" +
                     std::to_string(p.height) + "x" + std::to_string(p.width) +
                     ")");
  }
  const int hw = h * w;

  Tensor keys = relu(batch_norm(pointwise_conv(x4, p.wk_w), p.wk_bn_gain,
                                p.wk_bn_bias, p.wk_bn, mode));
  Tensor queries = relu(batch_norm(pointwise_conv(x4, p.wq_w), p.wq_bn_gain,
                                   p.wq_bn_bias, p.wq_bn, mode));
  Tensor values = relu(batch_norm(pointwise_conv(x4, p.wv_w), p.wv_bn_gain,
                                  p.wv_bn_bias, p.wv_bn, mode));

  Tensor p_h = matmul(p.mask_h_t, p.r_h);  // HW x d_k, shared across samples
  Tensor p_w = matmul(p.mask_w_t, p.r_w);

  SamPieces out;
  std::vector<Tensor> content, eh, ew;
  content.reserve(n);
  eh.reserve(n);
  ew.reserve(n);
  for (int ni = 0; ni < n; ++ni) {
    Tensor k = reshape(sample(keys, ni), {p.d_k, hw});
    Tensor q = reshape(sample(queries, ni), {p.d_k, hw});
    Tensor v = reshape(sample(values, ni), {c, hw});
    Tensor attn = softmax_rows(matmul(transpose(k), q));  // HW x HW
    if (ni == 0) out.attention = attn;
    content.push_back(reshape(matmul(v, attn), {c, h, w}));
    eh.push_back(reshape(matmul(v, matmul(p_h, q)), {c, h, w}));
    ew.push_back(reshape(matmul(v, matmul(p_w, q)), {c, h, w}));
  }
  out.content = stack(content);
  out.e_h = stack(eh);
  out.e_w = stack(ew);
  return out;
}

Tensor sam_combine(const Tensor& x4, SamRpeParams& p, Mode mode,
                   const SamPieces& pieces) {
  Tensor bn_h = batch_norm(pieces.e_h, p.bnh_gain, p.bnh_bias, p.bnh, mode);
  Tensor bn_w = batch_norm(pieces.e_w, p.bnw_gain, p.bnw_bias, p.bnw, mode);
  Tensor attended = add(add(pieces.content, bn_h), bn_w);
  return add(scale_by(attended, p.gamma), x4);
}

}  // namespace

Tensor sam_rpe_forward(const Tensor& input, SamRpeParams& p, Mode mode) {
  const bool batched = input.rank() == 4;
  Tensor x4 = batched ? input
                      : reshape(input, {1, input.dim(0), input.dim(1),
                                        input.dim(2)});
  SamPieces pieces = sam_pieces(x4, p, mode);
  Tensor out = sam_combine(x4, p, mode, pieces);
  if (batched) return out;
  return reshape(out, {input.dim(0), input.dim(1), input.dim(2)});
}

SamRpeTrace sam_rpe_forward_traced(const Tensor& input, SamRpeParams& p,
                                   Mode mode) {
  const bool batched = input.rank() == 4;
  Tensor x4 = batched ? input
                      : reshape(input, {1, input.dim(0), input.dim(1),
                                        input.dim(2)});
  SamPieces pieces = sam_pieces(x4, p, mode);
  SamRpeTrace t;
  t.attention = pieces.attention;
  t.content = sample(pieces.content, 0);
  t.e_h = sample(pieces.e_h, 0);
  t.e_w = sample(pieces.e_w, 0);
  Tensor out = sam_combine(x4, p, mode, pieces);
  t.output = batched ? out
                     : reshape(out, {input.dim(0), input.dim(1), input.dim(2)});
  return t;
}

}  // namespace laga
