#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "laga/attention.hpp"
#include "laga/gradcheck.hpp"
#include "laga/params.hpp"
#include "laga/rng.hpp"

using namespace laga;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                     bool param = false) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return param ? Tensor::param(std::move(shape), std::move(v))
               : Tensor::from_data(std::move(shape), std::move(v));
}

void randomize(Tensor t, Rng& rng, double lo, double hi) {
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
}

// Direct per-entry reference of the channel attention: A_c = softmax(K Q^T)
// row-wise with K = Q = V = reshape(x), output gamma (A_c V) + x.
std::vector<double> cam_oracle(const Tensor& x, double gamma) {
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  const double* e = x.data().data();
  std::vector<double> logits(static_cast<std::size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j)
      for (int p = 0; p < hw; ++p)
        logits[i * c + j] += e[i * hw + p] * e[j * hw + p];
  std::vector<double> attn(logits.size());
  for (int i = 0; i < c; ++i) {
    double mx = logits[i * c];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) {
      attn[i * c + j] = std::exp(logits[i * c + j] - mx);
      denom += attn[i * c + j];
    }
    for (int j = 0; j < c; ++j) attn[i * c + j] /= denom;
  }
  std::vector<double> out(x.size());
  for (int i = 0; i < c; ++i) {
    for (int p = 0; p < hw; ++p) {
      double acc = 0.0;
      for (int j = 0; j < c; ++j) acc += attn[i * c + j] * e[j * hw + p];
      out[i * hw + p] = gamma * acc + e[i * hw + p];
    }
  }
  return out;
}

// Pixelwise 1x1 projection + eval-mode BN + ReLU, by plain loops.
std::vector<double> proj_oracle(const std::vector<double>& x, int c_in, int hw,
                                const Tensor& w, const Tensor& b,
                                const Tensor& gain, const Tensor& bias,
                                const BatchNormState& bn) {
  const int c_out = w.dim(0);
  std::vector<double> y(static_cast<std::size_t>(c_out) * hw, 0.0);
  for (int co = 0; co < c_out; ++co) {
    const double inv = 1.0 / std::sqrt(bn.running_var.data()[co] + 1e-5);
    for (int p = 0; p < hw; ++p) {
      double acc = b.data()[co];
      for (int ci = 0; ci < c_in; ++ci) {
        acc += w.data()[co * c_in + ci] * x[ci * hw + p];
      }
      acc = (acc - bn.running_mean.data()[co]) * inv * gain.data()[co] +
            bias.data()[co];
      y[co * hw + p] = acc > 0 ? acc : 0.0;
    }
  }
  return y;
}

std::vector<double> bn_eval_oracle(const std::vector<double>& x, int c, int hw,
                                   const Tensor& gain, const Tensor& bias,
                                   const BatchNormState& bn) {
  std::vector<double> y(x.size());
  for (int ci = 0; ci < c; ++ci) {
    const double inv = 1.0 / std::sqrt(bn.running_var.data()[ci] + 1e-5);
    for (int p = 0; p < hw; ++p) {
      y[ci * hw + p] = (x[ci * hw + p] - bn.running_mean.data()[ci]) * inv *
                           gain.data()[ci] +
                       bias.data()[ci];
    }
  }
  return y;
}

// Literal re-derivation of the re-indexing rule, kept independent of
// build_reindex.
std::vector<double> mask_oracle(Axis axis, int h, int w) {
  const int l = axis == Axis::kHeight ? h : w;
  std::vector<double> m(static_cast<std::size_t>(h) * w * (2 * l - 1), 0.0);
  for (int hi = 0; hi < h; ++hi) {
    for (int wi = 0; wi < w; ++wi) {
      const int shift = axis == Axis::kHeight ? wi - hi : hi - wi;
      if (std::abs(shift) <= l - 1) {
        m[(hi * w + wi) * (2 * l - 1) + shift + l - 1] = 1.0;
      }
    }
  }
  return m;
}

// Full per-entry reference of the spatial module in eval mode.
std::vector<double> sam_oracle(const Tensor& x, const SamRpeParams& p) {
  const int c = p.channels, h = p.height, w = p.width, hw = h * w, dk = p.d_k;
  const std::vector<double> input(x.data().begin(), x.data().end());
  const std::vector<double> k =
      proj_oracle(input, c, hw, p.wk_w, p.wk_b, p.wk_bn_gain, p.wk_bn_bias,
                  p.wk_bn);
  const std::vector<double> q =
      proj_oracle(input, c, hw, p.wq_w, p.wq_b, p.wq_bn_gain, p.wq_bn_bias,
                  p.wq_bn);
  const std::vector<double> v =
      proj_oracle(input, c, hw, p.wv_w, p.wv_b, p.wv_bn_gain, p.wv_bn_bias,
                  p.wv_bn);

  std::vector<double> logits(static_cast<std::size_t>(hw) * hw, 0.0);
  for (int a = 0; a < hw; ++a)
    for (int bq = 0; bq < hw; ++bq)
      for (int d = 0; d < dk; ++d)
        logits[a * hw + bq] += k[d * hw + a] * q[d * hw + bq];
  std::vector<double> attn(logits.size());
  for (int a = 0; a < hw; ++a) {
    double mx = logits[a * hw];
    for (int bq = 1; bq < hw; ++bq) mx = std::max(mx, logits[a * hw + bq]);
    double denom = 0.0;
    for (int bq = 0; bq < hw; ++bq) {
      attn[a * hw + bq] = std::exp(logits[a * hw + bq] - mx);
      denom += attn[a * hw + bq];
    }
    for (int bq = 0; bq < hw; ++bq) attn[a * hw + bq] /= denom;
  }
  std::vector<double> content(static_cast<std::size_t>(c) * hw, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int bq = 0; bq < hw; ++bq)
      for (int a = 0; a < hw; ++a)
        content[ci * hw + bq] += v[ci * hw + a] * attn[a * hw + bq];

  auto positional = [&](Axis axis, const Tensor& table) {
    const int l = axis == Axis::kHeight ? h : w;
    const std::vector<double> mask = mask_oracle(axis, h, w);
    std::vector<double> pe(static_cast<std::size_t>(hw) * dk, 0.0);
    for (int pos = 0; pos < hw; ++pos)
      for (int r = 0; r < 2 * l - 1; ++r)
        for (int d = 0; d < dk; ++d)
          pe[pos * dk + d] +=
              mask[pos * (2 * l - 1) + r] * table.data()[r * dk + d];
    std::vector<double> pq(static_cast<std::size_t>(hw) * hw, 0.0);
    for (int a = 0; a < hw; ++a)
      for (int bq = 0; bq < hw; ++bq)
        for (int d = 0; d < dk; ++d)
          pq[a * hw + bq] += pe[a * dk + d] * q[d * hw + bq];
    std::vector<double> e(static_cast<std::size_t>(c) * hw, 0.0);
    for (int ci = 0; ci < c; ++ci)
      for (int bq = 0; bq < hw; ++bq)
        for (int a = 0; a < hw; ++a)
          e[ci * hw + bq] += v[ci * hw + a] * pq[a * hw + bq];
    return e;
  };

  const std::vector<double> e_h = bn_eval_oracle(
      positional(Axis::kHeight, p.r_h), c, hw, p.bnh_gain, p.bnh_bias, p.bnh);
  const std::vector<double> e_w = bn_eval_oracle(
      positional(Axis::kWidth, p.r_w), c, hw, p.bnw_gain, p.bnw_bias, p.bnw);

  const double gamma = p.gamma.data()[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = gamma * (content[i] + e_h[i] + e_w[i]) + input[i];
  }
  return out;
}

// Applies a pixel permutation to a (C,H,W) sample: out[:, perm[p]] = in[:, p].
Tensor permute_pixels(const Tensor& x, const std::vector<int>& perm) {
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> out(x.size());
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p)
      out[ci * hw + perm[p]] = x.data()[ci * hw + p];
  return Tensor::from_data(x.shape(), std::move(out));
}

SamRpeParams fresh_sam(ParamStore& store, int c, int h, int w,
                       std::uint64_t seed,
                       const std::string& prefix = "sam.t") {
  return make_sam_rpe_params(store, prefix, c, h, w, Rng(seed).child("init"));
}

}  // namespace

TEST_CASE("cam with a zero gate returns its input bit-exactly") {
  Rng rng(31);
  ParamStore store;
  CamParams p = make_cam_params(store, "cam.t");
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 3, 2}, rng, -2.0, 2.0);
    Tensor y = cam_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(y.data()[i] == x.data()[i]);
    }
  }
}

TEST_CASE("cam symmetric two-channel case") {
  ParamStore store;
  CamParams p = make_cam_params(store, "cam.t");
  p.gamma.mutable_data()[0] = 1.0;
  Tensor x = Tensor::from_data({2, 1, 1}, {1.0, 1.0});
  CamTrace t = cam_forward_traced(x, p);
  for (double v : t.attention.data()) {
    CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  }
  CHECK(t.output.data()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(t.output.data()[1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("cam matches the per-entry loop oracle") {
  Rng rng(32);
  ParamStore store;
  CamParams p = make_cam_params(store, "cam.t");
  p.gamma.mutable_data()[0] = 0.7;
  Tensor x = random_tensor({4, 3, 2}, rng);
  Tensor y = cam_forward(x, p);
  const std::vector<double> expect = cam_oracle(x, 0.7);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(y.data()[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("cam attention is row-stochastic C x C") {
  Rng rng(33);
  ParamStore store;
  CamParams p = make_cam_params(store, "cam.t");
  for (int c : {8, 16, 32}) {
    for (int trial = 0; trial < 3; ++trial) {
      const int h = 1 + static_cast<int>(rng.index(6));
      const int w = 1 + static_cast<int>(rng.index(6));
      Tensor x = random_tensor({c, h, w}, rng);
      CamTrace t = cam_forward_traced(x, p);
      REQUIRE(t.attention.shape() == Shape{c, c});
      for (int i = 0; i < c; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += t.attention.at({i, j});
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("build_reindex analytic cases") {
  // H=2, W=1: shift order (-1, 0, +1)
  ReindexMask m = build_reindex(Axis::kHeight, 2, 1);
  CHECK(m.m == std::vector<double>{0, 1, 0, 1, 0, 0});

  // H=2, W=2: shifts (0,0)=0, (0,1)=+1, (1,0)=-1, (1,1)=0
  m = build_reindex(Axis::kHeight, 2, 2);
  CHECK(m.m ==
        std::vector<double>{0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0});

  // H=1, W=3: the shift table only holds 0, so i>0 rows are all zero
  m = build_reindex(Axis::kHeight, 1, 3);
  CHECK(m.m == std::vector<double>{1, 0, 0});
}

TEST_CASE("build_reindex rows have at most one unit entry") {
  Rng rng(34);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 1 + static_cast<int>(rng.index(6));
    const int w = 1 + static_cast<int>(rng.index(6));
    const Axis axis = trial % 2 == 0 ? Axis::kHeight : Axis::kWidth;
    ReindexMask m = build_reindex(axis, h, w);
    CHECK(m.m == mask_oracle(axis, h, w));
    const int cols = m.table_rows();
    for (int p = 0; p < h * w; ++p) {
      int nonzero = 0;
      for (int r = 0; r < cols; ++r) {
        const double v = m.m[p * cols + r];
        CHECK((v == 0.0 || v == 1.0));
        if (v != 0.0) ++nonzero;
      }
      CHECK(nonzero <= 1);
    }
  }
}

TEST_CASE("rel_pos_term zero table and 1x1 closed form") {
  ReindexMask mask = build_reindex(Axis::kHeight, 3, 2);
  Tensor table = Tensor::zeros({5, 2});
  Rng rng(35);
  Tensor q = random_tensor({2, 6}, rng);
  Tensor v = random_tensor({4, 6}, rng);
  Tensor out = rel_pos_term(mask, table, q, v);
  REQUIRE(out.shape() == Shape{4, 3, 2});
  for (double x : out.data()) CHECK(x == 0.0);

  ReindexMask unit = build_reindex(Axis::kHeight, 1, 1);
  Tensor t1 = Tensor::from_data({1, 3}, {0.5, -1.0, 2.0});
  Tensor q1 = Tensor::from_data({3, 1}, {1.0, 2.0, 3.0});
  Tensor v1 = Tensor::from_data({2, 1}, {4.0, -3.0});
  Tensor o1 = rel_pos_term(unit, t1, q1, v1);
  const double scalar = 0.5 * 1.0 - 1.0 * 2.0 + 2.0 * 3.0;
  CHECK(o1.at({0, 0, 0}) == doctest::Approx(4.0 * scalar).epsilon(1e-12));
  CHECK(o1.at({1, 0, 0}) == doctest::Approx(-3.0 * scalar).epsilon(1e-12));
}

TEST_CASE("rel_pos_term matches the loop oracle") {
  Rng rng(36);
  const int h = 3, w = 2, hw = 6, c = 8, dk = 2;
  ReindexMask mask = build_reindex(Axis::kHeight, h, w);
  Tensor table = random_tensor({2 * h - 1, dk}, rng);
  Tensor q = random_tensor({dk, hw}, rng);
  Tensor v = random_tensor({c, hw}, rng);
  Tensor out = rel_pos_term(mask, table, q, v);

  for (int ci = 0; ci < c; ++ci) {
    for (int pos = 0; pos < hw; ++pos) {
      double acc = 0.0;
      for (int a = 0; a < hw; ++a) {
        double pq = 0.0;
        for (int d = 0; d < dk; ++d) {
          double pe = 0.0;
          for (int r = 0; r < 2 * h - 1; ++r) {
            pe += mask.m[a * (2 * h - 1) + r] * table.at({r, d});
          }
          pq += pe * q.at({d, pos});
        }
        acc += v.at({ci, a}) * pq;
      }
      CHECK(std::abs(out.at({ci, pos / w, pos % w}) - acc) < 1e-12);
    }
  }
}

TEST_CASE("sam_rpe with a zero gate returns its input bit-exactly") {
  Rng rng(37);
  ParamStore store;
  SamRpeParams p = fresh_sam(store, 8, 3, 2, 900);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({8, 3, 2}, rng, -2.0, 2.0);
    Tensor y = sam_rpe_forward(x, p, Mode::kEval);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(y.data()[i] == x.data()[i]);
    }
  }
}

TEST_CASE("sam_rpe internal shapes") {
  ParamStore store;
  SamRpeParams p = fresh_sam(store, 16, 4, 2, 901);
  CHECK(p.d_k == 2);
  Rng rng(38);
  Tensor x = random_tensor({16, 4, 2}, rng);
  SamRpeTrace t = sam_rpe_forward_traced(x, p, Mode::kEval);
  CHECK(t.attention.shape() == Shape{8, 8});
  CHECK(t.e_h.shape() == Shape{16, 4, 2});
  CHECK(t.e_w.shape() == Shape{16, 4, 2});
  CHECK(t.output.shape() == Shape{16, 4, 2});
}

TEST_CASE("sam_rpe rejects channel counts not divisible by 8") {
  ParamStore store;
  try {
    make_sam_rpe_params(store, "sam.bad", 12, 3, 2, Rng(1));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("d_k = C/8") != std::string::npos);
  }
}

TEST_CASE("sam_rpe matches the full loop oracle in eval mode") {
  Rng rng(39);
  ParamStore store;
  SamRpeParams p = fresh_sam(store, 8, 3, 2, 902);
  // exercise every parameter away from its init
  randomize(p.wk_b, rng, -0.3, 0.3);
  randomize(p.wq_b, rng, -0.3, 0.3);
  randomize(p.wv_b, rng, -0.3, 0.3);
  randomize(p.wk_bn_gain, rng, 0.5, 1.5);
  randomize(p.wq_bn_gain, rng, 0.5, 1.5);
  randomize(p.wv_bn_gain, rng, 0.5, 1.5);
  randomize(p.wk_bn_bias, rng, -0.2, 0.2);
  randomize(p.wq_bn_bias, rng, -0.2, 0.2);
  randomize(p.wv_bn_bias, rng, -0.2, 0.2);
  randomize(p.r_h, rng, -0.8, 0.8);
  randomize(p.r_w, rng, -0.8, 0.8);
  randomize(p.bnh_gain, rng, 0.5, 1.5);
  randomize(p.bnw_gain, rng, 0.5, 1.5);
  randomize(p.bnh_bias, rng, -0.2, 0.2);
  randomize(p.bnw_bias, rng, -0.2, 0.2);
  randomize(p.bnh.running_mean, rng, -0.2, 0.2);
  randomize(p.bnw.running_mean, rng, -0.2, 0.2);
  randomize(p.bnh.running_var, rng, 0.5, 1.5);
  randomize(p.bnw.running_var, rng, 0.5, 1.5);
  p.gamma.mutable_data()[0] = 0.5;

  Tensor x = random_tensor({8, 3, 2}, rng);
  Tensor y = sam_rpe_forward(x, p, Mode::kEval);
  const std::vector<double> expect = sam_oracle(x, p);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(y.data()[i] - expect[i]) < 1e-10);
  }
}

TEST_CASE("sam_rpe attention is row-stochastic HW x HW") {
  Rng rng(40);
  for (int c : {8, 16, 32}) {
    ParamStore store;
    const int h = 1 + static_cast<int>(rng.index(6));
    const int w = 1 + static_cast<int>(rng.index(6));
    SamRpeParams p = fresh_sam(store, c, h, w, 903 + c);
    Tensor x = random_tensor({c, h, w}, rng);
    SamRpeTrace t = sam_rpe_forward_traced(x, p, Mode::kEval);
    REQUIRE(t.attention.shape() == Shape{h * w, h * w});
    for (int i = 0; i < h * w; ++i) {
      double s = 0.0;
      for (int j = 0; j < h * w; ++j) s += t.attention.at({i, j});
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("content term is equivariant to pixel shuffles; positional term "
          "breaks it") {
  Rng rng(41);
  const int c = 8, h = 3, w = 2, hw = 6;
  ParamStore store;
  SamRpeParams p = fresh_sam(store, c, h, w, 904);
  p.gamma.mutable_data()[0] = 1.0;
  std::fill(p.r_h.mutable_data().begin(), p.r_h.mutable_data().end(), 0.0);
  std::fill(p.r_w.mutable_data().begin(), p.r_w.mutable_data().end(), 0.0);

  Tensor x = random_tensor({c, h, w}, rng);
  SamRpeTrace base = sam_rpe_forward_traced(x, p, Mode::kEval);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> perm(hw);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor xp = permute_pixels(x, perm);
    SamRpeTrace shuffled = sam_rpe_forward_traced(xp, p, Mode::kEval);
    Tensor expect = permute_pixels(base.content, perm);
    double worst = 0.0;
    for (std::size_t i = 0; i < expect.size(); ++i) {
      worst = std::max(
          worst, std::abs(shuffled.content.data()[i] - expect.data()[i]));
    }
    CHECK(worst < 1e-9);
  }

  // restore random tables: a row swap must now change the output
  randomize(p.r_h, rng, -0.5, 0.5);
  randomize(p.r_w, rng, -0.5, 0.5);
  std::vector<int> swap_rows(hw);
  std::iota(swap_rows.begin(), swap_rows.end(), 0);
  for (int j = 0; j < w; ++j) std::swap(swap_rows[j], swap_rows[w + j]);
  Tensor xs = permute_pixels(x, swap_rows);
  Tensor full_base = sam_rpe_forward(x, p, Mode::kEval);
  Tensor full_swapped = sam_rpe_forward(xs, p, Mode::kEval);
  Tensor expect = permute_pixels(full_base, swap_rows);
  double worst = 0.0;
  for (std::size_t i = 0; i < expect.size(); ++i) {
    worst =
        std::max(worst, std::abs(full_swapped.data()[i] - expect.data()[i]));
  }
  CHECK(worst > 1e-6);
}

TEST_CASE("cam gradients pass the finite-difference check") {
  Rng rng(42);
  ParamStore store;
  CamParams p = make_cam_params(store, "cam.t");
  p.gamma.mutable_data()[0] = 0.4;
  Tensor x = random_tensor({4, 3, 2}, rng, -1, 1, true);
  Tensor weights = random_tensor({24, 1}, rng);
  auto f = [&](const std::vector<Tensor>& params) {
    Tensor y = reshape(cam_forward(params[0], p), {1, 24});
    return sum(matmul(y, weights));
  };
  CHECK(grad_check(f, {x, p.gamma}) < 1e-4);
}

TEST_CASE("sam gradients pass the finite-difference check") {
  Rng rng(43);
  ParamStore store;
  SamRpeParams p = fresh_sam(store, 8, 3, 2, 905);
  p.gamma.mutable_data()[0] = 0.7;
  Tensor x = random_tensor({8, 3, 2}, rng, -1, 1, true);
  Tensor weights = random_tensor({48, 1}, rng);
  auto f = [&](const std::vector<Tensor>& params) {
    Tensor y = reshape(sam_rpe_forward(params[0], p, Mode::kTrain), {1, 48});
    return sum(matmul(y, weights));
  };
  std::vector<Tensor> params = {
      x,            p.wk_w, p.wk_b, p.wk_bn_gain, p.wk_bn_bias,
      p.wq_w,       p.wq_b, p.wq_bn_gain, p.wq_bn_bias,
      p.wv_w,       p.wv_b, p.wv_bn_gain, p.wv_bn_bias,
      p.r_h,        p.r_w,  p.bnh_gain,   p.bnh_bias,
      p.bnw_gain,   p.bnw_bias, p.gamma};
  CHECK(grad_check(f, params) < 1e-4);
}
