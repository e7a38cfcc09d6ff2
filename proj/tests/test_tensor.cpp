#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "laga/checkpoint.hpp"
#include "laga/gradcheck.hpp"
#include "laga/rng.hpp"
#include "laga/tensor.hpp"

using namespace laga;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                     bool param = false) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return param ? Tensor::param(std::move(shape), std::move(v))
               : Tensor::from_data(std::move(shape), std::move(v));
}

// Naive triple-loop reference for C = A * B.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l)
      for (int j = 0; j < n; ++j)
        c[i * n + j] += a.at({i, l}) * b.at({l, j});
  return c;
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(11);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor prod = matmul(eye, b);
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(prod.data()[i] == b.data()[i]);
  }

  Tensor two = Tensor::from_data({1, 1}, {2});
  Tensor three = Tensor::from_data({1, 1}, {3});
  CHECK(matmul(two, three).value() == 6.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(12);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5, 3}, rng);
  Tensor c = matmul(a, b);
  const std::vector<double> expect = matmul_oracle(a, b);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(c.data()[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
  Tensor a = Tensor::zeros({4, 5});
  Tensor b = Tensor::zeros({6, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(4x5)") != std::string::npos);
    CHECK(msg.find("(6x3)") != std::string::npos);
  }
}

TEST_CASE("softmax_rows closed forms") {
  Tensor uniform = softmax_rows(Tensor::zeros({1, 4}));
  for (double v : uniform.data()) {
    CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }

  Tensor single = softmax_rows(Tensor::from_data({3, 1}, {-5.0, 0.0, 9.0}));
  for (double v : single.data()) CHECK(v == 1.0);

  Tensor ln2 = Tensor::from_data({1, 2}, {0.0, std::log(2.0)});
  Tensor y = softmax_rows(ln2);
  CHECK(y.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax_rows rows sum to one across the full finite range") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor m = random_tensor({4, 6}, rng, -700.0, 700.0);
    Tensor y = softmax_rows(m);
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 6; ++j) s += y.at({i, j});
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax_rows rejects non-finite input") {
  Tensor bad = Tensor::from_data({1, 2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(softmax_rows(bad), NumericError);
}

TEST_CASE("batch_norm eval with unit running stats is the identity") {
  Rng rng(14);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor gain = Tensor::from_data({3}, {1, 1, 1});
  Tensor bias = Tensor::zeros({3});
  BatchNormState state{Tensor::zeros({3}), Tensor::from_data({3}, {1, 1, 1})};
  Tensor y = batch_norm(x, gain, bias, state, Mode::kEval);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("batch_norm train on constant channels returns the bias") {
  Tensor x = Tensor::from_data({2, 2, 2, 2},
                               {5, 5, 5, 5, -3, -3, -3, -3,
                                5, 5, 5, 5, -3, -3, -3, -3});
  Tensor gain = Tensor::from_data({2}, {2.0, 0.5});
  Tensor bias = Tensor::from_data({2}, {0.25, -1.5});
  BatchNormState state{Tensor::zeros({2}), Tensor::from_data({2}, {1, 1})};
  Tensor y = batch_norm(x, gain, bias, state, Mode::kTrain);
  for (int n = 0; n < 2; ++n) {
    for (int s = 0; s < 4; ++s) {
      CHECK(y.data()[n * 8 + s] == doctest::Approx(0.25).epsilon(1e-12));
      CHECK(y.data()[n * 8 + 4 + s] == doctest::Approx(-1.5).epsilon(1e-12));
    }
  }
}

TEST_CASE("batch_norm train output moments match gain and bias") {
  Rng rng(15);
  Tensor x = random_tensor({8, 3, 4, 5}, rng, -2.0, 2.0);
  Tensor gain = Tensor::from_data({3}, {1.5, 0.7, 2.2});
  Tensor bias = Tensor::from_data({3}, {-0.3, 0.0, 1.1});
  BatchNormState state{Tensor::zeros({3}), Tensor::from_data({3}, {1, 1, 1})};
  Tensor y = batch_norm(x, gain, bias, state, Mode::kTrain);
  const int n = 8, c = 3, s = 20;
  for (int ci = 0; ci < c; ++ci) {
    double mean = 0.0;
    for (int ni = 0; ni < n; ++ni)
      for (int si = 0; si < s; ++si) mean += y.data()[(ni * c + ci) * s + si];
    mean /= n * s;
    double var = 0.0;
    for (int ni = 0; ni < n; ++ni)
      for (int si = 0; si < s; ++si) {
        const double d = y.data()[(ni * c + ci) * s + si] - mean;
        var += d * d;
      }
    var /= n * s;
    CHECK(std::abs(mean - bias.data()[ci]) < 1e-6);
    CHECK(std::abs(std::sqrt(var) - gain.data()[ci]) < 1e-4);
  }
}

TEST_CASE("batch_norm rejects channel mismatch") {
  Tensor x = Tensor::zeros({2, 3, 2, 2});
  Tensor gain = Tensor::from_data({4}, {1, 1, 1, 1});
  Tensor bias = Tensor::zeros({4});
  BatchNormState state{Tensor::zeros({4}), Tensor::from_data({4}, {1, 1, 1, 1})};
  CHECK_THROWS_AS(batch_norm(x, gain, bias, state, Mode::kTrain), ShapeError);
}

TEST_CASE("pointwise_conv identity weights pass the input through") {
  Rng rng(16);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::zeros({2});
  Tensor y = pointwise_conv(x, w, b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
  }
}

TEST_CASE("pointwise_conv sums channels per pixel") {
  std::vector<double> data(2 * 5 * 6, 0.0);
  data[0 * 30 + 3 * 6 + 4] = 3.0;  // channel 0, pixel (3,4)
  data[1 * 30 + 3 * 6 + 4] = 4.0;
  Tensor x = Tensor::from_data({2, 5, 6}, std::move(data));
  Tensor w = Tensor::from_data({1, 2}, {1, 1});
  Tensor b = Tensor::zeros({1});
  Tensor y = pointwise_conv(x, w, b);
  CHECK(y.at({0, 3, 4}) == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("pointwise_conv equals matmul over flattened pixels") {
  Rng rng(17);
  Tensor x = random_tensor({5, 3, 4}, rng);
  Tensor w = random_tensor({2, 5}, rng);
  Tensor b = random_tensor({2}, rng);
  Tensor y = pointwise_conv(x, w, b);
  Tensor flat = matmul(w, reshape(x, {5, 12}));
  for (int co = 0; co < 2; ++co) {
    for (int p = 0; p < 12; ++p) {
      CHECK(std::abs(y.data()[co * 12 + p] -
                     (flat.data()[co * 12 + p] + b.data()[co])) < 1e-12);
    }
  }
}

TEST_CASE("activations") {
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor lr = leaky_relu(x, 0.01);
  CHECK(lr.data()[0] == doctest::Approx(-0.01).epsilon(1e-15));
  CHECK(lr.data()[1] == 0.0);
  CHECK(lr.data()[2] == 2.0);
  Tensor r = relu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[2] == 2.0);
}

TEST_CASE("dropout p=0 is the identity in both modes") {
  Rng rng(18);
  Tensor x = random_tensor({100}, rng);
  Rng d1 = rng.child("d1");
  Tensor train = dropout(x, 0.0, Mode::kTrain, d1);
  Tensor eval = dropout(x, 0.0, Mode::kEval, d1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(train.data()[i] == x.data()[i]);
    CHECK(eval.data()[i] == x.data()[i]);
  }
}

TEST_CASE("dropout keeps the mean within binomial bounds") {
  Tensor ones = Tensor::full({100000}, 1.0);
  Rng rng(19);
  Tensor y = dropout(ones, 0.5, Mode::kTrain, rng);
  double mean = 0.0;
  for (double v : y.data()) mean += v;
  mean /= static_cast<double>(y.size());
  // survivors are 2*Bernoulli(1/2): sd of the mean is 1/sqrt(n)
  CHECK(std::abs(mean - 1.0) < 3.0 / std::sqrt(100000.0));
}

TEST_CASE("dropout rejects p outside [0,1) and is seed-reproducible") {
  Tensor x = Tensor::full({10}, 1.0);
  Rng rng(20);
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::kTrain, rng), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::kTrain, rng), ConfigError);

  Rng a(21), b(21);
  Tensor ya = dropout(x, 0.5, Mode::kTrain, a);
  Tensor yb = dropout(x, 0.5, Mode::kTrain, b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(ya.data()[i] == yb.data()[i]);
  }
}

TEST_CASE("grad_check on x^2 and on a constant function") {
  auto square = [](const std::vector<Tensor>& p) {
    return sum(scale_by(p[0], p[0]));
  };
  Tensor x = Tensor::param({1}, {3.0});
  CHECK(grad_check(square, {x}) < 1e-7);
  Tensor out = square({x});
  backward(out);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));

  // sum of a row softmax is constant, so the gradient vanishes
  Rng rng(22);
  Tensor m = random_tensor({3, 4}, rng, -1, 1, true);
  auto f = [](const std::vector<Tensor>& p) { return sum(softmax_rows(p[0])); };
  Tensor y = f({m});
  backward(y);
  for (double g : m.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("grad_check rejects non-scalar outputs") {
  Tensor x = Tensor::param({2}, {1.0, 2.0});
  auto f = [](const std::vector<Tensor>& p) { return relu(p[0]); };
  CHECK_THROWS_AS(grad_check(f, {x}), UsageError);
}

TEST_CASE("gradients of the matrix and elementwise ops") {
  Rng rng(23);
  Tensor a = random_tensor({3, 4}, rng, -1, 1, true);
  Tensor b = random_tensor({4, 2}, rng, -1, 1, true);
  auto f_mm = [](const std::vector<Tensor>& p) {
    return sum(matmul(p[0], p[1]));
  };
  CHECK(grad_check(f_mm, {a, b}) < 1e-6);

  Tensor m = random_tensor({3, 5}, rng, -1, 1, true);
  Tensor weights = random_tensor({5, 2}, rng);
  auto f_soft = [&weights](const std::vector<Tensor>& p) {
    return sum(matmul(softmax_rows(p[0]), weights));
  };
  CHECK(grad_check(f_soft, {m}) < 1e-5);

  Tensor x = random_tensor({2, 3, 4}, rng, -1, 1, true);
  auto f_mix = [](const std::vector<Tensor>& p) {
    Tensor t = leaky_relu(p[0], 0.1);
    return mean_all(add(t, scale(p[0], 0.5)));
  };
  CHECK(grad_check(f_mix, {x}) < 1e-6);

  Tensor g = Tensor::param({1}, {0.7});
  auto f_gate = [&](const std::vector<Tensor>& p) {
    return sum(scale_by(p[0], p[1]));
  };
  CHECK(grad_check(f_gate, {x, g}) < 1e-6);

  auto f_trans = [](const std::vector<Tensor>& p) {
    return sum(transpose(matmul(p[0], p[1])));
  };
  CHECK(grad_check(f_trans, {a, b}) < 1e-6);
}

TEST_CASE("gradients of reshaping, stacking and pooling") {
  Rng rng(24);
  Tensor x = random_tensor({2, 3, 4, 2}, rng, -1, 1, true);
  auto f_pool = [](const std::vector<Tensor>& p) {
    Tensor g1 = gap(p[0]);
    std::vector<Tensor> stripes = stripe_pool(p[0], 2);
    return sum(concat_features({g1, stripes[0], stripes[1]}));
  };
  CHECK(grad_check(f_pool, {x}) < 1e-6);

  auto f_slice = [](const std::vector<Tensor>& p) {
    Tensor s0 = sample(p[0], 0);
    Tensor s1 = sample(p[0], 1);
    return sum(stack({s1, s0, s1}));
  };
  CHECK(grad_check(f_slice, {x}) < 1e-6);

  auto f_reshape = [](const std::vector<Tensor>& p) {
    return sum(reshape(p[0], {6, 8}));
  };
  CHECK(grad_check(f_reshape, {x}) < 1e-6);
}

TEST_CASE("gradients of batch_norm in both modes") {
  Rng rng(25);
  Tensor x = random_tensor({3, 2, 2, 3}, rng, -1, 1, true);
  Tensor gain = Tensor::param({2}, {1.2, 0.8});
  Tensor bias = Tensor::param({2}, {0.1, -0.2});
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    auto f = [&, mode](const std::vector<Tensor>& p) {
      BatchNormState state{Tensor::zeros({2}),
                           Tensor::from_data({2}, {1.0, 1.0})};
      return sum(relu(batch_norm(p[0], p[1], p[2], state, mode)));
    };
    CHECK(grad_check(f, {x, gain, bias}) < 1e-4);
  }
}

TEST_CASE("gradients of the convolutions and linear layers") {
  Rng rng(26);
  Tensor x = random_tensor({2, 3, 5, 4}, rng, -1, 1, true);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5, true);
  Tensor b = random_tensor({4}, rng, -0.5, 0.5, true);
  for (int stride : {1, 2}) {
    auto f = [stride](const std::vector<Tensor>& p) {
      return sum(conv2d(p[0], p[1], p[2], stride, 1));
    };
    CHECK(grad_check(f, {x, w, b}) < 1e-5);
  }

  Tensor pw = random_tensor({2, 3}, rng, -1, 1, true);
  Tensor pb = random_tensor({2}, rng, -1, 1, true);
  auto f_pw = [](const std::vector<Tensor>& p) {
    return sum(pointwise_conv(p[0], p[1], p[2]));
  };
  CHECK(grad_check(f_pw, {x, pw, pb}) < 1e-5);

  Tensor xin = random_tensor({4, 6}, rng, -1, 1, true);
  Tensor lw = random_tensor({3, 6}, rng, -1, 1, true);
  Tensor lb = random_tensor({3}, rng, -1, 1, true);
  auto f_lin = [](const std::vector<Tensor>& p) {
    return mean_all(leaky_relu(linear(p[0], p[1], p[2]), 0.05));
  };
  CHECK(grad_check(f_lin, {xin, lw, lb}) < 1e-5);
}

TEST_CASE("gradient of dropout with a pinned seed") {
  Rng rng(27);
  Tensor x = random_tensor({40}, rng, 0.5, 1.5, true);
  auto f = [](const std::vector<Tensor>& p) {
    Rng local(99);
    return sum(dropout(p[0], 0.3, Mode::kTrain, local));
  };
  CHECK(grad_check(f, {x}) < 1e-6);
}

TEST_CASE("conv2d matches a direct loop oracle") {
  Rng rng(28);
  Tensor x = random_tensor({2, 6, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  for (int stride : {1, 2}) {
    Tensor y = conv2d(x, w, b, stride, 1);
    const int ho = y.dim(1), wo = y.dim(2);
    for (int co = 0; co < 3; ++co) {
      for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j) {
          double acc = b.at({co});
          for (int ci = 0; ci < 2; ++ci) {
            for (int ki = 0; ki < 3; ++ki) {
              for (int kj = 0; kj < 3; ++kj) {
                const int ii = i * stride + ki - 1;
                const int jj = j * stride + kj - 1;
                if (ii < 0 || ii >= 6 || jj < 0 || jj >= 5) continue;
                acc += x.at({ci, ii, jj}) * w.at({co, ci, ki, kj});
              }
            }
          }
          CHECK(std::abs(y.at({co, i, j}) - acc) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("fixed rng seed replays bit-identically") {
  Rng a(4242), b(4242);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  Rng c = Rng(4242).child("x").child(7);
  Rng d = Rng(4242).child("x").child(7);
  for (int i = 0; i < 100; ++i) {
    CHECK(c.uniform() == d.uniform());
    CHECK(c.normal() == d.normal());
  }
}

TEST_CASE("checkpoint round trip preserves names, shapes and bits") {
  const auto path = std::filesystem::temp_directory_path() /
                    "laga_test_ckpt.laga";
  std::vector<NamedTensor> tensors;
  tensors.push_back({"cam.c3.gamma", {1}, {0.0}});
  tensors.push_back({"trunk.stem.conv.w", {2, 3}, {1, -2, 3.5, -4.25, 5, 0.1}});
  tensors.push_back({"head.g.reduce.fc.b", {4}, {1e-300, -1e300, 0.0, 42.0}});
  save_checkpoint(path, tensors);
  const std::vector<NamedTensor> loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(loaded[i].name == tensors[i].name);
    CHECK(loaded[i].shape == tensors[i].shape);
    REQUIRE(loaded[i].data.size() == tensors[i].data.size());
    for (std::size_t j = 0; j < tensors[i].data.size(); ++j) {
      CHECK(loaded[i].data[j] == tensors[i].data[j]);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects bad magic and truncation") {
  const auto path = std::filesystem::temp_directory_path() /
                    "laga_test_bad.laga";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("NOPE!", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("LAGA1\x03", f);  // truncated name length
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
