#include "laga/model.hpp"

#include <cmath>
#include <cstring>
#include <utility>

namespace laga {

namespace {

constexpr int kImageChannels = 3;
constexpr const char* kReservedPrefixes[] = {"opt.", "train."};

bool is_reserved(const std::string& name) {
  for (const char* p : kReservedPrefixes) {
    if (name.rfind(p, 0) == 0) return true;
  }
  return false;
}

std::vector<double> kaiming_conv(int c_out, int c_in, int k, Rng rng) {
  const double stddev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
  std::vector<double> v(static_cast<std::size_t>(c_out) * c_in * k * k);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

std::vector<double> kaiming_fc(int out, int in, Rng rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  std::vector<double> v(static_cast<std::size_t>(out) * in);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

int conv_out(int extent, int stride) {
  // 3x3 kernel, padding 1
  return (extent - 1) / stride + 1;
}

}  // namespace

void ModelConfig::validate() const {
  if (trunk_channels.empty()) {
    throw ConfigError("model.trunk_channels must not be empty");
  }
  for (int c : trunk_channels) {
    if (c < 1) throw ConfigError("model.trunk_channels entries must be >= 1");
  }
  if (branch_channels < 1 || reduction < 1) {
    throw ConfigError("model widths must be positive");
  }
  if (branch_channels % 8 != 0) {
    throw ConfigError("model.branch_channels must be divisible by 8, got " +
                      std::to_string(branch_channels));
  }
  if (input_h < 8 || input_w < 8) {
    throw ConfigError("model input size too small: " + std::to_string(input_h) +
                      "x" + std::to_string(input_w));
  }
  if (n_stripes < 1) throw ConfigError("model.n_stripes must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw ConfigError("model.dropout must be in [0,1)");
  }
  if (n_classes < 1) throw ConfigError("model.n_classes must be >= 1");
  if (!branch_spatial && !branch_channel && !branch_global && !branch_local) {
    throw ConfigError("model must enable at least one branch");
  }
  int h = input_h, w = input_w;
  for (std::size_t i = 0; i < trunk_channels.size(); ++i) {
    h = conv_out(h, 2);
    w = conv_out(w, 2);
  }
  if (h < 1 || w < 1) throw ConfigError("model trunk downsamples to nothing");
  if (h % n_stripes != 0) {
    throw ConfigError("feature-map height " + std::to_string(h) +
                      " not divisible by " + std::to_string(n_stripes) +
                      " stripes");
  }
  if (attention && branch_spatial && trunk_channels.back() % 8 != 0) {
    throw ConfigError("trunk output channels must be divisible by 8 for the "
                      "spatial attention module, got " +
                      std::to_string(trunk_channels.back()));
  }
}

LagaModel::ConvStage LagaModel::make_stage(const std::string& prefix, int c_in,
                                           int c_out, int stride,
                                           const Rng& init_rng,
                                           const std::string& init_label) {
  ConvStage s;
  s.stride = stride;
  s.w = store_.declare(prefix + ".conv.w", {c_out, c_in, 3, 3},
                       kaiming_conv(c_out, c_in, 3,
                                    init_rng.child(init_label + ".conv.w")),
                       true);
  s.bn_gain = store_.declare(prefix + ".bn.gain", {c_out},
                             std::vector<double>(c_out, 1.0), true);
  s.bn_bias = store_.declare(prefix + ".bn.bias", {c_out},
                             std::vector<double>(c_out, 0.0), true);
  s.bn.running_mean = store_.declare(prefix + ".bn.running_mean", {c_out},
                                     std::vector<double>(c_out, 0.0), false);
  s.bn.running_var = store_.declare(prefix + ".bn.running_var", {c_out},
                                    std::vector<double>(c_out, 1.0), false);
  return s;
}

Tensor LagaModel::run_stage(ConvStage& stage, const Tensor& x, Mode mode) {
  Tensor y = conv2d(x, stage.w, stage.b, stage.stride, 1);
  y = batch_norm(y, stage.bn_gain, stage.bn_bias, stage.bn, mode);
  return leaky_relu(y, cfg_.leaky_slope);
}

LagaModel::Head LagaModel::make_head(const std::string& name,
                                     const Rng& init_rng) {
  Head h;
  h.name = name;
  const std::string prefix = "head." + name;
  const int d = cfg_.branch_channels, r = cfg_.reduction;
  h.fc_w = store_.declare(prefix + ".reduce.fc.w", {r, d},
                          kaiming_fc(r, d,
                                     init_rng.child(prefix + ".reduce.fc.w")),
                          true);
  h.fc_b = store_.declare(prefix + ".reduce.fc.b", {r},
                          std::vector<double>(r, 0.0), true);
  h.bn_gain = store_.declare(prefix + ".reduce.bn.gain", {r},
                             std::vector<double>(r, 1.0), true);
  h.bn_bias = store_.declare(prefix + ".reduce.bn.bias", {r},
                             std::vector<double>(r, 0.0), true);
  h.bn.running_mean = store_.declare(prefix + ".reduce.bn.running_mean", {r},
                                     std::vector<double>(r, 0.0), false);
  h.bn.running_var = store_.declare(prefix + ".reduce.bn.running_var", {r},
                                    std::vector<double>(r, 1.0), false);
  h.cls_w = store_.declare(prefix + ".cls.w", {cfg_.n_classes, r},
                           kaiming_fc(cfg_.n_classes, r,
                                      init_rng.child(prefix + ".cls.w")),
                           true);
  h.cls_b = store_.declare(prefix + ".cls.b", {cfg_.n_classes},
                           std::vector<double>(cfg_.n_classes, 0.0), true);
  return h;
}

LagaModel::LagaModel(ModelConfig cfg, std::uint64_t init_seed)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  const Rng init_rng = Rng(init_seed).child("init");

  int h = cfg_.input_h, w = cfg_.input_w;
  int c_in = kImageChannels;
  for (std::size_t i = 0; i < cfg_.trunk_channels.size(); ++i) {
    const int c_out = cfg_.trunk_channels[i];
    const std::string prefix =
        i == 0 ? "trunk.stem" : "trunk.stage" + std::to_string(i);
    ConvStage s = make_stage(prefix, c_in, c_out, 2, init_rng, prefix);
    if (i == 0) {
      stem_ = std::move(s);
    } else {
      trunk_.push_back(std::move(s));
    }
    h = conv_out(h, 2);
    w = conv_out(w, 2);
    c_in = c_out;
  }
  map_h_ = h;
  map_w_ = w;

  const int c3 = cfg_.trunk_channels.back();
  const int d = cfg_.branch_channels;
  auto stage4 = [&](const std::string& branch) {
    const std::string prefix = "branch." + branch + ".stage4";
    const std::string init_label =
        cfg_.share_branch_init ? "branch.shared.stage4" : prefix;
    return make_stage(prefix, c3, d, 1, init_rng, init_label);
  };

  if (cfg_.branch_spatial) {
    if (cfg_.attention) {
      sam_s3_ = make_sam_rpe_params(store_, "sam.s3", c3, map_h_, map_w_,
                                    init_rng);
    }
    stage4_spatial_ = stage4("spatial");
    if (cfg_.attention) {
      sam_s4_ = make_sam_rpe_params(store_, "sam.s4", d, map_h_, map_w_,
                                    init_rng);
    }
    head_names_.push_back("s");
  }
  if (cfg_.branch_channel) {
    if (cfg_.attention) cam_c3_ = make_cam_params(store_, "cam.c3");
    stage4_channel_ = stage4("channel");
    if (cfg_.attention) cam_c4_ = make_cam_params(store_, "cam.c4");
    head_names_.push_back("c");
  }
  if (cfg_.branch_global) {
    stage4_global_ = stage4("global");
    head_names_.push_back("g");
  }
  if (cfg_.branch_local) {
    stage4_local_ = stage4("local");
    for (int i = 1; i <= cfg_.n_stripes; ++i) {
      head_names_.push_back("p" + std::to_string(i));
    }
  }
  for (const std::string& name : head_names_) {
    heads_.push_back(make_head(name, init_rng));
  }
}

BranchMaps LagaModel::branch_maps(const Tensor& images, Mode mode) {
  Tensor x = images;
  if (x.rank() == 3) {
    x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  }
  if (x.rank() != 4 || x.dim(1) != kImageChannels || x.dim(2) != cfg_.input_h ||
      x.dim(3) != cfg_.input_w) {
    throw ConfigError("model input " + shape_str(images.shape()) +
                      " does not match configured size (3x" +
                      std::to_string(cfg_.input_h) + "x" +
                      std::to_string(cfg_.input_w) + ")");
  }

  Tensor t = run_stage(stem_, x, mode);
  for (ConvStage& s : trunk_) t = run_stage(s, t, mode);

  BranchMaps maps;
  if (cfg_.branch_spatial) {
    Tensor xs = cfg_.attention ? sam_rpe_forward(t, sam_s3_, mode) : t;
    xs = run_stage(stage4_spatial_, xs, mode);
    if (cfg_.attention) xs = sam_rpe_forward(xs, sam_s4_, mode);
    maps.spatial = xs;
  }
  if (cfg_.branch_channel) {
    Tensor xc = cfg_.attention ? cam_forward(t, cam_c3_) : t;
    xc = run_stage(stage4_channel_, xc, mode);
    if (cfg_.attention) xc = cam_forward(xc, cam_c4_);
    maps.channel = xc;
  }
  if (cfg_.branch_global) {
    maps.global_map = run_stage(stage4_global_, t, mode);
  }
  if (cfg_.branch_local) {
    maps.local = run_stage(stage4_local_, t, mode);
  }
  return maps;
}

std::vector<HeadOutput> LagaModel::forward(const Tensor& images, Mode mode,
                                           Rng* batch_rng) {
  const bool needs_rng = mode == Mode::kTrain && cfg_.dropout_p > 0.0;
  if (needs_rng && batch_rng == nullptr) {
    throw UsageError("train-mode forward with dropout needs a batch rng");
  }
  BranchMaps maps = branch_maps(images, mode);

  std::vector<std::pair<std::string, Tensor>> pooled;
  if (cfg_.branch_spatial) pooled.emplace_back("s", gap(maps.spatial));
  if (cfg_.branch_channel) pooled.emplace_back("c", gap(maps.channel));
  if (cfg_.branch_global) pooled.emplace_back("g", gap(maps.global_map));
  if (cfg_.branch_local) {
    std::vector<Tensor> stripes = stripe_pool(maps.local, cfg_.n_stripes);
    for (int i = 0; i < cfg_.n_stripes; ++i) {
      pooled.emplace_back("p" + std::to_string(i + 1), stripes[i]);
    }
  }

  std::vector<HeadOutput> out;
  out.reserve(pooled.size());
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    Head& head = heads_[i];
    HeadOutput ho;
    ho.name = pooled[i].first;
    ho.pooled = pooled[i].second;
    Tensor red = linear(ho.pooled, head.fc_w, head.fc_b);
    red = batch_norm(red, head.bn_gain, head.bn_bias, head.bn, mode);
    red = leaky_relu(red, cfg_.leaky_slope);
    if (needs_rng) {
      Rng head_rng = batch_rng->child("dropout." + ho.name);
      red = dropout(red, cfg_.dropout_p, mode, head_rng);
    }
    ho.reduced = red;
    ho.logits = linear(red, head.cls_w, head.cls_b);
    out.push_back(std::move(ho));
  }
  return out;
}

std::vector<double> LagaModel::test_embedding(const Tensor& image) {
  if (image.rank() != 3) {
    throw ShapeError("test_embedding expects a single (3,H,W) image, got " +
                     shape_str(image.shape()));
  }
  NoGradGuard no_grad;
  std::vector<HeadOutput> heads = forward(image, Mode::kEval, nullptr);
  std::vector<Tensor> parts;
  parts.reserve(heads.size());
  for (HeadOutput& h : heads) parts.push_back(h.pooled);
  Tensor cat = concat_features(parts);
  return {cat.data().begin(), cat.data().end()};
}

std::vector<double> LagaModel::flip_average(const Tensor& image) {
  std::vector<double> a = test_embedding(image);
  std::vector<double> b = test_embedding(hflip(image));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (a[i] + b[i]) / 2.0;
  return a;
}

std::vector<NamedTensor> LagaModel::snapshot() const {
  std::vector<NamedTensor> out;
  out.reserve(store_.entries().size());
  for (const ParamEntry& e : store_.entries()) {
    out.push_back({e.name, e.tensor.shape(),
                   {e.tensor.data().begin(), e.tensor.data().end()}});
  }
  return out;
}

void LagaModel::load_snapshot(const std::vector<NamedTensor>& records) {
  std::size_t applied = 0;
  for (const NamedTensor& r : records) {
    if (is_reserved(r.name)) continue;
    Tensor* t = store_.find(r.name);
    if (t == nullptr) {
      throw DataError("checkpoint contains unknown parameter '" + r.name +
                      "' (model/config mismatch?)");
    }
    if (t->shape() != r.shape) {
      throw ShapeError("checkpoint parameter '" + r.name + "' has shape " +
                       shape_str(r.shape) + " but the model expects " +
                       shape_str(t->shape()));
    }
    std::memcpy(t->mutable_data().data(), r.data.data(),
                r.data.size() * sizeof(double));
    ++applied;
  }
  if (applied != store_.entries().size()) {
    for (const ParamEntry& e : store_.entries()) {
      bool found = false;
      for (const NamedTensor& r : records) {
        if (r.name == e.name) {
          found = true;
          break;
        }
      }
      if (!found) {
        throw DataError("checkpoint is missing parameter '" + e.name + "'");
      }
    }
  }
}

std::optional<int> LagaModel::infer_n_classes(
    const std::vector<NamedTensor>& records) {
  for (const NamedTensor& r : records) {
    if (r.name.rfind("head.", 0) == 0 && r.shape.size() == 1 &&
        r.name.size() > 6 &&
        r.name.compare(r.name.size() - 6, 6, ".cls.b") == 0) {
      return r.shape[0];
    }
  }
  return std::nullopt;
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) {
    throw ShapeError("hflip expects (C,H,W), got " + shape_str(image.shape()));
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.size());
  const double* src = image.data().data();
  for (int ci = 0; ci < c; ++ci) {
    for (int i = 0; i < h; ++i) {
      const double* row =
          src + (static_cast<std::size_t>(ci) * h + i) * w;
      double* orow = out.data() + (static_cast<std::size_t>(ci) * h + i) * w;
      for (int j = 0; j < w; ++j) orow[j] = row[w - 1 - j];
    }
  }
  auto xn = image.node();
  return detail::make_op({c, h, w}, std::move(out), {image},
                         [xn, c, h, w](TensorNode& self) {
                           if (!xn->requires_grad) return;
                           for (int ci = 0; ci < c; ++ci) {
                             for (int i = 0; i < h; ++i) {
                               const std::size_t base =
                                   (static_cast<std::size_t>(ci) * h + i) * w;
                               for (int j = 0; j < w; ++j) {
                                 xn->grad[base + w - 1 - j] +=
                                     self.grad[base + j];
                               }
                             }
                           }
                         });
}

}  // namespace laga
