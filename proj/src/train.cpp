#include "laga/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace laga {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (warmup_epochs < 1 || warmup_epochs >= epochs) {
    throw ConfigError("train.warmup_epochs must be in [1, epochs)");
  }
  if (base_lr <= 0 || warmup_start_lr <= 0) {
    throw ConfigError("train learning rates must be positive");
  }
  for (const auto& [epoch, rate] : decay) {
    if (rate <= 0) throw ConfigError("train.decay rates must be positive");
    if (epoch <= warmup_epochs) {
      throw ConfigError("train.decay epochs must come after warmup");
    }
  }
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (backbone_lr_divisor <= 0) {
    throw ConfigError("train.backbone_lr_divisor must be positive");
  }
}

double lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 1 || epoch > cfg.epochs) {
    throw UsageError("lr_at: epoch " + std::to_string(epoch) +
                     " outside [1," + std::to_string(cfg.epochs) + "]");
  }
  if (epoch <= cfg.warmup_epochs) {
    if (cfg.warmup_epochs == 1) return cfg.base_lr;
    const double t = static_cast<double>(epoch - 1) /
                     static_cast<double>(cfg.warmup_epochs - 1);
    return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t;
  }
  double rate = cfg.base_lr;
  for (const auto& [e, r] : cfg.decay) {
    if (epoch >= e) rate = r;
  }
  return rate;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

void AugConfig::validate() const {
  if (resize_factor < 1.0) throw ConfigError("aug.resize_factor must be >= 1");
  if (!(hflip_p >= 0.0 && hflip_p <= 1.0)) {
    throw ConfigError("aug.hflip_p must be in [0,1]");
  }
  if (jitter < 0.0 || jitter >= 1.0) {
    throw ConfigError("aug.jitter must be in [0,1)");
  }
  if (!(erase_p >= 0.0 && erase_p <= 1.0)) {
    throw ConfigError("aug.erase_p must be in [0,1]");
  }
  if (!(erase_area_lo > 0.0 && erase_area_lo <= erase_area_hi &&
        erase_area_hi < 1.0)) {
    throw ConfigError("aug.erase area range must satisfy 0 < lo <= hi < 1");
  }
  if (!(erase_aspect_lo > 0.0 && erase_aspect_lo <= erase_aspect_hi)) {
    throw ConfigError("aug.erase aspect range must satisfy 0 < lo <= hi");
  }
  for (double s : stddev) {
    if (s <= 0.0) throw ConfigError("aug.stddev entries must be positive");
  }
}

std::optional<EraseRect> sample_erase(int h, int w, const AugConfig& cfg,
                                      Rng& rng) {
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area_frac = rng.uniform(cfg.erase_area_lo, cfg.erase_area_hi);
    const double aspect = rng.uniform(cfg.erase_aspect_lo, cfg.erase_aspect_hi);
    const double area = area_frac * h * w;
    const int eh = std::max(1, static_cast<int>(std::lround(
                                   std::sqrt(area * aspect))));
    const int ew = std::max(1, static_cast<int>(std::lround(
                                   std::sqrt(area / aspect))));
    if (eh >= h || ew >= w) continue;
    EraseRect r;
    r.top = static_cast<int>(rng.index(static_cast<std::size_t>(h - eh + 1)));
    r.left = static_cast<int>(rng.index(static_cast<std::size_t>(w - ew + 1)));
    r.height = eh;
    r.width = ew;
    r.gray = rng.uniform();
    r.area_frac = area_frac;
    r.aspect = aspect;
    return r;
  }
  return std::nullopt;
}

Tensor augment(const Tensor& image, const AugConfig& cfg, int target_h,
               int target_w, Mode mode, Rng& rng) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("augment expects a (3,H,W) image, got " +
                     shape_str(image.shape()));
  }

  auto normalize = [&cfg](std::vector<double>& buf, int h, int w) {
    for (int c = 0; c < 3; ++c) {
      double* ch = buf.data() + static_cast<std::size_t>(c) * h * w;
      const double m = cfg.mean[static_cast<std::size_t>(c)];
      const double inv = 1.0 / cfg.stddev[static_cast<std::size_t>(c)];
      for (int i = 0; i < h * w; ++i) ch[i] = (ch[i] - m) * inv;
    }
  };

  if (mode == Mode::kEval) {
    Tensor resized = (image.dim(1) == target_h && image.dim(2) == target_w)
                         ? image
                         : resize_bilinear(image, target_h, target_w);
    std::vector<double> buf(resized.data().begin(), resized.data().end());
    normalize(buf, target_h, target_w);
    return Tensor::from_data({3, target_h, target_w}, std::move(buf));
  }

  const int rh = std::max(
      target_h, static_cast<int>(std::lround(target_h * cfg.resize_factor)));
  const int rw = std::max(
      target_w, static_cast<int>(std::lround(target_w * cfg.resize_factor)));
  Tensor resized = resize_bilinear(image, rh, rw);

  const int top =
      static_cast<int>(rng.index(static_cast<std::size_t>(rh - target_h + 1)));
  const int left =
      static_cast<int>(rng.index(static_cast<std::size_t>(rw - target_w + 1)));
  std::vector<double> buf(static_cast<std::size_t>(3) * target_h * target_w);
  const double* src = resized.data().data();
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < target_h; ++i) {
      std::memcpy(
          buf.data() + (static_cast<std::size_t>(c) * target_h + i) * target_w,
          src + (static_cast<std::size_t>(c) * rh + top + i) * rw + left,
          static_cast<std::size_t>(target_w) * sizeof(double));
    }
  }
  const int hw = target_h * target_w;

  if (rng.bernoulli(cfg.hflip_p)) {
    for (int c = 0; c < 3; ++c) {
      double* ch = buf.data() + static_cast<std::size_t>(c) * hw;
      for (int i = 0; i < target_h; ++i) {
        std::reverse(ch + static_cast<std::size_t>(i) * target_w,
                     ch + static_cast<std::size_t>(i + 1) * target_w);
      }
    }
  }

  if (cfg.jitter > 0.0) {
    const double fb = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    const double fc = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    const double fs = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    for (double& v : buf) v *= fb;
    double mean_gray = 0.0;
    for (double v : buf) mean_gray += v;
    mean_gray /= static_cast<double>(buf.size());
    for (double& v : buf) v = mean_gray + fc * (v - mean_gray);
    for (int i = 0; i < hw; ++i) {
      const double gray = (buf[i] + buf[hw + i] + buf[2 * hw + i]) / 3.0;
      for (int c = 0; c < 3; ++c) {
        double& v = buf[static_cast<std::size_t>(c) * hw + i];
        v = gray + fs * (v - gray);
      }
    }
    for (double& v : buf) v = std::min(1.0, std::max(0.0, v));
  }

  if (cfg.erase_p > 0.0 && rng.bernoulli(cfg.erase_p)) {
    if (auto rect = sample_erase(target_h, target_w, cfg, rng)) {
      for (int c = 0; c < 3; ++c) {
        for (int i = rect->top; i < rect->top + rect->height; ++i) {
          double* row =
              buf.data() + (static_cast<std::size_t>(c) * target_h + i) *
                               target_w;
          std::fill(row + rect->left, row + rect->left + rect->width,
                    rect->gray);
        }
      }
    }
  }

  normalize(buf, target_h, target_w);
  return Tensor::from_data({3, target_h, target_w}, std::move(buf));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

namespace {

bool in_backbone_group(const std::string& name) {
  return name.rfind("trunk.", 0) == 0 || name.rfind("branch.", 0) == 0;
}

bool is_gamma(const std::string& name) {
  return name.size() >= 6 &&
         name.compare(name.size() - 6, 6, ".gamma") == 0;
}

}  // namespace

Adam::Adam(ParamStore& store, const TrainConfig& cfg)
    : weight_decay_(cfg.weight_decay),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  for (const ParamEntry& e : store.entries()) {
    if (!e.trainable) continue;
    if (cfg.freeze_gamma && is_gamma(e.name)) continue;
    Slot s;
    s.tensor = e.tensor;
    s.name = e.name;
    s.lr_scale =
        in_backbone_group(e.name) ? 1.0 / cfg.backbone_lr_divisor : 1.0;
    s.m.assign(e.tensor.size(), 0.0);
    s.v.assign(e.tensor.size(), 0.0);
    slots_.push_back(std::move(s));
  }
}

void Adam::step(double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (Slot& s : slots_) {
    auto grad = s.tensor.grad();
    auto theta = s.tensor.mutable_data();
    const double step_lr = lr * s.lr_scale;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i] + weight_decay_ * theta[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
      const double m_hat = s.m[i] / bc1;
      const double v_hat = s.v[i] / bc2;
      theta[i] -= step_lr * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  out.push_back({"opt.adam.step", {1}, {static_cast<double>(step_)}});
  for (const Slot& s : slots_) {
    out.push_back({"opt.adam.m." + s.name, s.tensor.shape(), s.m});
    out.push_back({"opt.adam.v." + s.name, s.tensor.shape(), s.v});
  }
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& records) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& r : records) by_name[r.name] = &r;

  auto fetch = [&](const std::string& name, std::size_t size) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw DataError("checkpoint has no optimizer record '" + name +
                      "'; it cannot be resumed");
    }
    if (it->second->data.size() != size) {
      throw ShapeError("optimizer record '" + name + "' has " +
                       std::to_string(it->second->data.size()) +
                       " values, expected " + std::to_string(size));
    }
    return it->second;
  };

  step_ = static_cast<std::int64_t>(fetch("opt.adam.step", 1)->data[0]);
  for (Slot& s : slots_) {
    s.m = fetch("opt.adam.m." + s.name, s.m.size())->data;
    s.v = fetch("opt.adam.v." + s.name, s.v.size())->data;
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

TrainResult train_model(LagaModel& model, const Manifest& manifest,
                        const TrainConfig& tcfg, const LossConfig& lcfg,
                        const AugConfig& acfg,
                        const std::filesystem::path& checkpoint_out,
                        const std::filesystem::path& metrics_out,
                        const std::optional<std::filesystem::path>&
                            resume_from) {
  tcfg.validate();
  lcfg.validate();
  acfg.validate();

  const std::vector<Sample> train_rows = manifest.split("train");
  if (train_rows.empty()) throw DataError("manifest has no train rows");
  std::vector<int> labels;
  labels.reserve(train_rows.size());
  for (const Sample& s : train_rows) labels.push_back(s.identity);
  const IdentityIndex index = IdentityIndex::from_labels(labels);
  if (index.n_nonempty_classes() < lcfg.p) {
    throw DataError("manifest has " +
                    std::to_string(index.n_nonempty_classes()) +
                    " train identities but loss.P = " + std::to_string(lcfg.p));
  }
  const int batch = lcfg.batch_size();
  const int iters =
      static_cast<int>(train_rows.size()) / batch;  // floor(n/N)
  if (iters < 1) {
    throw DataError("train split smaller than one PK batch (" +
                    std::to_string(train_rows.size()) + " rows, batch " +
                    std::to_string(batch) + ")");
  }

  // Per-image cache of decoded pixels; augmentation works on copies.
  std::vector<Tensor> images;
  images.reserve(train_rows.size());
  for (const Sample& s : train_rows) {
    images.push_back(load_ppm(manifest.resolve(s)));
  }

  Adam adam(model.params(), tcfg);
  int start_epoch = 1;
  if (resume_from) {
    const std::vector<NamedTensor> records = load_checkpoint(*resume_from);
    model.load_snapshot(records);
    adam.load_state(records);
    bool found = false;
    for (const NamedTensor& r : records) {
      if (r.name == "train.next_epoch") {
        start_epoch = static_cast<int>(r.data[0]);
        found = true;
      }
    }
    if (!found) {
      throw DataError("checkpoint '" + resume_from->string() +
                      "' has no training cursor; it cannot be resumed");
    }
  }

  std::ofstream metrics;
  if (!metrics_out.empty()) {
    const bool fresh = start_epoch == 1;
    metrics.open(metrics_out, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) {
      throw DataError("cannot open metrics log: " + metrics_out.string());
    }
    if (fresh) metrics << "epoch,lr,loss_total,loss_xent,loss_triplet\n";
  }

  const Rng root(tcfg.seed);
  TrainResult result;
  for (int epoch = start_epoch; epoch <= tcfg.epochs; ++epoch) {
    const double lr = lr_at(tcfg, epoch);
    double sum_total = 0.0, sum_xent = 0.0, sum_triplet = 0.0;
    for (int it = 0; it < iters; ++it) {
      Rng iter_rng = root.child("batch")
                         .child(static_cast<std::uint64_t>(epoch))
                         .child(static_cast<std::uint64_t>(it));
      Rng sampler = iter_rng.child("sampler");
      const PkBatch pk = pk_sample(index, lcfg.p, lcfg.k, sampler);

      std::vector<Tensor> batch_images;
      batch_images.reserve(pk.rows.size());
      for (std::size_t slot = 0; slot < pk.rows.size(); ++slot) {
        Rng aug_rng = iter_rng.child("aug").child(slot);
        batch_images.push_back(
            augment(images[static_cast<std::size_t>(pk.rows[slot])], acfg,
                    model.config().input_h, model.config().input_w,
                    Mode::kTrain, aug_rng));
      }
      Tensor input = stack(batch_images);

      std::vector<HeadOutput> heads =
          model.forward(input, Mode::kTrain, &iter_rng);
      std::vector<Tensor> logits, embeddings;
      for (HeadOutput& h : heads) {
        logits.push_back(h.logits);
        embeddings.push_back(h.reduced);
      }
      const LossBreakdown loss =
          combined_loss(logits, embeddings, pk.labels, lcfg);

      const double total = loss.total.value();
      if (!std::isfinite(total)) {
        throw DataError("non-finite loss at epoch " + std::to_string(epoch) +
                        " iteration " + std::to_string(it + 1) +
                        " (lr=" + format_double(lr) + ")");
      }
      sum_total += total;
      sum_xent += loss.xent_sum.value();
      sum_triplet += loss.triplet_sum.value();

      backward(loss.total);
      adam.step(lr);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.loss_total = sum_total / iters;
    stats.loss_xent = sum_xent / iters;
    stats.loss_triplet = sum_triplet / iters;
    result.epochs.push_back(stats);
    if (metrics.is_open()) {
      metrics << stats.epoch << ',' << format_double(stats.lr) << ','
              << format_double(stats.loss_total) << ','
              << format_double(stats.loss_xent) << ','
              << format_double(stats.loss_triplet) << '\n';
      metrics.flush();
    }
  }

  if (!checkpoint_out.empty()) {
    std::vector<NamedTensor> records = model.snapshot();
    for (NamedTensor& t : adam.state()) records.push_back(std::move(t));
    records.push_back({"train.next_epoch",
                       {1},
                       {static_cast<double>(tcfg.epochs + 1)}});
    save_checkpoint(checkpoint_out, records);
  }
  return result;
}

}  // namespace laga
