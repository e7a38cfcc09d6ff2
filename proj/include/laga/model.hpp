#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "laga/attention.hpp"
#include "laga/checkpoint.hpp"
#include "laga/params.hpp"
#include "laga/tensor.hpp"

namespace laga {

// Desk-scale stand-in for the usual pretrained trunk: a strided 3x3 conv stem
// and stages, then four independent stride-1 final stages feeding the heads.
struct ModelConfig {
  int input_h = 96;
  int input_w = 32;
  std::vector<int> trunk_channels = {16, 32, 64};  // all stride-2 stages
  int branch_channels = 128;  // D, per-branch output width
  int reduction = 64;         // R, reduced embedding width
  int n_stripes = 3;
  double leaky_slope = 0.01;
  double dropout_p = 0.5;
  int n_classes = 0;  // taken from the training manifest

  bool branch_spatial = true;
  bool branch_channel = true;
  bool branch_global = true;
  bool branch_local = true;
  // Structural switch: when false the attention modules are absent entirely
  // (the branches remain), which is distinct from freezing the gamma gates.
  bool attention = true;
  // Draw all four final stages from one init stream so they start identical.
  bool share_branch_init = false;

  void validate() const;
};

struct BranchMaps {
  Tensor spatial;
  Tensor channel;
  Tensor global_map;
  Tensor local;
};

struct HeadOutput {
  std::string name;  // s, c, g, p1..pn
  Tensor pooled;     // D-dim pre-reduction feature (test-time)
  Tensor reduced;    // R-dim embedding (training feature)
  Tensor logits;     // n_classes
};

class LagaModel {
 public:
  LagaModel(ModelConfig cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  int map_h() const { return map_h_; }
  int map_w() const { return map_w_; }
  const std::vector<std::string>& head_names() const { return head_names_; }
  int n_heads() const { return static_cast<int>(head_names_.size()); }
  // Concatenated test feature width: n_heads * D.
  int feature_dim() const { return n_heads() * cfg_.branch_channels; }

  // Shared trunk plus the four branch tensors. Accepts (3,H,W) or (N,3,H,W).
  BranchMaps branch_maps(const Tensor& images, Mode mode);

  // Full pass: pooled/reduced/logits per head, fixed order [s,c,g,p1..pn].
  // `batch_rng` drives head dropout and is required in train mode when
  // dropout_p > 0.
  std::vector<HeadOutput> forward(const Tensor& images, Mode mode,
                                  Rng* batch_rng);

  // Eval-mode concatenation of the pooled features, in head order.
  std::vector<double> test_embedding(const Tensor& image);
  // Mean of the embeddings of the image and its horizontal mirror.
  std::vector<double> flip_average(const Tensor& image);

  std::vector<NamedTensor> snapshot() const;
  // Strict: every model parameter must be present with a matching shape;
  // names under reserved prefixes ("opt.", "train.") are ignored.
  void load_snapshot(const std::vector<NamedTensor>& records);

  static std::optional<int> infer_n_classes(
      const std::vector<NamedTensor>& records);

 private:
  // Convs and the reduction FC are bias-free since batch norm follows
  // directly; only the classifier keeps a bias.
  struct ConvStage {
    Tensor w, bn_gain, bn_bias;
    BatchNormState bn;
    int stride = 1;
  };
  struct Head {
    std::string name;
    Tensor fc_w, bn_gain, bn_bias;
    BatchNormState bn;
    Tensor cls_w, cls_b;
  };

  ConvStage make_stage(const std::string& prefix, int c_in, int c_out,
                       int stride, const Rng& init_rng,
                       const std::string& init_label);
  Tensor run_stage(ConvStage& stage, const Tensor& x, Mode mode);
  Head make_head(const std::string& name, const Rng& init_rng);

  ModelConfig cfg_;
  ParamStore store_;
  int map_h_ = 0;
  int map_w_ = 0;

  ConvStage stem_;
  std::vector<ConvStage> trunk_;
  ConvStage stage4_spatial_, stage4_channel_, stage4_global_, stage4_local_;
  SamRpeParams sam_s3_, sam_s4_;
  CamParams cam_c3_, cam_c4_;
  std::vector<Head> heads_;
  std::vector<std::string> head_names_;
};

// Horizontal mirror of a (C,H,W) image.
Tensor hflip(const Tensor& image);

}  // namespace laga
