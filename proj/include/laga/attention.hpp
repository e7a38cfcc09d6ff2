#pragma once

#include <string>
#include <vector>

#include "laga/params.hpp"
#include "laga/rng.hpp"
#include "laga/tensor.hpp"

namespace laga {

// ---------------------------------------------------------------------------
// Channel attention
// ---------------------------------------------------------------------------

struct CamParams {
  Tensor gamma;  // scalar residual gate, initialized to 0
};

CamParams make_cam_params(ParamStore& store, const std::string& prefix);

// Reshapes the map to C x HW, forms the row-stochastic C x C channel
// attention, and returns gamma * (A_c V) + input. Accepts (C,H,W) or
// (N,C,H,W).
Tensor cam_forward(const Tensor& input, const CamParams& p);

struct CamTrace {
  Tensor attention;  // C x C, per sample 0 of the input
  Tensor output;
};

CamTrace cam_forward_traced(const Tensor& input, const CamParams& p);

// ---------------------------------------------------------------------------
// Relative-position re-indexing
// ---------------------------------------------------------------------------

enum class Axis { kHeight, kWidth };

// Binary HW x (2L-1) mask selecting, for each grid position, the table row of
// its relative shift; positions whose shift falls outside [-(L-1), L-1] get
// an all-zero row. For the height axis the shift at grid position (h, i) is
// i - h; the width axis exchanges the roles of the two grid indices.
struct ReindexMask {
  Axis axis;
  int height;
  int width;
  std::vector<double> m;  // (H*W) x (2L-1), row-major, entries in {0,1}

  int table_rows() const;
  Tensor tensor() const;  // constant, detached from the graph
};

ReindexMask build_reindex(Axis axis, int height, int width);

// P = mask * table (HW x d_k); returns V (P Q) reshaped to C x H x W. No
// normalization is applied to the positional logits P Q.
Tensor rel_pos_term(const ReindexMask& mask, const Tensor& table,
                    const Tensor& q, const Tensor& v);

// ---------------------------------------------------------------------------
// Spatial attention with relative positional encodings
// ---------------------------------------------------------------------------

struct SamRpeParams {
  int channels = 0;
  int d_k = 0;
  int height = 0;
  int width = 0;

  // Key/query/value projections: bias-free 1x1 conv, each with its own
  // BN + ReLU (the following BN makes a conv bias a dead parameter).
  Tensor wk_w, wk_bn_gain, wk_bn_bias;
  BatchNormState wk_bn;
  Tensor wq_w, wq_bn_gain, wq_bn_bias;
  BatchNormState wq_bn;
  Tensor wv_w, wv_bn_gain, wv_bn_bias;
  BatchNormState wv_bn;

  Tensor r_h;  // (2H-1) x d_k
  Tensor r_w;  // (2W-1) x d_k

  // BNs applied to the reshaped positional maps in the residual sum.
  Tensor bnh_gain, bnh_bias;
  BatchNormState bnh;
  Tensor bnw_gain, bnw_bias;
  BatchNormState bnw;

  Tensor gamma;

  ReindexMask mask_h;
  ReindexMask mask_w;
  Tensor mask_h_t;  // cached constants
  Tensor mask_w_t;
};

// d_k = channels / 8; rejects channel counts not divisible by 8. Embedding
// tables are drawn from N(0, 0.01^2); gamma starts at 0.
SamRpeParams make_sam_rpe_params(ParamStore& store, const std::string& prefix,
                                 int channels, int height, int width,
                                 const Rng& init_rng);

// Content attention over all pixels plus the two positional terms:
// gamma * (V A_s + BN(E_H) + BN(E_W)) + input. Accepts (C,H,W) or (N,C,H,W).
Tensor sam_rpe_forward(const Tensor& input, SamRpeParams& p, Mode mode);

struct SamRpeTrace {
  Tensor attention;  // HW x HW, per sample 0
  Tensor content;    // V A_s reshaped to (C,H,W), per sample 0
  Tensor e_h;        // positional map before BN, per sample 0
  Tensor e_w;
  Tensor output;
};

SamRpeTrace sam_rpe_forward_traced(const Tensor& input, SamRpeParams& p,
                                   Mode mode);

}  // namespace laga
