#pragma once

#include <vector>

#include "laga/rng.hpp"
#include "laga/tensor.hpp"

namespace laga {

enum class TripletReduction { kSum, kMean };

struct LossConfig {
  double beta = 0.1;     // triplet weight in the combined objective
  double margin = 1.2;   // triplet hinge margin
  double epsilon = 0.1;  // label smoothing
  int p = 5;             // identities per batch
  int k = 4;             // instances per identity
  TripletReduction reduction = TripletReduction::kSum;

  int batch_size() const { return p * k; }
  void validate() const;
};

// Softened one-hot distribution: 1 - ((C-1)/C) eps at the true class, eps/C
// elsewhere.
std::vector<double> smoothed_targets(int label, int n_classes, double epsilon);

// Batch mean of label-smoothed cross entropy over (N,C) logits,
// log-sum-exp stabilized.
Tensor xent_loss(const Tensor& logits, const std::vector<int>& labels,
                 double epsilon);

// Batch-hard mining over Euclidean distances: per anchor, the farthest
// same-label sample (excluding the anchor's own index) and the nearest
// other-label sample form the hinge term; ties broken by lowest index.
// Reduction is a sum over anchors by default.
Tensor batch_hard_triplet(const Tensor& embeddings,
                          const std::vector<int>& labels, double margin,
                          TripletReduction reduction = TripletReduction::kSum);

struct LossBreakdown {
  Tensor total;
  Tensor xent_sum;     // sum of per-head cross entropies
  Tensor triplet_sum;  // sum of per-head triplet losses (unweighted)
};

// Per-head cross entropies on the logits plus beta-weighted per-head triplet
// losses on the reduced embeddings, any head count >= 1.
LossBreakdown combined_loss(const std::vector<Tensor>& head_logits,
                            const std::vector<Tensor>& head_embeddings,
                            const std::vector<int>& labels,
                            const LossConfig& cfg);

// The full six-head objective; rejects any other head count.
Tensor total_loss(const std::vector<Tensor>& head_logits,
                  const std::vector<Tensor>& head_embeddings,
                  const std::vector<int>& labels, const LossConfig& cfg);

// Row lookup for PK sampling: class id -> indices into some external row set.
struct IdentityIndex {
  std::vector<std::vector<int>> rows_by_class;

  static IdentityIndex from_labels(const std::vector<int>& labels);
  int n_classes() const { return static_cast<int>(rows_by_class.size()); }
  int n_rows() const;
  int n_nonempty_classes() const;
};

struct PkBatch {
  std::vector<int> rows;    // N = P*K row indices
  std::vector<int> labels;  // class per row
};

// P identities sampled uniformly without replacement, then K instances each
// (with replacement only when an identity has fewer than K rows).
PkBatch pk_sample(const IdentityIndex& index, int p, int k, Rng& rng);

}  // namespace laga
