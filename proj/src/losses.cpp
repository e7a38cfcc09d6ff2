#include "laga/losses.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace laga {

void LossConfig::validate() const {
  if (beta < 0.0) throw ConfigError("loss.beta must be >= 0");
  if (margin < 0.0) throw ConfigError("loss.margin must be >= 0");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw ConfigError("loss.epsilon must be in [0,1)");
  }
  if (p < 2) throw ConfigError("loss.P must be >= 2 (triplet mining needs two identities)");
  if (k < 2) throw ConfigError("loss.K must be >= 2 (triplet mining needs two instances)");
}

std::vector<double> smoothed_targets(int label, int n_classes, double epsilon) {
  if (label < 0 || label >= n_classes) {
    throw DataError("smoothed_targets: label index " + std::to_string(label) +
                    " out of range [0," + std::to_string(n_classes) + ")");
  }
  const double off = epsilon / static_cast<double>(n_classes);
  std::vector<double> q(static_cast<std::size_t>(n_classes), off);
  q[static_cast<std::size_t>(label)] =
      1.0 - (static_cast<double>(n_classes - 1) / n_classes) * epsilon;
  return q;
}

Tensor xent_loss(const Tensor& logits, const std::vector<int>& labels,
                 double epsilon) {
  if (logits.rank() != 2) {
    throw ShapeError("xent_loss expects (N,C) logits, got " +
                     shape_str(logits.shape()));
  }
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("xent_loss: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " logit rows");
  }
  const double* z = logits.data().data();
  std::vector<double> probs(logits.size());
  std::vector<double> targets(logits.size());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = z + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    const std::vector<double> q = smoothed_targets(labels[i], c, epsilon);
    double li = 0.0;
    for (int j = 0; j < c; ++j) {
      probs[static_cast<std::size_t>(i) * c + j] = std::exp(row[j] - lse);
      targets[static_cast<std::size_t>(i) * c + j] = q[j];
      li += q[j] * (lse - row[j]);
    }
    loss += li;
  }
  loss /= static_cast<double>(n);

  auto ln = logits.node();
  return detail::make_op(
      {1}, {loss}, {logits},
      [ln, probs = std::move(probs), targets = std::move(targets),
       n](TensorNode& self) {
        if (!ln->requires_grad) return;
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < probs.size(); ++i) {
          ln->grad[i] += g * (probs[i] - targets[i]);
        }
      });
}

Tensor batch_hard_triplet(const Tensor& embeddings,
                          const std::vector<int>& labels, double margin,
                          TripletReduction reduction) {
  if (embeddings.rank() != 2) {
    throw ShapeError("batch_hard_triplet expects (N,dim) embeddings, got " +
                     shape_str(embeddings.shape()));
  }
  const int n = embeddings.dim(0), dim = embeddings.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("batch_hard_triplet: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  std::unordered_map<int, int> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) {
    throw DataError("batch_hard_triplet sampling error: batch needs >= 2 "
                    "identities");
  }
  for (const auto& [label, count] : counts) {
    if (count < 2) {
      throw DataError("batch_hard_triplet sampling error: identity " +
                      std::to_string(label) + " has a single instance");
    }
  }

  const double* e = embeddings.data().data();
  std::vector<double> sq(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* row = e + static_cast<std::size_t>(i) * dim;
    for (int j = 0; j < dim; ++j) acc += row[j] * row[j];
    sq[static_cast<std::size_t>(i)] = acc;
  }
  std::vector<double> dist(static_cast<std::size_t>(n) * n, 0.0);
  for (int a = 0; a < n; ++a) {
    const double* ra = e + static_cast<std::size_t>(a) * dim;
    for (int b = a + 1; b < n; ++b) {
      const double* rb = e + static_cast<std::size_t>(b) * dim;
      double dot = 0.0;
      for (int j = 0; j < dim; ++j) dot += ra[j] * rb[j];
      // clamp guards tiny negative radicands
      const double d = std::sqrt(std::max(sq[a] + sq[b] - 2.0 * dot, 0.0));
      dist[static_cast<std::size_t>(a) * n + b] = d;
      dist[static_cast<std::size_t>(b) * n + a] = d;
    }
  }

  std::vector<int> hardest_pos(static_cast<std::size_t>(n), -1);
  std::vector<int> hardest_neg(static_cast<std::size_t>(n), -1);
  std::vector<char> active(static_cast<std::size_t>(n), 0);
  double loss = 0.0;
  for (int a = 0; a < n; ++a) {
    double hp = -1.0, hn = 0.0;
    int hp_idx = -1, hn_idx = -1;
    for (int b = 0; b < n; ++b) {
      const double d = dist[static_cast<std::size_t>(a) * n + b];
      if (labels[b] == labels[a]) {
        if (b != a && d > hp) {  // self excluded by index, not by value
          hp = d;
          hp_idx = b;
        }
      } else if (hn_idx == -1 || d < hn) {
        hn = d;
        hn_idx = b;
      }
    }
    const double term = margin + hp - hn;
    if (term > 0.0) {
      loss += term;
      active[static_cast<std::size_t>(a)] = 1;
    }
    hardest_pos[static_cast<std::size_t>(a)] = hp_idx;
    hardest_neg[static_cast<std::size_t>(a)] = hn_idx;
  }
  const double red_scale =
      reduction == TripletReduction::kMean ? 1.0 / static_cast<double>(n) : 1.0;
  loss *= red_scale;

  auto en = embeddings.node();
  return detail::make_op(
      {1}, {loss}, {embeddings},
      [en, dist = std::move(dist), hardest_pos = std::move(hardest_pos),
       hardest_neg = std::move(hardest_neg), active = std::move(active), n,
       dim, red_scale](TensorNode& self) {
        if (!en->requires_grad) return;
        const double g = self.grad[0] * red_scale;
        auto add_pair = [&](int a, int b, double sign) {
          const double d = dist[static_cast<std::size_t>(a) * n + b];
          if (d <= 0.0) return;  // coincident points: zero subgradient
          const double s = sign * g / d;
          const double* ea = en->data.data() + static_cast<std::size_t>(a) * dim;
          const double* eb = en->data.data() + static_cast<std::size_t>(b) * dim;
          double* ga = en->grad.data() + static_cast<std::size_t>(a) * dim;
          double* gb = en->grad.data() + static_cast<std::size_t>(b) * dim;
          for (int j = 0; j < dim; ++j) {
            const double diff = ea[j] - eb[j];
            ga[j] += s * diff;
            gb[j] -= s * diff;
          }
        };
        for (int a = 0; a < n; ++a) {
          if (!active[static_cast<std::size_t>(a)]) continue;
          add_pair(a, hardest_pos[static_cast<std::size_t>(a)], +1.0);
          add_pair(a, hardest_neg[static_cast<std::size_t>(a)], -1.0);
        }
      });
}

LossBreakdown combined_loss(const std::vector<Tensor>& head_logits,
                            const std::vector<Tensor>& head_embeddings,
                            const std::vector<int>& labels,
                            const LossConfig& cfg) {
  if (head_logits.empty() || head_logits.size() != head_embeddings.size()) {
    throw ConfigError("combined_loss: logits/embedding head counts disagree");
  }
  LossBreakdown out;
  for (std::size_t l = 0; l < head_logits.size(); ++l) {
    Tensor x = xent_loss(head_logits[l], labels, cfg.epsilon);
    Tensor t = batch_hard_triplet(head_embeddings[l], labels, cfg.margin,
                                  cfg.reduction);
    out.xent_sum = l == 0 ? x : add(out.xent_sum, x);
    out.triplet_sum = l == 0 ? t : add(out.triplet_sum, t);
  }
  out.total = add(out.xent_sum, scale(out.triplet_sum, cfg.beta));
  return out;
}

Tensor total_loss(const std::vector<Tensor>& head_logits,
                  const std::vector<Tensor>& head_embeddings,
                  const std::vector<int>& labels, const LossConfig& cfg) {
  if (head_logits.size() != 6 || head_embeddings.size() != 6) {
    throw ConfigError("total_loss expects exactly 6 heads, got " +
                      std::to_string(head_logits.size()) + " logit and " +
                      std::to_string(head_embeddings.size()) +
                      " embedding heads");
  }
  return combined_loss(head_logits, head_embeddings, labels, cfg).total;
}

IdentityIndex IdentityIndex::from_labels(const std::vector<int>& labels) {
  IdentityIndex idx;
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw DataError("identity labels must be >= 0");
    max_label = std::max(max_label, l);
  }
  idx.rows_by_class.resize(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    idx.rows_by_class[static_cast<std::size_t>(labels[i])].push_back(
        static_cast<int>(i));
  }
  return idx;
}

int IdentityIndex::n_rows() const {
  int n = 0;
  for (const auto& rows : rows_by_class) n += static_cast<int>(rows.size());
  return n;
}

int IdentityIndex::n_nonempty_classes() const {
  int n = 0;
  for (const auto& rows : rows_by_class) n += rows.empty() ? 0 : 1;
  return n;
}

PkBatch pk_sample(const IdentityIndex& index, int p, int k, Rng& rng) {
  std::vector<int> classes;
  for (int c = 0; c < index.n_classes(); ++c) {
    if (!index.rows_by_class[static_cast<std::size_t>(c)].empty()) {
      classes.push_back(c);
    }
  }
  if (static_cast<int>(classes.size()) < p) {
    throw DataError("pk_sample: need at least " + std::to_string(p) +
                    " identities, manifest has " +
                    std::to_string(classes.size()));
  }
  rng.shuffle(classes);
  classes.resize(static_cast<std::size_t>(p));

  PkBatch batch;
  batch.rows.reserve(static_cast<std::size_t>(p) * k);
  batch.labels.reserve(static_cast<std::size_t>(p) * k);
  for (int c : classes) {
    const auto& rows = index.rows_by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(rows.size()) >= k) {
      std::vector<int> pick = rows;
      rng.shuffle(pick);
      for (int i = 0; i < k; ++i) {
        batch.rows.push_back(pick[static_cast<std::size_t>(i)]);
        batch.labels.push_back(c);
      }
    } else {
      // with-replacement fallback for identities with too few images
      for (int i = 0; i < k; ++i) {
        batch.rows.push_back(rows[rng.index(rows.size())]);
        batch.labels.push_back(c);
      }
    }
  }
  return batch;
}

}  // namespace laga
