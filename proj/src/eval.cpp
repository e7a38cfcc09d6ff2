#include "laga/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace laga {

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_distance: vector lengths " +
                     std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw NumericError("cosine_distance: zero-norm vector");
  }
  const double d = 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
  return std::min(2.0, std::max(0.0, d));
}

std::vector<Ranking> rank_from_distances(
    const std::vector<std::vector<double>>& dist, const std::vector<int>& q_ids,
    const std::vector<int>& q_cams, const std::vector<int>& g_ids,
    const std::vector<int>& g_cams, bool camera_filter) {
  const std::size_t nq = dist.size();
  const std::size_t ng = g_ids.size();
  if (ng == 0) throw DataError("rank_from_distances: empty gallery");
  if (q_ids.size() != nq || q_cams.size() != nq || g_cams.size() != ng) {
    throw ShapeError("rank_from_distances: id/camera lists do not match the "
                     "distance matrix");
  }
  std::vector<Ranking> out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    if (dist[q].size() != ng) {
      throw ShapeError("rank_from_distances: row " + std::to_string(q) +
                       " has " + std::to_string(dist[q].size()) +
                       " entries for " + std::to_string(ng) + " gallery items");
    }
    Ranking& r = out[q];
    r.order.resize(ng);
    std::iota(r.order.begin(), r.order.end(), 0);
    std::sort(r.order.begin(), r.order.end(), [&](int a, int b) {
      const double da = dist[q][static_cast<std::size_t>(a)];
      const double db = dist[q][static_cast<std::size_t>(b)];
      return da != db ? da < db : a < b;
    });
    r.match.resize(ng);
    r.junk.resize(ng);
    for (std::size_t g = 0; g < ng; ++g) {
      const bool same_id = g_ids[g] == q_ids[q];
      const bool same_cam = g_cams[g] == q_cams[q];
      r.match[g] = same_id ? 1 : 0;
      r.junk[g] = (camera_filter && same_id && same_cam) ? 1 : 0;
      if (r.match[g] && !r.junk[g]) ++r.n_valid;
    }
  }
  return out;
}

std::vector<Ranking> rank_all(const std::vector<EmbeddingRecord>& queries,
                              const std::vector<EmbeddingRecord>& gallery,
                              bool camera_filter) {
  if (gallery.empty()) throw DataError("rank_all: empty gallery");
  auto check_norm = [](const EmbeddingRecord& r) {
    double n = 0.0;
    for (double v : r.vec) n += v * v;
    if (n == 0.0) {
      throw NumericError("zero-norm embedding for record '" + r.path + "'");
    }
  };
  for (const EmbeddingRecord& r : queries) check_norm(r);
  for (const EmbeddingRecord& r : gallery) check_norm(r);

  std::vector<std::vector<double>> dist(queries.size());
  std::vector<int> q_ids, q_cams, g_ids, g_cams;
  for (const EmbeddingRecord& r : queries) {
    q_ids.push_back(r.identity);
    q_cams.push_back(r.camera);
  }
  for (const EmbeddingRecord& r : gallery) {
    g_ids.push_back(r.identity);
    g_cams.push_back(r.camera);
  }
  for (std::size_t q = 0; q < queries.size(); ++q) {
    dist[q].resize(gallery.size());
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      dist[q][g] = cosine_distance(queries[q].vec, gallery[g].vec);
    }
  }
  return rank_from_distances(dist, q_ids, q_cams, g_ids, g_cams, camera_filter);
}

double cmc_at_k(const std::vector<Ranking>& rankings, int k) {
  int scored = 0, hits = 0;
  for (const Ranking& r : rankings) {
    if (r.n_valid == 0) continue;
    ++scored;
    int pos = 0;
    for (int g : r.order) {
      if (r.junk[static_cast<std::size_t>(g)]) continue;
      ++pos;
      if (pos > k) break;
      if (r.match[static_cast<std::size_t>(g)]) {
        ++hits;
        break;
      }
    }
  }
  return scored == 0 ? 0.0 : static_cast<double>(hits) / scored;
}

double mean_ap(const std::vector<Ranking>& rankings) {
  int scored = 0;
  double total = 0.0;
  for (const Ranking& r : rankings) {
    if (r.n_valid == 0) continue;
    ++scored;
    int pos = 0, hits = 0;
    double ap = 0.0;
    for (int g : r.order) {
      if (r.junk[static_cast<std::size_t>(g)]) continue;
      ++pos;
      if (r.match[static_cast<std::size_t>(g)]) {
        ++hits;
        ap += static_cast<double>(hits) / pos;
      }
    }
    total += ap / r.n_valid;
  }
  return scored == 0 ? 0.0 : total / scored;
}

RetrievalReport evaluate(const std::vector<Ranking>& rankings) {
  RetrievalReport rep;
  for (const Ranking& r : rankings) {
    if (r.n_valid == 0) {
      ++rep.n_dropped;
    } else {
      ++rep.n_queries;
    }
  }
  if (rep.n_queries == 0) {
    throw DataError(
        "protocol error: no query has a valid match after junk removal; "
        "single-camera data must be evaluated with the camera filter off");
  }
  rep.rank1 = cmc_at_k(rankings, 1);
  rep.rank5 = cmc_at_k(rankings, 5);
  rep.rank10 = cmc_at_k(rankings, 10);
  rep.map = mean_ap(rankings);
  return rep;
}

bool multi_camera(const std::vector<EmbeddingRecord>& queries,
                  const std::vector<EmbeddingRecord>& gallery) {
  std::set<int> cams;
  for (const EmbeddingRecord& r : queries) cams.insert(r.camera);
  for (const EmbeddingRecord& r : gallery) cams.insert(r.camera);
  return cams.size() > 1;
}

std::vector<EmbeddingRecord> embed_manifest(LagaModel& model,
                                            const Manifest& manifest,
                                            const std::string& split,
                                            const AugConfig& acfg) {
  std::vector<Sample> rows =
      split == "all" ? manifest.rows : manifest.split(split);
  if (rows.empty()) {
    throw DataError("manifest has no rows in split '" + split + "'");
  }
  Rng dummy(0);
  std::vector<EmbeddingRecord> out;
  out.reserve(rows.size());
  for (const Sample& s : rows) {
    Tensor img = load_ppm(manifest.resolve(s));
    Tensor pre = augment(img, acfg, model.config().input_h,
                         model.config().input_w, Mode::kEval, dummy);
    EmbeddingRecord rec;
    rec.path = s.path;
    rec.identity = s.identity;
    rec.camera = s.camera;
    rec.vec = model.flip_average(pre);
    out.push_back(std::move(rec));
  }
  return out;
}

void write_embeddings(const std::filesystem::path& path,
                      const std::vector<EmbeddingRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write embeddings: " + path.string());
  for (const EmbeddingRecord& r : records) {
    f << r.path << '\t' << r.identity << '\t' << r.camera;
    for (double v : r.vec) f << '\t' << format_double(v);
    f << '\n';
  }
  if (!f) throw DataError("embedding write failed: " + path.string());
}

std::vector<EmbeddingRecord> read_embeddings(
    const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open embeddings: " + path.string());
  std::vector<EmbeddingRecord> out;
  std::string line;
  int line_no = 0;
  std::size_t dim = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 4) {
      throw FormatError("embedding line " + std::to_string(line_no) +
                        ": expected path, identity, camera and vector");
    }
    EmbeddingRecord r;
    r.path = fields[0];
    try {
      r.identity = std::stoi(fields[1]);
      r.camera = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw FormatError("embedding line " + std::to_string(line_no) +
                        ": bad identity/camera field");
    }
    for (std::size_t i = 3; i < fields.size(); ++i) {
      double v = 0.0;
      const auto res = std::from_chars(
          fields[i].data(), fields[i].data() + fields[i].size(), v);
      if (res.ec != std::errc() ||
          res.ptr != fields[i].data() + fields[i].size()) {
        throw FormatError("embedding line " + std::to_string(line_no) +
                          ": bad vector component '" + fields[i] + "'");
      }
      r.vec.push_back(v);
    }
    if (dim == 0) {
      dim = r.vec.size();
    } else if (r.vec.size() != dim) {
      throw DataError("embedding line " + std::to_string(line_no) +
                      ": dimension " + std::to_string(r.vec.size()) +
                      " differs from earlier rows (" + std::to_string(dim) +
                      ")");
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

ModelConfig variant_config(const ModelConfig& base, const std::string& variant) {
  ModelConfig cfg = base;
  cfg.branch_spatial = false;
  cfg.branch_channel = false;
  cfg.branch_global = true;
  cfg.branch_local = false;
  if (variant == "global") {
    return cfg;
  }
  cfg.branch_local = true;
  if (variant == "+local") {
    return cfg;
  }
  cfg.branch_channel = true;
  if (variant == "+CAM") {
    return cfg;
  }
  cfg.branch_spatial = true;
  if (variant == "+SAM-RPE") {
    return cfg;
  }
  throw UsageError("unknown ablation variant '" + variant +
                   "' (expected global, +local, +CAM, +SAM-RPE)");
}

std::vector<AblationRow> ablate(const Manifest& manifest,
                                const ModelConfig& base_model,
                                const TrainConfig& tcfg, const LossConfig& lcfg,
                                const AugConfig& acfg,
                                const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds) {
  if (variants.empty()) throw UsageError("ablate: no variants listed");
  if (seeds.empty()) throw UsageError("ablate: no seeds listed");

  std::vector<AblationRow> rows;
  for (const std::string& variant : variants) {
    ModelConfig mcfg = variant_config(base_model, variant);
    mcfg.n_classes = manifest.n_train_classes();
    AblationRow row;
    row.variant = variant;
    for (std::uint64_t seed : seeds) {
      TrainConfig vt = tcfg;
      vt.seed = seed;
      LagaModel model(mcfg, seed);
      row.n_heads = model.n_heads();
      train_model(model, manifest, vt, lcfg, acfg);
      const std::vector<EmbeddingRecord> queries =
          embed_manifest(model, manifest, "query", acfg);
      const std::vector<EmbeddingRecord> gallery =
          embed_manifest(model, manifest, "gallery", acfg);
      const std::vector<Ranking> rankings =
          rank_all(queries, gallery, multi_camera(queries, gallery));
      const RetrievalReport rep = evaluate(rankings);
      row.rank1 += rep.rank1;
      row.map += rep.map;
    }
    row.rank1 /= static_cast<double>(seeds.size());
    row.map /= static_cast<double>(seeds.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace laga
