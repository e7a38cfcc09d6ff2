#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "laga/data.hpp"
#include "laga/model.hpp"
#include "laga/train.hpp"

namespace laga {

struct EmbeddingRecord {
  std::string path;
  int identity = 0;
  int camera = 0;
  std::vector<double> vec;
};

// 1 - cos(a,b), in [0,2]. Rejects zero-norm vectors.
double cosine_distance(std::span<const double> a, std::span<const double> b);

// Per query: gallery indices by ascending distance (ties broken by gallery
// index), same-identity match flags, and protocol junk flags. Junk entries
// are invisible to the metrics.
struct Ranking {
  std::vector<int> order;
  std::vector<char> match;
  std::vector<char> junk;
  int n_valid = 0;  // matches that are not junk
};

std::vector<Ranking> rank_from_distances(
    const std::vector<std::vector<double>>& dist, const std::vector<int>& q_ids,
    const std::vector<int>& q_cams, const std::vector<int>& g_ids,
    const std::vector<int>& g_cams, bool camera_filter);

std::vector<Ranking> rank_all(const std::vector<EmbeddingRecord>& queries,
                              const std::vector<EmbeddingRecord>& gallery,
                              bool camera_filter);

// Fraction of queries whose top-k non-junk entries contain a correct
// identity; queries without any valid match are skipped.
double cmc_at_k(const std::vector<Ranking>& rankings, int k);
double mean_ap(const std::vector<Ranking>& rankings);

struct RetrievalReport {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  int n_queries = 0;  // scored queries
  int n_dropped = 0;  // queries with zero valid matches
};

// Raises a protocol error when no query has a valid match (e.g. camera
// filtering on a single-camera gallery).
RetrievalReport evaluate(const std::vector<Ranking>& rankings);

bool multi_camera(const std::vector<EmbeddingRecord>& queries,
                  const std::vector<EmbeddingRecord>& gallery);

// Flip-averaged eval-mode embeddings for one manifest split ("all" embeds
// every row).
std::vector<EmbeddingRecord> embed_manifest(LagaModel& model,
                                            const Manifest& manifest,
                                            const std::string& split,
                                            const AugConfig& acfg);

// TSV rows: path, identity, camera, then the vector components as decimal
// text (shortest round-trip form).
void write_embeddings(const std::filesystem::path& path,
                      const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> read_embeddings(const std::filesystem::path& path);

struct AblationRow {
  std::string variant;
  int n_heads = 0;
  double rank1 = 0.0;  // averaged over the seeds
  double map = 0.0;
};

// Cumulative variants of the four-branch model ("global", "+local", "+CAM",
// "+SAM-RPE"), each trained from scratch per seed with branches toggled
// structurally, then scored on the manifest's query/gallery splits.
std::vector<AblationRow> ablate(const Manifest& manifest,
                                const ModelConfig& base_model,
                                const TrainConfig& tcfg, const LossConfig& lcfg,
                                const AugConfig& acfg,
                                const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds);

// Branch switches for one ablation variant name; UsageError on unknown names.
ModelConfig variant_config(const ModelConfig& base, const std::string& variant);

}  // namespace laga
