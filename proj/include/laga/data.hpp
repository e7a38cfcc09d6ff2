#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "laga/tensor.hpp"

namespace laga {

struct Sample {
  std::string path;  // relative to the manifest directory unless absolute
  int identity = 0;
  int camera = 0;
  std::string split;  // train | query | gallery
};

// TSV index with header "path\tidentity\tcamera\tsplit". Train identities
// must be contiguous 0..C-1; no path may appear in both query and gallery;
// every query identity must be covered by the gallery.
struct Manifest {
  std::filesystem::path base_dir;
  std::vector<Sample> rows;

  std::vector<Sample> split(const std::string& name) const;
  std::filesystem::path resolve(const Sample& s) const;
  int n_train_classes() const;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
void validate_manifest(const Manifest& manifest);

// Synthetic identity set standing in for the licensed datasets: each identity
// is a fixed seeded patch texture; each image adds brightness, small
// translation and noise nuisances. Per identity one image goes to the
// gallery, roughly a third of the rest to the query split, the remainder to
// train, so retrieval runs against held-out images of trained identities.
struct SynthSpec {
  int n_identities = 20;
  int images_per_identity = 30;
  int height = 96;
  int width = 32;
  int n_cameras = 2;
  std::uint64_t seed = 7;
  double brightness = 0.25;   // multiplicative range +- around 1
  double translation = 0.10;  // max shift as a fraction of each dimension
  double noise = 0.05;        // additive uniform range

  void validate() const;
};

// Writes PPM images plus manifest.tsv into out_dir and returns the manifest.
// Byte-deterministic for a fixed spec.
Manifest synth_generate(const SynthSpec& spec,
                        const std::filesystem::path& out_dir);

// Binary PPM (P6, maxval 255) -> (3,H,W) in [0,1].
Tensor load_ppm(const std::filesystem::path& path);
void save_ppm(const Tensor& image, const std::filesystem::path& path);

// Bilinear resize with samples aligned to pixel centers.
Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

}  // namespace laga
