#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "laga/tensor.hpp"

namespace laga {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

// Flat binary checkpoint: magic "LAGA1", then per tensor: name length (u32
// LE), UTF-8 name, rank (u32 LE), dims (u32 LE each), payload (little-endian
// 64-bit floats). Records run until end of file.
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace laga
