#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "laga/tensor.hpp"

namespace laga {

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable;  // false for buffers such as batch-norm running stats
};

// Named parameters and buffers in registration order; registration order is
// the checkpoint serialization order.
class ParamStore {
 public:
  Tensor declare(const std::string& name, Shape shape,
                 std::vector<double> init, bool trainable);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  const std::vector<ParamEntry>& entries() const { return entries_; }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace laga
