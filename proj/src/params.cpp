#include "laga/params.hpp"

namespace laga {

Tensor ParamStore::declare(const std::string& name, Shape shape,
                           std::vector<double> init, bool trainable) {
  if (index_.count(name)) {
    throw ConfigError("duplicate parameter name: " + name);
  }
  Tensor t = trainable ? Tensor::param(std::move(shape), std::move(init))
                       : Tensor::from_data(std::move(shape), std::move(init));
  index_[name] = entries_.size();
  entries_.push_back({name, t, trainable});
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].tensor;
}

const Tensor* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].tensor;
}

}  // namespace laga
