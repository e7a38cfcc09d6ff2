#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace laga {

// Counter-based deterministic generator: a splitmix64 finalizer applied to a
// (stream, counter) pair. Child streams are derived by label or index, so
// independent consumers (per-parameter init, per-batch augmentation, per-head
// dropout) never share or shift each other's sequences. The whole state is
// two 64-bit words, which makes checkpointing trivial.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  static Rng restore(std::uint64_t stream, std::uint64_t counter);

  Rng child(std::string_view label) const;
  Rng child(std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal();  // standard normal via Box-Muller
  double normal(double mean, double stddev);
  std::size_t index(std::size_t n);  // uniform in [0, n)
  bool bernoulli(double p);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  std::uint64_t stream_id() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng() = default;

  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace laga
