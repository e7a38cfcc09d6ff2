#pragma once

#include <functional>
#include <vector>

#include "laga/tensor.hpp"

namespace laga {

// Compares the reverse-mode gradient of a scalar-valued graph against central
// finite differences and returns max |g_ad - g_fd| / (|g_fd| + 1e-8) over all
// parameter entries. `f` must rebuild the graph from the current parameter
// values on every call and be deterministic (fix dropout seeds, or disable
// dropout). Call at points without exact ties inside max/min reductions.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& params, double step = 1e-5);

}  // namespace laga
