#include "laga/gradcheck.hpp"

#include <cmath>

namespace laga {

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& params, double step) {
  for (const Tensor& p : params) {
    if (!p.requires_grad()) {
      throw UsageError("grad_check: all parameters must require grad");
    }
  }
  Tensor out = f(params);
  if (out.size() != 1) {
    throw UsageError("grad_check requires a scalar-valued function, got " +
                     shape_str(out.shape()));
  }
  backward(out);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double up, down;
      {
        NoGradGuard no_grad;
        data[i] = orig + step;
        up = f(params).value();
        data[i] = orig - step;
        down = f(params).value();
      }
      data[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double rel =
          std::abs(analytic[pi][i] - fd) / (std::abs(fd) + 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace laga
