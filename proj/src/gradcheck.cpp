#include "picnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "picnn/error.hpp"

namespace picnn {

double GradcheckReport::worst() const {
  return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
}

GradcheckReport gradcheck(const TensorFunction& f, std::vector<Tensor> inputs, double h) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  Tensor out = f(inputs);
  if (out.numel() != 1) throw ShapeError("gradcheck: function must return a scalar");
  backward(out);

  GradcheckReport report;
  for (Tensor& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    {
      NoGradGuard guard;
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double saved = d[i];
        d[i] = saved + h;
        const double fp = f(inputs).item();
        d[i] = saved - h;
        const double fm = f(inputs).item();
        d[i] = saved;
        numeric[i] = (fp - fm) / (2.0 * h);
      }
    }
    double diff = 0.0, scale = 1e-300;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    report.max_rel_error.push_back(diff / scale);
  }
  return report;
}

}  // namespace picnn
