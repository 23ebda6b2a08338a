#include "lara/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace lara {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                           double h) {
  if (h < 1e-4 || h > 1e-2) {
    throw std::invalid_argument("grad_check: h must lie in [1e-4, 1e-2]");
  }

  // Analytic pass.
  std::vector<std::vector<float>> analytic(params.size());
  {
    Tape tape;
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");
    tape.backward(loss);
    for (size_t p = 0; p < params.size(); ++p) {
      const std::vector<float>* g = tape.grad_data(params[p].node());
      analytic[p] = g ? *g : std::vector<float>(params[p].numel(), 0.0f);
    }
  }

  GradCheckReport report;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor param = params[p];
    std::span<float> values = param.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      const float saved = values[i];
      values[i] = static_cast<float>(saved + h);
      const double f_plus = f().item();
      values[i] = static_cast<float>(saved - h);
      const double f_minus = f().item();
      values[i] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw std::runtime_error("grad_check: non-finite probe value");
      }
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double rel =
          std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = "param" + std::to_string(p);
        report.worst_index = static_cast<int>(i);
      }
    }
  }
  return report;
}

}  // namespace lara
