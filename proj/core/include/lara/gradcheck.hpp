#pragma once

#include <functional>
#include <span>
#include <string>

#include "lara/tensor.hpp"

namespace lara {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
};

// Compares analytic gradients of the scalar-valued f against central finite
// differences over every element of every parameter.
//   rel_err = |analytic - numeric| / max(1, |numeric|)
// f must be deterministic and must not mutate the parameters. h defaults to
// the middle of the contract range [1e-4, 1e-2].
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                           double h = 1e-3);

}  // namespace lara
