#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "facedyn/graph.hpp"

namespace facedyn {

struct GradCheckParam {
  std::string name;
  std::size_t checked = 0;
  std::size_t excluded_kinks = 0;
  real max_rel_err = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckParam> params;
  real max_rel_err = 0;
  std::size_t excluded_kinks = 0;
  bool kink_at_zero = false;  // some ReLU input sat exactly on the kink
  bool pass = true;

  std::string summary() const;
};

// Compares backward() against central finite differences, component by
// component, over the given parameter tensors. Relative error uses a
// max(|a|, |b|, 1e-8) denominator. Components whose probe crosses a ReLU
// kink are excluded from the comparison and counted in the report.
GradCheckReport grad_check(Tape& tape, NodeId root,
                           std::span<const std::pair<std::string, Tensor*>> params,
                           real step = real(1e-3), real tol = real(1e-4));

}  // namespace facedyn
