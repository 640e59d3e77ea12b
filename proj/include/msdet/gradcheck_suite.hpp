#pragma once

#include <functional>
#include <string>
#include <vector>

#include "msdet/gradcheck.hpp"

namespace msdet {

/// Named finite-difference checks over every differentiable op and block,
/// each reducing its output to a scalar through a fixed random projection.
struct GradcheckCase {
  std::string name;
  std::function<GradcheckReport(const GradcheckOptions&)> run;
};

const std::vector<GradcheckCase>& gradcheck_registry();

}  // namespace msdet
