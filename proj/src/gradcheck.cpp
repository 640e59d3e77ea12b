#include "msdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace msdet {

namespace {

double eval_scalar(const ScalarFn& f, std::span<const Tensor> inputs) {
  NoGradGuard guard;
  const Tensor out = f(inputs);
  const double v = out.item();
  if (!std::isfinite(v)) throw TensorError("gradcheck: function value is not finite");
  return v;
}

}  // namespace

GradcheckReport gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, const GradcheckOptions& opts) {
  for (const auto& t : inputs) {
    if (!t.requires_grad() || !t.is_leaf()) throw TensorError("gradcheck inputs must be leaves requiring grad");
    for (double v : t.values()) {
      if (!std::isfinite(v)) throw TensorError("gradcheck: non-finite input value");
    }
  }
  for (auto& t : inputs) t.zero_grad();

  const Tensor out = f(inputs);
  if (out.numel() != 1) throw TensorError("gradcheck: function must return a scalar, got " + shape_str(out.shape()));
  if (!std::isfinite(out.item())) throw TensorError("gradcheck: function value is not finite");
  out.backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  GradcheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<std::size_t> idx(inputs[k].numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_checks_per_input != 0 && idx.size() > opts.max_checks_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_checks_per_input);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      auto vals = inputs[k].mutable_values();
      const double orig = vals[i];
      vals[i] = orig + opts.step;
      const double fp = eval_scalar(f, inputs);
      vals[i] = orig - opts.step;
      const double fm = eval_scalar(f, inputs);
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = analytic[k][i];
      if (!std::isfinite(a)) throw TensorError("gradcheck: non-finite autodiff gradient");
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst.empty()) {
        if (rel >= report.max_rel_error) {
          report.max_rel_error = rel;
          std::ostringstream os;
          os.precision(10);
          os << "input " << k << " element " << i << ": autodiff " << a << " vs numeric " << numeric;
          report.worst = os.str();
        }
      }
    }
  }
  report.passed = report.max_rel_error <= opts.tol;
  return report;
}

}  // namespace msdet
