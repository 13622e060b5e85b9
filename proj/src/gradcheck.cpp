#include "rescaps/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace rescaps {

GradCheckReport finite_diff_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    double tol) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be > 0");

  double base1 = f().item();
  double base2 = f().item();
  if (base1 != base2) {
    throw std::runtime_error(
        "finite_diff_check: f is not deterministic (baselines " +
        std::to_string(base1) + " vs " + std::to_string(base2) + ")");
  }

  std::vector<std::vector<double>> analytic(params.size());
  for (const auto& [name, p] : params) Tensor(p).zero_grad();
  {
    Tensor loss = f();
    backward(loss);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].second;
    analytic[i] = p.has_grad() ? p.grad()
                               : std::vector<double>(p.size(), 0.0);
  }

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto& data = p.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      double saved = data[j];
      data[j] = saved + h;
      double fp = f().item();
      data[j] = saved - h;
      double fm = f().item();
      data[j] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[i][j];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      double rel = std::fabs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[i].first;
        report.worst_index = j;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace rescaps
