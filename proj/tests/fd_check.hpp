#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cfodds/net.hpp"

namespace cfodds::testing {

// Central-difference gradient audit over a set of parameter blocks. The loss
// closure must be a pure function of the current parameter values (fix all
// seeds inside it). Relative error uses a 1e-4 absolute floor in the
// denominator so coordinates whose true gradient is ~0 are compared at an
// absolute scale instead of amplifying finite-difference roundoff.
struct FdReport {
  double max_rel_error = 0.0;
  std::string worst_block;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

inline FdReport fd_check(const std::vector<net::ParamBlock>& params,
                         const std::vector<net::ParamBlock>& analytic_grads,
                         const std::function<double()>& loss, double h = 1e-5) {
  FdReport report;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size; ++i) {
      const double saved = params[b].data[i];
      params[b].data[i] = saved + h;
      const double up = loss();
      params[b].data[i] = saved - h;
      const double down = loss();
      params[b].data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = analytic_grads[b].data[i];
      const double denom = std::max({1e-4, std::abs(analytic), std::abs(numeric)});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_block = params[b].name;
        report.worst_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace cfodds::testing
