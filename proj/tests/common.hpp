// SPDX-License-Identifier: Apache-2.0
/**
 * @file   common.hpp
 * @brief  Helpers shared by the unit test suites
 */
#pragma once

#include <nnplan/graph.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#ifndef NNPLAN_MODEL_DIR
#error "NNPLAN_MODEL_DIR must point at the models/ directory"
#endif

namespace nnplan::test {

inline std::filesystem::path model_path(const std::string &name) {
  return std::filesystem::path(NNPLAN_MODEL_DIR) / name;
}

inline ModelGraph model(const std::string &name) {
  return load_model(model_path(name));
}

/// Central differences of a scalar function of a float vector, evaluated in
/// double around the current point.
inline std::vector<double>
numeric_gradient(std::vector<float> &x,
                 const std::function<double(const std::vector<float> &)> &f,
                 double h = 1e-3) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float keep = x[i];
    x[i] = static_cast<float>(keep + h);
    const double up = f(x);
    x[i] = static_cast<float>(keep - h);
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max |a - b| / max(|b|, floor)
inline double max_rel_error(const std::vector<double> &a,
                            const std::vector<double> &b,
                            double floor = 1e-2) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) /
                                std::max(std::abs(b[i]), floor));
  return worst;
}

} // namespace nnplan::test
