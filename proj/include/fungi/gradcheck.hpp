#pragma once

#include <functional>
#include <span>
#include <vector>

namespace fungi {

using ScalarFn = std::function<double(std::span<const double>)>;

// Central differences (f(p + eps e_i) - f(p - eps e_i)) / (2 eps) for every coordinate.
std::vector<double> finite_diff_gradient(const ScalarFn& f, std::span<const double> p, double eps);

// Same, restricted to the listed coordinates (result has one entry per index).
std::vector<double> finite_diff_gradient(const ScalarFn& f, std::span<const double> p, double eps,
                                         std::span<const std::size_t> coords);

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps coordinates whose true
// value is ~0 from dominating through rounding noise.
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor);

}  // namespace fungi
