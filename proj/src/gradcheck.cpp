#include "fungi/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fungi/error.hpp"

namespace fungi {

std::vector<double> finite_diff_gradient(const ScalarFn& f, std::span<const double> p, double eps,
                                         std::span<const std::size_t> coords) {
    if (!(eps > 0)) throw DataError("finite difference step must be positive");
    std::vector<double> x(p.begin(), p.end());
    std::vector<double> out;
    out.reserve(coords.size());
    for (std::size_t i : coords) {
        if (i >= x.size()) throw DataError("finite difference coordinate out of range");
        const double orig = x[i];
        x[i] = orig + eps;
        const double up = f(x);
        x[i] = orig - eps;
        const double down = f(x);
        x[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("non-finite function value in finite difference");
        out.push_back((up - down) / (2.0 * eps));
    }
    return out;
}

std::vector<double> finite_diff_gradient(const ScalarFn& f, std::span<const double> p, double eps) {
    std::vector<std::size_t> all(p.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return finite_diff_gradient(f, p, eps, all);
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
    if (a.size() != b.size()) throw ShapeError("relative error of vectors with different lengths");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        if (denom == 0.0) continue;
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace fungi
