#pragma once

// Shared fixtures for the unit tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fungi/config.hpp"
#include "fungi/gradcheck.hpp"
#include "fungi/rng.hpp"
#include "fungi/tensor.hpp"

namespace fungi::testing {

template <typename T = double>
inline Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(normal(rng, 0.0, scale));
    return t;
}

inline Tensor<double> random_unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
    Tensor<double> t = random_tensor({n, d}, seed);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (double v : t.row(i)) s += v * v;
        s = std::sqrt(s);
        for (double& v : t.row(i)) v /= s;
    }
    return t;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

// Relative error with a floor tied to the gradient's own scale, so exactly-zero coordinates
// (e.g. key biases under softmax shift invariance) compare against rounding noise sensibly.
inline double rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double scale = 0;
    for (double v : analytic) scale = std::max(scale, std::fabs(v));
    return max_relative_error(analytic, numeric, 1e-4 * scale);
}

// Small encoder and reduced view counts so a full extraction runs in well under a second.
inline RunConfig desk_config() {
    RunConfig c;
    c.set("backbone", "image_size", "32");
    c.set("backbone", "patch_size", "8");
    c.set("dino", "crop_size", "32");
    c.set("dino", "local_crops", "4");
    c.set("simclr", "negative_images", "8");
    c.set("simclr", "patch_base", "64");
    c.set("simclr", "patch_size", "32");
    c.set("simclr", "patch_grid", "3");
    c.set("synth", "image_size", "32");
    c.set("pca", "dim", "64");
    return c;
}

}  // namespace fungi::testing
