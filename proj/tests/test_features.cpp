#include <doctest.h>

#include <cmath>

#include "fungi/error.hpp"
#include "fungi/evalkit.hpp"
#include "fungi/features.hpp"
#include "helpers.hpp"

using namespace fungi;
using fungi::testing::random_tensor;
using fungi::testing::sq_dist;

namespace {

// Fraction of pairwise distances preserved within `tol` (relative) after projecting and
// rescaling by the expected length gain.
double jl_fraction(ProjectionKind kind, std::size_t n, std::size_t in, std::size_t out, double tol) {
    const auto x = random_tensor({n, in}, 1);
    const ProjectionMatrix r(kind, out, in, 77);
    const auto y = project_rows(r, x);
    const double gain = std::sqrt(static_cast<double>(out) * r.entry_second_moment());
    std::size_t ok = 0, total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double a = std::sqrt(sq_dist(x.row(i), x.row(j)));
            const double b = std::sqrt(sq_dist(y.row(i), y.row(j))) / gain;
            ok += std::fabs(b - a) <= tol * a;
            ++total;
        }
    }
    return static_cast<double>(ok) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("flatten puts the bias after each weight row and unflatten inverts it") {
    LayerGradient<double> g{Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6}), Tensor<double>::vector({7, 8})};
    const auto flat = flatten_gradient(g);
    CHECK(flat == std::vector<double>{1, 2, 3, 7, 4, 5, 6, 8});
    const auto back = unflatten_gradient(flat, 2, 3);
    CHECK(back.weight.values() == g.weight.values());
    CHECK(back.bias.values() == g.bias.values());
    CHECK_THROWS_AS(unflatten_gradient(flat, 3, 3), ShapeError);
}

TEST_CASE("projection rows are regenerated from the seed") {
    for (auto kind : {ProjectionKind::binary, ProjectionKind::gaussian, ProjectionKind::sparse}) {
        const ProjectionMatrix r(kind, 8, 300, 5);
        const auto m = r.materialize();
        std::vector<double> row(300);
        r.fill_row(3, row);
        CHECK(std::vector<double>(m.row(3).begin(), m.row(3).end()) == row);
        const ProjectionMatrix other(kind, 8, 300, 6);
        CHECK(other.materialize().values() != m.values());
        const auto g = random_tensor({300}, 9);
        const auto a = project(r, g.values()), b = project(m, g.values());
        for (std::size_t i = 0; i < 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
        CHECK(parse_projection_kind(to_string(kind)) == kind);
    }
    CHECK_THROWS_AS(parse_projection_kind("fourier"), ConfigError);
}

TEST_CASE("projection entry statistics") {
    const std::size_t in = 10000;
    for (auto kind : {ProjectionKind::binary, ProjectionKind::gaussian, ProjectionKind::sparse}) {
        const auto m = ProjectionMatrix(kind, 20, in, 3).materialize();
        double s1 = 0, s2 = 0;
        std::size_t zeros = 0;
        for (double v : m.values()) {
            s1 += v;
            s2 += v * v;
            zeros += v == 0.0;
            if (kind != ProjectionKind::gaussian) CHECK((v == 0.0 || v == 1.0 || v == -1.0));
        }
        const double n = static_cast<double>(m.numel());
        const double density = kind == ProjectionKind::sparse ? 0.01 : 1.0;
        // Mean 0, second moment = density; tolerances are a few standard errors.
        CHECK(std::fabs(s1 / n) < 5 * std::sqrt(density / n));
        CHECK(s2 / n == doctest::Approx(density).epsilon(kind == ProjectionKind::gaussian ? 0.01 : 0.05));
        if (kind == ProjectionKind::binary) CHECK(zeros == 0);
        if (kind == ProjectionKind::sparse) CHECK(1.0 - static_cast<double>(zeros) / n == doctest::Approx(0.01).epsilon(0.05));
    }
}

TEST_CASE("projected distances follow Johnson-Lindenstrauss") {
    for (auto kind : {ProjectionKind::binary, ProjectionKind::gaussian, ProjectionKind::sparse}) {
        CHECK(jl_fraction(kind, 60, 10000, 512, 0.35) >= 0.99);
    }
}

TEST_CASE("fuse normalises each segment and keeps the order") {
    const std::vector<double> a{3, 4}, b{0, 0, 2};
    const auto f = fuse({a, b});
    CHECK(f == std::vector<double>{0.6, 0.8, 0, 0, 1});
    const std::vector<double> z{0, 0};
    CHECK_THROWS_AS(fuse({a, z}), NumericError);
    CHECK_THROWS_AS(fuse({}), DataError);
}

TEST_CASE("PCA recovers rank-k data") {
    const std::size_t n = 80, d = 30, k = 4;
    const auto a = random_tensor({n, k}, 11), b = random_tensor({k, d}, 12), mu = random_tensor({d}, 13, 5.0);
    Tensor<double> x(Shape{n, d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = mu[j];
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
            x.at(i, j) = s;
        }
    }
    const auto model = fit_pca(x, k);
    const auto rec = reconstruct_pca(model, apply_pca(model, x));
    double err = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) err = std::max(err, std::fabs(rec[i] - x[i]));
    CHECK(err < 1e-6);
    for (std::size_t t = 1; t < k; ++t) CHECK(model.explained_variance[t] <= model.explained_variance[t - 1]);

    // Orthonormal components whose largest-magnitude entry is positive.
    for (std::size_t p = 0; p < k; ++p) {
        double big = 0;
        for (std::size_t j = 0; j < d; ++j) {
            if (std::fabs(model.components.at(p, j)) > std::fabs(big)) big = model.components.at(p, j);
        }
        CHECK(big > 0);
        for (std::size_t q = 0; q < k; ++q) {
            double dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += model.components.at(p, j) * model.components.at(q, j);
            CHECK(dot == doctest::Approx(p == q ? 1.0 : 0.0).epsilon(1e-10).scale(1.0));
        }
    }
}

TEST_CASE("explained variance matches the projected sample variance") {
    const auto x = random_tensor({50, 6}, 14);
    const auto model = fit_pca(x, 3);
    const auto y = apply_pca(model, x);
    for (std::size_t k = 0; k < 3; ++k) {
        double s = 0, s2 = 0;
        for (std::size_t i = 0; i < 50; ++i) {
            s += y.at(i, k);
            s2 += y.at(i, k) * y.at(i, k);
        }
        CHECK(std::fabs(s / 50) < 1e-10);
        CHECK(s2 / 49 == doctest::Approx(model.explained_variance[k]).epsilon(1e-10));
    }
    CHECK_THROWS_AS(fit_pca(x, 7), DataError);
}

TEST_CASE("full-width PCA leaves kNN predictions unchanged") {
    const std::size_t d = 16;
    const auto train = random_tensor({300, d}, 15), test = random_tensor({60, d}, 16);
    std::vector<Label> labels(300);
    for (std::size_t i = 0; i < 300; ++i) labels[i] = static_cast<Label>(train.at(i, 0) > 0) + 2 * (train.at(i, 1) > 0);
    const auto model = fit_pca(train, d);
    for (std::size_t k : {1, 20}) {
        const auto before = knn_classify(KnnIndex(train, labels, k), test);
        const auto after = knn_classify(KnnIndex(apply_pca(model, train), labels, k), apply_pca(model, test));
        CHECK(before == after);
    }
}

TEST_CASE("feature bank append and validation") {
    FeatureBank bank;
    bank.objectives = {"kl"};
    bank.append(FeatureRecord{1, 0, {1, 2}, {{3, 4, 5}}, {6, 7}});
    bank.append(FeatureRecord{2, 1, {1, 3}, {{3, 4, 6}}, {6, 8}});
    bank.validate();
    CHECK(bank.size() == 2);
    CHECK(bank.dim() == 2);
    CHECK(bank.record(1).gradients[0] == std::vector<double>{3, 4, 6});
    auto dup = bank;
    dup.ids[1] = 1;
    CHECK_THROWS_AS(dup.validate(), DataError);
    CHECK_THROWS_AS(bank.append(FeatureRecord{3, 1, {1, 3}, {{3, 4}}, {6, 8}}), ShapeError);
}
