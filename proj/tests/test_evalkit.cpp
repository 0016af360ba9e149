#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "fungi/error.hpp"
#include "fungi/evalkit.hpp"
#include "fungi/gradcheck.hpp"
#include "helpers.hpp"

using namespace fungi;
using fungi::testing::random_tensor;
using fungi::testing::sq_dist;

namespace {

// Full sort of every training row, then the documented vote.
Label brute_knn(const Tensor<double>& train, const std::vector<Label>& labels, std::span<const double> q, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < train.rows(); ++i) d.emplace_back(std::sqrt(sq_dist(train.row(i), q)), i);
    std::sort(d.begin(), d.end());
    std::map<Label, std::pair<std::size_t, double>> votes;
    for (std::size_t j = 0; j < k && j < d.size(); ++j) {
        auto& v = votes[labels[d[j].second]];
        ++v.first;
        v.second += d[j].first > 0 ? 1.0 / d[j].first : INFINITY;
    }
    Label best = 0;
    std::pair<std::size_t, double> top{0, -1};
    for (const auto& [label, v] : votes) {
        if (v.first > top.first || (v.first == top.first && v.second > top.second)) {
            top = v;
            best = label;
        }
    }
    return best;
}

Tensor<double> rotate(const Tensor<double>& x, std::uint64_t seed, double scale) {
    const std::size_t d = x.cols();
    const auto g = random_tensor({d, d}, seed);
    Eigen::MatrixXd m(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = g.at(i, j);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    Tensor<double> out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0;
            for (std::size_t t = 0; t < d; ++t) s += x.at(i, t) * q(t, j);
            out.at(i, j) = scale * s;
        }
    return out;
}

}  // namespace

TEST_CASE("kNN matches a brute-force oracle") {
    const auto train = random_tensor({1000, 8}, 1), test = random_tensor({200, 8}, 2);
    std::vector<Label> labels(1000);
    Rng rng(3);
    for (auto& l : labels) l = static_cast<Label>(uniform_int(rng, 0, 4));
    for (std::size_t k : {1, 20}) {
        const KnnIndex index(train, labels, k);
        const auto preds = knn_classify(index, test, 3);
        for (std::size_t i = 0; i < 200; ++i) CHECK(preds[i] == brute_knn(train, labels, test.row(i), k));
    }
}

TEST_CASE("kNN tie rules") {
    // Two labels with one vote each: the nearer neighbour's label wins.
    const auto train = Tensor<double>::matrix(2, 1, {1.0, -3.0});
    CHECK(knn_classify(KnnIndex(train, {7, 4}, 2), std::vector<double>{0.0}) == 7);
    // Equal distance and count: smaller label.
    const auto sym = Tensor<double>::matrix(2, 1, {1.0, -1.0});
    CHECK(knn_classify(KnnIndex(sym, {7, 4}, 2), std::vector<double>{0.0}) == 4);
}

TEST_CASE("few-shot subsets are per-class, seeded and sorted") {
    std::vector<Label> labels;
    for (int i = 0; i < 100; ++i) labels.push_back(i % 4);
    const auto a = few_shot_subset(labels, 5, 9);
    CHECK(a.size() == 20);
    CHECK(std::is_sorted(a.begin(), a.end()));
    std::map<Label, int> count;
    for (auto i : a) ++count[labels[i]];
    for (const auto& [l, c] : count) CHECK(c == 5);
    CHECK(a == few_shot_subset(labels, 5, 9));
    CHECK(a != few_shot_subset(labels, 5, 10));
}

TEST_CASE("accuracy modes and per-class deltas") {
    const std::vector<Label> y{0, 0, 0, 1}, p{0, 0, 1, 1};
    CHECK(accuracy(p, y) == doctest::Approx(0.75));
    CHECK(accuracy(p, y, AccuracyMode::mean_per_class) == doctest::Approx((2.0 / 3 + 1.0) / 2));
    const auto pa = per_class_accuracy(p, y), pb = per_class_accuracy(y, y);
    const auto d = per_class_delta(pa, pb);
    REQUIRE(d.size() == 2);
    double mean = 0;
    for (const auto& c : d) mean += c.delta / 2;
    // Mean of the per-class deltas equals the difference of the mean-per-class accuracies.
    CHECK(mean == doctest::Approx(accuracy(p, y, AccuracyMode::mean_per_class) - accuracy(y, y, AccuracyMode::mean_per_class)));
    CHECK(deltas_csv(d).rfind("class,acc_a,acc_b,delta\n0,", 0) == 0);
}

TEST_CASE("linear CKA identities and invariances") {
    const auto x = random_tensor({60, 10}, 4), y = random_tensor({60, 7}, 5);
    CHECK(linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-10));
    const double base = linear_cka(x, y);
    CHECK(base < 1.0);
    CHECK(linear_cka(rotate(x, 6, 1.0), y) == doctest::Approx(base).epsilon(1e-8));
    CHECK(linear_cka(rotate(x, 7, 3.7), y) == doctest::Approx(base).epsilon(1e-8));
    CHECK(linear_cka(x, rotate(y, 8, 0.2)) == doctest::Approx(base).epsilon(1e-8));
    CHECK(linear_cka(x, y) == doctest::Approx(linear_cka(y, x)).epsilon(1e-12));
    // HSIC form with explicit centring matrices.
    const std::size_t n = 60;
    Eigen::MatrixXd X(n, 10), Y(n, 7);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 10; ++j) X(i, j) = x.at(i, j);
        for (std::size_t j = 0; j < 7; ++j) Y(i, j) = y.at(i, j);
    }
    const Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
    const Eigen::MatrixXd K = H * X * X.transpose() * H, L = H * Y * Y.transpose() * H;
    const double hsic = (K.cwiseProduct(L)).sum();
    const double expect = hsic / std::sqrt((K.cwiseProduct(K)).sum() * (L.cwiseProduct(L)).sum());
    CHECK(base == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("k-means inertia never increases and separated blobs are found") {
    Tensor<double> x(Shape{90, 2});
    Rng rng(11);
    for (std::size_t i = 0; i < 90; ++i) {
        const double cx = (i % 3) * 10.0;
        x.at(i, 0) = cx + normal(rng, 0, 0.5);
        x.at(i, 1) = normal(rng, 0, 0.5);
    }
    const auto r = kmeans(x, 3, 5);
    for (std::size_t t = 1; t < r.inertia.size(); ++t) CHECK(r.inertia[t] <= r.inertia[t - 1] + 1e-9);
    std::vector<Label> labels(90);
    for (std::size_t i = 0; i < 90; ++i) labels[i] = static_cast<Label>(i % 3);
    CHECK(cluster_overlap(r.assignments, labels) == doctest::Approx(1.0));
    CHECK(kmeans(x, 3, 5).assignments == r.assignments);
}

TEST_CASE("Hungarian matches exhaustive search") {
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto c = random_tensor({6, 6}, 100 + s);
        const auto m = hungarian(c);
        double got = 0;
        for (std::size_t i = 0; i < 6; ++i) got += c.at(i, m[i]);
        std::vector<std::size_t> perm(6);
        std::iota(perm.begin(), perm.end(), 0);
        double best = INFINITY;
        do {
            double v = 0;
            for (std::size_t i = 0; i < 6; ++i) v += c.at(i, perm[i]);
            best = std::min(best, v);
        } while (std::next_permutation(perm.begin(), perm.end()));
        CHECK(got == doctest::Approx(best).epsilon(1e-12));
        auto sorted = m;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < 6; ++i) CHECK(sorted[i] == i);
    }
}

TEST_CASE("cluster overlap under relabelling") {
    const std::vector<std::size_t> a{2, 2, 0, 0, 1, 1};
    CHECK(cluster_overlap(a, {0, 0, 1, 1, 2, 2}) == doctest::Approx(1.0));
    CHECK(cluster_overlap({0, 0, 0, 1, 1, 1}, {0, 0, 1, 1, 1, 1}) == doctest::Approx(5.0 / 6));
}

TEST_CASE("probe objective gradient matches finite differences") {
    const auto x = random_tensor({12, 5}, 20);
    const std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
    LogisticModel m;
    m.classes = {0, 1, 2};
    m.weight = random_tensor({3, 5}, 21, 0.3);
    m.bias = {0.1, -0.2, 0.05};
    Tensor<double> gw;
    std::vector<double> gb;
    probe_objective(m, x, y, 0.3, &gw, &gb);
    std::vector<double> p = m.weight.values();
    p.insert(p.end(), m.bias.begin(), m.bias.end());
    const ScalarFn f = [&](std::span<const double> q) {
        auto mm = m;
        std::copy(q.begin(), q.begin() + 15, mm.weight.values().begin());
        std::copy(q.begin() + 15, q.end(), mm.bias.begin());
        return probe_objective(mm, x, y, 0.3);
    };
    auto analytic = gw.values();
    analytic.insert(analytic.end(), gb.begin(), gb.end());
    CHECK(max_relative_error(analytic, finite_diff_gradient(f, p, 1e-6), 1e-6) < 1e-6);
}

TEST_CASE("logistic probe separates separable classes") {
    Tensor<double> x(Shape{80, 2});
    std::vector<Label> y(80);
    Rng rng(30);
    for (std::size_t i = 0; i < 80; ++i) {
        y[i] = static_cast<Label>(i % 2);
        x.at(i, 0) = (y[i] ? 2.0 : -2.0) + normal(rng, 0, 0.3);
        x.at(i, 1) = normal(rng, 0, 1);
    }
    ProbeParams p;
    const auto r = logistic_probe(x, y, x, y, p);
    CHECK(r.lambdas == lambda_grid(p));
    CHECK(r.lambdas.front() == doctest::Approx(5e-6));
    CHECK(r.lambdas.back() == doctest::Approx(5e-4));
    CHECK(r.test_accuracy == doctest::Approx(1.0));
    const auto [tr, va] = stratified_split(y, 0.2, 1);
    CHECK(va.size() == 16);
    CHECK(tr.size() == 64);
}

TEST_CASE("average precision against hand-computed rankings") {
    // Ranking: 3 (0.9), 0 (0.8), 2 (0.5), 1 (0.1). Relevant {0, 1}: ranks 2 and 4.
    const std::vector<double> s{0.8, 0.1, 0.5, 0.9};
    CHECK(average_precision(s, {0, 1}) == doctest::Approx((1.0 / 2 + 2.0 / 4) / 2));
    CHECK(average_precision(s, {3}) == doctest::Approx(1.0));
    // Ties go to the smaller gallery index.
    const std::vector<double> t{0.5, 0.5};
    CHECK(average_precision(t, {1}) == doctest::Approx(0.5));
}

TEST_CASE("retrieval mAP skips queries without relevant items") {
    const auto g = Tensor<double>::matrix(3, 2, {1, 0, 0, 1, -1, 0});
    const auto q = Tensor<double>::matrix(2, 2, {2, 0.1, 0, 1});
    const auto r = retrieval_map(q, g, {{0}, {}});
    CHECK(r.evaluated == 1);
    CHECK(r.skipped == 1);
    CHECK(r.map == doctest::Approx(1.0));
}

TEST_CASE("report rendering") {
    EvalReport rep;
    rep.echo = {{"run.seed", "0"}};
    rep.rows = {{"embedding", "knn_top1", 0.5, std::nullopt}, {"fungi", "knn_top1", 0.75, 0.25}};
    const auto csv = rep.to_csv();
    CHECK(csv.rfind("# run.seed=0\nname,metric,value,delta\n", 0) == 0);
    CHECK(csv.find("fungi,knn_top1,") != std::string::npos);
    CHECK(rep.to_table().find("+") != std::string::npos);
}
