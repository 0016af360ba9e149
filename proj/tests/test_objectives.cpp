#include <doctest.h>

#include <cmath>
#include <functional>
#include <set>

#include "fungi/error.hpp"
#include "fungi/objectives.hpp"
#include "fungi/segmem.hpp"
#include "helpers.hpp"

using namespace fungi;
using fungi::testing::random_tensor;
using fungi::testing::random_unit_rows;
using fungi::testing::rel_error;

namespace {

std::vector<double> softmax_row(std::span<const double> z, double tau) {
    double m = -INFINITY;
    for (double v : z) m = std::max(m, v / tau);
    std::vector<double> p(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] / tau - m);
    for (double& v : p) v /= s;
    return p;
}

// Scalar loss and gradient wrt a parameter tensor, computed on a fresh tape.
template <typename F>
std::pair<double, std::vector<double>> value_and_grad(const Tensor<double>& x, F&& loss_of) {
    ad::Tape<double> tape;
    const auto v = tape.parameter(x);
    const auto loss = loss_of(v);
    const double value = loss.value().item();
    return {value, tape.backward(loss).at(v).values()};
}

template <typename F>
std::vector<double> numeric_grad(const Tensor<double>& x, F&& loss_of) {
    const ScalarFn f = [&](std::span<const double> p) {
        ad::Tape<double> tape;
        return loss_of(tape.constant(Tensor<double>(x.shape(), std::vector<double>(p.begin(), p.end())))).value().item();
    };
    return finite_diff_gradient(f, x.values(), 1e-5);
}

EncoderConfig tiny() {
    EncoderConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.dim = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    return c;
}

double loss_value(const EncoderParams<double>& p, const ObjectiveFn<double>& fn) {
    ad::Tape<double> tape;
    return fn(bind_encoder(tape, p)).value().item();
}

using LossOracle = std::function<double(const EncoderParams<double>&)>;

// Harvested attn_proj gradient of `fn` against central differences of `oracle`.
double layer_grad_error(const EncoderParams<double>& params, const ObjectiveFn<double>& fn, const LossOracle& oracle) {
    const auto src = GradientSource::last_attn_proj(params.config);
    const auto g = loss_gradient(params, src, fn);
    const ScalarFn f = [&](std::span<const double> w) {
        auto p = params;
        std::copy(w.begin(), w.end(), p.get(src.weight_name()).values().begin());
        return oracle(p);
    };
    return rel_error(g.weight.values(), finite_diff_gradient(f, params.get(src.weight_name()).values(), 1e-4));
}

// KL(U || softmax(y)) = log(mean(exp(y - mean(y)))), evaluated without the cancellation of the
// log-softmax form (the loss is tiny at large temperatures).
double stable_kl(std::span<const double> z, double tau) {
    double m = 0;
    for (double v : z) m += v / tau;
    m /= static_cast<double>(z.size());
    double s = 0;
    for (double v : z) s += std::expm1(v / tau - m);
    return std::log1p(s / static_cast<double>(z.size()));
}

}  // namespace

TEST_CASE("objective names") {
    for (auto k : {ObjectiveKind::kl, ObjectiveKind::dino, ObjectiveKind::simclr, ObjectiveKind::simclr_patch}) {
        CHECK(parse_objective(to_string(k)) == k);
    }
    CHECK_THROWS_AS(parse_objective("byol"), ConfigError);
}

TEST_CASE("KL is stationary at uniform logits") {
    const auto [value, grad] = value_and_grad(Tensor<double>(Shape{1, 768}, 0.37), [](const auto& z) {
        return kl_loss(z, 15.0);
    });
    CHECK(std::fabs(value) < 1e-12);
    double n = 0;
    for (double g : grad) n += g * g;
    CHECK(std::sqrt(n) < 1e-8);
}

TEST_CASE("KL value against the direct sum, both directions") {
    const auto z = random_tensor({1, 7}, 1, 3.0);
    const double tau = 1.7;
    const auto p = softmax_row(z.row(0), tau);
    double fwd = 0, rev = 0;
    for (double q : p) {
        fwd += (1.0 / 7) * std::log((1.0 / 7) / q);
        rev += q * std::log(q * 7);
    }
    ad::Tape<double> tape;
    CHECK(kl_loss(tape.constant(z), tau).value().item() == doctest::Approx(fwd).epsilon(1e-12));
    CHECK(kl_loss(tape.constant(z), tau, KlDirection::model_to_uniform).value().item() == doctest::Approx(rev).epsilon(1e-12));
}

TEST_CASE("KL gradient matches finite differences") {
    const auto z = random_tensor({1, 9}, 2, 5.0);
    for (auto dir : {KlDirection::uniform_to_model, KlDirection::model_to_uniform}) {
        auto loss = [dir](const auto& v) { return kl_loss(v, 1.3, dir); };
        CHECK(rel_error(value_and_grad(z, loss).second, numeric_grad(z, loss)) < 1e-7);
    }
}

TEST_CASE("DINO value against the direct cross-entropy sum") {
    const auto student = random_tensor({4, 5}, 3), teacher = random_tensor({2, 5}, 4);
    const double ts = 0.1, tt = 0.07;
    double expect = 0;
    std::size_t pairs = 0;
    for (std::size_t t = 0; t < 2; ++t) {
        const auto pt = softmax_row(teacher.row(t), tt);
        for (std::size_t s = 0; s < 4; ++s) {
            if (s == t) continue;
            const auto qs = softmax_row(student.row(s), ts);
            for (std::size_t j = 0; j < 5; ++j) expect -= pt[j] * std::log(qs[j]);
            ++pairs;
        }
    }
    expect /= static_cast<double>(pairs);
    ad::Tape<double> tape;
    CHECK(dino_loss(tape.constant(student), teacher, ts, tt).value().item() == doctest::Approx(expect).epsilon(1e-12));
    auto loss = [&](const auto& v) { return dino_loss(v, teacher, ts, tt); };
    CHECK(rel_error(value_and_grad(student, loss).second, numeric_grad(student, loss)) < 1e-6);
    CHECK_THROWS_AS(dino_loss(tape.constant(student), random_tensor({1, 5}, 5), ts, tt), DataError);
}

TEST_CASE("SimCLR value against the direct InfoNCE sum") {
    const auto pos = random_unit_rows(5, 6, 6), neg = random_unit_rows(7, 6, 7);
    const double tau = 0.5;
    auto dot = [](std::span<const double> a, std::span<const double> b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    double expect = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        double denom = 0;
        for (std::size_t k = 0; k < 5; ++k) {
            if (k != i) denom += std::exp(dot(pos.row(i), pos.row(k)) / tau);
        }
        for (std::size_t k = 0; k < 7; ++k) denom += std::exp(dot(pos.row(i), neg.row(k)) / tau);
        for (std::size_t j = 0; j < 5; ++j) {
            if (j != i) expect += -std::log(std::exp(dot(pos.row(i), pos.row(j)) / tau) / denom);
        }
    }
    expect /= 20.0;
    ad::Tape<double> tape;
    CHECK(simclr_loss(tape.constant(pos), neg, tau).value().item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("SimCLR with identical latents is log of the comparison count") {
    // P positives and N negatives, all the same unit vector: every row compares against P - 1 + N others.
    for (auto [p, n] : {std::pair<std::size_t, std::size_t>{4, 0}, {4, 12}, {9, 30}}) {
        Tensor<double> pos(Shape{p, 3}), neg(Shape{n, 3});
        for (std::size_t i = 0; i < p; ++i) pos.at(i, 0) = 1;
        for (std::size_t i = 0; i < n; ++i) neg.at(i, 0) = 1;
        ad::Tape<double> tape;
        const double v = simclr_loss(tape.constant(pos), n ? neg : Tensor<double>(), 0.07).value().item();
        CHECK(v == doctest::Approx(std::log(static_cast<double>(p - 1 + n))).epsilon(1e-12));
    }
}

TEST_CASE("SimCLR gradient through normalisation matches finite differences") {
    const auto raw = random_tensor({4, 5}, 8), neg = random_unit_rows(6, 5, 9);
    auto loss = [&](const auto& v) { return simclr_loss(ad::l2_normalize(v), neg, 0.3); };
    CHECK(rel_error(value_and_grad(raw, loss).second, numeric_grad(raw, loss)) < 1e-6);
}

TEST_CASE("SimCLR rejects non-unit rows") {
    ad::Tape<double> tape;
    CHECK_THROWS_AS(simclr_loss(tape.constant(random_tensor({3, 4}, 10)), Tensor<double>(), 0.1), DataError);
}

TEST_CASE("layer gradients of the three objectives match finite differences") {
    const auto c = tiny();
    const auto params = init_encoder<double>(c, 21);
    const auto im = random_tensor<double>({3, 16, 16}, 22, 0.5);

    KlConfig kl;
    kl.proj_dim = 12;
    const auto kl_head = attach_head<double>(c.dim, 12, 23, true);
    CHECK(stable_kl(apply_head(kl_head, encode(params, im).embedding).values(), kl.tau) ==
          doctest::Approx(loss_value(params, kl_objective(kl_head, im, kl))).epsilon(1e-9));
    CHECK(layer_grad_error(params, kl_objective(kl_head, im, kl), [&](const EncoderParams<double>& p) {
              return stable_kl(apply_head(kl_head, encode(p, im).embedding).values(), kl.tau);
          }) < 1e-6);

    DinoConfig dc;
    dc.proj_dim = 10;
    dc.crops.local_count = 2;
    dc.crops.out_size = 16;
    const auto views = dino_crops(im.cast<float>(), 24, dc.crops);
    std::vector<Tensor<double>> dv;
    for (const auto& v : views.global.views) dv.push_back(v.cast<double>());
    for (const auto& v : views.local.views) dv.push_back(v.cast<double>());
    CHECK(dv.size() == 4);
    // The teacher branch is a stop-gradient: the oracle holds its logits at the unperturbed weights.
    const auto student = attach_head<double>(c.dim, 10, 25, true), teacher = attach_head<double>(c.dim, 10, 26, true);
    Tensor<double> tl(Shape{2, 10});
    for (std::size_t v = 0; v < 2; ++v) {
        const auto z = apply_head(teacher, encode(params, dv[v]).embedding);
        std::copy(z.values().begin(), z.values().end(), tl.row(v).begin());
    }
    const LossOracle dino_oracle = [&](const EncoderParams<double>& p) {
        Tensor<double> zs(Shape{dv.size(), 10});
        for (std::size_t v = 0; v < dv.size(); ++v) {
            const auto z = apply_head(student, encode(p, dv[v]).embedding);
            std::copy(z.values().begin(), z.values().end(), zs.row(v).begin());
        }
        ad::Tape<double> tape;
        return dino_loss(tape.constant(zs), tl, dc.tau_student, dc.tau_teacher).value().item();
    };
    const auto dino_fn = dino_objective(student, teacher, dv, 2, dc);
    CHECK(dino_oracle(params) == doctest::Approx(loss_value(params, dino_fn)).epsilon(1e-12));
    CHECK(layer_grad_error(params, dino_fn, dino_oracle) < 1e-6);

    SimclrConfig sc;
    sc.proj_dim = 6;
    sc.patchify = {32, 16, 2, 16};
    std::vector<Tensor<double>> sv;
    for (const auto& v : patchify_overlap(im.cast<float>(), sc.patchify).views) sv.push_back(v.cast<double>());
    CHECK(sv.size() == 4);
    const auto simclr_fn = simclr_objective(attach_head<double>(c.dim, 6, 27, false), sv, random_unit_rows(5, 6, 28), sc);
    CHECK(layer_grad_error(params, simclr_fn, [&](const EncoderParams<double>& p) { return loss_value(p, simclr_fn); }) < 1e-6);
}

TEST_CASE("negative bank: sampled images, unit rows, patch count") {
    const auto c = tiny();
    const auto params = init_encoder<float>(c, 31);
    std::vector<Image> images;
    for (std::uint64_t i = 0; i < 5; ++i) images.push_back(random_tensor<float>({3, 20, 20}, 40 + i, 0.5));
    SimclrConfig sc;
    sc.proj_dim = 6;
    sc.negative_images = 3;
    sc.patchify = {32, 16, 2, 0};
    const auto head = attach_head<float>(c.dim, 6, 32, false);
    const auto bank = build_negative_bank(params, head, images, sc, 33);
    CHECK(bank.size() == 3 * 4);
    CHECK(bank.latents.cols() == 6);
    CHECK_NOTHROW(bank.validate(1e-5));
    const auto again = build_negative_bank(params, head, images, sc, 33);
    CHECK(again.latents == bank.latents);
    sc.negative_images = 50;
    CHECK(build_negative_bank(params, head, images, sc, 33).size() == 5 * 4);
    CHECK_THROWS_AS(build_negative_bank(params, head, std::span<const Image>(), sc, 33), DataError);
}

TEST_CASE("per-patch SimCLR: shape, own-image negatives excluded, token gradient") {
    const auto c = tiny();
    const auto params = init_encoder<double>(c, 51);
    const auto head = attach_head<double>(c.dim, 6, 52, true);
    const auto tokens = encode(params, random_tensor<double>({3, 16, 16}, 53, 0.5)).tokens;
    // Support: three "images" of four latents each; the query image is group 1.
    const auto sup = random_unit_rows(12, 6, 54).cast<float>();
    std::vector<std::int64_t> groups{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
    const ExactIndex index(sup, groups);
    SimclrPatchConfig pc;
    pc.proj_dim = 6;
    pc.tau = 0.2;
    const auto pg = simclr_patch_loss(tokens, head, index, pc, 55, 1);
    CHECK(pg.grads.rows() == c.num_patches());
    CHECK(pg.grads.cols() == c.dim);
    CHECK(pg.negatives.size() == (c.num_patches() + 1) * pc.kept_negatives);
    for (auto id : pg.negatives) CHECK(groups[id] != 1);
    CHECK(std::isfinite(pg.loss));
    const auto again = simclr_patch_loss(tokens, head, index, pc, 55, 1);
    CHECK(again.grads == pg.grads);
}
