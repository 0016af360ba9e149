#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fungi/augment.hpp"
#include "fungi/error.hpp"
#include "helpers.hpp"

using namespace fungi;
using fungi::testing::random_tensor;

namespace {

Image rand_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    Image im(Shape{3, side, side});
    for (auto& v : im.values()) v = static_cast<float>(uniform01(rng));
    return im;
}

bool same(const Image& a, const Image& b) { return a.shape() == b.shape() && a.values() == b.values(); }

}  // namespace

TEST_CASE("overlap offsets span the image evenly") {
    CHECK(overlap_offsets(224, 112, 7) == std::vector<std::size_t>{0, 19, 37, 56, 75, 93, 112});
    CHECK(overlap_offsets(64, 32, 3) == std::vector<std::size_t>{0, 16, 32});
    CHECK(overlap_offsets(10, 10, 1) == std::vector<std::size_t>{0});
    CHECK_THROWS_AS(overlap_offsets(10, 11, 2), ShapeError);
}

TEST_CASE("patchify yields grid^2 crops of the resized image") {
    const auto im = rand_image(48, 1);
    PatchifyParams p;
    p.base = 64;
    p.patch = 32;
    p.grid = 3;
    const auto vs = patchify_overlap(im, p);
    REQUIRE(vs.size() == 9);
    const auto base = resize_bilinear(im, 64, 64);
    CHECK(same(vs.views[5], crop(base, 16, 32, 32, 32)));
    CHECK(vs.boxes[5].top == 16);
    CHECK(vs.boxes[5].left == 32);
    CHECK(vs.boxes[5].scale == doctest::Approx(0.25));
    p.out_size = 16;
    CHECK(patchify_overlap(im, p).views[0].shape() == Shape{3, 16, 16});
}

TEST_CASE("bilinear resize keeps constants and is the identity at the same size") {
    Image c(Shape{3, 5, 7}, 0.3f);
    const auto r = resize_bilinear(c, 11, 4);
    for (float v : r.values()) CHECK(v == doctest::Approx(0.3f));
    const auto im = rand_image(9, 2);
    CHECK(same(resize_bilinear(im, 9, 9), im));
    // Halving averages 2x2 blocks with half-pixel centres.
    const auto src = rand_image(8, 3);
    const auto down = resize_bilinear(src, 4, 4);
    CHECK(down[0] == doctest::Approx(0.25f * (src[0] + src[1] + src[8] + src[9])).epsilon(1e-6));
    CHECK(down[4 * 4 + 5] == doctest::Approx(0.25f * (src[64 + 18] + src[64 + 19] + src[64 + 26] + src[64 + 27])).epsilon(1e-6));
}

TEST_CASE("dino crops respect the scale ranges and the seed") {
    const auto im = rand_image(64, 4);
    DinoCropParams p;
    p.out_size = 32;
    const auto a = dino_crops(im, 7, p), b = dino_crops(im, 7, p), c = dino_crops(im, 8, p);
    REQUIRE(a.global.size() == 2);
    REQUIRE(a.local.size() == 10);
    for (const auto& box : a.global.boxes) {
        CHECK(box.scale >= 0.25 - 1e-12);
        CHECK(box.scale <= 1.0 + 1e-12);
        CHECK(box.top + box.size <= 64);
    }
    for (const auto& box : a.local.boxes) {
        CHECK(box.scale >= 0.05 - 1e-12);
        CHECK(box.scale <= 0.25 + 1e-12);
    }
    for (const auto& v : a.local.views) CHECK(v.shape() == Shape{3, 32, 32});
    for (std::size_t i = 0; i < 10; ++i) CHECK(same(a.local.views[i], b.local.views[i]));
    bool differs = false;
    for (std::size_t i = 0; i < 10; ++i) differs |= !same(a.local.views[i], c.local.views[i]);
    CHECK(differs);
}

TEST_CASE("colour jitter stays in range and is seeded") {
    const auto im = rand_image(16, 5);
    JitterParams p;
    p.p = 1.0;
    p.brightness = p.contrast = p.saturation = 0.4;
    p.hue = 0.2;
    const auto a = color_jitter(im, 3, p);
    for (float v : a.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(same(a, color_jitter(im, 3, p)));
    CHECK(!same(a, im));
    p.p = 0.0;
    CHECK(same(color_jitter(im, 3, p), im));
}

TEST_CASE("brightness alone scales pixels by a factor inside its range") {
    Image im(Shape{3, 2, 2}, 0.5f);
    JitterParams p;
    p.p = 1.0;
    p.brightness = 0.1;
    p.contrast = p.saturation = p.hue = 0.0;
    const auto out = color_jitter(im, 11, p);
    const double f = out[0] / 0.5;
    CHECK(f >= 0.9 - 1e-6);
    CHECK(f <= 1.1 + 1e-6);
    for (float v : out.values()) CHECK(v == out[0]);
}

TEST_CASE("word deletion keeps order and never empties the sentence") {
    const std::vector<std::string> toks{"a", "b", "c", "d", "e", "f"};
    CHECK(word_delete(toks, 0.0, 1) == toks);
    const auto all = word_delete(toks, 1.0, 2);
    REQUIRE(all.size() == 1);
    CHECK(std::find(toks.begin(), toks.end(), all[0]) != toks.end());
    std::size_t kept = 0;
    for (std::uint64_t s = 0; s < 2000; ++s) {
        const auto out = word_delete(toks, 0.1, s);
        CHECK(std::is_sorted(out.begin(), out.end()));
        kept += out.size();
    }
    // Expected survivors 0.9 * 6 per sentence.
    CHECK(static_cast<double>(kept) / 2000.0 == doctest::Approx(5.4).epsilon(0.02));
    CHECK_THROWS_AS(word_delete({}, 0.1, 1), DataError);
}

TEST_CASE("time shift moves rows and zero-pads") {
    Tensor<float> clip(Shape{4, 2});
    for (std::size_t i = 0; i < 8; ++i) clip[i] = static_cast<float>(i + 1);
    const auto later = time_shift(clip, 1);
    CHECK(later.values() == std::vector<float>{0, 0, 1, 2, 3, 4, 5, 6});
    const auto earlier = time_shift(clip, -2);
    CHECK(earlier.values() == std::vector<float>{5, 6, 7, 8, 0, 0, 0, 0});
    CHECK(time_shift(clip, 9).values() == std::vector<float>(8, 0.0f));
}

TEST_CASE("audio noise is bounded by 0.1 and the shift is within range") {
    Tensor<float> clip(Shape{40, 8}, 0.2f);
    std::set<int> shifts;
    for (std::uint64_t s = 0; s < 200; ++s) {
        const auto out = audio_noise(clip, s, 3);
        CHECK(std::abs(out.shift) <= 3);
        shifts.insert(out.shift);
        const auto back = time_shift(out.clip, -out.shift);
        // Rows that survive the round trip carry the clip plus noise in [0, 0.1).
        for (std::size_t r = 3; r + 3 < 40; ++r) {
            for (std::size_t c = 0; c < 8; ++c) {
                const float v = back.at(r, c) - 0.2f;
                CHECK(v >= -1e-7f);
                CHECK(v < 0.1f);
            }
        }
    }
    CHECK(shifts.size() == 7);
}

TEST_CASE("nearest mask resize and scale-crop keep labels aligned") {
    Mask m(Shape{4, 4});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) m[y * 4 + x] = static_cast<std::uint8_t>(x < 2 ? 1 : 2);
    const auto up = resize_nearest(m, 8, 8);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) CHECK(up[y * 8 + x] == (x < 4 ? 1 : 2));

    // Image channel 0 encodes the label; away from the class boundary the two must agree after
    // any scale-crop (bilinear blending only touches pixels next to it).
    const auto big = resize_nearest(m, 32, 32);
    Image im(Shape{3, 32, 32});
    for (std::size_t i = 0; i < 32 * 32; ++i) im[i] = big[i] == 1 ? 0.0f : 1.0f;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto [ci, cm] = random_scale_crop(im, big, s);
        REQUIRE(cm.shape() == Shape{32, 32});
        for (std::size_t y = 0; y < 32; ++y) {
            for (std::size_t x = 2; x + 2 < 32; ++x) {
                const std::size_t i = y * 32 + x;
                CHECK((cm[i] == 1 || cm[i] == 2 || cm[i] == 255));
                if (cm[i - 2] != cm[i] || cm[i + 2] != cm[i]) continue;
                if (cm[i] == 1) CHECK(ci[i] < 0.5f);
                if (cm[i] == 2) CHECK(ci[i] > 0.5f);
            }
        }
    }
}
