#include "fungi/augment.hpp"

#include <algorithm>
#include <cmath>

#include "fungi/rng.hpp"

namespace fungi {

namespace {

void require_image(const Image& image, const char* op) {
    if (image.rank() != 3 || image.dim(1) == 0 || image.dim(2) == 0) {
        throw ShapeError(std::string(op) + " expects an image [C,H,W], got " + shape_str(image.shape()));
    }
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float delta = mx - mn;
    v = mx;
    s = mx > 0 ? delta / mx : 0.0f;
    if (delta <= 0) {
        h = 0;
        return;
    }
    if (mx == r) h = std::fmod((g - b) / delta, 6.0f);
    else if (mx == g) h = (b - r) / delta + 2.0f;
    else h = (r - g) / delta + 4.0f;
    h /= 6.0f;
    if (h < 0) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float hh = h * 6.0f;
    const int sector = static_cast<int>(std::floor(hh)) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

}  // namespace

Image resize_bilinear(const Image& image, std::size_t out_h, std::size_t out_w) {
    require_image(image, "resize_bilinear");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (out_h == 0 || out_w == 0) throw ShapeError("resize to an empty image");
    if (out_h == h && out_w == w) return image;
    Image out(Shape{c, out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const float* src = image.data() + ch * h * w;
                const double top = src[y0 * w + x0] * (1 - wx) + src[y0 * w + x1] * wx;
                const double bot = src[y1 * w + x0] * (1 - wx) + src[y1 * w + x1] * wx;
                out[(ch * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    require_image(image, "crop");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (top + height > h || left + width > w || height == 0 || width == 0) {
        throw ShapeError("crop outside image " + shape_str(image.shape()));
    }
    Image out(Shape{c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < height; ++y) {
            const float* src = image.data() + (ch * h + top + y) * w + left;
            std::copy(src, src + width, out.data() + (ch * height + y) * width);
        }
    }
    return out;
}

std::vector<std::size_t> overlap_offsets(std::size_t base, std::size_t patch, std::size_t grid) {
    if (patch > base) throw ShapeError("patch larger than image");
    if (grid == 0) throw ConfigError("patch grid must be at least 1x1");
    std::vector<std::size_t> out(grid, 0);
    for (std::size_t i = 1; i < grid; ++i) {
        out[i] = static_cast<std::size_t>(std::llround(static_cast<double>(i) * static_cast<double>(base - patch) /
                                                       static_cast<double>(grid - 1)));
    }
    return out;
}

ViewSet patchify_overlap(const Image& image, const PatchifyParams& params) {
    require_image(image, "patchify_overlap");
    if (image.dim(1) != image.dim(2)) throw ShapeError("patchify_overlap expects a square image");
    if (params.patch > params.base || params.patch == 0) throw ShapeError("patch larger than image");
    const Image base = resize_bilinear(image, params.base, params.base);
    const auto offsets = overlap_offsets(params.base, params.patch, params.grid);
    ViewSet out;
    out.kind = ViewKind::overlap_patches;
    const double area = static_cast<double>(params.patch * params.patch) / static_cast<double>(params.base * params.base);
    for (std::size_t top : offsets) {
        for (std::size_t left : offsets) {
            Image view = crop(base, top, left, params.patch, params.patch);
            if (params.out_size != 0) view = resize_bilinear(view, params.out_size, params.out_size);
            out.views.push_back(std::move(view));
            out.boxes.push_back(CropBox{top, left, params.patch, area});
        }
    }
    return out;
}

namespace {

ViewSet random_crops(const Image& image, Rng& rng, std::size_t count, std::pair<double, double> scale,
                     std::size_t out_size, ViewKind kind) {
    const std::size_t side_max = std::min(image.dim(1), image.dim(2));
    const double full = static_cast<double>(side_max);
    const double area = full * full;
    const auto lo = static_cast<std::size_t>(std::ceil(std::sqrt(scale.first) * full));
    const auto hi = static_cast<std::size_t>(std::floor(std::sqrt(scale.second) * full));
    ViewSet out;
    out.kind = kind;
    for (std::size_t i = 0; i < count; ++i) {
        const double s = uniform(rng, scale.first, scale.second);
        auto side = static_cast<std::size_t>(std::llround(std::sqrt(s) * full));
        if (lo <= hi) side = std::clamp(side, lo, hi);
        side = std::clamp<std::size_t>(side, 1, side_max);
        const auto top = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(image.dim(1) - side)));
        const auto left = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(image.dim(2) - side)));
        out.views.push_back(resize_bilinear(crop(image, top, left, side, side), out_size, out_size));
        out.boxes.push_back(CropBox{top, left, side, static_cast<double>(side * side) / area});
    }
    return out;
}

}  // namespace

DinoViews dino_crops(const Image& image, std::uint64_t seed, const DinoCropParams& params) {
    require_image(image, "dino_crops");
    Rng rng(seed);
    DinoViews out;
    out.global = random_crops(image, rng, params.global_count, params.global_scale, params.out_size, ViewKind::global_crop);
    out.local = random_crops(image, rng, params.local_count, params.local_scale, params.out_size, ViewKind::local_crop);
    return out;
}

Image color_jitter(const Image& image, std::uint64_t seed, const JitterParams& params) {
    require_image(image, "color_jitter");
    Rng rng(seed);
    Image out = image;
    const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
    auto gray = [&](std::size_t i) {
        return c >= 3 ? 0.299f * out[i] + 0.587f * out[hw + i] + 0.114f * out[2 * hw + i] : out[i];
    };
    // Every draw is consumed whether or not the transform fires, so the stream layout is fixed.
    const bool do_b = uniform01(rng) < params.p;
    const double fb = uniform(rng, 1 - params.brightness, 1 + params.brightness);
    const bool do_c = uniform01(rng) < params.p;
    const double fc = uniform(rng, 1 - params.contrast, 1 + params.contrast);
    const bool do_s = uniform01(rng) < params.p;
    const double fs = uniform(rng, 1 - params.saturation, 1 + params.saturation);
    const bool do_h = uniform01(rng) < params.p;
    const double fh = uniform(rng, -params.hue, params.hue);

    if (do_b && params.brightness > 0) {
        for (auto& v : out.values()) v = clamp01(static_cast<float>(v * fb));
    }
    if (do_c && params.contrast > 0) {
        double m = 0;
        for (std::size_t i = 0; i < hw; ++i) m += gray(i);
        m /= static_cast<double>(hw);
        for (auto& v : out.values()) v = clamp01(static_cast<float>(fc * v + (1 - fc) * m));
    }
    if (do_s && params.saturation > 0 && c >= 3) {
        for (std::size_t i = 0; i < hw; ++i) {
            const float g = gray(i);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                float& v = out[ch * hw + i];
                v = clamp01(static_cast<float>(fs * v + (1 - fs) * g));
            }
        }
    }
    if (do_h && params.hue > 0 && c >= 3) {
        for (std::size_t i = 0; i < hw; ++i) {
            float h, s, v;
            rgb_to_hsv(out[i], out[hw + i], out[2 * hw + i], h, s, v);
            h = static_cast<float>(h + fh);
            h -= std::floor(h);
            float r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            out[i] = clamp01(r);
            out[hw + i] = clamp01(g);
            out[2 * hw + i] = clamp01(b);
        }
    }
    return out;
}

std::vector<std::string> word_delete(const std::vector<std::string>& tokens, double p, std::uint64_t seed) {
    if (tokens.empty()) throw DataError("word_delete of an empty token list");
    Rng rng(seed);
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        if (!(uniform01(rng) < p)) out.push_back(t);
    }
    if (out.empty()) {
        out.push_back(tokens[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(tokens.size()) - 1))]);
    }
    return out;
}

Tensor<float> time_shift(const Tensor<float>& clip, int delta) {
    if (clip.rank() != 2) throw ShapeError("audio clip must be [time, freq]");
    const auto rows = static_cast<long>(clip.dim(0));
    const std::size_t cols = clip.dim(1);
    Tensor<float> out(clip.shape());
    for (long r = 0; r < rows; ++r) {
        const long src = r - delta;
        if (src < 0 || src >= rows) continue;
        std::copy(clip.data() + src * static_cast<long>(cols), clip.data() + (src + 1) * static_cast<long>(cols),
                  out.data() + r * static_cast<long>(cols));
    }
    return out;
}

NoisyClip audio_noise(const Tensor<float>& clip, std::uint64_t seed, int max_shift) {
    if (clip.rank() != 2) throw ShapeError("audio clip must be [time, freq]");
    Rng rng(seed);
    const double x2 = uniform01(rng);
    Tensor<float> noisy = clip;
    for (auto& v : noisy.values()) v += static_cast<float>(uniform01(rng) * x2 / 10.0);
    const int delta = static_cast<int>(uniform_int(rng, -max_shift, max_shift));
    return NoisyClip{delta == 0 ? std::move(noisy) : time_shift(noisy, delta), delta};
}

Mask resize_nearest(const Mask& mask, std::size_t out_h, std::size_t out_w) {
    if (mask.rank() != 2) throw ShapeError("mask must be [H, W]");
    const std::size_t h = mask.dim(0), w = mask.dim(1);
    Mask out(Shape{out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = std::min(h - 1, y * h / out_h);
        for (std::size_t x = 0; x < out_w; ++x) {
            out[y * out_w + x] = mask[sy * w + std::min(w - 1, x * w / out_w)];
        }
    }
    return out;
}

std::pair<Image, Mask> random_scale_crop(const Image& image, const Mask& mask, std::uint64_t seed,
                                         std::pair<double, double> scale, std::uint8_t ignore_label) {
    require_image(image, "random_scale_crop");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w) throw ShapeError("mask does not match image");
    Rng rng(seed);
    const double f = uniform(rng, scale.first, scale.second);
    const auto sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(h))));
    const auto sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(w))));
    const Image big = resize_bilinear(image, sh, sw);
    const Mask big_mask = resize_nearest(mask, sh, sw);
    // Offset of the output window inside the scaled image (negative = padding).
    const auto oy = static_cast<long>(uniform_int(rng, std::min<long>(0, static_cast<long>(sh) - static_cast<long>(h)),
                                                  std::max<long>(0, static_cast<long>(sh) - static_cast<long>(h))));
    const auto ox = static_cast<long>(uniform_int(rng, std::min<long>(0, static_cast<long>(sw) - static_cast<long>(w)),
                                                  std::max<long>(0, static_cast<long>(sw) - static_cast<long>(w))));
    Image out(Shape{c, h, w});
    Mask out_mask(Shape{h, w}, ignore_label);
    for (std::size_t y = 0; y < h; ++y) {
        const long sy = static_cast<long>(y) + oy;
        if (sy < 0 || sy >= static_cast<long>(sh)) continue;
        for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + ox;
            if (sx < 0 || sx >= static_cast<long>(sw)) continue;
            for (std::size_t ch = 0; ch < c; ++ch) {
                out[(ch * h + y) * w + x] = big[(ch * sh + static_cast<std::size_t>(sy)) * sw + static_cast<std::size_t>(sx)];
            }
            out_mask[y * w + x] = big_mask[static_cast<std::size_t>(sy) * sw + static_cast<std::size_t>(sx)];
        }
    }
    return {std::move(out), std::move(out_mask)};
}

}  // namespace fungi
