#include "fungi/synth.hpp"

#include <cmath>
#include <numbers>

#include "fungi/rng.hpp"
#include "fungi/store.hpp"

namespace fungi {

void Dataset::validate() const {
    if (labels.size() != images.size()) throw DataError("dataset labels/images count mismatch");
    if (!masks.empty() && masks.size() != images.size()) throw DataError("dataset masks/images count mismatch");
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& im = images[i];
        if (im.rank() != 3 || im.shape() != images[0].shape()) throw DataError("dataset images must share one [C, H, W] shape");
        if (!masks.empty() && (masks[i].rank() != 2 || masks[i].dim(0) != im.dim(1) || masks[i].dim(1) != im.dim(2))) {
            throw DataError("mask " + std::to_string(i) + " does not match its image");
        }
    }
}

namespace {

struct Blob {
    double cx, cy, r;
    double rgb[3];
};

std::vector<Blob> class_blobs(std::uint64_t seed, std::size_t c) {
    Rng rng(derive_seed(derive_seed(seed, "blobs.class"), static_cast<std::uint64_t>(c)));
    std::vector<Blob> out(3);
    for (auto& b : out) {
        b.cx = uniform(rng, 0.2, 0.8);
        b.cy = uniform(rng, 0.2, 0.8);
        b.r = uniform(rng, 0.08, 0.2);
        for (double& v : b.rgb) v = uniform01(rng);
    }
    return out;
}

struct Grating {
    double freq, angle;
    double rgb[3];
};

Grating class_grating(std::uint64_t seed, std::size_t c, std::size_t classes) {
    Rng rng(derive_seed(derive_seed(seed, "stripes.class"), static_cast<std::uint64_t>(c)));
    Grating g{2.0 + 2.0 * static_cast<double>(c), std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes), {}};
    for (double& v : g.rgb) v = uniform(rng, 0.3, 1.0);
    return g;
}

void add_noise_clamp(Image& im, Rng& rng, double noise) {
    for (auto& v : im.values()) {
        const double x = static_cast<double>(v) + (noise > 0 ? normal(rng, 0.0, noise) : 0.0);
        v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
}

double grating_value(const Grating& g, double x, double y, double phase, double contrast) {
    return 0.5 + contrast * std::sin(2 * std::numbers::pi * g.freq * (x * std::cos(g.angle) + y * std::sin(g.angle)) + phase);
}

Image blobs_image(const SynthParams& p, std::size_t c, Rng& rng) {
    const std::size_t s = p.image_size;
    const double side = static_cast<double>(s);
    Image im(Shape{3, s, s}, 0.1f);
    for (const Blob& b0 : class_blobs(p.seed, c)) {
        const double cx = (b0.cx + normal(rng, 0.0, 0.05)) * side, cy = (b0.cy + normal(rng, 0.0, 0.05)) * side;
        const double amp = uniform(rng, 0.7, 1.0), r = b0.r * side;
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
                const double w = amp * std::exp(-(dx * dx + dy * dy) / (2 * r * r));
                for (std::size_t ch = 0; ch < 3; ++ch) im[(ch * s + y) * s + x] += static_cast<float>(w * b0.rgb[ch]);
            }
        }
    }
    add_noise_clamp(im, rng, p.noise);
    return im;
}

Image stripes_image(const SynthParams& p, std::size_t c, Rng& rng) {
    const std::size_t s = p.image_size;
    const Grating g = class_grating(p.seed, c, p.classes);
    const double phase = uniform(rng, 0.0, 2 * std::numbers::pi), contrast = uniform(rng, 0.3, 0.45);
    Image im(Shape{3, s, s});
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double v = grating_value(g, (static_cast<double>(x) + 0.5) / static_cast<double>(s),
                                           (static_cast<double>(y) + 0.5) / static_cast<double>(s), phase, contrast);
            for (std::size_t ch = 0; ch < 3; ++ch) im[(ch * s + y) * s + x] = static_cast<float>(v * g.rgb[ch]);
        }
    }
    add_noise_clamp(im, rng, p.noise);
    return im;
}

std::pair<Image, Mask> segmentation_sample(const SynthParams& p, Rng& rng) {
    const std::size_t s = p.image_size, cell = std::max<std::size_t>(1, p.cell), cells = std::max<std::size_t>(1, s / cell);
    Mask mask(Shape{s, s}, 0);
    const auto rects = static_cast<std::size_t>(uniform_int(rng, 1, 3));
    for (std::size_t r = 0; r < rects; ++r) {
        const auto cls = static_cast<std::uint8_t>(uniform_int(rng, 1, static_cast<std::int64_t>(p.classes) - 1));
        const auto w = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(std::max<std::size_t>(1, cells / 2))));
        const auto h = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(std::max<std::size_t>(1, cells / 2))));
        const auto x0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cells - w)));
        const auto y0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cells - h)));
        for (std::size_t y = y0 * cell; y < std::min(s, (y0 + h) * cell); ++y) {
            for (std::size_t x = x0 * cell; x < std::min(s, (x0 + w) * cell); ++x) mask[y * s + x] = cls;
        }
    }
    std::vector<double> phase(p.classes);
    for (auto& ph : phase) ph = uniform(rng, 0.0, 2 * std::numbers::pi);
    Image im(Shape{3, s, s});
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const std::size_t c = mask[y * s + x];
            const Grating g = class_grating(p.seed, c, p.classes);
            const double v = grating_value(g, (static_cast<double>(x) + 0.5) / static_cast<double>(s),
                                           (static_cast<double>(y) + 0.5) / static_cast<double>(s), phase[c], 0.4);
            for (std::size_t ch = 0; ch < 3; ++ch) im[(ch * s + y) * s + x] = static_cast<float>(v * g.rgb[ch]);
        }
    }
    add_noise_clamp(im, rng, p.noise);
    return {std::move(im), std::move(mask)};
}

}  // namespace

Dataset synth_dataset(const SynthParams& p, const std::string& split) {
    if (p.classes < 2) throw ConfigError("synthetic data needs at least two classes");
    if (p.kind != "segmentation" && p.n < p.classes) throw ConfigError("synthetic data needs n >= classes");
    if (p.image_size == 0) throw ConfigError("synthetic image size must be positive");
    if (p.kind == "segmentation" && p.classes > 255) throw ConfigError("segmentation supports at most 255 classes");
    Dataset d;
    d.kind = p.kind;
    d.split = split;
    d.num_classes = p.classes;
    const std::uint64_t base = derive_seed(p.seed, "sample." + split);
    for (std::size_t i = 0; i < p.n; ++i) {
        Rng rng(derive_seed(base, static_cast<std::uint64_t>(i)));
        const std::size_t c = i % p.classes;
        if (p.kind == "blobs") {
            d.images.push_back(blobs_image(p, c, rng));
            d.labels.push_back(static_cast<Label>(c));
        } else if (p.kind == "stripes") {
            d.images.push_back(stripes_image(p, c, rng));
            d.labels.push_back(static_cast<Label>(c));
        } else if (p.kind == "segmentation") {
            auto [im, mask] = segmentation_sample(p, rng);
            std::vector<std::size_t> area(p.classes, 0);
            for (auto v : mask.values()) ++area[v];
            Label lab = 0;
            std::size_t best = 0;
            for (std::size_t k = 1; k < p.classes; ++k) {
                if (area[k] > best) {
                    best = area[k];
                    lab = static_cast<Label>(k);
                }
            }
            d.images.push_back(std::move(im));
            d.masks.push_back(std::move(mask));
            d.labels.push_back(lab);
        } else {
            throw ConfigError("unknown synthetic kind '" + p.kind + "'");
        }
    }
    return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
    data.validate();
    if (data.images.empty()) throw DataError("refusing to save an empty dataset");
    TensorStore s;
    s.put_string("meta", encode_meta({{"kind", data.kind},
                                      {"split", data.split},
                                      {"num_classes", std::to_string(data.num_classes)},
                                      {"count", std::to_string(data.size())}}));
    const Shape& is = data.images[0].shape();
    Tensor<float> images(Shape{data.size(), is[0], is[1], is[2]});
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::copy(data.images[i].values().begin(), data.images[i].values().end(), images.data() + i * data.images[0].numel());
    }
    s.put("images", images);
    s.put("labels", Tensor<std::int32_t>(Shape{data.size()}, data.labels));
    if (!data.masks.empty()) {
        Tensor<std::uint8_t> masks(Shape{data.size(), is[1], is[2]});
        for (std::size_t i = 0; i < data.size(); ++i) {
            std::copy(data.masks[i].values().begin(), data.masks[i].values().end(), masks.data() + i * is[1] * is[2]);
        }
        s.put("masks", masks);
    }
    s.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
    const TensorStore s = TensorStore::load(path);
    const auto meta = decode_meta(s.get_string("meta"));
    Dataset d;
    auto at = [&](const char* k) {
        auto it = meta.find(k);
        if (it == meta.end()) throw DataError(path.string() + ": dataset metadata lacks '" + k + "'");
        return it->second;
    };
    d.kind = at("kind");
    d.split = at("split");
    d.num_classes = std::stoull(at("num_classes"));
    const Tensor<float> images = s.get<float>("images");
    if (images.rank() != 4) throw DataError(path.string() + ": images must be [N, C, H, W]");
    const std::size_t n = images.dim(0), per = images.numel() / std::max<std::size_t>(1, n);
    for (std::size_t i = 0; i < n; ++i) {
        d.images.emplace_back(Shape{images.dim(1), images.dim(2), images.dim(3)},
                              std::vector<float>(images.data() + i * per, images.data() + (i + 1) * per));
    }
    d.labels = s.get<std::int32_t>("labels").values();
    if (s.has("masks")) {
        const Tensor<std::uint8_t> masks = s.get<std::uint8_t>("masks");
        if (masks.rank() != 3 || masks.dim(0) != n) throw DataError(path.string() + ": masks must be [N, H, W]");
        const std::size_t mp = masks.dim(1) * masks.dim(2);
        for (std::size_t i = 0; i < n; ++i) {
            d.masks.emplace_back(Shape{masks.dim(1), masks.dim(2)},
                                 std::vector<std::uint8_t>(masks.data() + i * mp, masks.data() + (i + 1) * mp));
        }
    }
    d.validate();
    return d;
}

}  // namespace fungi
