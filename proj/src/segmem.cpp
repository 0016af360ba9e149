#include "fungi/segmem.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "fungi/parallel.hpp"
#include "fungi/rng.hpp"

namespace fungi {

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double dot_d(std::span<const float> a, std::span<const float> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

void normalize_rows(Tensor<float>& t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
        auto row = t.row(r);
        const double n = l2_norm(std::span<const float>(row));
        if (!(n > 0)) throw NumericError("cannot index a zero-norm row (" + std::to_string(r) + ")");
        for (auto& v : row) v = static_cast<float>(v / n);
    }
}

std::vector<float> unit_query(std::span<const float> q, std::size_t dim) {
    if (q.size() != dim) throw ShapeError("query dimension " + std::to_string(q.size()) + " vs index " + std::to_string(dim));
    const double n = l2_norm(q);
    if (!(n > 0)) throw NumericError("zero-norm query");
    std::vector<float> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = static_cast<float>(q[i] / n);
    return out;
}

bool better(const std::pair<std::size_t, double>& a, const std::pair<std::size_t, double>& b) {
    return a.second > b.second || (a.second == b.second && a.first < b.first);
}

}  // namespace

ExactIndex::ExactIndex(Tensor<float> rows, std::vector<std::int64_t> groups)
    : rows_(std::move(rows)), groups_(std::move(groups)) {
    if (rows_.rank() != 2) throw ShapeError("index rows must be 2-D");
    n_ = rows_.rows();
    d_ = rows_.cols();
    if (groups_.empty()) groups_.assign(n_, -1);
    if (groups_.size() != n_) throw ShapeError("one group id per index row required");
    normalize_rows(rows_);
}

std::vector<std::pair<std::size_t, double>> ExactIndex::search_scored(std::span<const float> query, std::size_t k,
                                                                      std::int64_t skip_group) const {
    if (n_ == 0) throw DataError("search on an empty index");
    const auto q = unit_query(query, d_);
    std::vector<std::pair<std::size_t, double>> all;
    all.reserve(n_);
    for (std::size_t i = 0; i < n_; ++i) {
        if (skip_group >= 0 && groups_[i] == skip_group) continue;
        all.emplace_back(i, dot_d(q, rows_.row(i)));
    }
    const std::size_t kk = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(), better);
    all.resize(kk);
    return all;
}

std::vector<std::size_t> ExactIndex::search(std::span<const float> query, std::size_t k, std::int64_t skip_group) const {
    std::vector<std::size_t> ids;
    for (const auto& [id, s] : search_scored(query, k, skip_group)) ids.push_back(id);
    return ids;
}

void IvfParams::validate() const {
    if (num_leaves == 0) throw ConfigError("ivf num_leaves must be >= 1");
    if (leaves_to_search == 0 || leaves_to_search > num_leaves) throw ConfigError("ivf leaves_to_search must be in [1, num_leaves]");
    if (rerank == 0) throw ConfigError("ivf rerank must be >= 1");
    if (kmeans_iters == 0) throw ConfigError("ivf kmeans_iters must be >= 1");
}

IvfIndex::IvfIndex(Tensor<float> rows, const IvfParams& params, std::uint64_t seed, std::vector<std::int64_t> groups)
    : exact_(std::move(rows), groups), params_(params) {
    params_.validate();
    const std::size_t n = exact_.size(), d = exact_.dim(), leaves = params_.num_leaves;
    if (n < leaves) throw DataError("ivf needs at least num_leaves rows (" + std::to_string(n) + " < " + std::to_string(leaves) + ")");
    groups_ = groups.empty() ? std::vector<std::int64_t>(n, -1) : std::move(groups);

    // Training sample.
    std::size_t ns = params_.train_sample ? params_.train_sample : 32 * leaves;
    ns = std::clamp(ns, leaves, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(ns);
    std::sort(order.begin(), order.end());
    MatF sample(static_cast<Eigen::Index>(ns), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < ns; ++i) {
        const auto r = exact_.row(order[i]);
        for (std::size_t j = 0; j < d; ++j) sample(Eigen::Index(i), Eigen::Index(j)) = r[j];
    }
    std::vector<std::size_t> init(ns);
    std::iota(init.begin(), init.end(), std::size_t{0});
    std::shuffle(init.begin(), init.end(), rng);
    MatF cent(static_cast<Eigen::Index>(leaves), static_cast<Eigen::Index>(d));
    for (std::size_t c = 0; c < leaves; ++c) cent.row(Eigen::Index(c)) = sample.row(Eigen::Index(init[c]));

    // Spherical k-means: assign by maximum dot product, centroid = normalised mean.
    std::vector<Eigen::Index> assign(ns);
    std::vector<float> best(ns);
    for (std::size_t it = 0; it < params_.kmeans_iters; ++it) {
        const MatF sims = sample * cent.transpose();
        for (std::size_t i = 0; i < ns; ++i) best[i] = sims.row(Eigen::Index(i)).maxCoeff(&assign[i]);
        MatF sum = MatF::Zero(cent.rows(), cent.cols());
        std::vector<std::size_t> count(leaves, 0);
        for (std::size_t i = 0; i < ns; ++i) {
            sum.row(assign[i]) += sample.row(Eigen::Index(i));
            ++count[static_cast<std::size_t>(assign[i])];
        }
        std::vector<std::size_t> worst(ns);
        std::iota(worst.begin(), worst.end(), std::size_t{0});
        std::sort(worst.begin(), worst.end(), [&](std::size_t a, std::size_t b) { return best[a] < best[b] || (best[a] == best[b] && a < b); });
        std::size_t next_worst = 0;
        for (std::size_t c = 0; c < leaves; ++c) {
            const auto ci = Eigen::Index(c);
            if (count[c] == 0) {
                // refill from the sample row least similar to its centroid
                cent.row(ci) = sample.row(Eigen::Index(worst[next_worst++]));
                continue;
            }
            const float nrm = sum.row(ci).norm();
            if (nrm > 0) cent.row(ci) = sum.row(ci) / nrm;
        }
    }
    centroids_ = Tensor<float>(Shape{leaves, d});
    for (std::size_t c = 0; c < leaves; ++c) {
        for (std::size_t j = 0; j < d; ++j) centroids_.at(c, j) = cent(Eigen::Index(c), Eigen::Index(j));
    }

    postings_.assign(leaves, {});
    const Eigen::Map<const MatF> all(exact_.row(0).data(), Eigen::Index(n), Eigen::Index(d));
    constexpr std::size_t kChunk = 4096;
    for (std::size_t lo = 0; lo < n; lo += kChunk) {
        const std::size_t hi = std::min(n, lo + kChunk);
        const MatF sims = all.middleRows(Eigen::Index(lo), Eigen::Index(hi - lo)) * cent.transpose();
        for (std::size_t i = lo; i < hi; ++i) {
            Eigen::Index arg = 0;
            sims.row(Eigen::Index(i - lo)).maxCoeff(&arg);
            postings_[static_cast<std::size_t>(arg)].push_back(static_cast<std::uint32_t>(i));
        }
    }
}

void IvfIndex::set_leaves_to_search(std::size_t n) {
    IvfParams p = params_;
    p.leaves_to_search = n;
    p.validate();
    params_ = p;
}

std::vector<std::pair<std::size_t, double>> IvfIndex::search_scored(std::span<const float> query, std::size_t k,
                                                                    std::int64_t skip_group) const {
    if (k > params_.rerank) {
        throw ConfigError("k = " + std::to_string(k) + " exceeds rerank = " + std::to_string(params_.rerank));
    }
    const std::size_t d = dim(), leaves = params_.num_leaves;
    const auto q = unit_query(query, d);
    const Eigen::Map<const Eigen::VectorXf> qv(q.data(), Eigen::Index(d));
    const Eigen::Map<const MatF> cent(centroids_.data(), Eigen::Index(leaves), Eigen::Index(d));
    const Eigen::VectorXf leaf_sims = cent * qv;
    std::vector<std::size_t> leaf_order(leaves);
    std::iota(leaf_order.begin(), leaf_order.end(), std::size_t{0});
    const auto nl = static_cast<std::ptrdiff_t>(params_.leaves_to_search);
    std::partial_sort(leaf_order.begin(), leaf_order.begin() + nl, leaf_order.end(), [&](std::size_t a, std::size_t b) {
        const float sa = leaf_sims[Eigen::Index(a)], sb = leaf_sims[Eigen::Index(b)];
        return sa > sb || (sa == sb && a < b);
    });

    // Coarse scores in float.
    std::vector<std::pair<std::size_t, double>> cand;
    for (std::ptrdiff_t l = 0; l < nl; ++l) {
        for (std::uint32_t id : postings_[leaf_order[static_cast<std::size_t>(l)]]) {
            if (skip_group >= 0 && groups_[id] == skip_group) continue;
            const auto r = exact_.row(id);
            float s = 0;
            for (std::size_t j = 0; j < d; ++j) s += q[j] * r[j];
            cand.emplace_back(id, static_cast<double>(s));
        }
    }
    const std::size_t nr = std::min(params_.rerank, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(nr), cand.end(), better);
    cand.resize(nr);
    // Exact rescoring.
    for (auto& c : cand) c.second = dot_d(q, exact_.row(c.first));
    std::sort(cand.begin(), cand.end(), better);
    cand.resize(std::min(k, cand.size()));
    return cand;
}

std::vector<std::size_t> IvfIndex::search(std::span<const float> query, std::size_t k, std::int64_t skip_group) const {
    std::vector<std::size_t> ids;
    for (const auto& [id, s] : search_scored(query, k, skip_group)) ids.push_back(id);
    return ids;
}

void SegConfig::validate() const {
    if (k == 0) throw ConfigError("segmentation k must be >= 1");
    if (!(tau > 0)) throw ConfigError("segmentation temperature must be > 0");
    if (augmentation_epochs == 0) throw ConfigError("augmentation epochs must be >= 1");
    if (num_classes == 0 || num_classes > 255) throw ConfigError("segmentation num_classes must be in [1, 255]");
}

std::vector<std::uint8_t> patch_labels(const Mask& mask, std::size_t patch, std::uint8_t ignore_label) {
    if (mask.rank() != 2 || patch == 0 || mask.dim(0) % patch || mask.dim(1) % patch) {
        throw ShapeError("mask " + shape_str(mask.shape()) + " is not a whole number of " + std::to_string(patch) + "-pixel cells");
    }
    const std::size_t gh = mask.dim(0) / patch, gw = mask.dim(1) / patch, w = mask.dim(1);
    std::vector<std::uint8_t> out(gh * gw, ignore_label);
    std::array<std::size_t, 256> votes{};
    for (std::size_t gy = 0; gy < gh; ++gy) {
        for (std::size_t gx = 0; gx < gw; ++gx) {
            votes.fill(0);
            for (std::size_t y = gy * patch; y < (gy + 1) * patch; ++y) {
                for (std::size_t x = gx * patch; x < (gx + 1) * patch; ++x) ++votes[mask[y * w + x]];
            }
            votes[ignore_label] = 0;
            std::size_t best = 0, arg = ignore_label;
            for (std::size_t c = 0; c < 256; ++c) {
                if (votes[c] > best) {
                    best = votes[c];
                    arg = c;
                }
            }
            out[gy * gw + gx] = static_cast<std::uint8_t>(arg);
        }
    }
    return out;
}

namespace {

Image to_encoder_size(const Image& image, const EncoderConfig& cfg) {
    if (image.rank() != 3) throw ShapeError("image must be [C, H, W]");
    if (image.dim(1) == cfg.image_size && image.dim(2) == cfg.image_size) return image;
    return resize_bilinear(image, cfg.image_size, cfg.image_size);
}

Mask mask_to_encoder_size(const Mask& mask, const EncoderConfig& cfg) {
    if (mask.dim(0) == cfg.image_size && mask.dim(1) == cfg.image_size) return mask;
    return resize_nearest(mask, cfg.image_size, cfg.image_size);
}

}  // namespace

Tensor<float> patch_features(const SegModel& model, const Image& image, const SegConfig& config, std::uint64_t seed,
                             std::int64_t skip_group) {
    if (!model.params) throw ConfigError("segmentation model has no encoder");
    const Encoding<float> enc = encode(*model.params, to_encoder_size(image, model.params->config));
    const std::size_t t = enc.patch_tokens.rows(), d = enc.patch_tokens.cols();
    if (!config.fungi) return enc.patch_tokens;
    if (!model.head || !model.support) throw ConfigError("fungi segmentation needs a head and a support index");
    const PatchGradients<float> pg = simclr_patch_loss(enc.tokens, *model.head, *model.support, config.simclr, seed, skip_group);
    Tensor<float> out(Shape{t, 2 * d});
    for (std::size_t i = 0; i < t; ++i) {
        const double ng = l2_norm(pg.grads.row(i)), ne = l2_norm(enc.patch_tokens.row(i));
        if (!(ng > 0) || !(ne > 0)) throw NumericError("zero-norm patch segment at token " + std::to_string(i));
        for (std::size_t j = 0; j < d; ++j) {
            out.at(i, j) = static_cast<float>(pg.grads.at(i, j) / ng);
            out.at(i, d + j) = static_cast<float>(enc.patch_tokens.at(i, j) / ne);
        }
    }
    return out;
}

Tensor<float> support_latents(const EncoderParams<float>& params, const Head<float>& head, std::span<const Image> images) {
    Tensor<float> out;
    std::size_t rows = 0;
    for (const auto& img : images) {
        const Encoding<float> enc = encode(params, to_encoder_size(img, params.config));
        const Tensor<float> z = apply_head(head, enc.patch_tokens);
        if (out.empty()) out = Tensor<float>(Shape{images.size() * z.rows(), z.cols()});
        for (std::size_t i = 0; i < z.rows(); ++i, ++rows) {
            const double n = l2_norm(z.row(i));
            if (!(n > 0)) throw NumericError("zero-norm support latent");
            for (std::size_t j = 0; j < z.cols(); ++j) out.at(rows, j) = static_cast<float>(z.at(i, j) / n);
        }
    }
    return out;
}

PatchMemoryBank build_bank(const SegModel& model, std::span<const Image> images, std::span<const Mask> masks,
                           const SegConfig& config, std::uint64_t seed, std::size_t jobs) {
    config.validate();
    if (!model.params) throw ConfigError("segmentation model has no encoder");
    if (images.size() != masks.size()) throw DataError("images and masks differ in count");
    if (images.empty()) throw DataError("memory bank needs at least one image");
    const EncoderConfig& ec = model.params->config;
    const std::size_t units = images.size() * config.augmentation_epochs;
    std::vector<Tensor<float>> feats(units);
    std::vector<std::vector<std::uint8_t>> labs(units);
    parallel_for(units, jobs, [&](std::size_t u) {
        const std::size_t img = u / config.augmentation_epochs, epoch = u % config.augmentation_epochs;
        const auto& im = images[img];
        const auto& mk = masks[img];
        if (im.rank() != 3 || mk.rank() != 2 || im.dim(1) != mk.dim(0) || im.dim(2) != mk.dim(1)) {
            throw ShapeError("mask " + shape_str(mk.shape()) + " does not match image " + shape_str(im.shape()));
        }
        Image x = to_encoder_size(im, ec);
        Mask m = mask_to_encoder_size(mk, ec);
        const std::uint64_t useed = derive_seed(seed, static_cast<std::uint64_t>(u));
        if (epoch > 0) {
            auto [xi, mi] = random_scale_crop(x, m, derive_seed(useed, "crop"), config.scale_range, config.ignore_label);
            x = color_jitter(xi, derive_seed(useed, "jitter"), config.jitter);
            m = std::move(mi);
        }
        feats[u] = patch_features(model, x, config, derive_seed(useed, "simclr"), static_cast<std::int64_t>(img));
        labs[u] = patch_labels(m, ec.patch_size, config.ignore_label);
    });

    const std::size_t per = feats[0].rows(), dim = feats[0].cols();
    std::size_t total = units * per;
    std::vector<std::size_t> keep(total);
    std::iota(keep.begin(), keep.end(), std::size_t{0});
    if (config.bank_size > 0 && config.bank_size < total) {
        Rng rng(derive_seed(seed, "subsample"));
        std::shuffle(keep.begin(), keep.end(), rng);
        keep.resize(config.bank_size);
        std::sort(keep.begin(), keep.end());
    }
    PatchMemoryBank bank;
    bank.embed_dim = ec.dim;
    bank.fungi = config.fungi;
    bank.features = Tensor<float>(Shape{keep.size(), dim});
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const std::size_t u = keep[r] / per, i = keep[r] % per;
        std::copy(feats[u].row(i).begin(), feats[u].row(i).end(), bank.features.row(r).begin());
        bank.labels.push_back(labs[u][i]);
        bank.images.push_back(static_cast<std::int64_t>(u / config.augmentation_epochs));
    }
    return bank;
}

std::vector<double> query_label(const LatentIndex& index, std::span<const std::uint8_t> labels,
                                std::span<const float> query, std::size_t k, double tau, std::size_t num_classes,
                                std::uint8_t ignore_label) {
    if (index.size() == 0) throw DataError("query against an empty bank");
    if (labels.size() != index.size()) throw ShapeError("bank labels vs index rows");
    if (k == 0 || k > index.size()) throw ConfigError("k must be in [1, bank size]");
    if (!(tau > 0)) throw ConfigError("temperature must be > 0");
    const auto q = unit_query(query, index.dim());
    const std::vector<std::size_t> ids = index.search(q, k, -1);
    std::vector<double> s(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) s[i] = dot_d(q, index.row(ids[i])) / tau;
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (auto& v : s) z += (v = std::exp(v - mx));
    std::vector<double> dist(num_classes, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::uint8_t l = labels[ids[i]];
        if (l == ignore_label) continue;
        if (l >= num_classes) throw DataError("bank label " + std::to_string(l) + " >= num_classes");
        dist[l] += s[i] / z;
    }
    return dist;
}

Mask segment_image(const SegModel& model, const LatentIndex& index, const PatchMemoryBank& bank, const Image& image,
                   const SegConfig& config, std::uint64_t seed) {
    config.validate();
    const EncoderConfig& ec = model.params->config;
    const Tensor<float> f = patch_features(model, image, config, seed, -1);
    const std::size_t g = ec.grid(), p = ec.patch_size, size = ec.image_size;
    std::vector<std::uint8_t> grid(g * g);
    for (std::size_t i = 0; i < f.rows(); ++i) {
        const auto dist = query_label(index, bank.labels, f.row(i), config.k, config.tau, config.num_classes, config.ignore_label);
        const auto it = std::max_element(dist.begin(), dist.end());
        grid[i] = *it > 0 ? static_cast<std::uint8_t>(it - dist.begin()) : config.ignore_label;
    }
    Mask out(Shape{size, size});
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) out[y * size + x] = grid[(y / p) * g + x / p];
    }
    return out;
}

MiouResult miou(std::span<const Mask> preds, std::span<const Mask> gts, std::size_t num_classes, std::uint8_t ignore_label) {
    if (preds.size() != gts.size()) throw ShapeError("prediction and ground-truth mask counts differ");
    std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    for (std::size_t m = 0; m < preds.size(); ++m) {
        if (preds[m].shape() != gts[m].shape()) {
            throw ShapeError("mask " + std::to_string(m) + ": " + shape_str(preds[m].shape()) + " vs " + shape_str(gts[m].shape()));
        }
        for (std::size_t i = 0; i < gts[m].numel(); ++i) {
            const std::uint8_t g = gts[m][i], p = preds[m][i];
            if (g == ignore_label) continue;
            if (g >= num_classes) throw DataError("ground-truth label " + std::to_string(g) + " >= num_classes");
            if (p == g) {
                ++tp[g];
                continue;
            }
            ++fn[g];
            if (p != ignore_label) {
                if (p >= num_classes) throw DataError("predicted label " + std::to_string(p) + " >= num_classes");
                ++fp[p];
            }
        }
    }
    MiouResult r;
    r.iou.resize(num_classes);
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t den = tp[c] + fp[c] + fn[c];
        if (den == 0) continue;
        r.iou[c] = static_cast<double>(tp[c]) / static_cast<double>(den);
        sum += *r.iou[c];
        ++present;
    }
    r.mean = present ? sum / static_cast<double>(present) : 0.0;
    return r;
}

}  // namespace fungi
