#pragma once

// Retrieval-based segmentation: per-patch memory bank, exact / inverted-file search,
// attention-weighted label propagation, mIoU.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fungi/augment.hpp"
#include "fungi/backbone.hpp"
#include "fungi/objectives.hpp"
#include "fungi/tensor.hpp"

namespace fungi {

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Rows are L2-normalised on construction; similarity is the dot product (cosine).
class ExactIndex : public LatentIndex {
public:
    ExactIndex() = default;
    // groups: one id per row (e.g. source image), used by search's skip_group; empty = all -1.
    explicit ExactIndex(Tensor<float> rows, std::vector<std::int64_t> groups = {});

    std::size_t size() const override { return n_; }
    std::size_t dim() const override { return d_; }
    std::vector<std::size_t> search(std::span<const float> query, std::size_t k, std::int64_t skip_group) const override;
    std::span<const float> row(std::size_t id) const override { return rows_.row(id); }

    // Top k ids with their similarities, by (similarity desc, id asc).
    std::vector<std::pair<std::size_t, double>> search_scored(std::span<const float> query, std::size_t k,
                                                              std::int64_t skip_group = -1) const;

private:
    Tensor<float> rows_;
    std::vector<std::int64_t> groups_;
    std::size_t n_ = 0, d_ = 0;
};

struct IvfParams {
    std::size_t num_leaves = 512;
    std::size_t leaves_to_search = 32;
    std::size_t rerank = 120;
    std::size_t train_sample = 0;   // rows used to fit the leaves; 0 = min(n, 32 * num_leaves)
    std::size_t kmeans_iters = 12;
    double anisotropic_threshold = 0.2;  // recorded only; the quantizer is not score-aware

    void validate() const;
};

// Coarse spherical k-means leaves with posting lists. Candidates from the nearest
// leaves_to_search leaves are scored in single precision, the best `rerank` are rescored in
// double and the top k returned by (similarity desc, id asc).
class IvfIndex : public LatentIndex {
public:
    IvfIndex() = default;
    IvfIndex(Tensor<float> rows, const IvfParams& params, std::uint64_t seed, std::vector<std::int64_t> groups = {});

    std::size_t size() const override { return exact_.size(); }
    std::size_t dim() const override { return exact_.dim(); }
    std::vector<std::size_t> search(std::span<const float> query, std::size_t k, std::int64_t skip_group) const override;
    std::span<const float> row(std::size_t id) const override { return exact_.row(id); }

    std::vector<std::pair<std::size_t, double>> search_scored(std::span<const float> query, std::size_t k,
                                                              std::int64_t skip_group = -1) const;

    const IvfParams& params() const { return params_; }
    void set_leaves_to_search(std::size_t n);
    const std::vector<std::vector<std::uint32_t>>& postings() const { return postings_; }
    const Tensor<float>& centroids() const { return centroids_; }

private:
    ExactIndex exact_;
    std::vector<std::int64_t> groups_;
    IvfParams params_;
    Tensor<float> centroids_;  // [L, D], unit rows
    std::vector<std::vector<std::uint32_t>> postings_;
};

struct SegConfig {
    std::size_t k = 30;
    double tau = 0.02;
    std::size_t augmentation_epochs = 1;
    std::size_t bank_size = 0;  // 0 keeps every patch
    bool fungi = false;
    std::size_t num_classes = 0;
    std::uint8_t ignore_label = kIgnoreLabel;
    SimclrPatchConfig simclr;
    JitterParams jitter;
    std::pair<double, double> scale_range{0.5, 2.0};

    void validate() const;
};

struct PatchMemoryBank {
    Tensor<float> features;              // [M, D]
    std::vector<std::uint8_t> labels;    // [M]
    std::vector<std::int64_t> images;    // source image per row
    std::size_t embed_dim = 0;
    bool fungi = false;

    std::size_t size() const { return labels.size(); }
};

// Majority label of every patch cell, ignore label excluded from the vote (ties -> smaller id,
// all-ignore cell -> ignore).
std::vector<std::uint8_t> patch_labels(const Mask& mask, std::size_t patch, std::uint8_t ignore_label = kIgnoreLabel);

// Frozen-model components shared by bank construction and inference.
struct SegModel {
    const EncoderParams<float>* params = nullptr;
    const Head<float>* head = nullptr;          // required when fungi is on
    const LatentIndex* support = nullptr;       // required when fungi is on
};

// [T, D] per-patch features of one image (already at encoder resolution). D = d, or 2d with
// fungi: cat(grad / |grad|, token / |token|).
Tensor<float> patch_features(const SegModel& model, const Image& image, const SegConfig& config, std::uint64_t seed,
                             std::int64_t skip_group = -1);

// Head latents of every patch token of every image, unit-normalised; groups = image index.
Tensor<float> support_latents(const EncoderParams<float>& params, const Head<float>& head, std::span<const Image> images);

// Images and masks are resized to the encoder resolution. Epoch 0 is the unaugmented image,
// later epochs apply a random scale-crop and colour jitter. Subsampling happens last.
PatchMemoryBank build_bank(const SegModel& model, std::span<const Image> images, std::span<const Mask> masks,
                           const SegConfig& config, std::uint64_t seed, std::size_t jobs = 1);

// Softmax(s_i / tau) over the k nearest by cosine, accumulated on one-hot labels. Neighbours
// with the ignore label get no mass; if all are ignored the distribution is all zero.
std::vector<double> query_label(const LatentIndex& index, std::span<const std::uint8_t> labels,
                                std::span<const float> query, std::size_t k, double tau, std::size_t num_classes,
                                std::uint8_t ignore_label = kIgnoreLabel);

// Predicted label mask at encoder resolution (patch grid upsampled by nearest neighbour).
Mask segment_image(const SegModel& model, const LatentIndex& index, const PatchMemoryBank& bank, const Image& image,
                   const SegConfig& config, std::uint64_t seed);

struct MiouResult {
    std::vector<std::optional<double>> iou;  // per class; empty when absent from gt and pred
    double mean = 0;
};

MiouResult miou(std::span<const Mask> preds, std::span<const Mask> gts, std::size_t num_classes,
                std::uint8_t ignore_label = kIgnoreLabel);

}  // namespace fungi
