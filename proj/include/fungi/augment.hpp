#pragma once

// Seeded view generation. Every function is a pure function of (input, params, seed).
// Images are [C, H, W] float tensors with values nominally in [0, 1].

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fungi/tensor.hpp"

namespace fungi {

using Image = Tensor<float>;
using Mask = Tensor<std::uint8_t>;  // [H, W] class ids

enum class ViewKind { overlap_patches, global_crop, local_crop, color_jitter, identity };

struct CropBox {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t size = 0;
    double scale = 1.0;  // area fraction of the source image
};

struct ViewSet {
    ViewKind kind = ViewKind::identity;
    std::vector<Image> views;
    std::vector<CropBox> boxes;

    std::size_t size() const { return views.size(); }
};

// Bilinear resampling with half-pixel centres.
Image resize_bilinear(const Image& image, std::size_t out_h, std::size_t out_w);

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

struct PatchifyParams {
    std::size_t base = 224;   // the image is first resized to base x base
    std::size_t patch = 112;  // square patch side
    std::size_t grid = 7;     // grid x grid patches
    std::size_t out_size = 0; // resize each patch to this side; 0 keeps the patch size
};

// Top-left offsets round(i * (base - patch) / (grid - 1)), i = 0..grid-1.
std::vector<std::size_t> overlap_offsets(std::size_t base, std::size_t patch, std::size_t grid);

ViewSet patchify_overlap(const Image& image, const PatchifyParams& params = {});

struct DinoCropParams {
    std::size_t global_count = 2;
    std::size_t local_count = 10;
    std::pair<double, double> global_scale{0.25, 1.0};
    std::pair<double, double> local_scale{0.05, 0.25};
    std::size_t out_size = 224;
};

struct DinoViews {
    ViewSet global;
    ViewSet local;
};

// Square random crops, bilinearly resized to out_size. No colour augmentation.
DinoViews dino_crops(const Image& image, std::uint64_t seed, const DinoCropParams& params = {});

struct JitterParams {
    double brightness = 0.1;
    double contrast = 0.1;
    double saturation = 0.1;
    double hue = 0.1;
    double p = 0.5;  // independent application probability per transform
};

// Brightness, contrast, saturation, hue, in that order; output clamped to [0, 1].
Image color_jitter(const Image& image, std::uint64_t seed, const JitterParams& params = {});

// Drops each token with probability p; if all are dropped one uniformly chosen token survives.
std::vector<std::string> word_delete(const std::vector<std::string>& tokens, double p, std::uint64_t seed);

struct NoisyClip {
    Tensor<float> clip;
    int shift = 0;
};

// c + x1 * x2 / 10 with x1 ~ U(0,1)^{h x w}, x2 ~ U(0,1); then shifted along the time (row)
// axis by delta ~ U{-max_shift..max_shift} with zero padding.
NoisyClip audio_noise(const Tensor<float>& clip, std::uint64_t seed, int max_shift = 10);

// Rows move by delta (positive = later in time); vacated rows are zero.
Tensor<float> time_shift(const Tensor<float>& clip, int delta);

// Nearest-neighbour resize for label masks.
Mask resize_nearest(const Mask& mask, std::size_t out_h, std::size_t out_w);

// Rescale image and mask by a factor in [lo, hi], then take a random crop (or zero/ignore pad)
// back to the original size.
std::pair<Image, Mask> random_scale_crop(const Image& image, const Mask& mask, std::uint64_t seed,
                                         std::pair<double, double> scale = {0.5, 2.0},
                                         std::uint8_t ignore_label = 255);

}  // namespace fungi
