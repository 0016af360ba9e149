#pragma once

// Seeded synthetic datasets.
//
// blobs: every class owns three Gaussian blobs (centre in [0.2, 0.8]^2 of the image, radius
//   in [0.08, 0.2] of the side, RGB colour in [0, 1]^3). A sample jitters each centre by
//   N(0, (0.05 side)^2), scales each blob by U(0.7, 1), adds the blobs onto a 0.1 grey
//   background, adds N(0, noise^2) pixel noise and clamps to [0, 1].
// stripes: class c has a sinusoidal grating with 2 + 2c cycles per image at angle pi c / C and
//   its own colour; samples draw a uniform phase and contrast U(0.3, 0.45) around 0.5, plus
//   pixel noise.
// segmentation: a textured background (class 0) with 1-3 axis-aligned rectangles snapped to a
//   `cell`-pixel grid, each filled with the texture of a class in 1..C-1; the mask holds the
//   per-pixel class. The image label is the class covering the most foreground pixels.
// Class appearance depends only on (seed, class); samples depend on (seed, split, index).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fungi/augment.hpp"
#include "fungi/evalkit.hpp"

namespace fungi {

struct Dataset {
    std::string kind;
    std::string split;
    std::size_t num_classes = 0;
    std::vector<Image> images;  // [3, S, S]
    std::vector<Label> labels;
    std::vector<Mask> masks;    // segmentation only

    std::size_t size() const { return images.size(); }
    void validate() const;
};

struct SynthParams {
    std::string kind = "blobs";
    std::size_t n = 200;
    std::size_t classes = 4;
    std::size_t image_size = 224;
    double noise = 0.05;
    std::size_t cell = 8;
    std::uint64_t seed = 0;
};

// Labels cycle through the classes (sample i has class i mod C) for blobs and stripes.
Dataset synth_dataset(const SynthParams& params, const std::string& split);

void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace fungi
