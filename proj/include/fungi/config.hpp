#pragma once

// Run configuration: flat key=value lines under [section] headers, '#' comments.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fungi/backbone.hpp"
#include "fungi/evalkit.hpp"
#include "fungi/features.hpp"
#include "fungi/objectives.hpp"
#include "fungi/segmem.hpp"

namespace fungi {

struct SegSetup {
    std::size_t k = 30;
    double tau = 0.02;
    std::size_t augmentation_epochs = 1;
    std::size_t bank_size = 0;  // 0: every patch
    IvfParams ivf;
};

struct RunConfig {
    std::uint64_t seed = 0;

    EncoderConfig encoder;
    bool collapse_attention = false;  // zero every attention output projection
    GradientSource source = GradientSource::last_attn_proj(EncoderConfig{});

    std::vector<ObjectiveKind> objectives{ObjectiveKind::kl, ObjectiveKind::dino, ObjectiveKind::simclr};
    KlConfig kl;
    DinoConfig dino;
    SimclrConfig simclr;

    ProjectionKind projection = ProjectionKind::binary;

    std::string backbone_tag = "vit_s";  // picks the PCA width when pca_dim = 0
    std::size_t pca_dim_vit_s = 384;
    std::size_t pca_dim_vit_b = 512;
    std::size_t pca_dim = 0;

    std::size_t knn_k = 20;
    std::size_t shots = 5;
    bool few_shot = false;
    AccuracyMode accuracy_mode = AccuracyMode::top1;

    std::size_t clusters = 0;  // 0: number of classes
    KMeansParams kmeans;
    ProbeParams probe;

    std::string seg_mode = "full";  // full | few_shot
    SegSetup seg_full;
    SegSetup seg_few_shot;
    std::string seg_index = "ivf";  // ivf | exact
    std::size_t seg_dims_per_block = 4;
    bool seg_fungi = true;
    SimclrPatchConfig seg_simclr;
    JitterParams seg_jitter;
    std::pair<double, double> seg_scale{0.5, 2.0};
    std::uint8_t ignore_label = kIgnoreLabel;

    std::string synth_kind = "blobs";  // blobs | stripes | segmentation
    std::size_t synth_classes = 4;
    std::size_t synth_train = 200;
    std::size_t synth_test = 100;
    std::size_t synth_image_size = 224;
    double synth_noise = 0.05;

    RunConfig();

    void validate() const;
    std::size_t resolved_pca_dim() const;
    const SegSetup& seg_setup() const { return seg_mode == "few_shot" ? seg_few_shot : seg_full; }
    SegConfig seg_config(std::size_t num_classes) const;

    // Canonical text form; parse(to_ini()) == *this.
    std::string to_ini() const;
    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::string& path);

    // Sets one key, as if it appeared in a config file. Throws ConfigError on unknown keys.
    void set(std::string_view section, std::string_view key, std::string_view value);
    std::string get(std::string_view section, std::string_view key) const;

    // FNV-1a over the sections that influence extracted features.
    std::uint64_t extraction_hash() const;
};

}  // namespace fungi
