#pragma once

// End-to-end commands over datasets and feature banks. Each function is a pure function of
// its inputs; progress goes through the optional log callback.

#include <functional>
#include <string>
#include <vector>

#include "fungi/config.hpp"
#include "fungi/evalkit.hpp"
#include "fungi/features.hpp"
#include "fungi/synth.hpp"

namespace fungi {

using LogFn = std::function<void(const std::string&)>;

// Frozen components shared by every sample of an extraction run.
struct ExtractionModel {
    EncoderParams<float> params;
    std::vector<ObjectiveKind> objectives;
    Head<float> kl_head, dino_student, dino_teacher, simclr_head;  // only those the objectives need
    NegativeBank negatives;                  // simclr only
    std::vector<Tensor<double>> projections; // per objective, [d, out * (in + 1)]
    std::vector<std::uint64_t> projection_seeds;
};

// `negative_source` supplies the SimCLR negative bank images (the training split).
ExtractionModel build_extraction_model(const RunConfig& config, const Dataset& negative_source);

// Embedding plus one projected gradient per objective, fused as [gradients..., embedding].
FeatureRecord extract_record(const ExtractionModel& model, const RunConfig& config, const Image& image,
                             std::int64_t id, Label label);

FeatureBank extract_features(const RunConfig& config, const Dataset& data, const Dataset& negative_source,
                             std::size_t jobs = 1, const LogFn& log = {});

struct PcaOutput {
    FeatureBank train;
    FeatureBank test;
    PcaModel model;
};

// Fits on train only and rewrites the fused matrices of both banks.
PcaOutput fuse_pca(const FeatureBank& train, const FeatureBank& test, std::size_t out_dim);

// Throws DataError when the banks were extracted under different configurations.
void check_compatible(const FeatureBank& a, const FeatureBank& b);

// Config echo as "section.key" pairs plus the extraction hash.
std::vector<std::pair<std::string, std::string>> config_echo(const RunConfig& config);

// kNN rows for the embedding, each gradient alone and the fused vector, with deltas against
// the embedding and a per-class delta attachment.
EvalReport eval_knn(const RunConfig& config, const FeatureBank& train, const FeatureBank& test, std::size_t jobs = 1);
EvalReport eval_cluster(const RunConfig& config, const FeatureBank& bank);
EvalReport eval_probe(const RunConfig& config, const FeatureBank& train, const FeatureBank& test);
// Queries = test, gallery = train, relevant = same label.
EvalReport eval_retrieval(const RunConfig& config, const FeatureBank& train, const FeatureBank& test);
// Pairwise linear CKA between the bank's segments; the matrix is attached as CSV.
EvalReport eval_cka(const RunConfig& config, const FeatureBank& bank);
// Memory bank from the train split, mIoU on the test split, plus a k = 1 self-bank check.
EvalReport eval_segment(const RunConfig& config, const Dataset& train, const Dataset& test, std::size_t jobs = 1,
                        const LogFn& log = {});

}  // namespace fungi
