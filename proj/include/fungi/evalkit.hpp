#pragma once

// Evaluation protocols over feature matrices: kNN, few-shot subsets, accuracy, CKA,
// k-means + Hungarian cluster overlap, logistic probe, retrieval mAP.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fungi/tensor.hpp"

namespace fungi {

using Label = std::int32_t;

// ---- kNN ----

struct KnnIndex {
    Tensor<double> features;  // [n, D]
    std::vector<Label> labels;
    std::size_t k = 20;

    KnnIndex() = default;
    KnnIndex(Tensor<double> features, std::vector<Label> labels, std::size_t k);
    std::size_t size() const { return labels.size(); }
};

// Euclidean distance. The k nearest rows are chosen by (distance, row index); the vote goes to
// the most frequent label, then the larger sum of 1/distance, then the smaller label.
Label knn_classify(const KnnIndex& index, std::span<const double> query);
std::vector<Label> knn_classify(const KnnIndex& index, const Tensor<double>& queries, std::size_t jobs = 1);

// `shots` indices per class, seeded uniform sampling without replacement; sorted ascending.
std::vector<std::size_t> few_shot_subset(const std::vector<Label>& labels, std::size_t shots, std::uint64_t seed);

enum class AccuracyMode { top1, mean_per_class };

double accuracy(const std::vector<Label>& preds, const std::vector<Label>& labels, AccuracyMode mode = AccuracyMode::top1);
// Recall per ground-truth class.
std::map<Label, double> per_class_accuracy(const std::vector<Label>& preds, const std::vector<Label>& labels);

struct ClassDelta {
    Label label = 0;
    double a = 0;
    double b = 0;
    double delta = 0;  // a - b
};

std::vector<ClassDelta> per_class_delta(const std::map<Label, double>& a, const std::map<Label, double>& b);
std::string deltas_csv(const std::vector<ClassDelta>& deltas);

// ---- representation similarity ----

double linear_cka(const Tensor<double>& x, const Tensor<double>& y);

// ---- clustering ----

struct KMeansResult {
    std::vector<std::size_t> assignments;
    Tensor<double> centroids;     // [C, D]
    std::vector<double> inertia;  // after each Lloyd iteration
    std::size_t iterations = 0;
    std::size_t reseeded = 0;     // empty clusters refilled from the farthest point
};

struct KMeansParams {
    std::size_t max_iter = 300;
    double tol = 1e-6;  // stop when no centroid moves farther than this
};

// k-means++ seeding, then Lloyd iterations.
KMeansResult kmeans(const Tensor<double>& x, std::size_t clusters, std::uint64_t seed, const KMeansParams& params = {});

// Minimum-cost perfect matching on a square cost matrix; result[row] = column.
std::vector<std::size_t> hungarian(const Tensor<double>& cost);

// Fraction of samples whose cluster maps to their class under the best one-to-one matching.
double cluster_overlap(const std::vector<std::size_t>& assignments, const std::vector<Label>& labels);

// ---- logistic probe ----

struct LogisticModel {
    std::vector<Label> classes;  // ascending; row c of weight scores classes[c]
    Tensor<double> weight;       // [C, D]
    std::vector<double> bias;    // [C]

    Tensor<double> predict_proba(const Tensor<double>& x) const;
    std::vector<Label> predict(const Tensor<double>& x) const;
};

// mean cross-entropy + lambda/2 * |W|_F^2 (bias unpenalised). When grad_w / grad_b are given
// they receive the exact gradient.
double probe_objective(const LogisticModel& model, const Tensor<double>& x, const std::vector<std::size_t>& y,
                       double lambda, Tensor<double>* grad_w = nullptr, std::vector<double>* grad_b = nullptr);

// Full-batch gradient descent with Armijo backtracking.
LogisticModel fit_logistic(const Tensor<double>& x, const std::vector<Label>& labels, double lambda,
                           std::size_t max_epochs = 300);

struct ProbeParams {
    double lambda_min = 5e-6;
    double lambda_max = 5e-4;
    std::size_t lambda_count = 5;
    std::size_t max_epochs = 300;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

std::vector<double> lambda_grid(const ProbeParams& params);

struct ProbeResult {
    std::vector<double> lambdas;
    std::vector<double> val_accuracy;
    double best_lambda = 0;
    double train_accuracy = 0;
    double test_accuracy = 0;
};

// Stratified split: per class, floor(val_fraction * count) (at least one when the class has
// two or more samples) seeded samples go to validation.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const std::vector<Label>& labels,
                                                                               double val_fraction, std::uint64_t seed);

// Picks lambda on a stratified split of the training set, then refits on all training samples.
ProbeResult logistic_probe(const Tensor<double>& train_x, const std::vector<Label>& train_y,
                           const Tensor<double>& test_x, const std::vector<Label>& test_y, const ProbeParams& params);

// ---- retrieval ----

// Mean of precision@rank over the ranks of the relevant items; ranking = descending score,
// ties by smaller gallery index.
double average_precision(std::span<const double> scores, const std::vector<std::size_t>& relevant);

struct RetrievalResult {
    double map = 0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;  // queries with no relevant gallery item
};

// Cosine similarity ranking of the gallery for every query.
RetrievalResult retrieval_map(const Tensor<double>& queries, const Tensor<double>& gallery,
                              const std::vector<std::vector<std::size_t>>& relevance);

// ---- reports ----

struct EvalRow {
    std::string name;
    std::string metric;
    double value = 0;
    std::optional<double> delta;  // against the report's baseline row
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<std::pair<std::string, std::string>> echo;         // key, value
    std::vector<std::pair<std::string, std::string>> attachments;  // file suffix, CSV body

    // "# key=value" echo lines, then name,metric,value,delta rows.
    std::string to_csv() const;
    std::string to_table() const;
};

}  // namespace fungi
