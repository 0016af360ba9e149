#pragma once

// Gradient -> feature vector: flatten, random projection, per-segment normalisation
// and concatenation, PCA.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fungi/backbone.hpp"
#include "fungi/tensor.hpp"

namespace fungi {

// [dW | db] row by row: bias appended as the last column of each output row.
template <typename T>
std::vector<double> flatten_gradient(const LayerGradient<T>& grad);

LayerGradient<double> unflatten_gradient(std::span<const double> flat, std::size_t out_dim, std::size_t in_dim);

enum class ProjectionKind { binary, gaussian, sparse };

std::string_view to_string(ProjectionKind kind);
ProjectionKind parse_projection_kind(std::string_view name);

// out_dim x in_dim random matrix, never stored: row r is regenerated from derive_seed(seed, r).
// binary: +-1 equiprobable; gaussian: N(0,1); sparse: +-1 each with probability s/2, else 0,
// s = 1/sqrt(in_dim). No scaling is applied.
class ProjectionMatrix {
public:
    ProjectionMatrix() = default;
    ProjectionMatrix(ProjectionKind kind, std::size_t out_dim, std::size_t in_dim, std::uint64_t seed);

    ProjectionKind kind() const { return kind_; }
    std::size_t out_dim() const { return out_dim_; }
    std::size_t in_dim() const { return in_dim_; }
    std::uint64_t seed() const { return seed_; }
    double density() const;
    // E[r^2] of a single entry; sqrt(out_dim * E[r^2]) is the expected length gain.
    double entry_second_moment() const;

    void fill_row(std::size_t r, std::span<double> out) const;
    // Dense out_dim x in_dim copy, for reuse across many vectors.
    Tensor<double> materialize() const;

private:
    ProjectionKind kind_ = ProjectionKind::binary;
    std::size_t out_dim_ = 0;
    std::size_t in_dim_ = 0;
    std::uint64_t seed_ = 0;
};

std::vector<double> project(const ProjectionMatrix& r, std::span<const double> g);
// Same result as project() with a materialised matrix.
std::vector<double> project(const Tensor<double>& dense, std::span<const double> g);
// Rows of `vectors` ([n, in_dim]) projected to [n, out_dim]; rows of R are generated once.
Tensor<double> project_rows(const ProjectionMatrix& r, const Tensor<double>& vectors);

// Each segment scaled to unit norm, then concatenated in the given order.
std::vector<double> fuse(const std::vector<std::span<const double>>& segments);

struct PcaModel {
    std::vector<double> mean;               // [D]
    Tensor<double> components;              // [k, D], orthonormal rows
    std::vector<double> explained_variance; // [k], non-increasing

    std::size_t in_dim() const { return mean.size(); }
    std::size_t out_dim() const { return explained_variance.size(); }
};

// Centred PCA by thin SVD. Each component's sign is fixed so that its largest-magnitude
// entry is positive.
PcaModel fit_pca(const Tensor<double>& x, std::size_t out_dim);
std::vector<double> apply_pca(const PcaModel& model, std::span<const double> v);
Tensor<double> apply_pca(const PcaModel& model, const Tensor<double>& x);
// components^T * y + mean
Tensor<double> reconstruct_pca(const PcaModel& model, const Tensor<double>& y);

struct FeatureRecord {
    std::int64_t id = 0;
    std::int32_t label = -1;
    std::vector<double> embedding;
    std::vector<std::vector<double>> gradients;  // one per objective, bank order
    std::vector<double> fused;
};

// Column store of FeatureRecords plus the provenance needed to compare banks.
struct FeatureBank {
    static constexpr std::uint16_t kFormatVersion = 1;

    std::string split;                    // "train" / "test"
    std::uint64_t config_hash = 0;
    std::vector<std::string> objectives;  // gradient segment names, fused order
    std::string gradient_source;          // e.g. blocks.1.attn_proj
    std::string projection_kind;
    std::vector<std::uint64_t> projection_seeds;  // one per objective
    std::uint64_t pca_dim = 0;                    // 0: fused vectors are not PCA-reduced
    std::string config_echo;

    std::vector<std::int64_t> ids;
    std::vector<std::int32_t> labels;
    Tensor<double> embeddings;              // [n, d]
    std::vector<Tensor<double>> gradients;  // per objective, [n, d]
    Tensor<double> fused;                   // [n, D]

    std::size_t size() const { return ids.size(); }
    std::size_t dim() const { return fused.empty() ? 0 : fused.cols(); }

    FeatureRecord record(std::size_t i) const;
    // Records must share embedding/gradient/fused sizes with the bank.
    void append(const FeatureRecord& rec);
    // Uniform sizes, unique ids, consistent segment counts.
    void validate() const;
};

}  // namespace fungi
