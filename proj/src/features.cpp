#include "fungi/features.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <unordered_set>

#include "fungi/rng.hpp"

namespace fungi {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<const MatD>;

MapD as_mat(const Tensor<double>& t) { return MapD(t.data(), t.rows(), t.cols()); }

}  // namespace

template <typename T>
std::vector<double> flatten_gradient(const LayerGradient<T>& grad) {
    if (grad.weight.rank() != 2) throw ShapeError("weight gradient must be 2-D, got " + shape_str(grad.weight.shape()));
    const std::size_t o = grad.weight.dim(0), in = grad.weight.dim(1);
    if (grad.bias.numel() != o) {
        throw ShapeError("bias gradient " + shape_str(grad.bias.shape()) + " vs weight " + shape_str(grad.weight.shape()));
    }
    std::vector<double> out;
    out.reserve(o * (in + 1));
    for (std::size_t r = 0; r < o; ++r) {
        for (std::size_t c = 0; c < in; ++c) out.push_back(static_cast<double>(grad.weight.at(r, c)));
        out.push_back(static_cast<double>(grad.bias[r]));
    }
    return out;
}

LayerGradient<double> unflatten_gradient(std::span<const double> flat, std::size_t out_dim, std::size_t in_dim) {
    if (flat.size() != out_dim * (in_dim + 1)) {
        throw ShapeError("flat gradient of length " + std::to_string(flat.size()) + " for a " +
                         std::to_string(out_dim) + "x" + std::to_string(in_dim) + " layer");
    }
    LayerGradient<double> g{Tensor<double>(Shape{out_dim, in_dim}), Tensor<double>(Shape{out_dim})};
    for (std::size_t r = 0; r < out_dim; ++r) {
        const double* src = flat.data() + r * (in_dim + 1);
        std::copy(src, src + in_dim, g.weight.row(r).begin());
        g.bias[r] = src[in_dim];
    }
    return g;
}

std::string_view to_string(ProjectionKind kind) {
    switch (kind) {
        case ProjectionKind::binary: return "binary";
        case ProjectionKind::gaussian: return "gaussian";
        case ProjectionKind::sparse: return "sparse";
    }
    return "?";
}

ProjectionKind parse_projection_kind(std::string_view name) {
    if (name == "binary") return ProjectionKind::binary;
    if (name == "gaussian") return ProjectionKind::gaussian;
    if (name == "sparse") return ProjectionKind::sparse;
    throw ConfigError("unknown projection kind '" + std::string(name) + "'");
}

ProjectionMatrix::ProjectionMatrix(ProjectionKind kind, std::size_t out_dim, std::size_t in_dim, std::uint64_t seed)
    : kind_(kind), out_dim_(out_dim), in_dim_(in_dim), seed_(seed) {
    if (out_dim == 0 || in_dim == 0) throw ConfigError("projection dimensions must be positive");
}

double ProjectionMatrix::density() const {
    return kind_ == ProjectionKind::sparse ? 1.0 / std::sqrt(static_cast<double>(in_dim_)) : 1.0;
}

double ProjectionMatrix::entry_second_moment() const { return density(); }

void ProjectionMatrix::fill_row(std::size_t r, std::span<double> out) const {
    if (r >= out_dim_ || out.size() != in_dim_) throw ShapeError("projection row request");
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(r)));
    switch (kind_) {
        case ProjectionKind::binary: {
            std::uint64_t bits = 0;
            for (std::size_t j = 0; j < in_dim_; ++j) {
                if (j % 64 == 0) bits = rng();
                out[j] = (bits >> (j % 64)) & 1U ? 1.0 : -1.0;
            }
            break;
        }
        case ProjectionKind::gaussian: {
            std::normal_distribution<double> nd(0.0, 1.0);
            for (auto& v : out) v = nd(rng);
            break;
        }
        case ProjectionKind::sparse: {
            const double half = density() / 2;
            for (auto& v : out) {
                const double u = uniform01(rng);
                v = u < half ? 1.0 : (u < 2 * half ? -1.0 : 0.0);
            }
            break;
        }
    }
}

Tensor<double> ProjectionMatrix::materialize() const {
    Tensor<double> m(Shape{out_dim_, in_dim_});
    for (std::size_t r = 0; r < out_dim_; ++r) fill_row(r, m.row(r));
    return m;
}

std::vector<double> project(const ProjectionMatrix& r, std::span<const double> g) {
    if (g.size() != r.in_dim()) {
        throw ShapeError("projection expects " + std::to_string(r.in_dim()) + " inputs, got " + std::to_string(g.size()));
    }
    std::vector<double> row(r.in_dim()), out(r.out_dim());
    for (std::size_t i = 0; i < r.out_dim(); ++i) {
        r.fill_row(i, row);
        double s = 0;
        for (std::size_t j = 0; j < row.size(); ++j) s += row[j] * g[j];
        out[i] = s;
    }
    return out;
}

std::vector<double> project(const Tensor<double>& dense, std::span<const double> g) {
    if (dense.rank() != 2 || g.size() != dense.cols()) throw ShapeError("dense projection input size");
    std::vector<double> out(dense.rows());
    for (std::size_t i = 0; i < dense.rows(); ++i) {
        const auto row = dense.row(i);
        double s = 0;
        for (std::size_t j = 0; j < row.size(); ++j) s += row[j] * g[j];
        out[i] = s;
    }
    return out;
}

Tensor<double> project_rows(const ProjectionMatrix& r, const Tensor<double>& vectors) {
    if (vectors.rank() != 2 || vectors.cols() != r.in_dim()) throw ShapeError("project_rows input width");
    const std::size_t n = vectors.rows();
    Tensor<double> out(Shape{n, r.out_dim()});
    std::vector<double> row(r.in_dim());
    const MapD v = as_mat(vectors);
    for (std::size_t i = 0; i < r.out_dim(); ++i) {
        r.fill_row(i, row);
        const Eigen::VectorXd prod = v * Eigen::Map<const Eigen::VectorXd>(row.data(), row.size());
        for (std::size_t k = 0; k < n; ++k) out.at(k, i) = prod[static_cast<Eigen::Index>(k)];
    }
    return out;
}

std::vector<double> fuse(const std::vector<std::span<const double>>& segments) {
    if (segments.empty()) throw DataError("fuse needs at least one segment");
    std::vector<double> out;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const double n = l2_norm(segments[s]);
        if (!(n > 0) || !std::isfinite(n)) {
            throw NumericError("segment " + std::to_string(s) + " has zero or non-finite norm");
        }
        for (double v : segments[s]) out.push_back(v / n);
    }
    return out;
}

PcaModel fit_pca(const Tensor<double>& x, std::size_t out_dim) {
    if (x.rank() != 2) throw ShapeError("PCA input must be 2-D");
    const std::size_t n = x.rows(), d = x.cols();
    if (out_dim == 0 || out_dim > std::min(n, d)) {
        throw DataError("PCA output dimension " + std::to_string(out_dim) + " exceeds min(samples, dim) = " +
                        std::to_string(std::min(n, d)));
    }
    if (n < 2) throw DataError("PCA needs at least two samples");
    const MapD m = as_mat(x);
    const Eigen::RowVectorXd mu = m.colwise().mean();
    const Eigen::MatrixXd centered = m.rowwise() - mu;
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    const Eigen::MatrixXd& v = svd.matrixV();
    const Eigen::VectorXd& s = svd.singularValues();

    PcaModel model;
    model.mean.assign(mu.data(), mu.data() + d);
    model.components = Tensor<double>(Shape{out_dim, d});
    model.explained_variance.resize(out_dim);
    for (std::size_t k = 0; k < out_dim; ++k) {
        const auto col = v.col(static_cast<Eigen::Index>(k));
        Eigen::Index arg = 0;
        col.cwiseAbs().maxCoeff(&arg);
        const double sign = col[arg] < 0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < d; ++j) model.components.at(k, j) = sign * col[static_cast<Eigen::Index>(j)];
        const double sv = k < static_cast<std::size_t>(s.size()) ? s[static_cast<Eigen::Index>(k)] : 0.0;
        model.explained_variance[k] = sv * sv / static_cast<double>(n - 1);
    }
    return model;
}

std::vector<double> apply_pca(const PcaModel& model, std::span<const double> v) {
    if (v.size() != model.in_dim()) throw ShapeError("PCA input dimension");
    std::vector<double> out(model.out_dim());
    for (std::size_t k = 0; k < out.size(); ++k) {
        const auto c = model.components.row(k);
        double s = 0;
        for (std::size_t j = 0; j < v.size(); ++j) s += c[j] * (v[j] - model.mean[j]);
        out[k] = s;
    }
    return out;
}

Tensor<double> apply_pca(const PcaModel& model, const Tensor<double>& x) {
    if (x.rank() != 2 || x.cols() != model.in_dim()) throw ShapeError("PCA input dimension");
    Tensor<double> out(Shape{x.rows(), model.out_dim()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto y = apply_pca(model, x.row(i));
        std::copy(y.begin(), y.end(), out.row(i).begin());
    }
    return out;
}

Tensor<double> reconstruct_pca(const PcaModel& model, const Tensor<double>& y) {
    if (y.rank() != 2 || y.cols() != model.out_dim()) throw ShapeError("PCA reconstruction input dimension");
    Tensor<double> out(Shape{y.rows(), model.in_dim()});
    for (std::size_t i = 0; i < y.rows(); ++i) {
        for (std::size_t j = 0; j < model.in_dim(); ++j) {
            double s = model.mean[j];
            for (std::size_t k = 0; k < model.out_dim(); ++k) s += y.at(i, k) * model.components.at(k, j);
            out.at(i, j) = s;
        }
    }
    return out;
}

FeatureRecord FeatureBank::record(std::size_t i) const {
    if (i >= size()) throw DataError("record index out of range");
    FeatureRecord r;
    r.id = ids[i];
    r.label = labels[i];
    if (!embeddings.empty()) r.embedding.assign(embeddings.row(i).begin(), embeddings.row(i).end());
    for (const auto& g : gradients) r.gradients.emplace_back(g.row(i).begin(), g.row(i).end());
    r.fused.assign(fused.row(i).begin(), fused.row(i).end());
    return r;
}

namespace {

void append_row(Tensor<double>& t, const std::vector<double>& row, std::size_t n, const char* what) {
    if (n > 0 && row.size() != t.cols()) {
        throw ShapeError(std::string(what) + " of length " + std::to_string(row.size()) + " in a bank of width " +
                         std::to_string(t.cols()));
    }
    const std::size_t width = row.size();
    t.values().insert(t.values().end(), row.begin(), row.end());
    t.reshape(Shape{n + 1, width});
}

}  // namespace

void FeatureBank::append(const FeatureRecord& rec) {
    const std::size_t n = size();
    if (rec.gradients.size() != objectives.size()) {
        throw ShapeError("record carries " + std::to_string(rec.gradients.size()) + " gradient segments, bank expects " +
                         std::to_string(objectives.size()));
    }
    if (gradients.size() != objectives.size()) gradients.resize(objectives.size());
    if (!rec.embedding.empty()) append_row(embeddings, rec.embedding, n, "embedding");
    for (std::size_t k = 0; k < rec.gradients.size(); ++k) append_row(gradients[k], rec.gradients[k], n, "gradient");
    append_row(fused, rec.fused, n, "fused vector");
    ids.push_back(rec.id);
    labels.push_back(rec.label);
}

void FeatureBank::validate() const {
    const std::size_t n = size();
    if (labels.size() != n) throw DataError("bank labels/ids length differ");
    if (n > 0 && fused.rows() != n) throw DataError("bank fused rows differ from ids");
    if (!embeddings.empty() && embeddings.rows() != n) throw DataError("bank embedding rows differ from ids");
    if (gradients.size() != objectives.size()) throw DataError("bank gradient segments differ from objective list");
    for (const auto& g : gradients) {
        if (n > 0 && g.rows() != n) throw DataError("bank gradient rows differ from ids");
    }
    std::unordered_set<std::int64_t> seen;
    for (auto id : ids) {
        if (!seen.insert(id).second) throw DataError("duplicate sample id " + std::to_string(id));
    }
}

template std::vector<double> flatten_gradient<float>(const LayerGradient<float>&);
template std::vector<double> flatten_gradient<double>(const LayerGradient<double>&);

}  // namespace fungi
