#include "fungi/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "fungi/rng.hpp"

namespace fungi {

std::string_view to_string(ObjectiveKind kind) {
    switch (kind) {
        case ObjectiveKind::kl: return "kl";
        case ObjectiveKind::dino: return "dino";
        case ObjectiveKind::simclr: return "simclr";
        case ObjectiveKind::simclr_patch: return "simclr_patch";
    }
    return "?";
}

ObjectiveKind parse_objective(std::string_view name) {
    if (name == "kl" || name == "KL") return ObjectiveKind::kl;
    if (name == "dino" || name == "DINO") return ObjectiveKind::dino;
    if (name == "simclr" || name == "SimCLR") return ObjectiveKind::simclr;
    if (name == "simclr_patch") return ObjectiveKind::simclr_patch;
    throw ConfigError("unknown objective '" + std::string(name) + "'");
}

namespace {

// Masked-out logits; exp() of these underflows to exactly zero.
constexpr double kMasked = -1e30;

template <typename T>
void require_unit_rows(const Tensor<T>& m, const char* what) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double n = l2_norm(m.row(r));
        if (std::abs(n - 1.0) > 1e-4) {
            throw DataError(std::string(what) + " row " + std::to_string(r) + " is not L2-normalized (norm " +
                            std::to_string(n) + ")");
        }
    }
}

}  // namespace

template <typename T>
ad::Var<T> kl_loss(const ad::Var<T>& z, T tau, KlDirection direction) {
    const auto n = static_cast<T>(z.value().numel());
    if (z.value().numel() == 0) throw ShapeError("kl_loss of empty logits");
    auto* tape = z.tape();
    const ad::Var<T> log_n = tape->constant(Tensor<T>::scalar(std::log(n)));
    if (direction == KlDirection::uniform_to_model) {
        // sum_i (1/n) (log(1/n) - log p_i) = -mean(log p) - log n
        return ad::add(ad::scale(ad::mean(ad::log_softmax(z, tau)), T(-1)), ad::scale(log_n, T(-1)));
    }
    // sum_i p_i (log p_i - log(1/n)) = sum(p log p) + log n
    return ad::add(ad::sum(ad::mul(ad::softmax(z, tau), ad::log_softmax(z, tau))), log_n);
}

template <typename T>
ad::Var<T> dino_loss(const ad::Var<T>& student, const Tensor<T>& teacher, T tau_student, T tau_teacher) {
    const std::size_t views = student.value().rows(), dim = student.value().cols();
    const std::size_t globals = teacher.rank() == 2 ? teacher.dim(0) : 0;
    if (globals < 2) throw DataError("dino_loss needs at least 2 global teacher views");
    if (teacher.cols() != dim || views < globals) throw ShapeError("dino teacher/student logits disagree");
    auto* tape = student.tape();
    const ad::Var<T> probs_var = ad::softmax(tape->constant(teacher), tau_teacher);
    const Tensor<T>& probs = probs_var.value();
    const T pairs = static_cast<T>(globals * (views - 1));
    Tensor<T> weights(Shape{views, dim});
    for (std::size_t s = 0; s < views; ++s) {
        for (std::size_t t = 0; t < globals; ++t) {
            if (t == s) continue;
            for (std::size_t j = 0; j < dim; ++j) weights.at(s, j) += probs.at(t, j) / pairs;
        }
    }
    const ad::Var<T> log_p = ad::log_softmax(student, tau_student);
    return ad::scale(ad::sum(ad::mul(log_p, tape->constant(std::move(weights)))), T(-1));
}

template <typename T>
ad::Var<T> simclr_loss(const ad::Var<T>& positives, const Tensor<T>& negatives, T tau) {
    const auto& zv = positives.value();
    const std::size_t p = zv.rows(), d = zv.cols();
    if (p < 2) throw DataError("simclr_loss needs at least two positives");
    if (!negatives.empty() && negatives.cols() != d) throw ShapeError("simclr negatives dimension");
    require_unit_rows(zv, "simclr positive");
    if (!negatives.empty()) require_unit_rows(negatives, "simclr negative");
    auto* tape = positives.tape();
    const std::size_t n = negatives.empty() ? 0 : negatives.rows();
    ad::Var<T> all = n == 0 ? positives : ad::concat<T>({positives, tape->constant(negatives.reshaped(Shape{n, d}))});
    ad::Var<T> logits = ad::scale(ad::matmul(positives, all, ad::Transpose::yes), T(1) / tau);
    Tensor<T> mask(Shape{p, p + n});
    Tensor<T> weights(Shape{p, p + n});
    const T w = T(1) / static_cast<T>(p * (p - 1));
    for (std::size_t i = 0; i < p; ++i) {
        mask.at(i, i) = static_cast<T>(kMasked);
        for (std::size_t j = 0; j < p; ++j) {
            if (j != i) weights.at(i, j) = w;
        }
    }
    ad::Var<T> log_p = ad::log_softmax(ad::add(logits, tape->constant(std::move(mask))));
    return ad::scale(ad::sum(ad::mul(log_p, tape->constant(std::move(weights)))), T(-1));
}

void NegativeBank::validate(double tol) const {
    for (std::size_t r = 0; r < size(); ++r) {
        if (std::abs(l2_norm(latents.row(r)) - 1.0) > tol) {
            throw DataError("negative bank row " + std::to_string(r) + " is not unit-norm");
        }
    }
}

NegativeBank build_negative_bank(const EncoderParams<float>& params, const Head<float>& head,
                                 std::span<const Image> images, const SimclrConfig& config, std::uint64_t seed) {
    if (images.empty()) throw DataError("negative bank needs at least one image");
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min(order.size(), config.negative_images));
    std::sort(order.begin(), order.end());

    PatchifyParams pp = config.patchify;
    pp.out_size = params.config.image_size;
    const std::size_t per_image = pp.grid * pp.grid, dim = head.proj_dim();
    NegativeBank bank;
    bank.seed = seed;
    bank.latents = Tensor<float>(Shape{order.size() * per_image, dim});
    std::size_t row = 0;
    for (std::size_t idx : order) {
        const ViewSet views = patchify_overlap(images[idx], pp);
        for (const auto& v : views.views) {
            const Encoding<float> enc = encode(params, v);
            Tensor<float> z = apply_head(head, enc.embedding);
            const double norm = l2_norm(std::as_const(z).span());
            if (!(norm > 0)) throw NumericError("zero-norm latent while building negative bank");
            for (std::size_t j = 0; j < dim; ++j) bank.latents.at(row, j) = static_cast<float>(z[j] / norm);
            ++row;
        }
    }
    return bank;
}

template <typename T>
ObjectiveFn<T> kl_objective(const Head<T>& head, Tensor<T> image, const KlConfig& config) {
    return [head, image = std::move(image), config](const BoundEncoder<T>& enc) {
        auto out = forward(enc, image);
        auto bh = bind_head(*enc.tape, head);
        bh.normalize_input = config.normalize_input;
        return kl_loss(apply_head(bh, out.embedding), static_cast<T>(config.tau), config.direction);
    };
}

template <typename T>
ObjectiveFn<T> dino_objective(const Head<T>& student, const Head<T>& teacher, std::vector<Tensor<T>> views,
                              std::size_t global_views, const DinoConfig& config) {
    if (global_views < 2 || views.size() < global_views) throw DataError("dino objective needs at least 2 global views");
    return [student, teacher, views = std::move(views), global_views, config](const BoundEncoder<T>& enc) {
        auto& tape = *enc.tape;
        auto bs = bind_head(tape, student);
        auto bt = bind_head(tape, config.independent_heads ? teacher : student);
        bs.normalize_input = bt.normalize_input = config.normalize_input;
        std::vector<ad::Var<T>> student_rows;
        Tensor<T> teacher_logits(Shape{global_views, teacher.proj_dim()});
        for (std::size_t v = 0; v < views.size(); ++v) {
            const auto out = forward(enc, views[v]);
            student_rows.push_back(apply_head(bs, out.embedding));
            if (v < global_views) {
                // Teacher branch is a constant: no gradient flows through it.
                const ad::Var<T> zt = ad::detach(apply_head(bt, ad::detach(out.embedding)));
                std::copy(zt.value().values().begin(), zt.value().values().end(), teacher_logits.row(v).begin());
            }
        }
        return dino_loss(ad::concat(student_rows), teacher_logits, static_cast<T>(config.tau_student),
                         static_cast<T>(config.tau_teacher));
    };
}

template <typename T>
ObjectiveFn<T> simclr_objective(const Head<T>& head, std::vector<Tensor<T>> views, Tensor<T> negatives,
                                const SimclrConfig& config) {
    return [head, views = std::move(views), negatives = std::move(negatives), config](const BoundEncoder<T>& enc) {
        auto bh = bind_head(*enc.tape, head);
        bh.normalize_input = config.normalize_input;
        std::vector<ad::Var<T>> rows;
        rows.reserve(views.size());
        for (const auto& v : views) rows.push_back(apply_head(bh, forward(enc, v).embedding));
        return simclr_loss(ad::l2_normalize(ad::concat(rows)), negatives, static_cast<T>(config.tau));
    };
}

template <typename T>
PatchGradients<T> simclr_patch_loss(const Tensor<T>& tokens, const Head<T>& head, const LatentIndex& support,
                                    const SimclrPatchConfig& config, std::uint64_t seed, std::int64_t skip_group) {
    if (support.size() == 0) throw DataError("support index is empty");
    if (support.size() < config.retrieved_negatives) {
        throw DataError("support index smaller than the number of retrieved negatives");
    }
    if (config.kept_negatives == 0 || config.kept_negatives > config.retrieved_negatives) {
        throw ConfigError("kept negatives must be in [1, retrieved negatives]");
    }
    if (tokens.rank() != 2 || tokens.rows() < 2) throw ShapeError("patch tokens must be [T+1, d]");
    ad::Tape<T> tape;
    const ad::Var<T> tok = tape.parameter(tokens);
    const auto bh = bind_head(tape, head);
    const ad::Var<T> z = ad::l2_normalize(apply_head(bh, tok));
    if (support.dim() != z.value().cols()) throw ShapeError("support index dimension differs from head output");

    Rng rng(seed);
    const std::size_t rows = z.value().rows(), dim = z.value().cols();
    PatchGradients<T> out;
    std::vector<float> query(dim);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < dim; ++j) query[j] = static_cast<float>(z.value().at(i, j));
        std::vector<std::size_t> ids = support.search(query, config.retrieved_negatives, skip_group);
        if (ids.size() < config.kept_negatives) throw DataError("support index returned too few neighbours");
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(config.kept_negatives);
        out.negatives.insert(out.negatives.end(), ids.begin(), ids.end());
    }
    Tensor<T> negatives(Shape{out.negatives.size(), dim});
    for (std::size_t r = 0; r < out.negatives.size(); ++r) {
        const auto src = support.row(out.negatives[r]);
        const double n = l2_norm(src);
        for (std::size_t j = 0; j < dim; ++j) negatives.at(r, j) = static_cast<T>(src[j] / n);
    }
    const ad::Var<T> loss = simclr_loss(z, negatives, static_cast<T>(config.tau));
    out.loss = loss.value().item();
    auto grads = tape.backward(loss);
    const Tensor<T>& g = grads.at(tok);
    const std::size_t d = tokens.cols();
    out.grads = Tensor<T>(Shape{rows - 1, d});
    std::copy(g.data() + d, g.data() + rows * d, out.grads.data());
    return out;
}

#define FUNGI_OBJ_INSTANTIATE(T)                                                                                   \
    template ad::Var<T> kl_loss<T>(const ad::Var<T>&, T, KlDirection);                                             \
    template ad::Var<T> dino_loss<T>(const ad::Var<T>&, const Tensor<T>&, T, T);                                    \
    template ad::Var<T> simclr_loss<T>(const ad::Var<T>&, const Tensor<T>&, T);                                     \
    template ObjectiveFn<T> kl_objective<T>(const Head<T>&, Tensor<T>, const KlConfig&);                            \
    template ObjectiveFn<T> dino_objective<T>(const Head<T>&, const Head<T>&, std::vector<Tensor<T>>, std::size_t,  \
                                              const DinoConfig&);                                                  \
    template ObjectiveFn<T> simclr_objective<T>(const Head<T>&, std::vector<Tensor<T>>, Tensor<T>,                  \
                                                const SimclrConfig&);                                              \
    template PatchGradients<T> simclr_patch_loss<T>(const Tensor<T>&, const Head<T>&, const LatentIndex&,           \
                                                    const SimclrPatchConfig&, std::uint64_t, std::int64_t);

FUNGI_OBJ_INSTANTIATE(float)
FUNGI_OBJ_INSTANTIATE(double)

#undef FUNGI_OBJ_INSTANTIATE

}  // namespace fungi
