#pragma once

// Self-supervised losses whose gradients become features.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "fungi/augment.hpp"
#include "fungi/autodiff.hpp"
#include "fungi/backbone.hpp"

namespace fungi {

enum class ObjectiveKind { kl, dino, simclr, simclr_patch };

std::string_view to_string(ObjectiveKind kind);
ObjectiveKind parse_objective(std::string_view name);

// KL(U || softmax(z/tau)) is what the reference pseudocode computes; the reverse
// direction KL(softmax(z/tau) || U) is available for comparison.
enum class KlDirection { uniform_to_model, model_to_uniform };

struct KlConfig {
    double tau = 15.0;
    std::size_t proj_dim = 768;
    bool normalize_input = true;
    KlDirection direction = KlDirection::uniform_to_model;
};

struct DinoConfig {
    double tau_student = 0.1;
    double tau_teacher = 0.07;
    std::size_t proj_dim = 2048;
    bool normalize_input = true;
    bool independent_heads = true;
    DinoCropParams crops;
};

struct SimclrConfig {
    double tau = 0.07;
    std::size_t proj_dim = 96;
    bool normalize_input = false;
    std::size_t negative_images = 256;  // each contributes grid^2 patch latents
    PatchifyParams patchify;            // 7x7 grid -> 49 positives
};

struct SimclrPatchConfig {
    double tau = 0.07;
    std::size_t proj_dim = 96;
    std::size_t retrieved_negatives = 2;
    std::size_t kept_negatives = 1;
};

// ---- losses on a tape ----

// z: [P] or [1, P] logits. Non-negative; zero iff softmax(z/tau) is uniform.
template <typename T>
ad::Var<T> kl_loss(const ad::Var<T>& z, T tau, KlDirection direction = KlDirection::uniform_to_model);

// student: [V, P] logits for all views, the first teacher.rows() of which are the global views
// the teacher saw. teacher: [G, P] logits, held constant. Mean over (t, s), s != t, of
// H(softmax(teacher_t / tau_t), log_softmax(student_s / tau_s)).
template <typename T>
ad::Var<T> dino_loss(const ad::Var<T>& student, const Tensor<T>& teacher, T tau_student, T tau_teacher);

// positives: [P, D] unit rows; negatives: [N, D] unit rows (constant). Mean over ordered pairs
// (i != j) of -log(exp(s_ij/tau) / sum_{k != i} exp(s_ik/tau)), k over positives and negatives.
template <typename T>
ad::Var<T> simclr_loss(const ad::Var<T>& positives, const Tensor<T>& negatives, T tau);

// Fixed set of unit-norm latents contrasted against every sample of a run.
struct NegativeBank {
    Tensor<float> latents;  // [count, proj_dim]
    std::uint64_t seed = 0;

    std::size_t size() const { return latents.empty() ? 0 : latents.dim(0); }
    // Throws when a row deviates from unit norm by more than tol.
    void validate(double tol = 1e-6) const;
};

// Samples `negative_images` images uniformly without replacement (all of them when fewer are
// available), patchifies each, and stores the normalised head latents of every patch.
NegativeBank build_negative_bank(const EncoderParams<float>& params, const Head<float>& head,
                                 std::span<const Image> images, const SimclrConfig& config, std::uint64_t seed);

// ---- objectives over the bound encoder ----

template <typename T>
ObjectiveFn<T> kl_objective(const Head<T>& head, Tensor<T> image, const KlConfig& config);

// views: global views first (teacher inputs), then local views.
template <typename T>
ObjectiveFn<T> dino_objective(const Head<T>& student, const Head<T>& teacher, std::vector<Tensor<T>> views,
                              std::size_t global_views, const DinoConfig& config);

template <typename T>
ObjectiveFn<T> simclr_objective(const Head<T>& head, std::vector<Tensor<T>> views, Tensor<T> negatives,
                                const SimclrConfig& config);

// ---- dense per-patch variant ----

// Nearest-neighbour source over unit-norm latents, used as the per-patch negative pool.
class LatentIndex {
public:
    virtual ~LatentIndex() = default;
    virtual std::size_t size() const = 0;
    virtual std::size_t dim() const = 0;
    // Up to k ids by decreasing cosine similarity, skipping rows whose group equals skip_group.
    virtual std::vector<std::size_t> search(std::span<const float> query, std::size_t k, std::int64_t skip_group) const = 0;
    virtual std::span<const float> row(std::size_t id) const = 0;
};

template <typename T>
struct PatchGradients {
    T loss = 0;
    Tensor<T> grads;  // [T, d]: d(loss)/d(patch token), CLS row dropped
    std::vector<std::size_t> negatives;  // support ids used as negatives, one per kept slot
};

// tokens: [T+1, d] backbone tokens with CLS first. Every token retrieves `retrieved_negatives`
// neighbours from the support index and keeps `kept_negatives` of them at random; the image's
// own tokens are the positives.
template <typename T>
PatchGradients<T> simclr_patch_loss(const Tensor<T>& tokens, const Head<T>& head, const LatentIndex& support,
                                    const SimclrPatchConfig& config, std::uint64_t seed, std::int64_t skip_group = -1);

}  // namespace fungi
