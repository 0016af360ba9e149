#pragma once

// Compact ViT-style encoder, frozen random projection heads, and harvesting of
// one hidden linear layer's weight/bias gradient.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "fungi/autodiff.hpp"
#include "fungi/tensor.hpp"

namespace fungi {

enum class Pooling { cls, mean };

struct EncoderConfig {
    std::size_t image_size = 224;
    std::size_t patch_size = 16;
    std::size_t depth = 2;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t channels = 3;
    Pooling pooling = Pooling::cls;

    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t hidden() const { return dim * mlp_ratio; }
    std::size_t patch_features() const { return channels * patch_size * patch_size; }
};

enum class LayerKind { qkv, attn_proj, mlp_fc1, mlp_fc2 };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);
std::string_view to_string(Pooling pooling);
Pooling parse_pooling(std::string_view name);

struct GradientSource {
    std::size_t block_index = 1;
    LayerKind kind = LayerKind::attn_proj;

    // Attention output projection of the last block.
    static GradientSource last_attn_proj(const EncoderConfig& config) {
        return GradientSource{config.depth - 1, LayerKind::attn_proj};
    }
    void validate(const EncoderConfig& config) const;
    std::string weight_name() const;
    std::string bias_name() const;
};

template <typename T>
struct BlockParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> qkv_w, qkv_b;    // [3d, d], [3d]
    Tensor<T> proj_w, proj_b;  // [d, d], [d]
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> fc1_w, fc1_b;  // [h, d], [h]
    Tensor<T> fc2_w, fc2_b;  // [d, h], [d]
};

template <typename T>
struct EncoderParams {
    EncoderConfig config;
    Tensor<T> patch_w, patch_b;  // [d, C*p*p], [d]
    Tensor<T> cls;               // [1, d]
    Tensor<T> pos;               // [T+1, d]
    std::vector<BlockParams<T>> blocks;
    Tensor<T> norm_g, norm_b;

    // Visits (name, tensor) for every parameter in a fixed order.
    template <typename F>
    void for_each(F&& fn) const {
        visit(*this, fn);
    }
    template <typename F>
    void for_each(F&& fn) {
        visit(*this, fn);
    }

    std::size_t parameter_count() const;
    const Tensor<T>& get(std::string_view name) const;
    Tensor<T>& get(std::string_view name);

    template <typename U>
    EncoderParams<U> cast() const;

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& fn) {
        fn(std::string("patch_embed.weight"), self.patch_w);
        fn(std::string("patch_embed.bias"), self.patch_b);
        fn(std::string("cls_token"), self.cls);
        fn(std::string("pos_embed"), self.pos);
        for (std::size_t i = 0; i < self.blocks.size(); ++i) {
            auto& b = self.blocks[i];
            const std::string p = "blocks." + std::to_string(i) + ".";
            fn(p + "ln1.weight", b.ln1_g);
            fn(p + "ln1.bias", b.ln1_b);
            fn(p + "qkv.weight", b.qkv_w);
            fn(p + "qkv.bias", b.qkv_b);
            fn(p + "attn_proj.weight", b.proj_w);
            fn(p + "attn_proj.bias", b.proj_b);
            fn(p + "ln2.weight", b.ln2_g);
            fn(p + "ln2.bias", b.ln2_b);
            fn(p + "mlp_fc1.weight", b.fc1_w);
            fn(p + "mlp_fc1.bias", b.fc1_b);
            fn(p + "mlp_fc2.weight", b.fc2_w);
            fn(p + "mlp_fc2.bias", b.fc2_b);
        }
        fn(std::string("norm.weight"), self.norm_g);
        fn(std::string("norm.bias"), self.norm_b);
    }
};

// Deterministic weights: linear layers N(0, 1/fan_in) with zero bias, cls/pos N(0, 0.02^2),
// layer norms identity. Each tensor draws from its own stream derived from (seed, name).
template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, std::uint64_t seed);

// Zeroes every attention output projection weight. No information then reaches the CLS
// token from the patches, so the CLS embedding is the same for every input, while the
// attention outputs feeding those projections still vary with the input.
template <typename T>
void collapse_attention_outputs(EncoderParams<T>& params);

template <typename T>
std::uint64_t checksum(const EncoderParams<T>& params);

// image[C, H, W] -> [num_patches, C*p*p], patches in row-major grid order, features (c, y, x).
template <typename T>
Tensor<T> image_to_patches(const Tensor<T>& image, const EncoderConfig& config);

template <typename T>
struct BoundBlock {
    ad::Var<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

// Encoder parameters registered on a tape.
template <typename T>
struct BoundEncoder {
    ad::Tape<T>* tape = nullptr;
    const EncoderConfig* config = nullptr;
    ad::Var<T> patch_w, patch_b, cls, pos, norm_g, norm_b;
    std::vector<BoundBlock<T>> blocks;
    // Parameters that were registered as trainable, by name.
    std::vector<std::pair<std::string, ad::Var<T>>> trainable;

    const ad::Var<T>& find(std::string_view name) const;
};

using ParamFilter = std::function<bool(std::string_view)>;

// Registers every parameter; those accepted by `trainable` require gradients.
template <typename T>
BoundEncoder<T> bind_encoder(ad::Tape<T>& tape, const EncoderParams<T>& params, const ParamFilter& trainable = {});

template <typename T>
struct EncodedVars {
    ad::Var<T> embedding;     // [1, d]
    ad::Var<T> tokens;        // [T+1, d], CLS first, after the final norm
    ad::Var<T> patch_tokens;  // [T, d]
};

template <typename T>
EncodedVars<T> forward(const BoundEncoder<T>& enc, const Tensor<T>& image);

template <typename T>
struct Encoding {
    Tensor<T> embedding;     // [d]
    Tensor<T> tokens;        // [T+1, d]
    Tensor<T> patch_tokens;  // [T, d]
};

// Pure forward pass without gradient recording.
template <typename T>
Encoding<T> encode(const EncoderParams<T>& params, const Tensor<T>& image);

// Frozen random linear map from embeddings into a loss's latent space.
template <typename T>
struct Head {
    Tensor<T> weight;  // [proj_dim, d]
    Tensor<T> bias;    // [proj_dim]
    bool normalize_input = true;
    std::uint64_t seed = 0;

    std::size_t proj_dim() const { return weight.dim(0); }
    std::size_t input_dim() const { return weight.dim(1); }

    template <typename U>
    Head<U> cast() const {
        return Head<U>{weight.template cast<U>(), bias.template cast<U>(), normalize_input, seed};
    }
};

// Weight N(0, 1/d), bias zero.
template <typename T>
Head<T> attach_head(std::size_t dim, std::size_t proj_dim, std::uint64_t seed, bool normalize_input);

template <typename T>
struct BoundHead {
    ad::Var<T> weight, bias;
    bool normalize_input = true;
};

template <typename T>
BoundHead<T> bind_head(ad::Tape<T>& tape, const Head<T>& head, bool trainable = false);

// z = W * (normalize_input ? x/|x| : x) + b, row-wise.
template <typename T>
ad::Var<T> apply_head(const BoundHead<T>& head, const ad::Var<T>& x);

template <typename T>
Tensor<T> apply_head(const Head<T>& head, const Tensor<T>& x);

template <typename T>
std::uint64_t checksum(const Head<T>& head);

template <typename T>
struct LayerGradient {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]
};

// Builds a scalar loss from forward() outputs of the bound encoder.
template <typename T>
using ObjectiveFn = std::function<ad::Var<T>(const BoundEncoder<T>&)>;

// d(loss)/dW and d(loss)/db of the designated layer; params are not modified.
template <typename T>
LayerGradient<T> loss_gradient(const EncoderParams<T>& params, const GradientSource& source,
                               const ObjectiveFn<T>& objective);

// ---- EncoderParams members ----

template <typename T>
std::size_t EncoderParams<T>::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
}

template <typename T>
const Tensor<T>& EncoderParams<T>::get(std::string_view name) const {
    const Tensor<T>* found = nullptr;
    for_each([&](const std::string& n, const Tensor<T>& t) {
        if (n == name) found = &t;
    });
    if (!found) throw DataError("unknown encoder parameter '" + std::string(name) + "'");
    return *found;
}

template <typename T>
Tensor<T>& EncoderParams<T>::get(std::string_view name) {
    return const_cast<Tensor<T>&>(static_cast<const EncoderParams&>(*this).get(name));
}

template <typename T>
template <typename U>
EncoderParams<U> EncoderParams<T>::cast() const {
    EncoderParams<U> out;
    out.config = config;
    out.blocks.resize(blocks.size());
    std::vector<const Tensor<T>*> src;
    for_each([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Tensor<U>& t) { t = src[i++]->template cast<U>(); });
    return out;
}

}  // namespace fungi
