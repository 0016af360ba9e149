#include "fungi/backbone.hpp"

#include <cmath>
#include <cstring>

#include "fungi/rng.hpp"

namespace fungi {

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (dim == 0 || heads == 0 || dim % heads != 0) {
        throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (depth == 0) throw ConfigError("encoder depth must be at least 1");
    if (mlp_ratio == 0 || channels == 0) throw ConfigError("mlp_ratio and channels must be positive");
}

std::string_view to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::qkv: return "qkv";
        case LayerKind::attn_proj: return "attn_proj";
        case LayerKind::mlp_fc1: return "mlp_fc1";
        case LayerKind::mlp_fc2: return "mlp_fc2";
    }
    return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
    if (name == "qkv") return LayerKind::qkv;
    if (name == "attn_proj") return LayerKind::attn_proj;
    if (name == "mlp_fc1") return LayerKind::mlp_fc1;
    if (name == "mlp_fc2") return LayerKind::mlp_fc2;
    throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

std::string_view to_string(Pooling pooling) { return pooling == Pooling::cls ? "cls" : "mean"; }

Pooling parse_pooling(std::string_view name) {
    if (name == "cls") return Pooling::cls;
    if (name == "mean") return Pooling::mean;
    throw ConfigError("unknown pooling '" + std::string(name) + "'");
}

void GradientSource::validate(const EncoderConfig& config) const {
    if (block_index >= config.depth) {
        throw ConfigError("gradient source block " + std::to_string(block_index) + " outside encoder depth " +
                          std::to_string(config.depth));
    }
}

std::string GradientSource::weight_name() const {
    return "blocks." + std::to_string(block_index) + "." + std::string(to_string(kind)) + ".weight";
}

std::string GradientSource::bias_name() const {
    return "blocks." + std::to_string(block_index) + "." + std::string(to_string(kind)) + ".bias";
}

namespace {

template <typename T>
Tensor<T> gaussian(Shape shape, double stddev, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(normal(rng, 0.0, stddev));
    return t;
}

template <typename T>
std::uint64_t hash_bytes(std::uint64_t h, const Tensor<T>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0, n = t.numel() * sizeof(T); i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    const std::size_t d = config.dim, h = config.hidden();
    EncoderParams<T> p;
    p.config = config;
    p.patch_w = Tensor<T>(Shape{d, config.patch_features()});
    p.patch_b = Tensor<T>(Shape{d});
    p.cls = Tensor<T>(Shape{1, d});
    p.pos = Tensor<T>(Shape{config.num_patches() + 1, d});
    p.blocks.resize(config.depth);
    for (auto& b : p.blocks) {
        b.ln1_g = Tensor<T>(Shape{d}, T(1));
        b.ln1_b = Tensor<T>(Shape{d});
        b.qkv_w = Tensor<T>(Shape{3 * d, d});
        b.qkv_b = Tensor<T>(Shape{3 * d});
        b.proj_w = Tensor<T>(Shape{d, d});
        b.proj_b = Tensor<T>(Shape{d});
        b.ln2_g = Tensor<T>(Shape{d}, T(1));
        b.ln2_b = Tensor<T>(Shape{d});
        b.fc1_w = Tensor<T>(Shape{h, d});
        b.fc1_b = Tensor<T>(Shape{h});
        b.fc2_w = Tensor<T>(Shape{d, h});
        b.fc2_b = Tensor<T>(Shape{d});
    }
    p.norm_g = Tensor<T>(Shape{d}, T(1));
    p.norm_b = Tensor<T>(Shape{d});

    p.for_each([&](const std::string& name, Tensor<T>& t) {
        const std::uint64_t s = derive_seed(seed, name);
        if (name == "cls_token" || name == "pos_embed") {
            t = gaussian<T>(t.shape(), 0.02, s);
        } else if (name.ends_with(".weight") && t.rank() == 2) {
            t = gaussian<T>(t.shape(), 1.0 / std::sqrt(static_cast<double>(t.dim(1))), s);
        }
    });
    return p;
}

template <typename T>
void collapse_attention_outputs(EncoderParams<T>& params) {
    for (auto& b : params.blocks) std::fill(b.proj_w.values().begin(), b.proj_w.values().end(), T(0));
}

template <typename T>
std::uint64_t checksum(const EncoderParams<T>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    params.for_each([&](const std::string&, const Tensor<T>& t) { h = hash_bytes(h, t); });
    return h;
}

template <typename T>
std::uint64_t checksum(const Head<T>& head) {
    return hash_bytes(hash_bytes(0xcbf29ce484222325ULL ^ head.seed, head.weight), head.bias);
}

template <typename T>
Tensor<T> image_to_patches(const Tensor<T>& image, const EncoderConfig& config) {
    const std::size_t c = config.channels, s = config.image_size, p = config.patch_size, g = config.grid();
    if (image.rank() != 3 || image.dim(0) != c || image.dim(1) != s || image.dim(2) != s) {
        throw ShapeError("encoder expects image [" + std::to_string(c) + "," + std::to_string(s) + "," +
                         std::to_string(s) + "], got " + shape_str(image.shape()));
    }
    Tensor<T> out(Shape{g * g, c * p * p});
    for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
            T* dst = out.data() + (gy * g + gx) * c * p * p;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t y = 0; y < p; ++y) {
                    const T* src = image.data() + (ch * s + gy * p + y) * s + gx * p;
                    std::memcpy(dst, src, p * sizeof(T));
                    dst += p;
                }
            }
        }
    }
    return out;
}

template <typename T>
const ad::Var<T>& BoundEncoder<T>::find(std::string_view name) const {
    for (const auto& [n, v] : trainable) {
        if (n == name) return v;
    }
    throw DataError("parameter '" + std::string(name) + "' is not trainable on this tape");
}

template <typename T>
BoundEncoder<T> bind_encoder(ad::Tape<T>& tape, const EncoderParams<T>& params, const ParamFilter& trainable) {
    BoundEncoder<T> b;
    b.tape = &tape;
    b.config = &params.config;
    std::vector<ad::Var<T>> vars;
    params.for_each([&](const std::string& name, const Tensor<T>& t) {
        const bool train = trainable && trainable(name);
        vars.push_back(train ? tape.parameter(t) : tape.constant(t));
        if (train) b.trainable.emplace_back(name, vars.back());
    });
    std::size_t i = 0;
    b.patch_w = vars[i++];
    b.patch_b = vars[i++];
    b.cls = vars[i++];
    b.pos = vars[i++];
    b.blocks.resize(params.blocks.size());
    for (auto& blk : b.blocks) {
        blk.ln1_g = vars[i++];
        blk.ln1_b = vars[i++];
        blk.qkv_w = vars[i++];
        blk.qkv_b = vars[i++];
        blk.proj_w = vars[i++];
        blk.proj_b = vars[i++];
        blk.ln2_g = vars[i++];
        blk.ln2_b = vars[i++];
        blk.fc1_w = vars[i++];
        blk.fc1_b = vars[i++];
        blk.fc2_w = vars[i++];
        blk.fc2_b = vars[i++];
    }
    b.norm_g = vars[i++];
    b.norm_b = vars[i++];
    return b;
}

template <typename T>
EncodedVars<T> forward(const BoundEncoder<T>& enc, const Tensor<T>& image) {
    using namespace ad;
    const EncoderConfig& cfg = *enc.config;
    Tape<T>& tape = *enc.tape;
    Var<T> patches = tape.constant(image_to_patches(image, cfg));
    Var<T> x = linear(patches, enc.patch_w, enc.patch_b);
    x = concat<T>({enc.cls, x});
    x = add(x, enc.pos);
    for (const auto& b : enc.blocks) {
        Var<T> h = layer_norm(x, b.ln1_g, b.ln1_b);
        Var<T> qkv = linear(h, b.qkv_w, b.qkv_b);
        Var<T> a = scaled_dot_product_attention(qkv, cfg.heads);
        x = add(x, linear(a, b.proj_w, b.proj_b));
        Var<T> h2 = layer_norm(x, b.ln2_g, b.ln2_b);
        Var<T> m = linear(gelu(linear(h2, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
        x = add(x, m);
    }
    x = layer_norm(x, enc.norm_g, enc.norm_b);
    const std::size_t n = cfg.num_patches();
    EncodedVars<T> out;
    out.tokens = x;
    out.patch_tokens = slice(x, 1, n + 1);
    out.embedding = cfg.pooling == Pooling::cls ? slice(x, 0, 1) : mean_rows(out.patch_tokens);
    return out;
}

template <typename T>
Encoding<T> encode(const EncoderParams<T>& params, const Tensor<T>& image) {
    ad::Tape<T> tape;
    auto bound = bind_encoder(tape, params);
    auto vars = forward(bound, image);
    Encoding<T> out;
    out.embedding = vars.embedding.value().reshaped(Shape{params.config.dim});
    out.tokens = vars.tokens.value();
    out.patch_tokens = vars.patch_tokens.value();
    return out;
}

template <typename T>
Head<T> attach_head(std::size_t dim, std::size_t proj_dim, std::uint64_t seed, bool normalize_input) {
    if (proj_dim == 0 || dim == 0) throw ConfigError("projection head dimensions must be positive");
    Head<T> h;
    h.weight = gaussian<T>(Shape{proj_dim, dim}, 1.0 / std::sqrt(static_cast<double>(dim)), derive_seed(seed, "head"));
    h.bias = Tensor<T>(Shape{proj_dim});
    h.normalize_input = normalize_input;
    h.seed = seed;
    return h;
}

template <typename T>
BoundHead<T> bind_head(ad::Tape<T>& tape, const Head<T>& head, bool trainable) {
    BoundHead<T> b;
    b.weight = trainable ? tape.parameter(head.weight) : tape.constant(head.weight);
    b.bias = trainable ? tape.parameter(head.bias) : tape.constant(head.bias);
    b.normalize_input = head.normalize_input;
    return b;
}

template <typename T>
ad::Var<T> apply_head(const BoundHead<T>& head, const ad::Var<T>& x) {
    return ad::linear(head.normalize_input ? ad::l2_normalize(x) : x, head.weight, head.bias);
}

template <typename T>
Tensor<T> apply_head(const Head<T>& head, const Tensor<T>& x) {
    ad::Tape<T> tape;
    auto bound = bind_head(tape, head);
    return apply_head(bound, tape.constant(x)).value();
}

template <typename T>
LayerGradient<T> loss_gradient(const EncoderParams<T>& params, const GradientSource& source,
                               const ObjectiveFn<T>& objective) {
    source.validate(params.config);
    const std::string wname = source.weight_name(), bname = source.bias_name();
    ad::Tape<T> tape;
    auto bound = bind_encoder(tape, params, [&](std::string_view n) { return n == wname || n == bname; });
    ad::Var<T> loss = objective(bound);
    auto grads = tape.backward(loss);
    return LayerGradient<T>{grads.at(bound.find(wname)), grads.at(bound.find(bname))};
}

#define FUNGI_BACKBONE_INSTANTIATE(T)                                                                           \
    template EncoderParams<T> init_encoder<T>(const EncoderConfig&, std::uint64_t);                              \
    template void collapse_attention_outputs<T>(EncoderParams<T>&);                                              \
    template std::uint64_t checksum<T>(const EncoderParams<T>&);                                                 \
    template std::uint64_t checksum<T>(const Head<T>&);                                                          \
    template Tensor<T> image_to_patches<T>(const Tensor<T>&, const EncoderConfig&);                              \
    template struct BoundEncoder<T>;                                                                             \
    template BoundEncoder<T> bind_encoder<T>(ad::Tape<T>&, const EncoderParams<T>&, const ParamFilter&);         \
    template EncodedVars<T> forward<T>(const BoundEncoder<T>&, const Tensor<T>&);                                \
    template Encoding<T> encode<T>(const EncoderParams<T>&, const Tensor<T>&);                                   \
    template Head<T> attach_head<T>(std::size_t, std::size_t, std::uint64_t, bool);                              \
    template BoundHead<T> bind_head<T>(ad::Tape<T>&, const Head<T>&, bool);                                      \
    template ad::Var<T> apply_head<T>(const BoundHead<T>&, const ad::Var<T>&);                                   \
    template Tensor<T> apply_head<T>(const Head<T>&, const Tensor<T>&);                                          \
    template LayerGradient<T> loss_gradient<T>(const EncoderParams<T>&, const GradientSource&, const ObjectiveFn<T>&);

FUNGI_BACKBONE_INSTANTIATE(float)
FUNGI_BACKBONE_INSTANTIATE(double)

#undef FUNGI_BACKBONE_INSTANTIATE

}  // namespace fungi
