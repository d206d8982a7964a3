#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "toast/archive.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"
#include "toast/random.hpp"

namespace toast {

/// Architecture hyperparameters of a plain ViT encoder stack.
///
/// `per_layer_head_dim[l]` is the live per-head width of layer l after
/// pruning; an unpruned model has every entry equal to `head_dim`.
struct ModelConfig {
    std::size_t num_layers = 0;
    std::size_t num_tokens = 0;
    std::size_t embed_dim = 0;
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;
    std::size_t mlp_dim = 0;
    bool has_cls = true;
    std::vector<std::size_t> per_layer_head_dim;

    [[nodiscard]] std::size_t live_head_dim(std::size_t layer) const { return per_layer_head_dim.at(layer); }

    [[nodiscard]] bool is_pruned() const {
        for (auto k : per_layer_head_dim)
            if (k != head_dim) return true;
        return false;
    }

    // Same architecture with every head at full width.
    [[nodiscard]] ModelConfig dense() const {
        ModelConfig c = *this;
        c.per_layer_head_dim.assign(num_layers, head_dim);
        return c;
    }

    void validate() const {
        if (num_layers == 0 || num_tokens == 0 || embed_dim == 0 || num_heads == 0 || head_dim == 0 || mlp_dim == 0) {
            throw ShapeError("model config: every dimension must be positive");
        }
        if (embed_dim != num_heads * head_dim) {
            throw ShapeError("model config: embed_dim " + std::to_string(embed_dim) + " != num_heads * head_dim (" +
                             std::to_string(num_heads) + " * " + std::to_string(head_dim) + ")");
        }
        if (per_layer_head_dim.size() != num_layers) {
            throw ShapeError("model config: per_layer_head_dim has " + std::to_string(per_layer_head_dim.size()) +
                             " entries for " + std::to_string(num_layers) + " layers");
        }
        for (std::size_t l = 0; l < num_layers; ++l) {
            if (per_layer_head_dim[l] < 1 || per_layer_head_dim[l] > head_dim) {
                throw ShapeError("model config: per_layer_head_dim[" + std::to_string(l) + "] outside [1, head_dim]");
            }
        }
    }

    static ModelConfig make(std::size_t layers, std::size_t tokens, std::size_t embed, std::size_t heads,
                            std::size_t mlp, bool cls = true) {
        ModelConfig c{layers, tokens, embed, heads, heads == 0 ? 0 : embed / heads, mlp, cls, {}};
        c.per_layer_head_dim.assign(layers, c.head_dim);
        return c;
    }

    static ModelConfig deit_tiny() { return make(12, 197, 192, 3, 768); }
    static ModelConfig deit_small() { return make(12, 197, 384, 6, 1536); }
    static ModelConfig deit_base() { return make(12, 197, 768, 12, 3072); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers}, {"num_tokens", c.num_tokens},
            {"embed_dim", c.embed_dim},   {"num_heads", c.num_heads},
            {"head_dim", c.head_dim},     {"mlp_dim", c.mlp_dim},
            {"has_cls", c.has_cls},       {"per_layer_head_dim", c.per_layer_head_dim}};
}

// Missing per_layer_head_dim means an unpruned model.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.num_tokens = j.at("num_tokens").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.head_dim = j.at("head_dim").get<std::size_t>();
        c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
        c.has_cls = j.at("has_cls").get<bool>();
        if (j.contains("per_layer_head_dim"))
            c.per_layer_head_dim = j.at("per_layer_head_dim").get<std::vector<std::size_t>>();
        else
            c.per_layer_head_dim.assign(c.num_layers, c.head_dim);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

struct HeadWeights {
    Matrix wq, wk, wv;  // D x k
    Matrix wproj;       // k x D
    Vector bq, bk, bv;  // k
};

struct BlockWeights {
    std::vector<HeadWeights> heads;
    Vector bproj;  // D
    Matrix fc1;    // D x D_mlp
    Vector fc1_bias;
    Matrix fc2;  // D_mlp x D
    Vector fc2_bias;
    Vector ln1_scale, ln1_shift;
    Vector ln2_scale, ln2_shift;
};

struct ModelWeights {
    std::vector<BlockWeights> blocks;
};

namespace naming {

inline std::string head_tensor(std::size_t layer, const char* kind, std::size_t head) {
    return "layer" + std::to_string(layer) + "." + kind + ".h" + std::to_string(head);
}
inline std::string block_tensor(std::size_t layer, const char* kind) {
    return "layer" + std::to_string(layer) + "." + kind;
}

}  // namespace naming

namespace detail {

inline void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError(name + ": expected " + shape_string(rows, cols) + ", got " + shape_string(m));
    }
}

inline void expect_length(const Vector& v, std::size_t n, const std::string& name, bool allow_empty) {
    if (allow_empty && v.empty()) return;
    if (v.size() != n) {
        throw ShapeError(name + ": expected length " + std::to_string(n) + ", got " + std::to_string(v.size()));
    }
}

}  // namespace detail

// Checks every tensor shape against the config; the message names the offending tensor.
// Bias vectors may be empty (treated as zero).
inline void validate_weights(const ModelConfig& c, const ModelWeights& w) {
    c.validate();
    if (w.blocks.size() != c.num_layers) {
        throw ShapeError("weights have " + std::to_string(w.blocks.size()) + " blocks, config has " +
                         std::to_string(c.num_layers) + " layers");
    }
    using naming::block_tensor;
    using naming::head_tensor;
    const std::size_t D = c.embed_dim;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const auto& b = w.blocks[l];
        const std::size_t k = c.live_head_dim(l);
        if (b.heads.size() != c.num_heads) {
            throw ShapeError(block_tensor(l, "heads") + ": expected " + std::to_string(c.num_heads) + " heads");
        }
        for (std::size_t h = 0; h < c.num_heads; ++h) {
            const auto& hw = b.heads[h];
            detail::expect_shape(hw.wq, D, k, head_tensor(l, "wq", h));
            detail::expect_shape(hw.wk, D, k, head_tensor(l, "wk", h));
            detail::expect_shape(hw.wv, D, k, head_tensor(l, "wv", h));
            detail::expect_shape(hw.wproj, k, D, head_tensor(l, "wproj", h));
            detail::expect_length(hw.bq, k, head_tensor(l, "bq", h), true);
            detail::expect_length(hw.bk, k, head_tensor(l, "bk", h), true);
            detail::expect_length(hw.bv, k, head_tensor(l, "bv", h), true);
        }
        detail::expect_length(b.bproj, D, block_tensor(l, "bproj"), true);
        detail::expect_shape(b.fc1, D, c.mlp_dim, block_tensor(l, "fc1"));
        detail::expect_shape(b.fc2, c.mlp_dim, D, block_tensor(l, "fc2"));
        detail::expect_length(b.fc1_bias, c.mlp_dim, block_tensor(l, "fc1.bias"), true);
        detail::expect_length(b.fc2_bias, D, block_tensor(l, "fc2.bias"), true);
        detail::expect_length(b.ln1_scale, D, block_tensor(l, "ln1.scale"), false);
        detail::expect_length(b.ln1_shift, D, block_tensor(l, "ln1.shift"), false);
        detail::expect_length(b.ln2_scale, D, block_tensor(l, "ln2.scale"), false);
        detail::expect_length(b.ln2_shift, D, block_tensor(l, "ln2.shift"), false);
    }
}

/// Flattens weights into archive entries using the layer{l}.* naming contract.
/// Empty bias vectors are omitted.
inline std::vector<NamedTensor> weights_to_tensors(const ModelWeights& w) {
    using naming::block_tensor;
    using naming::head_tensor;
    std::vector<NamedTensor> out;
    auto put_m = [&](std::string name, const Matrix& m) { out.push_back({std::move(name), Tensor::from(m)}); };
    auto put_v = [&](std::string name, const Vector& v) {
        if (!v.empty()) out.push_back({std::move(name), Tensor::from(v)});
    };
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
        const auto& b = w.blocks[l];
        put_v(block_tensor(l, "ln1.scale"), b.ln1_scale);
        put_v(block_tensor(l, "ln1.shift"), b.ln1_shift);
        for (std::size_t h = 0; h < b.heads.size(); ++h) {
            const auto& hw = b.heads[h];
            put_m(head_tensor(l, "wq", h), hw.wq);
            put_m(head_tensor(l, "wk", h), hw.wk);
            put_m(head_tensor(l, "wv", h), hw.wv);
            put_m(head_tensor(l, "wproj", h), hw.wproj);
            put_v(head_tensor(l, "bq", h), hw.bq);
            put_v(head_tensor(l, "bk", h), hw.bk);
            put_v(head_tensor(l, "bv", h), hw.bv);
        }
        put_v(block_tensor(l, "bproj"), b.bproj);
        put_v(block_tensor(l, "ln2.scale"), b.ln2_scale);
        put_v(block_tensor(l, "ln2.shift"), b.ln2_shift);
        put_m(block_tensor(l, "fc1"), b.fc1);
        put_v(block_tensor(l, "fc1.bias"), b.fc1_bias);
        put_m(block_tensor(l, "fc2"), b.fc2);
        put_v(block_tensor(l, "fc2.bias"), b.fc2_bias);
    }
    return out;
}

// Inverse of weights_to_tensors. Missing weights are InputError, wrong shapes ShapeError.
inline ModelWeights weights_from_tensors(const ModelConfig& c, const std::vector<NamedTensor>& tensors) {
    using naming::block_tensor;
    using naming::head_tensor;
    auto get = [&](const std::string& name, bool required) -> const Tensor* {
        const auto* t = find_tensor(tensors, name);
        if (t == nullptr && required) throw InputError("missing tensor " + name);
        return t == nullptr ? nullptr : &t->tensor;
    };
    auto matrix = [&](const std::string& name) {
        const Tensor* t = get(name, true);
        if (t->dims.size() != 2) throw ShapeError(name + ": expected a rank-2 tensor");
        return t->to_matrix();
    };
    auto vector = [&](const std::string& name, bool required) {
        const Tensor* t = get(name, required);
        if (t == nullptr) return Vector{};
        if (t->dims.size() != 1) throw ShapeError(name + ": expected a rank-1 tensor");
        return t->data;
    };

    c.validate();
    ModelWeights w;
    w.blocks.resize(c.num_layers);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        auto& b = w.blocks[l];
        b.heads.resize(c.num_heads);
        for (std::size_t h = 0; h < c.num_heads; ++h) {
            auto& hw = b.heads[h];
            hw.wq = matrix(head_tensor(l, "wq", h));
            hw.wk = matrix(head_tensor(l, "wk", h));
            hw.wv = matrix(head_tensor(l, "wv", h));
            hw.wproj = matrix(head_tensor(l, "wproj", h));
            hw.bq = vector(head_tensor(l, "bq", h), false);
            hw.bk = vector(head_tensor(l, "bk", h), false);
            hw.bv = vector(head_tensor(l, "bv", h), false);
        }
        b.bproj = vector(block_tensor(l, "bproj"), false);
        b.fc1 = matrix(block_tensor(l, "fc1"));
        b.fc1_bias = vector(block_tensor(l, "fc1.bias"), false);
        b.fc2 = matrix(block_tensor(l, "fc2"));
        b.fc2_bias = vector(block_tensor(l, "fc2.bias"), false);
        b.ln1_scale = vector(block_tensor(l, "ln1.scale"), true);
        b.ln1_shift = vector(block_tensor(l, "ln1.shift"), true);
        b.ln2_scale = vector(block_tensor(l, "ln2.scale"), true);
        b.ln2_shift = vector(block_tensor(l, "ln2.shift"), true);
    }
    validate_weights(c, w);
    return w;
}

namespace detail {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = static_cast<float>(stddev * rng.normal());
    return m;
}

inline Vector random_vector(std::size_t n, double mean, double stddev, Rng& rng) {
    Vector v(n);
    for (auto& x : v) x = static_cast<float>(mean + stddev * rng.normal());
    return v;
}

}  // namespace detail

// Gaussian weights scaled by 1/sqrt(fan_in), small biases, LayerNorm near identity.
inline ModelWeights random_weights(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(seed);
    const std::size_t D = c.embed_dim;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(D));
    const double mlp_std = 1.0 / std::sqrt(static_cast<double>(c.mlp_dim));
    ModelWeights w;
    w.blocks.resize(c.num_layers);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        auto& b = w.blocks[l];
        const std::size_t k = c.live_head_dim(l);
        const double proj_std = 1.0 / std::sqrt(static_cast<double>(c.num_heads * k));
        b.ln1_scale = detail::random_vector(D, 1.0, 0.05, rng);
        b.ln1_shift = detail::random_vector(D, 0.0, 0.05, rng);
        b.heads.resize(c.num_heads);
        for (auto& hw : b.heads) {
            hw.wq = detail::random_matrix(D, k, in_std, rng);
            hw.wk = detail::random_matrix(D, k, in_std, rng);
            hw.wv = detail::random_matrix(D, k, in_std, rng);
            hw.wproj = detail::random_matrix(k, D, proj_std, rng);
            hw.bq = detail::random_vector(k, 0.0, 0.02, rng);
            hw.bk = detail::random_vector(k, 0.0, 0.02, rng);
            hw.bv = detail::random_vector(k, 0.0, 0.02, rng);
        }
        b.bproj = detail::random_vector(D, 0.0, 0.02, rng);
        b.ln2_scale = detail::random_vector(D, 1.0, 0.05, rng);
        b.ln2_shift = detail::random_vector(D, 0.0, 0.05, rng);
        b.fc1 = detail::random_matrix(D, c.mlp_dim, in_std, rng);
        b.fc1_bias = detail::random_vector(c.mlp_dim, 0.0, 0.02, rng);
        b.fc2 = detail::random_matrix(c.mlp_dim, D, mlp_std, rng);
        b.fc2_bias = detail::random_vector(D, 0.0, 0.02, rng);
    }
    return w;
}

// Standard-normal token batch of shape num_tokens x embed_dim.
inline Matrix random_tokens(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    return detail::random_matrix(c.num_tokens, c.embed_dim, 1.0, rng);
}

}  // namespace toast
