#pragma once

// Pre-norm ViT encoder forward pass:
//
//   x <- x + MHSA(LN1(x))
//   x <- x + FFN(LN2(x))
//
// Per head h with live width k:
//   A_h = softmax((x Wq_h + bq_h)(x Wk_h + bk_h)^T / sqrt(k))
//   O_h = A_h (x Wv_h + bv_h)
// and the block output is concat_h(O_h) * stack_h(Wproj_h) + bproj.
// Inputs are already-embedded token matrices; patch embedding and the
// classifier head live outside the engine.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"
#include "toast/model.hpp"
#include "toast/random.hpp"
#include "toast/tcs.hpp"
#include "toast/topk.hpp"

namespace toast {

struct LayerTrace {
    Matrix ffn_input;  // N x D, after LN2
    Matrix fc1_act;    // N x D_mlp, after GELU (zero in channels TCS dropped)
    Vector a_cls;      // N, head-averaged CLS attention row; empty without CLS
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
};

struct ForwardOptions {
    const TcsPolicy* tcs = nullptr;
    // Static-mode selections, one per layer. Required when tcs->mode is static.
    std::span<const ChannelSelection> fixed_selection{};
    bool capture_trace = true;
    // Score attention with 1/sqrt(head_dim) instead of the live width.
    bool scale_original = false;
    OpCounter* counter = nullptr;
};

struct ForwardResult {
    Matrix output;
    ForwardTrace trace;
    std::vector<ChannelSelection> selections;  // filled when TCS is active
};

// Multi-head self-attention of one block on already-normalized input.
// `a_cls` receives the head-averaged softmax row of token 0 when non-null.
inline Matrix mhsa_forward(const BlockWeights& block, std::size_t live_dim, const Matrix& normed, double scale_dim,
                           OpCounter* counter = nullptr, Vector* a_cls = nullptr) {
    const std::size_t N = normed.rows();
    const std::size_t D = normed.cols();
    const std::size_t H = block.heads.size();
    std::uint64_t* macs = counter != nullptr ? &counter->block_macs : nullptr;
    const double scale = 1.0 / std::sqrt(scale_dim);

    Matrix concat(N, H * live_dim);
    Matrix stacked(H * live_dim, D);
    if (a_cls != nullptr) a_cls->assign(N, 0.0f);
    std::vector<double> cls_acc(a_cls != nullptr ? N : 0, 0.0);

    for (std::size_t h = 0; h < H; ++h) {
        const auto& hw = block.heads[h];
        Matrix q = matmul(normed, hw.wq, macs);
        add_row_bias(q, hw.bq);
        Matrix k = matmul(normed, hw.wk, macs);
        add_row_bias(k, hw.bk);
        Matrix v = matmul(normed, hw.wv, macs);
        add_row_bias(v, hw.bv);

        Matrix scores = matmul_transposed(q, k, macs);
        for (auto& s : scores.values()) s = static_cast<float>(s * scale);
        const Matrix attn = stable_softmax_rows(scores);
        if (a_cls != nullptr)
            for (std::size_t j = 0; j < N; ++j) cls_acc[j] += attn(0, j);

        const Matrix o = matmul(attn, v, macs);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < live_dim; ++j) concat(i, h * live_dim + j) = o(i, j);
        for (std::size_t j = 0; j < live_dim; ++j)
            std::copy_n(hw.wproj.row(j).begin(), D, stacked.row(h * live_dim + j).begin());
    }
    if (a_cls != nullptr)
        for (std::size_t j = 0; j < N; ++j) (*a_cls)[j] = static_cast<float>(cls_acc[j] / static_cast<double>(H));

    Matrix out = matmul(concat, stacked, macs);
    add_row_bias(out, block.bproj);
    return out;
}

// Seed for layer `layer`'s token sample under a policy seed.
inline std::uint64_t tcs_layer_seed(std::uint64_t policy_seed, std::size_t layer) { return mix_seed(policy_seed, layer); }

inline ForwardResult forward(const ModelConfig& config, const ModelWeights& weights, const Matrix& input,
                             const ForwardOptions& options = {}) {
    validate_weights(config, weights);
    if (input.rows() != config.num_tokens || input.cols() != config.embed_dim) {
        throw ShapeError("input: expected " + shape_string(config.num_tokens, config.embed_dim) + ", got " +
                         shape_string(input));
    }
    require_finite(input, "input");

    TcsPolicy policy;
    const bool use_tcs = options.tcs != nullptr;
    if (use_tcs) {
        options.tcs->validate(config);
        policy = options.tcs->resolved_for(config);
        if (policy.mode == TcsMode::static_selection && options.fixed_selection.size() != config.num_layers) {
            throw ShapeError("static tcs mode needs one fixed channel selection per layer");
        }
    }

    ForwardResult result;
    Matrix x = input;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        const auto& block = weights.blocks[l];
        const std::size_t live = config.live_head_dim(l);
        const double scale_dim = static_cast<double>(options.scale_original ? config.head_dim : live);

        LayerTrace lt;
        const Matrix h1 = layer_norm(x, block.ln1_scale, block.ln1_shift);
        Vector a_cls;
        const Matrix attn = mhsa_forward(block, live, h1, scale_dim, options.counter, config.has_cls ? &a_cls : nullptr);
        add_inplace(x, attn);

        Matrix h2 = layer_norm(x, block.ln2_scale, block.ln2_shift);
        Matrix* post_gelu = options.capture_trace ? &lt.fc1_act : nullptr;
        Matrix ffn_out;
        if (use_tcs) {
            TcsContext ctx;
            ctx.layer = l;
            ctx.seed = tcs_layer_seed(policy.seed, l);
            ctx.has_cls = config.has_cls;
            ctx.counter = options.counter;
            ctx.post_gelu = post_gelu;
            if (policy.mode == TcsMode::static_selection) ctx.fixed = &options.fixed_selection[l];
            auto r = ffn_forward_tcs(FfnView::of(block), h2, a_cls, policy.layers[l], ctx);
            ffn_out = std::move(r.output);
            result.selections.push_back(std::move(r.selection));
        } else {
            ffn_out = ffn_dense(FfnView::of(block), h2, options.counter, post_gelu);
        }
        add_inplace(x, ffn_out);

        if (options.capture_trace) {
            lt.ffn_input = std::move(h2);
            lt.a_cls = std::move(a_cls);
            result.trace.layers.push_back(std::move(lt));
        }
    }
    if (!all_finite(x.values())) throw Error("forward produced non-finite output");
    result.output = std::move(x);
    return result;
}

// Runs a dynamic-mode pass over a calibration batch and returns the per-layer
// selections, for use as a static policy's fixed selection.
inline std::vector<ChannelSelection> calibrate_static_selection(const ModelConfig& config, const ModelWeights& weights,
                                                                const TcsPolicy& policy, const Matrix& calibration) {
    TcsPolicy dynamic = policy;
    dynamic.mode = TcsMode::dynamic_selection;
    ForwardOptions opts;
    opts.tcs = &dynamic;
    opts.capture_trace = false;
    return forward(config, weights, calibration, opts).selections;
}

// ---------------------------------------------------------------------------
// FLOPs accounting (one multiply-accumulate = one FLOP; biases, LayerNorm,
// softmax, patch embedding and classifier head are not counted)
// ---------------------------------------------------------------------------

struct FfnKeep {
    std::size_t kept_fc1_in = 0;
    std::size_t kept_expanded = 0;
};

struct LayerFlops {
    std::uint64_t mhsa_flops = 0;
    std::uint64_t ffn_flops = 0;
    std::uint64_t reference_mhsa_flops = 0;
    std::uint64_t reference_ffn_flops = 0;
};

struct FlopsReport {
    std::vector<LayerFlops> layers;
    std::uint64_t mhsa_total = 0;
    std::uint64_t ffn_total = 0;
    std::uint64_t total = 0;
    std::uint64_t reference_total = 0;
    double reduction_percent = 0.0;

    [[nodiscard]] double gflops() const { return static_cast<double>(total) * 1e-9; }
    [[nodiscard]] double ffn_share() const {
        return total == 0 ? 0.0 : static_cast<double>(ffn_total) / static_cast<double>(total);
    }
};

inline std::uint64_t mhsa_macs(std::uint64_t N, std::uint64_t D, std::uint64_t H, std::uint64_t k) {
    const std::uint64_t width = H * k;
    return 3 * N * D * width + N * N * width + N * N * width + N * width * D;
}

inline std::uint64_t ffn_macs(std::uint64_t N, std::uint64_t D, std::uint64_t kept_fc1_in, std::uint64_t kept_expanded) {
    return N * kept_fc1_in * kept_expanded + N * kept_expanded * D;
}

// Empty `ffn_keep` means dense FFNs. The reference is the same architecture
// with full heads and dense FFNs.
inline FlopsReport count_flops(const ModelConfig& config, std::span<const FfnKeep> ffn_keep = {}) {
    config.validate();
    if (!ffn_keep.empty() && ffn_keep.size() != config.num_layers) {
        throw ShapeError("count_flops: ffn_keep has " + std::to_string(ffn_keep.size()) + " entries for " +
                         std::to_string(config.num_layers) + " layers");
    }
    const std::uint64_t N = config.num_tokens, D = config.embed_dim, H = config.num_heads;
    FlopsReport r;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        FfnKeep keep{config.embed_dim, config.mlp_dim};
        if (!ffn_keep.empty()) keep = ffn_keep[l];
        if (keep.kept_fc1_in > config.embed_dim || keep.kept_expanded > config.mlp_dim) {
            throw ShapeError("count_flops: layer " + std::to_string(l) + " keeps more channels than exist");
        }
        LayerFlops lf;
        lf.mhsa_flops = mhsa_macs(N, D, H, config.live_head_dim(l));
        lf.ffn_flops = ffn_macs(N, D, keep.kept_fc1_in, keep.kept_expanded);
        lf.reference_mhsa_flops = mhsa_macs(N, D, H, config.head_dim);
        lf.reference_ffn_flops = ffn_macs(N, D, config.embed_dim, config.mlp_dim);
        r.mhsa_total += lf.mhsa_flops;
        r.ffn_total += lf.ffn_flops;
        r.reference_total += lf.reference_mhsa_flops + lf.reference_ffn_flops;
        r.layers.push_back(lf);
    }
    r.total = r.mhsa_total + r.ffn_total;
    r.reduction_percent =
        r.reference_total == 0 ? 0.0
                               : 100.0 * (1.0 - static_cast<double>(r.total) / static_cast<double>(r.reference_total));
    if (r.reduction_percent < 0.0) r.reduction_percent = 0.0;
    return r;
}

// Kept channel counts implied by a TCS policy (sizes do not depend on the data).
inline std::vector<FfnKeep> ffn_keep_from_policy(const ModelConfig& config, const TcsPolicy& policy) {
    policy.validate(config);
    std::vector<FfnKeep> keep;
    for (const auto& lp : policy.layers) {
        keep.push_back({kept_count(lp.fc1_keep, config.embed_dim), kept_count(lp.fc2_keep, config.mlp_dim)});
    }
    return keep;
}

inline nlohmann::json to_json(const FlopsReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < r.layers.size(); ++l) {
        const auto& lf = r.layers[l];
        layers.push_back({{"layer", l},
                          {"mhsa_flops", lf.mhsa_flops},
                          {"ffn_flops", lf.ffn_flops},
                          {"reference_mhsa_flops", lf.reference_mhsa_flops},
                          {"reference_ffn_flops", lf.reference_ffn_flops}});
    }
    return {{"layers", std::move(layers)},
            {"mhsa_total", r.mhsa_total},
            {"ffn_total", r.ffn_total},
            {"total", r.total},
            {"reference_total", r.reference_total},
            {"gflops", r.gflops()},
            {"reduction_percent", r.reduction_percent}};
}

}  // namespace toast
