#pragma once

// Token Channel Selection: training-free, activation-driven channel
// retention inside each feed-forward block.
//
// Two pruning sites per FFN:
//   * input channels (width D): dropped from the FC1 contraction, i.e. the
//     matching FC1 rows and input columns are skipped;
//   * expanded channels (width D_mlp): the FC1 column and FC2 row are
//     removed together.
// Channel importance is
//   I_c = lambda_cls * |x_cls[c]| + lambda_patch / |S| * sum_{i in S} A_cls[i] * |x_i[c]|
// over a seeded token sample S. Without a CLS attention row the first term
// is dropped and every A_cls[i] is taken as 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"
#include "toast/model.hpp"
#include "toast/random.hpp"
#include "toast/topk.hpp"

namespace toast {

enum class TcsMode { dynamic_selection, static_selection };

struct TcsLayerPolicy {
    double fc1_keep = 1.0;      // over the D input channels of FC1
    double fc2_keep = 1.0;      // over the D_mlp expanded channels
    double sample_rate = 1.0;   // in [0.02, 0.2] or exactly 1.0
    double lambda_cls = 2.0;
    double lambda_patch = 1.0;

    friend bool operator==(const TcsLayerPolicy&, const TcsLayerPolicy&) = default;
};

struct TcsPolicy {
    std::vector<TcsLayerPolicy> layers;
    TcsMode mode = TcsMode::dynamic_selection;
    std::uint64_t seed = 0;

    friend bool operator==(const TcsPolicy&, const TcsPolicy&) = default;

    // Depth-adaptive defaults: FC1 keep 1.0 -> 0.7 linearly; FC2 keep 1.0 over
    // the first half of the stack, then 0.5 -> 0.1; sample rate 0.02 -> 0.2.
    static TcsPolicy layer_adaptive(const ModelConfig& config, std::uint64_t seed = 0) {
        TcsPolicy p;
        p.seed = seed;
        const std::size_t L = config.num_layers;
        const std::size_t half = L / 2;
        for (std::size_t l = 0; l < L; ++l) {
            const double t = L > 1 ? static_cast<double>(l) / static_cast<double>(L - 1) : 0.0;
            TcsLayerPolicy lp;
            lp.fc1_keep = 1.0 - 0.3 * t;
            if (l < half) {
                lp.fc2_keep = 1.0;
            } else {
                const std::size_t span = L - 1 - half;
                const double u = span > 0 ? static_cast<double>(l - half) / static_cast<double>(span) : 0.0;
                lp.fc2_keep = 0.5 - 0.4 * u;
            }
            lp.sample_rate = 0.02 + 0.18 * t;
            lp.lambda_cls = config.has_cls ? 2.0 : 0.0;
            p.layers.push_back(lp);
        }
        return p;
    }

    static TcsPolicy uniform(std::size_t num_layers, double fc1_keep, double fc2_keep, double sample_rate,
                             std::uint64_t seed = 0) {
        TcsPolicy p;
        p.seed = seed;
        p.layers.assign(num_layers, TcsLayerPolicy{fc1_keep, fc2_keep, sample_rate, 2.0, 1.0});
        return p;
    }

    void validate(const ModelConfig& config) const {
        if (layers.size() != config.num_layers) {
            throw ShapeError("tcs policy has " + std::to_string(layers.size()) + " layers, model has " +
                             std::to_string(config.num_layers));
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& lp = layers[l];
            const std::string where = "tcs policy layer " + std::to_string(l) + ": ";
            if (!(lp.fc1_keep > 0.0 && lp.fc1_keep <= 1.0)) throw InputError(where + "fc1_keep must be in (0, 1]");
            if (!(lp.fc2_keep > 0.0 && lp.fc2_keep <= 1.0)) throw InputError(where + "fc2_keep must be in (0, 1]");
            const bool in_band = lp.sample_rate >= 0.02 - 1e-12 && lp.sample_rate <= 0.2 + 1e-12;
            if (!in_band && lp.sample_rate != 1.0) throw InputError(where + "sample_rate must be in [0.02, 0.2] or 1.0");
            if (!(lp.lambda_cls >= 0.0) || !(lp.lambda_patch >= 0.0)) throw InputError(where + "lambdas must be >= 0");
        }
    }

    // Copy with lambda_cls zeroed when the model has no CLS token.
    [[nodiscard]] TcsPolicy resolved_for(const ModelConfig& config) const {
        TcsPolicy p = *this;
        if (!config.has_cls)
            for (auto& lp : p.layers) lp.lambda_cls = 0.0;
        return p;
    }
};

inline nlohmann::json to_json(const TcsPolicy& p) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& lp : p.layers) {
        layers.push_back({{"fc1_keep", lp.fc1_keep},
                          {"fc2_keep", lp.fc2_keep},
                          {"sample_rate", lp.sample_rate},
                          {"lambda_cls", lp.lambda_cls},
                          {"lambda_patch", lp.lambda_patch}});
    }
    return {{"layers", std::move(layers)},
            {"mode", p.mode == TcsMode::dynamic_selection ? "dynamic" : "static"},
            {"seed", p.seed}};
}

inline TcsPolicy tcs_policy_from_json(const nlohmann::json& j) {
    TcsPolicy p;
    try {
        for (const auto& lj : j.at("layers")) {
            TcsLayerPolicy lp;
            lp.fc1_keep = lj.at("fc1_keep").get<double>();
            lp.fc2_keep = lj.at("fc2_keep").get<double>();
            lp.sample_rate = lj.at("sample_rate").get<double>();
            lp.lambda_cls = lj.value("lambda_cls", 2.0);
            lp.lambda_patch = lj.value("lambda_patch", 1.0);
            p.layers.push_back(lp);
        }
        const auto mode = j.value("mode", std::string("dynamic"));
        if (mode == "dynamic")
            p.mode = TcsMode::dynamic_selection;
        else if (mode == "static")
            p.mode = TcsMode::static_selection;
        else
            throw InputError("tcs policy: unknown mode '" + mode + "'");
        p.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("tcs policy: ") + e.what());
    }
    return p;
}

struct ChannelSelection {
    std::size_t layer = 0;
    std::vector<std::size_t> fc1_in_keep;    // over D
    std::vector<std::size_t> expanded_keep;  // over D_mlp

    friend bool operator==(const ChannelSelection&, const ChannelSelection&) = default;
};

// Seeded token sample for importance estimation. The CLS token (index 0 when
// present) is never sampled; it enters the importance separately.
inline std::vector<std::size_t> sample_tokens(std::size_t num_tokens, double rate, std::uint64_t seed, bool has_cls) {
    if (num_tokens == 0) throw InputError("sample_tokens: no tokens");
    if (!(rate > 0.0 && rate <= 1.0)) throw InputError("sample_tokens: rate must be in (0, 1]");
    const std::size_t first = has_cls ? 1 : 0;
    const std::size_t patches = num_tokens - first;
    const auto wanted = static_cast<std::size_t>(std::max(8L, std::lround(rate * static_cast<double>(num_tokens))));
    const std::size_t count = std::min(wanted, patches);
    Rng rng(seed);
    auto picks = sample_without_replacement(patches, count, rng);
    for (auto& i : picks) i += first;
    std::sort(picks.begin(), picks.end());
    return picks;
}

// Channel importance over the columns of `acts`. An empty `a_cls` selects the
// CLS-less form; lambda_cls is then ignored.
inline Vector unified_importance(const Matrix& acts, std::span<const float> a_cls, std::span<const std::size_t> sample,
                                 double lambda_cls, double lambda_patch) {
    if (sample.empty()) throw InputError("unified_importance: empty token sample");
    if (!a_cls.empty() && a_cls.size() != acts.rows()) {
        throw ShapeError("unified_importance: a_cls length " + std::to_string(a_cls.size()) + " != token count " +
                         std::to_string(acts.rows()));
    }
    const std::size_t C = acts.cols();
    std::vector<double> patch(C, 0.0);
    for (auto i : sample) {
        if (i >= acts.rows()) throw ShapeError("unified_importance: sampled token out of range");
        const double w = a_cls.empty() ? 1.0 : static_cast<double>(a_cls[i]);
        const auto r = acts.row(i);
        for (std::size_t c = 0; c < C; ++c) patch[c] += w * std::abs(static_cast<double>(r[c]));
    }
    const double inv = 1.0 / static_cast<double>(sample.size());
    Vector out(C);
    for (std::size_t c = 0; c < C; ++c) {
        double v = lambda_patch * patch[c] * inv;
        if (!a_cls.empty()) v += lambda_cls * std::abs(static_cast<double>(acts(0, c)));
        out[c] = static_cast<float>(v);
    }
    return out;
}

inline std::vector<std::size_t> select_channels(std::span<const float> scores, double keep_ratio) {
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw InputError("select_channels: keep_ratio must be in (0, 1]");
    if (scores.empty()) return {};
    return top_k_indices(scores, kept_count(keep_ratio, scores.size()));
}

// Read-only view of one FFN's parameters. Empty biases are zero.
struct FfnView {
    const Matrix& fc1;  // D x D_mlp
    const Matrix& fc2;  // D_mlp x D
    std::span<const float> fc1_bias;
    std::span<const float> fc2_bias;

    static FfnView of(const BlockWeights& b) { return {b.fc1, b.fc2, b.fc1_bias, b.fc2_bias}; }
};

namespace detail {

inline void check_ffn(const FfnView& f, const Matrix& input) {
    if (input.cols() != f.fc1.rows()) {
        throw ShapeError("ffn: input width " + std::to_string(input.cols()) + " != fc1 rows " +
                         std::to_string(f.fc1.rows()));
    }
    if (f.fc2.rows() != f.fc1.cols() || f.fc2.cols() != f.fc1.rows()) {
        throw ShapeError("ffn: fc2 " + shape_string(f.fc2) + " does not match fc1 " + shape_string(f.fc1));
    }
}

}  // namespace detail

// GELU(x W1 + b1) W2 + b2. `post_gelu` receives the hidden activations when given.
inline Matrix ffn_dense(const FfnView& f, const Matrix& input, OpCounter* counter = nullptr,
                        Matrix* post_gelu = nullptr) {
    detail::check_ffn(f, input);
    std::uint64_t* macs = counter != nullptr ? &counter->block_macs : nullptr;
    Matrix hidden = matmul(input, f.fc1, macs);
    add_row_bias(hidden, f.fc1_bias);
    gelu_inplace(hidden);
    Matrix out = matmul(hidden, f.fc2, macs);
    add_row_bias(out, f.fc2_bias);
    if (post_gelu != nullptr) *post_gelu = std::move(hidden);
    return out;
}

struct TcsContext {
    std::size_t layer = 0;
    std::uint64_t seed = 0;  // token-sampling seed for this call
    bool has_cls = true;
    const ChannelSelection* fixed = nullptr;  // static mode: skip selection entirely
    OpCounter* counter = nullptr;
    Matrix* post_gelu = nullptr;  // receives N x D_mlp hidden activations, zero in dropped channels
};

struct TcsFfnResult {
    Matrix output;
    ChannelSelection selection;
};

// Chooses the channels to keep for one FFN call without evaluating the reduced FFN.
inline ChannelSelection select_ffn_channels(const FfnView& f, const Matrix& input, std::span<const float> a_cls,
                                            const TcsLayerPolicy& policy, const TcsContext& ctx) {
    detail::check_ffn(f, input);
    const std::size_t D = f.fc1.rows();
    const std::size_t D_mlp = f.fc1.cols();
    const bool use_cls = ctx.has_cls && !a_cls.empty();
    if (use_cls && a_cls.size() != input.rows()) throw ShapeError("tcs: a_cls length does not match token count");
    const std::span<const float> cls_row = use_cls ? a_cls : std::span<const float>{};

    ChannelSelection sel;
    sel.layer = ctx.layer;
    const auto sample = sample_tokens(input.rows(), policy.sample_rate, ctx.seed, ctx.has_cls);
    if (sample.empty()) throw InputError("tcs: no patch tokens to sample");

    if (policy.fc1_keep >= 1.0) {
        sel.fc1_in_keep.resize(D);
        std::iota(sel.fc1_in_keep.begin(), sel.fc1_in_keep.end(), std::size_t{0});
    } else {
        const auto scores = unified_importance(input, cls_row, sample, policy.lambda_cls, policy.lambda_patch);
        sel.fc1_in_keep = select_channels(scores, policy.fc1_keep);
    }

    if (policy.fc2_keep >= 1.0) {
        sel.expanded_keep.resize(D_mlp);
        std::iota(sel.expanded_keep.begin(), sel.expanded_keep.end(), std::size_t{0});
        return sel;
    }

    // Hidden activations of the input-reduced FC1, at the CLS row and sampled rows only.
    std::vector<std::size_t> rows;
    if (use_cls) rows.push_back(0);
    rows.insert(rows.end(), sample.begin(), sample.end());
    const Matrix x_rows = gather_columns(gather_rows(input, rows), sel.fc1_in_keep);
    const Matrix w1 = gather_rows(f.fc1, sel.fc1_in_keep);
    Matrix hidden = matmul(x_rows, w1, ctx.counter != nullptr ? &ctx.counter->selection_macs : nullptr);
    add_row_bias(hidden, f.fc1_bias);
    gelu_inplace(hidden);

    std::vector<std::size_t> local(sample.size());
    std::iota(local.begin(), local.end(), use_cls ? std::size_t{1} : std::size_t{0});
    const Vector local_cls = use_cls ? gather(a_cls, rows) : Vector{};
    const auto scores = unified_importance(hidden, local_cls, local, policy.lambda_cls, policy.lambda_patch);
    sel.expanded_keep = select_channels(scores, policy.fc2_keep);
    return sel;
}

// Evaluates the FFN restricted to a channel selection, as a smaller dense FFN.
inline Matrix ffn_forward_selected(const FfnView& f, const Matrix& input, const ChannelSelection& sel,
                                   OpCounter* counter = nullptr, Matrix* post_gelu = nullptr) {
    detail::check_ffn(f, input);
    const std::size_t D_mlp = f.fc1.cols();
    std::uint64_t* macs = counter != nullptr ? &counter->block_macs : nullptr;

    const Matrix x = gather_columns(input, sel.fc1_in_keep);
    const Matrix w1 = gather_columns(gather_rows(f.fc1, sel.fc1_in_keep), sel.expanded_keep);
    const Vector b1 = gather(f.fc1_bias, sel.expanded_keep);
    const Matrix w2 = gather_rows(f.fc2, sel.expanded_keep);

    Matrix hidden = matmul(x, w1, macs);
    add_row_bias(hidden, b1);
    gelu_inplace(hidden);
    Matrix out = matmul(hidden, w2, macs);
    add_row_bias(out, f.fc2_bias);

    if (post_gelu != nullptr) {
        Matrix full(input.rows(), D_mlp);
        for (std::size_t i = 0; i < hidden.rows(); ++i)
            for (std::size_t j = 0; j < sel.expanded_keep.size(); ++j) full(i, sel.expanded_keep[j]) = hidden(i, j);
        *post_gelu = std::move(full);
    }
    return out;
}

inline TcsFfnResult ffn_forward_tcs(const FfnView& f, const Matrix& input, std::span<const float> a_cls,
                                    const TcsLayerPolicy& policy, const TcsContext& ctx) {
    TcsFfnResult r;
    if (ctx.fixed != nullptr) {
        r.selection = *ctx.fixed;
        r.selection.layer = ctx.layer;
    } else {
        r.selection = select_ffn_channels(f, input, a_cls, policy, ctx);
    }
    r.output = ffn_forward_selected(f, input, r.selection, ctx.counter, ctx.post_gelu);
    return r;
}

}  // namespace toast
