#pragma once

// Layer-wise FFN redundancy diagnostics on post-GELU FC1 activations:
// sparsity, linear reconstruction R^2 and effective rank ratio.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "toast/engine.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"
#include "toast/model.hpp"
#include "toast/random.hpp"

namespace toast {

// Fraction of entries with |a| < eps.
inline double activation_sparsity(const Matrix& acts, double eps) {
    if (!(eps > 0.0)) throw InputError("activation_sparsity: eps must be positive");
    if (acts.empty()) return 0.0;
    std::size_t small = 0;
    for (float v : acts.values())
        if (std::abs(static_cast<double>(v)) < eps) ++small;
    return static_cast<double>(small) / static_cast<double>(acts.size());
}

/// R^2 of reconstructing channel `target` from the `predictors` channels by
/// least squares with an intercept. May be negative; never above 1.
inline double channel_r2(const Matrix& acts, std::size_t target, std::span<const std::size_t> predictors) {
    const std::size_t N = acts.rows();
    if (predictors.empty()) throw InputError("channel_r2: no predictors");
    if (N <= predictors.size()) throw InputError("channel_r2: need more tokens than predictors");
    if (target >= acts.cols()) throw ShapeError("channel_r2: target out of range");
    for (auto p : predictors) {
        if (p >= acts.cols()) throw ShapeError("channel_r2: predictor out of range");
        if (p == target) throw InputError("channel_r2: target is among the predictors");
    }

    std::vector<double> y(N);
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        y[i] = acts(i, target);
        mean += y[i];
    }
    mean /= static_cast<double>(N);
    double ss_tot = 0.0;
    for (double v : y) ss_tot += (v - mean) * (v - mean);
    if (ss_tot / static_cast<double>(N) <= 1e-12) throw InputError("degenerate target");

    std::vector<std::vector<double>> design(predictors.size() + 1, std::vector<double>(N));
    for (std::size_t j = 0; j < predictors.size(); ++j)
        for (std::size_t i = 0; i < N; ++i) design[j][i] = acts(i, predictors[j]);
    std::fill(design.back().begin(), design.back().end(), 1.0);

    const auto beta = detail::least_squares_f64(design, y);
    double ss_res = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        double fit = 0.0;
        for (std::size_t j = 0; j < design.size(); ++j) fit += beta[j] * design[j][i];
        ss_res += (y[i] - fit) * (y[i] - fit);
    }
    return std::min(1.0, 1.0 - ss_res / ss_tot);
}

// exp(H(sigma / sum sigma)) / C, natural-log entropy.
inline double effective_rank_ratio(const Matrix& acts) {
    if (acts.rows() == 0 || acts.cols() == 0) throw InputError("effective_rank_ratio: empty matrix");
    require_finite(acts, "effective_rank_ratio");
    const auto sigma = detail::singular_values_f64(acts);
    double total = 0.0;
    for (double s : sigma) total += s;
    if (total == 0.0) throw InputError("zero matrix");
    double entropy = 0.0;
    for (double s : sigma) {
        const double p = s / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return std::exp(entropy) / static_cast<double>(acts.cols());
}

struct LayerRedundancy {
    std::size_t layer = 0;
    double sparsity = 0.0;
    double mean_r2 = 1.0;
    double effective_rank_ratio = 1.0;
    std::size_t sampled_channels = 0;  // predictors per regression
    std::size_t r2_targets = 0;        // non-degenerate targets averaged into mean_r2
};

struct RedundancyReport {
    std::vector<LayerRedundancy> layers;
};

struct AnalyzerOptions {
    double sparsity_eps = 1e-3;
    std::size_t max_targets = 32;
    std::size_t predictors = 32;
    std::uint64_t seed = 0;
};

struct R2Sample {
    std::size_t target = 0;
    std::vector<std::size_t> predictors;
};

// Seeded choice of regression targets and their predictor channels for one layer.
inline std::vector<R2Sample> r2_sampling(std::size_t channels, std::size_t tokens, std::size_t layer,
                                         const AnalyzerOptions& opts) {
    std::vector<R2Sample> out;
    if (channels < 2 || tokens < 3) return out;
    const std::size_t p = std::min({opts.predictors, channels - 1, tokens - 2});
    if (p == 0) return out;
    Rng rng(mix_seed(opts.seed, layer));
    const auto targets = sample_without_replacement(channels, std::min(opts.max_targets, channels), rng);
    for (auto t : targets) {
        R2Sample s;
        s.target = t;
        s.predictors = sample_without_replacement(channels - 1, p, rng);
        for (auto& i : s.predictors)
            if (i >= t) ++i;
        out.push_back(std::move(s));
    }
    return out;
}

// Metrics for one layer's activations (tokens x channels).
inline LayerRedundancy analyze_activations(const Matrix& acts, std::size_t layer, const AnalyzerOptions& opts) {
    LayerRedundancy r;
    r.layer = layer;
    r.sparsity = activation_sparsity(acts, opts.sparsity_eps);
    bool all_zero = true;
    for (float v : acts.values())
        if (v != 0.0f) {
            all_zero = false;
            break;
        }
    // A dead layer has no spectrum; report it as fully collapsed.
    r.effective_rank_ratio = all_zero ? 1.0 / static_cast<double>(acts.cols()) : effective_rank_ratio(acts);

    const auto samples = r2_sampling(acts.cols(), acts.rows(), layer, opts);
    r.sampled_channels = samples.empty() ? 0 : samples.front().predictors.size();
    double sum = 0.0;
    for (const auto& s : samples) {
        try {
            sum += channel_r2(acts, s.target, s.predictors);
            ++r.r2_targets;
        } catch (const InputError&) {
            // constant target channel: nothing to reconstruct
        }
    }
    r.mean_r2 = r.r2_targets == 0 ? 1.0 : sum / static_cast<double>(r.r2_targets);
    return r;
}

// Stacks token batches along the token axis.
inline Matrix concat_rows(std::span<const Matrix> parts) {
    if (parts.empty()) return {};
    const std::size_t cols = parts.front().cols();
    std::vector<float> data;
    std::size_t rows = 0;
    for (const auto& m : parts) {
        if (m.cols() != cols) throw ShapeError("concat_rows: width mismatch");
        data.insert(data.end(), m.values().begin(), m.values().end());
        rows += m.rows();
    }
    return Matrix(rows, cols, std::move(data));
}

inline RedundancyReport redundancy_report(const ModelConfig& config, const ModelWeights& weights,
                                          std::span<const Matrix> calibration, const AnalyzerOptions& opts = {}) {
    if (calibration.empty()) throw InputError("redundancy_report: no calibration batches");
    std::vector<std::vector<Matrix>> per_layer(config.num_layers);
    for (const auto& batch : calibration) {
        auto fr = forward(config, weights, batch);
        for (std::size_t l = 0; l < config.num_layers; ++l) per_layer[l].push_back(std::move(fr.trace.layers[l].fc1_act));
    }
    RedundancyReport report;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        report.layers.push_back(analyze_activations(concat_rows(per_layer[l]), l, opts));
    }
    return report;
}

inline nlohmann::json to_json(const RedundancyReport& r) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& l : r.layers) {
        out.push_back({{"layer", l.layer},
                       {"sparsity", l.sparsity},
                       {"mean_r2", l.mean_r2},
                       {"effective_rank_ratio", l.effective_rank_ratio},
                       {"sampled_channels", l.sampled_channels},
                       {"r2_targets", l.r2_targets}});
    }
    return out;
}

inline RedundancyReport redundancy_report_from_json(const nlohmann::json& j) {
    RedundancyReport r;
    try {
        if (!j.is_array()) throw InputError("redundancy report: expected a JSON array");
        for (const auto& e : j) {
            LayerRedundancy l;
            l.layer = e.at("layer").get<std::size_t>();
            l.sparsity = e.at("sparsity").get<double>();
            l.mean_r2 = e.at("mean_r2").get<double>();
            l.effective_rank_ratio = e.at("effective_rank_ratio").get<double>();
            l.sampled_channels = e.value("sampled_channels", std::size_t{0});
            l.r2_targets = e.value("r2_targets", std::size_t{0});
            r.layers.push_back(l);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("redundancy report: ") + e.what());
    }
    return r;
}

inline std::string to_csv(const RedundancyReport& r) {
    std::ostringstream os;
    os.precision(9);
    os << "layer,sparsity,mean_r2,eff_rank\n";
    for (const auto& l : r.layers) os << l.layer << ',' << l.sparsity << ',' << l.mean_r2 << ',' << l.effective_rank_ratio << '\n';
    return os.str();
}

}  // namespace toast
