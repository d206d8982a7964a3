#pragma once

// Implementation of the `toast` subcommands. Each run_* function returns the
// process exit code: 0 success, 1 internal error, 2 input/validation error,
// 3 shape/config mismatch.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "toast/toast.hpp"

namespace toast::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct GlobalArgs {
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool verbose = false;
    std::string manifest;  // empty: derived from the primary output
};

struct AnalyzeArgs {
    std::string model, weights, calib, out;
    std::string csv;
    double eps = 1e-3;
};

struct PruneArgs {
    std::string model, weights, out, plan;
    std::string config_out;
    double ratio = 0.0;
    bool skip_first = false;
};

struct FlopsArgs {
    std::string model;
    std::string plan;
    std::string policy;
};

struct EvalArgs {
    std::string model, weights, inputs, out;
    std::string policy;
    std::string calib;
    std::string stats;
    bool scale_original = false;
};

struct ReportArgs {
    std::string report;
    std::string csv;
};

enum ExitCode : int { kOk = 0, kInternal = 1, kInput = 2, kShape = 3 };

// 64-bit FNV-1a, hex encoded.
inline std::string digest_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline json load_json(const std::string& path) {
    std::string text;
    try {
        text = detail::read_file(path);
    } catch (const InputError&) {
        throw InputError("cannot read " + path);
    }
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        throw InputError(path + ": not valid JSON");
    }
}

inline void write_text(const std::string& path, const std::string& text) {
    detail::write_file_atomic(path, text);
}

inline void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline ModelConfig load_config(const std::string& path) { return model_config_from_json(load_json(path)); }

inline ModelWeights load_weights(const ModelConfig& config, const std::string& path) {
    try {
        return weights_from_tensors(config, read_archive(path));
    } catch (const InputError& e) {
        throw InputError(path + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(path + ": " + e.what());
    }
}

struct Batch {
    std::string name;
    Matrix tokens;
};

// Every entry must be a num_tokens x embed_dim token matrix.
inline std::vector<Batch> load_batches(const ModelConfig& config, const std::string& path) {
    std::vector<NamedTensor> tensors;
    try {
        tensors = read_archive(path);
    } catch (const InputError& e) {
        throw InputError(path + ": " + e.what());
    }
    if (tensors.empty()) throw InputError(path + ": archive holds no token batches");
    std::vector<Batch> out;
    for (auto& t : tensors) {
        if (t.tensor.dims.size() != 2 || t.tensor.dims[0] != config.num_tokens || t.tensor.dims[1] != config.embed_dim) {
            std::string got;
            for (std::size_t i = 0; i < t.tensor.dims.size(); ++i) got += (i ? "x" : "") + std::to_string(t.tensor.dims[i]);
            throw ShapeError(path + ": tensor " + t.name + " has shape " + got + ", expected " +
                             shape_string(config.num_tokens, config.embed_dim));
        }
        out.push_back({t.name, t.tensor.to_matrix()});
    }
    return out;
}

inline TcsPolicy load_policy(const ModelConfig& config, const std::string& path, const GlobalArgs& g) {
    TcsPolicy p = tcs_policy_from_json(load_json(path));
    if (g.seed_set) p.seed = g.seed;
    p.validate(config);
    return p;
}

inline void emit_manifest(const GlobalArgs& g, const std::string& command, const std::vector<std::string>& inputs,
                          const std::vector<std::string>& outputs, const json& resolved, std::ostream& err) {
    const json m = {{"command", command},
                    {"inputs", inputs},
                    {"outputs", outputs},
                    {"seed", g.seed},
                    {"config_digest", digest_hex(resolved.dump())}};
    std::string path = g.manifest;
    if (path.empty() && !outputs.empty()) path = outputs.front() + ".manifest.json";
    if (path.empty()) {
        err << "manifest: " << m.dump() << "\n";
    } else {
        write_json(path, m);
    }
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const ShapeError& e) {
        err << "error: " << e.what() << "\n";
        return kShape;
    } catch (const InputError& e) {
        err << "error: " << e.what() << "\n";
        return kInput;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}

inline int run_analyze(const GlobalArgs& g, const AnalyzeArgs& a, std::ostream& err) {
    return guarded(err, [&] {
        const auto config = load_config(a.model);
        const auto weights = load_weights(config, a.weights);
        const auto batches = load_batches(config, a.calib);
        std::vector<Matrix> calib;
        for (const auto& b : batches) calib.push_back(b.tokens);

        AnalyzerOptions opts;
        opts.sparsity_eps = a.eps;
        opts.seed = g.seed;
        const auto report = redundancy_report(config, weights, calib, opts);
        write_json(a.out, to_json(report));
        std::vector<std::string> outputs{a.out};
        if (!a.csv.empty()) {
            write_text(a.csv, to_csv(report));
            outputs.push_back(a.csv);
        }

        err << "layer  sparsity  mean_r2  eff_rank\n";
        for (const auto& l : report.layers) {
            err << std::setw(5) << l.layer << std::fixed << std::setprecision(4) << std::setw(10) << l.sparsity
                << std::setw(9) << l.mean_r2 << std::setw(10) << l.effective_rank_ratio << "\n";
        }
        const json resolved = {{"command", "analyze"},
                               {"model", to_json(config)},
                               {"sparsity_eps", opts.sparsity_eps},
                               {"max_targets", opts.max_targets},
                               {"predictors", opts.predictors},
                               {"seed", g.seed}};
        emit_manifest(g, "analyze", {a.model, a.weights, a.calib}, outputs, resolved, err);
        return kOk;
    });
}

inline std::string default_config_out(const std::string& out) {
    fs::path p(out);
    p.replace_extension(".model.json");
    return p.string();
}

inline int run_prune(const GlobalArgs& g, const PruneArgs& a, std::ostream& err) {
    return guarded(err, [&] {
        if (!(a.ratio < 1.0)) throw InputError("ratio must be < 1");
        if (!(a.ratio >= 0.0)) throw InputError("ratio must be >= 0");
        const auto config = load_config(a.model);
        const auto weights = load_weights(config, a.weights);
        const auto plan = build_plan(config, weights, a.ratio, a.skip_first);
        const auto pruned_config = apply_plan(config, plan);
        const auto pruned = apply_plan(config, weights, plan);

        const std::string config_out = a.config_out.empty() ? default_config_out(a.out) : a.config_out;
        write_archive(a.out, weights_to_tensors(pruned));
        write_json(a.plan, to_json(plan));
        write_json(config_out, to_json(pruned_config));

        if (g.verbose) {
            for (std::size_t l = 0; l < plan.layers.size(); ++l)
                err << "layer " << l << ": d_k' = " << plan.layers[l].dk_prime << "\n";
        }
        const auto before = count_flops(config);
        const auto after = count_flops(pruned_config);
        err << "pruned attention width: " << std::fixed << std::setprecision(3) << before.gflops() << " -> "
            << after.gflops() << " GFLOPs (" << std::setprecision(1) << after.reduction_percent << "% reduction)\n";

        const json resolved = {{"command", "prune"},
                               {"model", to_json(config)},
                               {"ratio", a.ratio},
                               {"skip_first", a.skip_first},
                               {"seed", g.seed}};
        emit_manifest(g, "prune", {a.model, a.weights}, {a.out, a.plan, config_out}, resolved, err);
        return kOk;
    });
}

inline FlopsReport flops_for(const ModelConfig& base, const std::optional<PruningPlan>& plan,
                             const std::optional<TcsPolicy>& policy) {
    ModelConfig config = base;
    if (plan) config = apply_plan(base, *plan);
    std::vector<FfnKeep> keep;
    if (policy) keep = ffn_keep_from_policy(config, *policy);
    return count_flops(config, keep);
}

inline int run_flops(const GlobalArgs& g, const FlopsArgs& a, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto config = load_config(a.model);
        std::optional<PruningPlan> plan;
        std::optional<TcsPolicy> policy;
        if (!a.plan.empty()) plan = pruning_plan_from_json(load_json(a.plan));
        if (!a.policy.empty()) policy = load_policy(config, a.policy, g);
        const auto report = flops_for(config, plan, policy);
        out << to_json(report).dump(2) << "\n";
        err << "total " << std::fixed << std::setprecision(3) << report.gflops() << " GFLOPs, reduction "
            << std::setprecision(2) << report.reduction_percent << "%\n";

        json resolved = {{"command", "flops"}, {"model", to_json(config)}, {"seed", g.seed}};
        if (plan) resolved["plan"] = to_json(*plan);
        if (policy) resolved["policy"] = to_json(*policy);
        std::vector<std::string> inputs{a.model};
        if (!a.plan.empty()) inputs.push_back(a.plan);
        if (!a.policy.empty()) inputs.push_back(a.policy);
        emit_manifest(g, "flops", inputs, {}, resolved, err);
        return kOk;
    });
}

inline int run_eval(const GlobalArgs& g, const EvalArgs& a, std::ostream& err) {
    return guarded(err, [&] {
        const auto config = load_config(a.model);
        const auto weights = load_weights(config, a.weights);
        const auto batches = load_batches(config, a.inputs);
        std::optional<TcsPolicy> policy;
        if (!a.policy.empty()) policy = load_policy(config, a.policy, g);

        std::vector<ChannelSelection> fixed;
        if (policy && policy->mode == TcsMode::static_selection) {
            const Matrix calib = a.calib.empty() ? batches.front().tokens : load_batches(config, a.calib).front().tokens;
            fixed = calibrate_static_selection(config, weights, *policy, calib);
        }

        std::vector<NamedTensor> outputs;
        json stats = {{"batches", json::array()}};
        const auto start = std::chrono::steady_clock::now();
        for (const auto& b : batches) {
            OpCounter counter;
            ForwardOptions opts;
            opts.tcs = policy ? &*policy : nullptr;
            opts.fixed_selection = fixed;
            opts.capture_trace = false;
            opts.scale_original = a.scale_original;
            opts.counter = &counter;
            auto r = forward(config, weights, b.tokens, opts);
            outputs.push_back({b.name, Tensor::from(r.output)});
            stats["batches"].push_back(
                {{"name", b.name}, {"block_macs", counter.block_macs}, {"selection_macs", counter.selection_macs}});
        }
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        write_archive(a.out, outputs);
        std::vector<std::string> written{a.out};
        if (!a.stats.empty()) {
            write_json(a.stats, stats);
            written.push_back(a.stats);
        }
        err << "evaluated " << batches.size() << " batch(es) in " << std::fixed << std::setprecision(1) << ms
            << " ms (" << std::setprecision(2) << ms / static_cast<double>(batches.size()) << " ms/batch), "
            << stats["batches"][0]["block_macs"].get<std::uint64_t>() << " MACs/batch\n";

        json resolved = {{"command", "eval"},
                         {"model", to_json(config)},
                         {"scale_original", a.scale_original},
                         {"seed", g.seed}};
        if (policy) resolved["policy"] = to_json(*policy);
        std::vector<std::string> inputs{a.model, a.weights, a.inputs};
        if (!a.policy.empty()) inputs.push_back(a.policy);
        if (!a.calib.empty()) inputs.push_back(a.calib);
        emit_manifest(g, "eval", inputs, written, resolved, err);
        return kOk;
    });
}

inline int run_report(const GlobalArgs& g, const ReportArgs& a, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto report = redundancy_report_from_json(load_json(a.report));
        const std::string csv = to_csv(report);
        std::vector<std::string> outputs;
        if (a.csv.empty()) {
            out << csv;
        } else {
            write_text(a.csv, csv);
            outputs.push_back(a.csv);
        }
        double max_sparsity = 0.0, min_rank = 1.0;
        for (const auto& l : report.layers) {
            max_sparsity = std::max(max_sparsity, l.sparsity);
            min_rank = std::min(min_rank, l.effective_rank_ratio);
        }
        err << report.layers.size() << " layers; max sparsity " << std::fixed << std::setprecision(4) << max_sparsity
            << ", min effective rank ratio " << min_rank << "\n";
        emit_manifest(g, "report", {a.report}, outputs, {{"command", "report"}, {"seed", g.seed}}, err);
        return kOk;
    });
}

}  // namespace toast::cli
