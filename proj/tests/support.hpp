#pragma once

// Test plumbing: scratch directories, subprocess runs, small model builders.

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "toast/toast.hpp"

namespace support {

namespace fs = std::filesystem;

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("toast-test-" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const fs::path& path() const { return path_; }
    [[nodiscard]] std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    fs::path path_;
};

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

inline std::string quote(const std::string& s) { return "'" + s + "'"; }

// Runs a shell command and returns its exit status. Standard output goes to
// `log`; standard error goes to `err_log`, or to `log` when that is empty.
inline int run(const std::string& command, const std::string& log = "/dev/null", const std::string& err_log = "") {
    const std::string err = err_log.empty() ? " 2>&1" : " 2>" + quote(err_log);
    const int status = std::system((command + " >" + quote(log) + err).c_str());
    if (status == -1 || !WIFEXITED(status)) return -1;
    return WEXITSTATUS(status);
}

inline toast::ModelConfig toy_config(std::size_t layers = 2, bool cls = true) {
    return toast::ModelConfig::make(layers, 17, 32, 4, 64, cls);
}

// Writes model.json, weights.toast and inputs.toast for a random model.
inline void write_model_files(const TempDir& dir, const toast::ModelConfig& config, std::uint64_t seed,
                              std::size_t batches = 2) {
    std::ofstream(dir.file("model.json")) << toast::to_json(config).dump(2) << "\n";
    toast::write_archive(dir.file("weights.toast"), toast::weights_to_tensors(toast::random_weights(config, seed)));
    std::vector<toast::NamedTensor> inputs;
    for (std::size_t b = 0; b < batches; ++b)
        inputs.push_back({"batch" + std::to_string(b), toast::Tensor::from(toast::random_tokens(config, seed + 100 + b))});
    toast::write_archive(dir.file("inputs.toast"), inputs);
}

// Random model whose heads carry signal only in dimensions [0, live): the other
// Q/K columns, V columns and projection rows (and their biases) are zero.
inline toast::ModelWeights zero_padded_weights(const toast::ModelConfig& config, std::size_t live, std::uint64_t seed) {
    auto w = toast::random_weights(config, seed);
    for (auto& b : w.blocks)
        for (auto& hw : b.heads)
            for (std::size_t j = live; j < config.head_dim; ++j) {
                for (std::size_t d = 0; d < config.embed_dim; ++d) {
                    hw.wq(d, j) = hw.wk(d, j) = hw.wv(d, j) = 0.0f;
                    hw.wproj(j, d) = 0.0f;
                }
                hw.bq[j] = hw.bk[j] = hw.bv[j] = 0.0f;
            }
    return w;
}

inline toast::PruningPlan uniform_plan(const toast::ModelConfig& config, const std::vector<std::size_t>& qk,
                                       const std::vector<std::size_t>& vo) {
    toast::PruningPlan plan;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        toast::LayerPlan lp{qk.size(), {}};
        lp.heads.assign(config.num_heads, toast::HeadPlan{qk, vo});
        plan.layers.push_back(lp);
    }
    return plan;
}

// Synthetic activations for the sampling-fidelity check: channel c has
// magnitude mean 1 + gap * rank[c] (rank a random permutation) plus Gaussian
// noise of standard deviation `noise`, with gap = 2 * noise.
inline toast::Matrix separated_means(std::size_t tokens, std::size_t channels, double noise, std::uint64_t seed) {
    toast::Rng rng(seed);
    const auto rank = toast::sample_without_replacement(channels, channels, rng);
    toast::Matrix m(tokens, channels);
    for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t c = 0; c < channels; ++c)
            m(i, c) = static_cast<float>(1.0 + 2.0 * noise * static_cast<double>(rank[c]) + noise * rng.normal());
    return m;
}

inline double overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t common = 0;
    for (auto i : a) common += std::count(b.begin(), b.end(), i) > 0 ? 1 : 0;
    return static_cast<double>(common) / static_cast<double>(a.size());
}

}  // namespace support
