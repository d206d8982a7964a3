// Prunes a random toy model's attention heads, runs it with a layer-adaptive
// TCS policy and prints the FLOPs before and after.

#include <cstdio>

#include "toast/toast.hpp"

int main() {
    using namespace toast;

    const auto config = ModelConfig::make(4, 65, 64, 4, 256);
    const auto weights = random_weights(config, 1);
    const auto tokens = random_tokens(config, 2);

    const auto plan = build_plan(config, weights, 0.75, /*skip_first=*/true);
    const auto pruned_config = apply_plan(config, plan);
    const auto pruned = apply_plan(config, weights, plan);

    const auto policy = TcsPolicy::layer_adaptive(pruned_config, 7);
    OpCounter counter;
    ForwardOptions opts;
    opts.tcs = &policy;
    opts.counter = &counter;
    const auto result = forward(pruned_config, pruned, tokens, opts);

    const auto dense = count_flops(config);
    const auto compressed = count_flops(pruned_config, ffn_keep_from_policy(pruned_config, policy));
    std::printf("dense      %.4f GFLOPs\n", dense.gflops());
    std::printf("compressed %.4f GFLOPs (%.1f%% less), measured %llu MACs\n", compressed.gflops(),
                compressed.reduction_percent, static_cast<unsigned long long>(counter.block_macs));
    for (const auto& sel : result.selections) {
        std::printf("layer %zu keeps %zu/%zu input and %zu/%zu expanded channels\n", sel.layer,
                    sel.fc1_in_keep.size(), config.embed_dim, sel.expanded_keep.size(), config.mlp_dim);
    }
    return 0;
}
