#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

#include "oracles.hpp"
#include "support.hpp"
#include "toast/engine.hpp"
#include "toast/tcs.hpp"

using toast::Matrix;

namespace {

bool bit_identical(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.values().data(), b.values().data(), 4 * a.size()) == 0;
}

std::vector<float> random_attention_row(std::size_t n, std::uint64_t seed) {
    const Matrix logits = oracle::random_matrix(1, n, seed);
    const Matrix a = toast::stable_softmax_rows(logits);
    return {a.values().begin(), a.values().end()};
}

struct FfnFixture {
    toast::ModelConfig config = support::toy_config(1);
    toast::ModelWeights weights;
    Matrix input;
    std::vector<float> a_cls;

    explicit FfnFixture(std::uint64_t seed)
        : weights(toast::random_weights(config, seed)),
          input(toast::random_tokens(config, seed + 1)),
          a_cls(random_attention_row(config.num_tokens, seed + 2)) {}

    [[nodiscard]] toast::FfnView view() const { return toast::FfnView::of(weights.blocks[0]); }
};

}  // namespace

TEST(SampleTokens, FullRateTakesEveryPatch) {
    const auto s = toast::sample_tokens(197, 1.0, 3, true);
    ASSERT_EQ(s.size(), 196u);
    for (std::size_t i = 0; i < 196; ++i) EXPECT_EQ(s[i], i + 1);
    const auto t = toast::sample_tokens(50, 1.0, 3, false);
    EXPECT_EQ(t.size(), 50u);
    EXPECT_EQ(t.front(), 0u);
}

TEST(SampleTokens, MinimumSize) {
    EXPECT_EQ(toast::sample_tokens(197, 0.02, 1, true).size(), 8u);
    EXPECT_EQ(toast::sample_tokens(197, 0.1, 1, true).size(), 20u);
    EXPECT_EQ(toast::sample_tokens(5, 0.02, 1, true).size(), 4u);
}

TEST(SampleTokens, DeterministicSortedDistinctAndClsFree) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto a = toast::sample_tokens(197, 0.2, seed, true);
        EXPECT_EQ(a, toast::sample_tokens(197, 0.2, seed, true));
        EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
        EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
        EXPECT_GE(a.front(), 1u);
        EXPECT_LT(a.back(), 197u);
    }
    EXPECT_NE(toast::sample_tokens(197, 0.2, 1, true), toast::sample_tokens(197, 0.2, 2, true));
}

TEST(UnifiedImportance, PatchTermOffLeavesClsTerm) {
    const Matrix acts = oracle::random_matrix(10, 6, 1);
    const auto a_cls = random_attention_row(10, 2);
    const std::vector<std::size_t> s = {1, 4, 7};
    const auto imp = toast::unified_importance(acts, a_cls, s, 2.0, 0.0);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_FLOAT_EQ(imp[c], 2.0f * std::fabs(acts(0, c)));
}

TEST(UnifiedImportance, ConstantChannelWithoutCls) {
    Matrix acts = oracle::random_matrix(12, 5, 3);
    for (std::size_t i = 0; i < 12; ++i) acts(i, 3) = -0.75f;
    const std::vector<std::size_t> s = {0, 2, 5, 11};
    const auto imp = toast::unified_importance(acts, {}, s, 2.0, 1.5);
    EXPECT_NEAR(imp[3], 1.5 * 0.75, 1e-7);
}

TEST(UnifiedImportance, MatchesScalarLoopOnSeed17) {
    const Matrix acts = oracle::random_matrix(17, 24, 17);
    const auto a_cls = random_attention_row(17, 18);
    std::vector<std::size_t> s(16);
    std::iota(s.begin(), s.end(), std::size_t{1});
    const auto imp = toast::unified_importance(acts, a_cls, s, 2.0, 1.0);
    const auto ref = oracle::importance_scalar(acts, a_cls, s, 2.0, 1.0);
    for (std::size_t c = 0; c < 24; ++c) {
        EXPECT_NEAR(imp[c], ref[c], 1e-6);
        EXPECT_GE(imp[c], 0.0f);
    }
}

TEST(UnifiedImportance, ClsLessIgnoresLambdaCls) {
    const Matrix acts = oracle::random_matrix(9, 7, 5);
    const std::vector<std::size_t> s = {0, 3, 8};
    EXPECT_EQ(toast::unified_importance(acts, {}, s, 0.0, 1.0), toast::unified_importance(acts, {}, s, 5.0, 1.0));
}

TEST(UnifiedImportance, EmptySampleIsAnError) {
    EXPECT_THROW(toast::unified_importance(Matrix(3, 3), {}, {}, 1.0, 1.0), toast::InputError);
}

TEST(SelectChannels, Fixtures) {
    const std::vector<float> s = {0.1f, 0.9f, 0.5f, 0.5f};
    EXPECT_EQ(toast::select_channels(s, 0.5), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(toast::select_channels(s, 1.0), (std::vector<std::size_t>{0, 1, 2, 3}));
    const std::vector<float> flat(10, 0.3f);
    EXPECT_EQ(toast::select_channels(flat, 0.3), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(toast::select_channels(flat, 0.01).size(), 1u);
    EXPECT_THROW(toast::select_channels(flat, 0.0), toast::InputError);
}

TEST(SelectChannels, ScaleInvariance) {
    const Matrix acts = oracle::random_matrix(30, 40, 8);
    const auto a_cls = random_attention_row(30, 9);
    const auto s = toast::sample_tokens(30, 0.2, 4, true);
    Matrix scaled = acts;
    for (auto& v : scaled.values()) v *= 13.0f;
    for (double keep : {0.1, 0.5, 0.8}) {
        EXPECT_EQ(toast::select_channels(toast::unified_importance(acts, a_cls, s, 2.0, 1.0), keep),
                  toast::select_channels(toast::unified_importance(scaled, a_cls, s, 2.0, 1.0), keep));
    }
}

TEST(FfnTcs, FullRatiosAreBitIdenticalToDense) {
    const FfnFixture f(3);
    const Matrix dense = toast::ffn_dense(f.view(), f.input);
    toast::TcsLayerPolicy p{1.0, 1.0, 0.1, 2.0, 1.0};
    const auto r = toast::ffn_forward_tcs(f.view(), f.input, f.a_cls, p, {});
    EXPECT_TRUE(bit_identical(r.output, dense));
}

TEST(FfnTcs, ZeroChannelsDropWithoutChangingOutput) {
    FfnFixture f(4);
    auto& b = f.weights.blocks[0];
    // Half of the expanded channels are dead: zero FC1 column and bias.
    for (std::size_t c = 0; c < f.config.mlp_dim; c += 2) {
        for (std::size_t d = 0; d < f.config.embed_dim; ++d) b.fc1(d, c) = 0.0f;
        b.fc1_bias[c] = 0.0f;
    }
    const Matrix dense = toast::ffn_dense(f.view(), f.input);
    toast::TcsLayerPolicy p{1.0, 0.5, 0.2, 2.0, 1.0};
    const auto r = toast::ffn_forward_tcs(f.view(), f.input, f.a_cls, p, {});
    std::vector<std::size_t> odd;
    for (std::size_t c = 1; c < f.config.mlp_dim; c += 2) odd.push_back(c);
    EXPECT_EQ(r.selection.expanded_keep, odd);
    EXPECT_TRUE(bit_identical(r.output, dense));
}

TEST(FfnTcs, MatchesMaskedDenseOracleOnSeed19) {
    const FfnFixture f(19);
    toast::TcsLayerPolicy p{0.8, 0.5, 1.0, 2.0, 1.0};
    const auto r = toast::ffn_forward_tcs(f.view(), f.input, f.a_cls, p, {});
    const auto ref = oracle::tcs_masked_dense(f.view(), f.input, f.a_cls, true, 0.8, 0.5, 2.0, 1.0);
    EXPECT_EQ(r.selection.fc1_in_keep, ref.fc1_in_keep);
    EXPECT_EQ(r.selection.expanded_keep, ref.expanded_keep);
    EXPECT_LE(oracle::max_abs_diff(r.output, ref.output), 1e-5);
}

TEST(FfnTcs, ClsLessMatchesOracle) {
    const FfnFixture f(23);
    toast::TcsLayerPolicy p{0.6, 0.3, 1.0, 0.0, 1.0};
    toast::TcsContext ctx;
    ctx.has_cls = false;
    const auto r = toast::ffn_forward_tcs(f.view(), f.input, {}, p, ctx);
    const auto ref = oracle::tcs_masked_dense(f.view(), f.input, {}, false, 0.6, 0.3, 0.0, 1.0);
    EXPECT_EQ(r.selection.expanded_keep, ref.expanded_keep);
    EXPECT_LE(oracle::max_abs_diff(r.output, ref.output), 1e-5);
}

TEST(FfnTcs, SelectionsHaveRoundedSizes) {
    const FfnFixture f(5);
    toast::TcsLayerPolicy p{0.7, 0.15, 0.2, 2.0, 1.0};
    const auto r = toast::ffn_forward_tcs(f.view(), f.input, f.a_cls, p, {});
    EXPECT_EQ(r.selection.fc1_in_keep.size(), toast::kept_count(0.7, 32));
    EXPECT_EQ(r.selection.expanded_keep.size(), toast::kept_count(0.15, 64));
    EXPECT_TRUE(std::is_sorted(r.selection.expanded_keep.begin(), r.selection.expanded_keep.end()));
}

TEST(FfnTcs, ReducedFfnOpCountEqualsFormula) {
    const FfnFixture f(6);
    toast::TcsLayerPolicy p{0.75, 0.25, 0.2, 2.0, 1.0};
    toast::OpCounter counter;
    toast::TcsContext ctx;
    ctx.counter = &counter;
    const auto r = toast::ffn_forward_tcs(f.view(), f.input, f.a_cls, p, ctx);
    const std::uint64_t kin = r.selection.fc1_in_keep.size(), kexp = r.selection.expanded_keep.size();
    EXPECT_EQ(counter.block_macs, toast::ffn_macs(f.config.num_tokens, f.config.embed_dim, kin, kexp));
    EXPECT_LT(counter.block_macs, toast::ffn_macs(f.config.num_tokens, f.config.embed_dim, 32, 64));
    EXPECT_GT(counter.selection_macs, 0u);
}

TEST(FfnTcs, SamplingFidelityOnSeparatedMeans) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Matrix acts = support::separated_means(197, 64, 0.5, seed);
        const auto sample = toast::sample_tokens(197, 0.1, seed + 1000, false);
        const auto full = toast::sample_tokens(197, 1.0, seed, false);
        const auto a = toast::select_channels(toast::unified_importance(acts, {}, sample, 0.0, 1.0), 0.5);
        const auto b = toast::select_channels(toast::unified_importance(acts, {}, full, 0.0, 1.0), 0.5);
        total += support::overlap(a, b);
    }
    EXPECT_GE(total / 100.0, 0.9);
}

TEST(TcsForward, StaticModeReusesCalibratedSelection) {
    const auto config = support::toy_config();
    const auto w = toast::random_weights(config, 7);
    auto policy = toast::TcsPolicy::uniform(config.num_layers, 0.75, 0.5, 0.2, 3);
    const auto fixed = toast::calibrate_static_selection(config, w, policy, toast::random_tokens(config, 70));
    ASSERT_EQ(fixed.size(), config.num_layers);
    policy.mode = toast::TcsMode::static_selection;
    toast::ForwardOptions opts;
    opts.tcs = &policy;
    opts.fixed_selection = fixed;
    const auto r = toast::forward(config, w, toast::random_tokens(config, 71), opts);
    EXPECT_EQ(r.selections, fixed);

    toast::ForwardOptions missing;
    missing.tcs = &policy;
    EXPECT_THROW(toast::forward(config, w, toast::random_tokens(config, 71), missing), toast::ShapeError);
}

TEST(TcsForward, DynamicModeMatchesCountFlops) {
    const auto config = support::toy_config();
    const auto w = toast::random_weights(config, 8);
    const auto policy = toast::TcsPolicy::layer_adaptive(config, 5);
    toast::OpCounter counter;
    toast::ForwardOptions opts;
    opts.tcs = &policy;
    opts.counter = &counter;
    toast::forward(config, w, toast::random_tokens(config, 8), opts);
    const auto report = toast::count_flops(config, toast::ffn_keep_from_policy(config, policy));
    EXPECT_EQ(counter.block_macs, report.total);
    EXPECT_LT(report.total, toast::count_flops(config).total);
}

TEST(TcsPolicy, LayerAdaptiveSchedule) {
    const auto p = toast::TcsPolicy::layer_adaptive(toast::ModelConfig::deit_base());
    ASSERT_EQ(p.layers.size(), 12u);
    EXPECT_DOUBLE_EQ(p.layers[0].fc1_keep, 1.0);
    EXPECT_NEAR(p.layers[11].fc1_keep, 0.7, 1e-12);
    for (std::size_t l = 0; l < 6; ++l) EXPECT_EQ(p.layers[l].fc2_keep, 1.0);
    EXPECT_NEAR(p.layers[6].fc2_keep, 0.5, 1e-12);
    EXPECT_NEAR(p.layers[11].fc2_keep, 0.1, 1e-12);
    EXPECT_NEAR(p.layers[0].sample_rate, 0.02, 1e-12);
    EXPECT_NEAR(p.layers[11].sample_rate, 0.2, 1e-12);
    EXPECT_EQ(p.layers[3].lambda_cls, 2.0);
    EXPECT_EQ(p.layers[3].lambda_patch, 1.0);
    EXPECT_NO_THROW(p.validate(toast::ModelConfig::deit_base()));
}

TEST(TcsPolicy, ValidationAndJson) {
    const auto config = support::toy_config();
    auto p = toast::TcsPolicy::uniform(2, 0.9, 0.4, 0.05, 12);
    p.mode = toast::TcsMode::static_selection;
    EXPECT_EQ(toast::tcs_policy_from_json(toast::to_json(p)), p);
    EXPECT_EQ(toast::to_json(p).at("mode"), "static");

    auto bad = p;
    bad.layers[1].sample_rate = 0.5;
    EXPECT_THROW(bad.validate(config), toast::InputError);
    bad = p;
    bad.layers[0].fc2_keep = 0.0;
    EXPECT_THROW(bad.validate(config), toast::InputError);
    EXPECT_THROW(toast::TcsPolicy::uniform(3, 1, 1, 1).validate(config), toast::ShapeError);

    const auto resolved = p.resolved_for(support::toy_config(2, false));
    for (const auto& lp : resolved.layers) EXPECT_EQ(lp.lambda_cls, 0.0);
}
