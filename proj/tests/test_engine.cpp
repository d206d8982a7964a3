#include <gtest/gtest.h>

#include <cstring>

#include "oracles.hpp"
#include "support.hpp"
#include "toast/engine.hpp"
#include "toast/pruner.hpp"

using toast::Matrix;
using toast::ModelConfig;

namespace {

bool bit_identical(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.values().data(), b.values().data(), 4 * a.size()) == 0;
}

std::vector<double> live_dims(const ModelConfig& c) {
    std::vector<double> d;
    for (std::size_t l = 0; l < c.num_layers; ++l) d.push_back(static_cast<double>(c.live_head_dim(l)));
    return d;
}

}  // namespace

TEST(Forward, ZeroWeightsGiveResidualIdentity) {
    const auto config = support::toy_config();
    toast::ModelWeights w = toast::random_weights(config, 1);
    for (auto& b : w.blocks) {
        for (auto& hw : b.heads) {
            for (Matrix* m : {&hw.wq, &hw.wk, &hw.wv, &hw.wproj}) std::fill(m->values().begin(), m->values().end(), 0.0f);
            std::fill(hw.bq.begin(), hw.bq.end(), 0.0f);
            std::fill(hw.bk.begin(), hw.bk.end(), 0.0f);
            std::fill(hw.bv.begin(), hw.bv.end(), 0.0f);
        }
        for (Matrix* m : {&b.fc1, &b.fc2}) std::fill(m->values().begin(), m->values().end(), 0.0f);
        for (auto* v : {&b.bproj, &b.fc1_bias, &b.fc2_bias, &b.ln1_shift, &b.ln2_shift})
            std::fill(v->begin(), v->end(), 0.0f);
        std::fill(b.ln1_scale.begin(), b.ln1_scale.end(), 1.0f);
        std::fill(b.ln2_scale.begin(), b.ln2_scale.end(), 1.0f);
    }
    const Matrix x = toast::random_tokens(config, 2);
    EXPECT_TRUE(bit_identical(toast::forward(config, w, x).output, x));
}

TEST(Forward, AttentionRowsSumToOne) {
    const auto config = support::toy_config();
    const auto w = toast::random_weights(config, 5);
    const Matrix x = toast::random_tokens(config, 5);
    const auto r = toast::forward(config, w, x);
    // Every head's attention matrix, rebuilt from layer 0's normalized input.
    const Matrix h = toast::layer_norm(x, w.blocks[0].ln1_scale, w.blocks[0].ln1_shift);
    for (const auto& hw : w.blocks[0].heads) {
        Matrix q = toast::matmul(h, hw.wq), k = toast::matmul(h, hw.wk);
        toast::add_row_bias(q, hw.bq);
        toast::add_row_bias(k, hw.bk);
        Matrix s = toast::matmul_transposed(q, k);
        for (auto& v : s.values()) v /= std::sqrt(static_cast<float>(config.head_dim));
        const Matrix a = toast::stable_softmax_rows(s);
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < a.cols(); ++j) sum += a(i, j);
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
    for (const auto& lt : r.trace.layers) {
        ASSERT_EQ(lt.a_cls.size(), config.num_tokens);
        double sum = 0.0;
        for (float v : lt.a_cls) sum += v;
        EXPECT_NEAR(sum, 1.0, 1e-5);
    }
}

TEST(Forward, MatchesNaiveReferenceOnSeed11) {
    const auto config = support::toy_config();
    const auto w = toast::random_weights(config, 11);
    const Matrix x = toast::random_tokens(config, 11);
    const Matrix got = toast::forward(config, w, x).output;
    const Matrix ref = oracle::forward(w, x, live_dims(config));
    EXPECT_LE(oracle::max_abs_diff(got, ref), 1e-4);
}

TEST(Forward, AClsMatchesReferenceHeadAverage) {
    const auto config = support::toy_config(1);
    const auto w = toast::random_weights(config, 4);
    const Matrix x = toast::random_tokens(config, 4);
    const auto r = toast::forward(config, w, x);
    std::vector<double> a_cls;
    const auto& b = w.blocks[0];
    oracle::attention(oracle::layer_norm(oracle::to_dense(x), b.ln1_scale, b.ln1_shift), b,
                      static_cast<double>(config.head_dim), &a_cls);
    for (std::size_t i = 0; i < a_cls.size(); ++i) EXPECT_NEAR(r.trace.layers[0].a_cls[i], a_cls[i], 1e-6);
}

TEST(Forward, TraceShapes) {
    const auto config = support::toy_config();
    const auto r = toast::forward(config, toast::random_weights(config, 1), toast::random_tokens(config, 1));
    ASSERT_EQ(r.trace.layers.size(), config.num_layers);
    for (const auto& lt : r.trace.layers) {
        EXPECT_EQ(lt.ffn_input.rows(), config.num_tokens);
        EXPECT_EQ(lt.ffn_input.cols(), config.embed_dim);
        EXPECT_EQ(lt.fc1_act.rows(), config.num_tokens);
        EXPECT_EQ(lt.fc1_act.cols(), config.mlp_dim);
    }
}

TEST(Forward, NoClsMeansNoAttentionRow) {
    const auto config = support::toy_config(2, false);
    const auto r = toast::forward(config, toast::random_weights(config, 1), toast::random_tokens(config, 1));
    for (const auto& lt : r.trace.layers) EXPECT_TRUE(lt.a_cls.empty());
}

TEST(Forward, JointQkPermutationInvariance) {
    const auto config = support::toy_config();
    const auto w = toast::random_weights(config, 21);
    const Matrix x = toast::random_tokens(config, 21);
    const Matrix base = toast::forward(config, w, x).output;
    const std::vector<std::size_t> perm = {5, 2, 7, 0, 6, 1, 4, 3};

    auto qk = w;
    for (auto& b : qk.blocks)
        for (auto& hw : b.heads) {
            hw.wq = toast::gather_columns(hw.wq, perm);
            hw.wk = toast::gather_columns(hw.wk, perm);
            hw.bq = toast::gather(hw.bq, perm);
            hw.bk = toast::gather(hw.bk, perm);
        }
    EXPECT_LE(oracle::max_abs_diff(toast::forward(config, qk, x).output, base), 1e-5);

    auto vo = w;
    for (auto& b : vo.blocks)
        for (auto& hw : b.heads) {
            hw.wv = toast::gather_columns(hw.wv, perm);
            hw.bv = toast::gather(hw.bv, perm);
            hw.wproj = toast::gather_rows(hw.wproj, perm);
        }
    EXPECT_LE(oracle::max_abs_diff(toast::forward(config, vo, x).output, base), 1e-5);
}

TEST(Forward, DeterministicBitIdentical) {
    const auto config = support::toy_config();
    const auto w = toast::random_weights(config, 8);
    const Matrix x = toast::random_tokens(config, 8);
    EXPECT_TRUE(bit_identical(toast::forward(config, w, x).output, toast::forward(config, w, x).output));

    const auto policy = toast::TcsPolicy::uniform(config.num_layers, 0.8, 0.5, 0.2, 99);
    toast::ForwardOptions opts;
    opts.tcs = &policy;
    EXPECT_TRUE(bit_identical(toast::forward(config, w, x, opts).output, toast::forward(config, w, x, opts).output));
}

TEST(Forward, ShapeErrorsNameLayerAndTensor) {
    const auto config = support::toy_config();
    auto w = toast::random_weights(config, 1);
    w.blocks[1].fc1 = Matrix(config.embed_dim, config.mlp_dim + 1);
    try {
        toast::forward(config, w, toast::random_tokens(config, 1));
        FAIL();
    } catch (const toast::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("layer1.fc1"), std::string::npos) << e.what();
    }
    w = toast::random_weights(config, 1);
    w.blocks[0].heads[2].wk = Matrix(config.embed_dim, config.head_dim - 1);
    try {
        toast::forward(config, w, toast::random_tokens(config, 1));
        FAIL();
    } catch (const toast::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("layer0.wk.h2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(toast::forward(config, toast::random_weights(config, 1), Matrix(config.num_tokens, 31)),
                 toast::ShapeError);
}

TEST(Forward, OpCounterMatchesCountFlops) {
    auto config = support::toy_config();
    const auto w = toast::random_weights(config, 3);
    toast::OpCounter counter;
    toast::ForwardOptions opts;
    opts.counter = &counter;
    toast::forward(config, w, toast::random_tokens(config, 3), opts);
    EXPECT_EQ(counter.block_macs, toast::count_flops(config).total);

    const auto plan = toast::build_plan(config, w, 0.5, true);
    const auto pruned_config = toast::apply_plan(config, plan);
    const auto pruned = toast::apply_plan(config, w, plan);
    toast::OpCounter c2;
    opts.counter = &c2;
    toast::forward(pruned_config, pruned, toast::random_tokens(config, 3), opts);
    EXPECT_EQ(c2.block_macs, toast::count_flops(pruned_config).total);
}

TEST(CountFlops, DeitBaselines) {
    const double base = toast::count_flops(ModelConfig::deit_base()).gflops();
    const double small = toast::count_flops(ModelConfig::deit_small()).gflops();
    const double tiny = toast::count_flops(ModelConfig::deit_tiny()).gflops();
    EXPECT_NEAR(base, 17.6, 17.6 * 0.05);
    EXPECT_NEAR(small, 4.6, 4.6 * 0.05);
    EXPECT_NEAR(tiny, 1.3, 1.3 * 0.08);
}

TEST(CountFlops, MatchesHandExpandedFormula) {
    // One DeiT-Base layer: 3*N*D*D + 2*N^2*D + N*D*D attention, 2*N*D*D_mlp FFN.
    const std::uint64_t N = 197, D = 768, M = 3072;
    const auto r = toast::count_flops(ModelConfig::deit_base());
    EXPECT_EQ(r.layers[0].mhsa_flops, 3 * N * D * D + 2 * N * N * D + N * D * D);
    EXPECT_EQ(r.layers[0].ffn_flops, 2 * N * D * M);
    EXPECT_EQ(r.total, 12 * (r.layers[0].mhsa_flops + r.layers[0].ffn_flops));
}

TEST(CountFlops, FfnShareOfDeitBase) {
    const double share = toast::count_flops(ModelConfig::deit_base()).ffn_share();
    EXPECT_GE(share, 0.55);
    EXPECT_LE(share, 0.67);
}

TEST(CountFlops, HalvingExpandedHalvesFfn) {
    const auto config = ModelConfig::deit_small();
    const auto dense = toast::count_flops(config);
    std::vector<toast::FfnKeep> keep(config.num_layers, {config.embed_dim, config.mlp_dim / 2});
    const auto half = toast::count_flops(config, keep);
    EXPECT_EQ(2 * half.ffn_total, dense.ffn_total);
    EXPECT_EQ(half.mhsa_total, dense.mhsa_total);
}

TEST(CountFlops, TotalsAndReduction) {
    const auto config = ModelConfig::deit_tiny();
    const auto r = toast::count_flops(config);
    EXPECT_EQ(r.reduction_percent, 0.0);
    std::uint64_t sum = 0;
    for (const auto& l : r.layers) sum += l.mhsa_flops + l.ffn_flops;
    EXPECT_EQ(sum, r.total);

    auto pruned = config;
    pruned.per_layer_head_dim.assign(config.num_layers, 13);
    const auto p = toast::count_flops(pruned);
    EXPECT_GT(p.reduction_percent, 0.0);
    EXPECT_LT(p.reduction_percent, 100.0);
    EXPECT_NEAR(p.reduction_percent, 100.0 * (1.0 - static_cast<double>(p.total) / static_cast<double>(r.total)), 1e-9);
}

TEST(ModelConfigJson, RoundTripAndValidation) {
    auto config = ModelConfig::deit_tiny();
    config.per_layer_head_dim[3] = 7;
    EXPECT_EQ(toast::model_config_from_json(toast::to_json(config)), config);
    auto j = toast::to_json(config);
    j["embed_dim"] = 100;
    EXPECT_THROW(toast::model_config_from_json(j), toast::ShapeError);
    EXPECT_THROW(toast::model_config_from_json(nlohmann::json{{"num_layers", 2}}), toast::InputError);
}
