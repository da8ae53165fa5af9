#include <chrono>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tlkit/cost_model.hpp"

using namespace tlkit;

namespace {

ModelConfig vit(int image, int patch, int width, int depth, int heads, int classes = 1000) {
    ModelConfig cfg;
    cfg.input = {image, image, 1, 3};
    cfg.patch = {patch, 1};
    cfg.width = width;
    cfg.depth = depth;
    cfg.heads = heads;
    cfg.head.classes = classes;
    return cfg;
}

ModelConfig with_tl(ModelConfig cfg, int tokens, int insert, bool fuser = false) {
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = tokens;
    cfg.tokenlearner.insert_after_layer = insert;
    cfg.tokenfuser.enabled = fuser;
    return cfg;
}

ModelConfig b16() { return vit(384, 16, 768, 12, 12); }
ModelConfig l16_512() { return vit(512, 16, 1024, 24, 16); }

void expect_within(double value_g, double paper_g, double rel_tol, const char* what) {
    EXPECT_NEAR(value_g, paper_g, rel_tol * paper_g) << what << ": computed " << value_g
                                                     << " GFLOPs vs published " << paper_g;
}

}  // namespace

TEST(GoldenFlops, PublishedTableValuesWithinTenPercent) {
    const auto t0 = std::chrono::steady_clock::now();

    expect_within(count_flops(b16()).gflops(), 55.6, 0.10, "ViT-B/16 @384");
    expect_within(count_flops(with_tl(b16(), 8, 6)).gflops(), 28.7, 0.10, "8-TL at 6, B/16");
    expect_within(count_flops(vit(384, 32, 384, 12, 6)).gflops(), 3.4, 0.10, "ViT-S/32 @384");
    expect_within(count_flops(l16_512()).gflops(), 363.1, 0.10, "ViT-L/16 @512");
    expect_within(count_flops(with_tl(l16_512(), 16, 12)).gflops(), 178.1, 0.10,
                  "16-TL at 12, L/16 @512");
    expect_within(count_flops(with_tl(vit(384, 16, 1024, 24, 16), 16, 6)).gflops(), 51.92, 0.10,
                  "16-TL at 6, L/16 @384");
    {
        ModelConfig cfg = l16_512();
        cfg.reduction.kind = PoolKind::Pool2x2;
        cfg.reduction.layers = {12, 18};
        expect_within(count_flops(cfg).gflops(), 187.2, 0.10, "2x2 pool at 12 and 18, L/16 @512");
    }
    expect_within(count_flops(with_tl(l16_512(), 16, 12)).gflops(), 184.6, 0.10,
                  "16-TL at 12, L/16 @512 (ablation table)");

    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(ms, 1000.0);
}

// Convention-free: ratios of table entries must hold no matter how a MAC is
// counted.
TEST(GoldenFlops, ConventionFreeRatios) {
    const double base_b = static_cast<double>(analyze_cost(b16()).total_flops_raw);
    const double tl_b = static_cast<double>(analyze_cost(with_tl(b16(), 8, 6)).total_flops_raw);
    EXPECT_NEAR(tl_b / base_b, 28.7 / 55.6, 0.03);

    const double base_l = static_cast<double>(analyze_cost(l16_512()).total_flops_raw);
    const double tl_l = static_cast<double>(analyze_cost(with_tl(l16_512(), 16, 12)).total_flops_raw);
    EXPECT_NEAR(tl_l / base_l, 178.1 / 363.1, 0.03);
}

TEST(GoldenFlops, CalibrationPicksOneConventionGlobally) {
    const int divisor = calibrated_convention_divisor();
    EXPECT_TRUE(divisor == 1 || divisor == 2);
    EXPECT_EQ(count_flops(b16()).convention_divisor, divisor);
    EXPECT_EQ(count_flops(l16_512()).convention_divisor, divisor);
}

TEST(GoldenParams, ViViTLSized308M) {
    // ViViT-L/16: 32-frame 224x224 video, 16x16x2 tubelets, 24 layers,
    // width 1024, Kinetics-400 head.
    ModelConfig cfg;
    cfg.input = {224, 224, 32, 3};
    cfg.patch = {16, 2};
    cfg.width = 1024;
    cfg.depth = 24;
    cfg.heads = 16;
    cfg.head.classes = 400;
    const long long params = count_params(cfg).total_params;
    EXPECT_NEAR(static_cast<double>(params), 308e6, 0.03 * 308e6);
}

TEST(GoldenParams, DenseAndTokenLearnerFormulas) {
    // in*out + out for a dense layer, via the head entry.
    ModelConfig cfg = vit(32, 16, 8, 1, 2, 5);
    const CostReport report = count_params(cfg);
    const CostEntry& head = report.entries.back();
    EXPECT_EQ(head.params, 2 * 8 + 8 * 5 + 5);  // LN + dense

    // TL conv4 parameter formula 9*(C*S) + 27*S^2 + 4*S against a really
    // constructed layer.
    Rng rng(3);
    ParamRegistry reg;
    const int c = 8, s = 4;
    TokenLearnerLayer::make(reg, "tl", c, s, TokenizerVariant::Conv4, rng);
    EXPECT_EQ(reg.total_parameters(), static_cast<std::size_t>(9 * c * s + 27 * s * s + 4 * s));
}

// The analytical parameter count must equal the number of parameters a real
// build registers, layer for layer.
TEST(GoldenParams, AnalyticalCountMatchesBuiltModels) {
    std::vector<ModelConfig> cfgs;
    {
        ModelConfig cfg = vit(16, 4, 8, 2, 2, 4);
        cfgs.push_back(cfg);
        cfgs.push_back(with_tl(cfg, 3, 1));
        cfgs.push_back(with_tl(cfg, 2, 1, true));
        ModelConfig extra = with_tl(cfg, 2, 2, true);
        extra.extra_layers = 2;
        cfgs.push_back(extra);
        ModelConfig mlp = with_tl(cfg, 2, 1);
        mlp.tokenlearner.variant = TokenizerKind::Mlp;
        cfgs.push_back(mlp);
        ModelConfig fixed = with_tl(cfg, 4, 1);
        fixed.tokenlearner.variant = TokenizerKind::FixedGrid;
        cfgs.push_back(fixed);
        ModelConfig dd = with_tl(cfg, 2, 1);
        dd.tokenlearner.variant = TokenizerKind::DirectDense;
        cfgs.push_back(dd);
        ModelConfig pm = with_tl(cfg, 2, 1);
        pm.tokenlearner.variant = TokenizerKind::PoolMlp;
        cfgs.push_back(pm);
        ModelConfig unpool = with_tl(cfg, 2, 1, true);
        unpool.tokenfuser.alt = FuserKind::Unpool;
        cfgs.push_back(unpool);
        ModelConfig reproj = with_tl(cfg, 2, 1, true);
        reproj.tokenfuser.alt = FuserKind::Reproject;
        cfgs.push_back(reproj);
        ModelConfig video = with_tl(cfg, 2, 1, true);
        video.input.frames = 4;
        video.patch.tubelet_depth = 2;
        cfgs.push_back(video);
        ModelConfig pooled = cfg;
        pooled.reduction.kind = PoolKind::Pool2x2;
        pooled.reduction.layers = {2};
        cfgs.push_back(pooled);
    }
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        const Model model = Model::build(cfgs[i], 1);
        const CostReport report = count_params(cfgs[i]);
        EXPECT_EQ(static_cast<long long>(model.params().total_parameters()), report.total_params)
            << "config " << i;
        // Per-layer totals must agree too.
        for (const CostEntry& e : report.entries) {
            long long got = 0;
            for (const auto& [name, t] : model.params().items()) {
                if (name.rfind(e.layer + "/", 0) == 0) got += static_cast<long long>(t.numel());
            }
            EXPECT_EQ(got, e.params) << "config " << i << " layer " << e.layer;
        }
    }
}

TEST(PlacementSweep, MonotoneAndHalvedAtMidpoint) {
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<double> fractions;
    for (int k = 0; k <= 12; ++k) fractions.push_back(k / 12.0);
    const std::vector<CostReport> sweep = placement_sweep(b16(), fractions);
    ASSERT_EQ(sweep.size(), fractions.size());
    for (std::size_t i = 1; i < sweep.size(); ++i) {
        EXPECT_GE(sweep[i].total_flops_raw, sweep[i - 1].total_flops_raw);
    }
    // Fraction 0 is the sweep minimum.
    for (const CostReport& r : sweep) EXPECT_GE(r.total_flops_raw, sweep[0].total_flops_raw);

    const double baseline = count_flops(b16()).flops();
    const double mid = sweep[6].flops();
    EXPECT_GE(mid / baseline, 0.45);
    EXPECT_LE(mid / baseline, 0.60);

    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(ms, 1000.0);
}

TEST(PlacementSweep, FractionOutsideUnitIntervalThrows) {
    EXPECT_THROW(placement_sweep(b16(), {1.5}), ConfigError);
}

// Post-insertion blocks must cost the same no matter the input resolution:
// their cost depends only on S*T and C.
TEST(CostInvariants, PostTokenLearnerCostIndependentOfResolution) {
    const ModelConfig small = with_tl(b16(), 8, 0);
    ModelConfig big = with_tl(b16(), 8, 0);
    big.input.height = big.input.width = 768;  // double the resolution
    const CostReport rs = analyze_cost(small);
    const CostReport rb = analyze_cost(big);
    for (std::size_t i = 0; i < rs.entries.size(); ++i) {
        if (rs.entries[i].layer.rfind("block", 0) == 0) {
            EXPECT_EQ(rs.entries[i].flops_raw, rb.entries[i].flops_raw) << rs.entries[i].layer;
        }
    }
}

TEST(CostInvariants, TotalsEqualSumOfEntries) {
    for (const ModelConfig& cfg : {b16(), with_tl(l16_512(), 16, 12, true)}) {
        const CostReport r = count_flops(cfg);
        long long flops = 0, params = 0;
        for (const CostEntry& e : r.entries) {
            flops += e.flops_raw;
            params += e.params;
        }
        EXPECT_EQ(flops, r.total_flops_raw);
        EXPECT_EQ(params, r.total_params);
    }
}
