#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tlkit/config_json.hpp"
#include "tlkit/model.hpp"

using namespace tlkit;
using testutil::rand_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.input = {16, 16, 1, 1};
    cfg.patch = {4, 1};
    cfg.width = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.head.classes = 4;
    return cfg;
}

ModelConfig b16_like(int image = 384) {
    ModelConfig cfg;
    cfg.input = {image, image, 1, 3};
    cfg.patch = {16, 1};
    cfg.width = 768;
    cfg.depth = 12;
    cfg.heads = 12;
    cfg.head.classes = 1000;
    return cfg;
}

long long block_tokens(const ModelPlan& plan, int block_index) {
    const std::string want = "block" + std::to_string(block_index);
    for (const PlanStep& st : plan.steps) {
        if (st.name == want) return st.tokens_in;
    }
    return -1;
}

}  // namespace

TEST(Plan, BaselineB16Uses576TokensEverywhere) {
    const ModelPlan plan = plan_model(b16_like());
    for (int i = 0; i < 12; ++i) EXPECT_EQ(block_tokens(plan, i), 576);
}

TEST(Plan, TokenLearnerAtSixSplitsTheDepth) {
    ModelConfig cfg = b16_like();
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 8;
    cfg.tokenlearner.insert_after_layer = 6;
    const ModelPlan plan = plan_model(cfg);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(block_tokens(plan, i), 576);
    for (int i = 6; i < 12; ++i) EXPECT_EQ(block_tokens(plan, i), 8);
}

TEST(Plan, FuserGroupsRestoreTheGridCount) {
    ModelConfig cfg = b16_like();
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 8;
    cfg.tokenlearner.insert_after_layer = 6;
    cfg.tokenfuser.enabled = true;
    const ModelPlan plan = plan_model(cfg);
    int fusers = 0;
    for (const PlanStep& st : plan.steps) {
        if (st.kind == StepKind::TokenFuse) {
            ++fusers;
            EXPECT_EQ(st.tokens_in, 8);
            EXPECT_EQ(st.tokens_out, 576);
        }
        if (st.kind == StepKind::TokenLearn) EXPECT_EQ(st.tokens_in, 576);
    }
    EXPECT_EQ(fusers, 6);
    EXPECT_EQ(plan.steps.back().tokens_in, 576);  // head sees the restored grid
}

TEST(Plan, InsertAtZeroFeedsPatchStraightIntoTokenLearner) {
    ModelConfig cfg = tiny_config();
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 2;
    cfg.tokenlearner.insert_after_layer = 0;
    const ModelPlan plan = plan_model(cfg);
    ASSERT_GE(plan.steps.size(), 2u);
    EXPECT_EQ(plan.steps[0].kind, StepKind::Patch);
    EXPECT_EQ(plan.steps[1].kind, StepKind::TokenLearn);
    EXPECT_EQ(plan.steps[1].tokens_in, plan.steps[0].tokens_out);
}

TEST(Plan, PoolingHalvesTheGridBeforeTheNamedLayer) {
    ModelConfig cfg = b16_like();
    cfg.reduction.kind = PoolKind::Pool2x2;
    cfg.reduction.layers = {7};
    const ModelPlan plan = plan_model(cfg);
    // 576 = 24x24 -> 144 = 12x12 before block index 6 (1-based layer 7).
    for (int i = 0; i < 6; ++i) EXPECT_EQ(block_tokens(plan, i), 576);
    for (int i = 6; i < 12; ++i) EXPECT_EQ(block_tokens(plan, i), 144);
}

TEST(Plan, WarnsWhenTokensDoNotShrink) {
    ModelConfig cfg = tiny_config();  // 4x4 grid = 16 cells
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 16;
    const ModelPlan plan = plan_model(cfg);
    ASSERT_FALSE(plan.warnings.empty());
    EXPECT_NE(plan.warnings[0].find("no token reduction"), std::string::npos);
}

TEST(ConfigValidation, FieldErrorsNameTheField) {
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.insert_after_layer = 3;  // depth is 2
        try {
            plan_model(cfg);
            FAIL() << "expected ConfigError";
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find("insert_after_layer"), std::string::npos);
        }
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenfuser.enabled = true;  // without tokenlearner
        EXPECT_THROW(plan_model(cfg), ConfigError);
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.extra_layers = 3;  // without tokenlearner
        EXPECT_THROW(plan_model(cfg), ConfigError);
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.insert_after_layer = 1;
        cfg.reduction.kind = PoolKind::Pool2x2;
        cfg.reduction.layers = {2};  // past the insertion point
        EXPECT_THROW(plan_model(cfg), ConfigError);
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.reduction.kind = PoolKind::Pool4x4;
        cfg.reduction.layers = {1, 2};  // 4x4 grid pools to 1x1, then indivisible
        EXPECT_THROW(plan_model(cfg), ConfigError);
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.heads = 3;  // does not divide width 8
        EXPECT_THROW(plan_model(cfg), ConfigError);
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.input.height = 17;  // not divisible by patch 4
        EXPECT_THROW(plan_model(cfg), ConfigError);
    }
}

TEST(Forward, BatchLogitsAreFiniteAndShaped) {
    ModelConfig cfg = tiny_config();
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 2;
    cfg.tokenlearner.insert_after_layer = 1;
    Model model = Model::build(cfg, 42);
    Rng rng(1);
    const std::vector<Tensor> batch = {rand_tensor(rng, {16, 16, 1}),
                                       rand_tensor(rng, {16, 16, 1})};
    const Tensor logits = model.forward_batch(batch);
    ASSERT_EQ(logits.shape(), (Shape{2, 4}));
    for (std::size_t i = 0; i < logits.numel(); ++i) EXPECT_TRUE(std::isfinite(logits.data()[i]));
}

TEST(Forward, InputShapeMismatchThrows) {
    Model model = Model::build(tiny_config(), 1);
    EXPECT_THROW(model.forward_sample(Tensor({8, 16, 1})), DimensionError);
    EXPECT_THROW(model.forward_sample(Tensor({2, 16, 16, 1})), DimensionError);
}

// The static plan must predict the runtime token counts exactly, for every
// architecture family.
TEST(Forward, RuntimeTokenCountsMatchStaticPlan) {
    std::vector<ModelConfig> cfgs;
    {
        ModelConfig cfg = tiny_config();
        cfgs.push_back(cfg);  // baseline
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.tokens = 3;
        cfg.tokenlearner.insert_after_layer = 1;
        cfgs.push_back(cfg);  // arch (a)
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.tokens = 2;
        cfg.tokenlearner.insert_after_layer = 1;
        cfg.tokenfuser.enabled = true;
        cfg.extra_layers = 1;
        cfgs.push_back(cfg);  // arch (b) + extra layers
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.reduction.kind = PoolKind::Pool2x2;
        cfg.reduction.layers = {2};
        cfgs.push_back(cfg);  // pooling baseline
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.input.frames = 4;
        cfg.patch.tubelet_depth = 2;
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.tokens = 2;
        cfg.tokenlearner.insert_after_layer = 1;
        cfg.tokenfuser.enabled = true;
        cfgs.push_back(cfg);  // video arch (b)
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.tokens = 4;
        cfg.tokenlearner.variant = TokenizerKind::FixedGrid;
        cfg.tokenlearner.insert_after_layer = 1;
        cfgs.push_back(cfg);  // alternative tokenizer
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.tokens = 2;
        cfg.tokenlearner.insert_after_layer = 1;
        cfg.tokenfuser.enabled = true;
        cfg.tokenfuser.alt = FuserKind::Unpool;
        cfgs.push_back(cfg);  // unpool fuser
    }
    {
        ModelConfig cfg = tiny_config();
        cfg.tokenlearner.enabled = true;
        cfg.tokenlearner.tokens = 2;
        cfg.tokenlearner.insert_after_layer = 2;
        cfg.tokenfuser.enabled = true;
        cfg.tokenfuser.alt = FuserKind::Reproject;
        cfg.extra_layers = 2;
        cfgs.push_back(cfg);  // reprojection fuser
    }

    Rng rng(3);
    for (std::size_t ci = 0; ci < cfgs.size(); ++ci) {
        const Model model = Model::build(cfgs[ci], 7);
        const Tensor x = cfgs[ci].input.frames > 1
                             ? rand_tensor(rng, {cfgs[ci].input.frames, 16, 16, 1})
                             : rand_tensor(rng, {16, 16, 1});
        std::vector<std::pair<std::string, long long>> observed;
        ForwardOptions opts;
        opts.token_trace = &observed;
        model.forward_sample(x, opts);
        std::size_t oi = 0;
        for (const PlanStep& st : model.plan().steps) {
            if (st.kind == StepKind::Head) continue;
            ASSERT_LT(oi, observed.size());
            EXPECT_EQ(observed[oi].first, st.name) << "config " << ci;
            EXPECT_EQ(observed[oi].second, st.tokens_out)
                << "config " << ci << " layer " << st.name;
            ++oi;
        }
        EXPECT_EQ(oi, observed.size());
    }
}

TEST(Forward, VideoTokensNumberSTimesFrames) {
    ModelConfig cfg = tiny_config();
    cfg.input.frames = 4;
    cfg.patch.tubelet_depth = 2;
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 3;
    cfg.tokenlearner.insert_after_layer = 1;
    const ModelPlan plan = plan_model(cfg);
    for (const PlanStep& st : plan.steps) {
        if (st.kind == StepKind::TokenLearn) EXPECT_EQ(st.tokens_out, 3 * 2);  // S * T'
    }
    Model model = Model::build(cfg, 11);
    Rng rng(4);
    const Tensor logits = model.forward_sample(rand_tensor(rng, {4, 16, 16, 1}));
    EXPECT_EQ(logits.shape(), (Shape{1, 4}));
}

TEST(Forward, UntrainedCrossEntropyIsNearLogK) {
    ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 5);
    Rng rng(6);
    double total = 0.0;
    const int n = 128;
    for (int i = 0; i < n; ++i) {
        const Tensor x = rand_tensor(rng, {16, 16, 1});
        const std::vector<int> label = {rng.uniform_int(0, 3)};
        total += cross_entropy_logits(model.forward_sample(x), label).item();
    }
    const double mean = total / n;
    EXPECT_NEAR(mean, std::log(4.0), 0.1 * std::log(4.0));
}

// Arch (b) with the fuser's token contribution forced to zero must equal
// the truncated pre-insertion model with shared weights.
TEST(Forward, ZeroedFuserTokensReduceToTruncatedModel) {
    ModelConfig cfg = tiny_config();
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 2;
    cfg.tokenlearner.insert_after_layer = 1;
    cfg.tokenfuser.enabled = true;
    Model full = Model::build(cfg, 13);

    ModelConfig trunc_cfg = tiny_config();
    trunc_cfg.depth = 1;
    Model truncated = Model::build(trunc_cfg, 99);
    // Copy the shared stem/block/head weights by name.
    for (auto& [name, t] : truncated.params().items()) {
        bool found = false;
        for (const auto& [fname, ft] : full.params().items()) {
            if (fname == name) {
                ASSERT_EQ(ft.shape(), t.shape()) << name;
                std::copy(ft.data(), ft.data() + ft.numel(), t.data());
                found = true;
                break;
            }
        }
        ASSERT_TRUE(found) << "shared parameter missing: " << name;
    }

    Rng rng(7);
    const Tensor x = rand_tensor(rng, {16, 16, 1});
    ForwardOptions opts;
    opts.zero_fuser_tokens = true;
    const Tensor a = full.forward_sample(x, opts);
    const Tensor b = truncated.forward_sample(x);
    EXPECT_LT(testutil::max_abs_diff(a, b), 1e-9);
}

TEST(Forward, EndToEndGradientOnTinyConfig) {
    // 16x16 input, p=8, C=8, L=2, S=2, arch (b): every layer type on the tape.
    ModelConfig cfg;
    cfg.input = {16, 16, 1, 3};
    cfg.patch = {8, 1};
    cfg.width = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.head.classes = 3;
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 2;
    cfg.tokenlearner.insert_after_layer = 1;
    cfg.tokenfuser.enabled = true;
    Model model = Model::build(cfg, 17);
    Rng rng(8);
    const Tensor x = rand_tensor(rng, {16, 16, 3});
    const std::vector<int> label = {1};
    const double err = testutil::finite_diff_check(
        [&] { return cross_entropy_logits(model.forward_sample(x), label); },
        model.params().tensors());
    EXPECT_LT(err, 1e-5);
}

TEST(Build, SameSeedSameParameters) {
    ModelConfig cfg = tiny_config();
    cfg.tokenlearner.enabled = true;
    cfg.tokenlearner.tokens = 2;
    Model a = Model::build(cfg, 123);
    Model b = Model::build(cfg, 123);
    const auto& ia = a.params().items();
    const auto& ib = b.params().items();
    ASSERT_EQ(ia.size(), ib.size());
    for (std::size_t i = 0; i < ia.size(); ++i) {
        EXPECT_EQ(ia[i].first, ib[i].first);
        EXPECT_EQ(testutil::max_abs_diff(ia[i].second, ib[i].second), 0.0);
    }
}

TEST(Json, ModelConfigParsesAndValidates) {
    const nlohmann::json j = {
        {"input", {{"height", 16}, {"width", 16}, {"channels", 1}}},
        {"patch", {{"size", 4}}},
        {"width", 8},
        {"depth", 2},
        {"heads", 2},
        {"tokenlearner",
         {{"enabled", true}, {"tokens", 2}, {"variant", "mlp"}, {"insert_after_layer", 1}}},
        {"tokenfuser", {{"enabled", true}, {"alt", "none"}}},
        {"head", {{"classes", 4}}},
    };
    const ModelConfig cfg = model_config_from_json(j);
    EXPECT_EQ(cfg.width, 8);
    EXPECT_EQ(cfg.tokenlearner.variant, TokenizerKind::Mlp);
    EXPECT_TRUE(cfg.tokenfuser.enabled);
}

TEST(Json, UnknownFieldsAreRejected) {
    nlohmann::json j = {{"width", 8}, {"depht", 2}};
    EXPECT_THROW(model_config_from_json(j), ConfigError);
    j = {{"tokenlearner", {{"enabled", true}, {"token", 8}}}};
    EXPECT_THROW(model_config_from_json(j), ConfigError);
    j = {{"input", {{"height", 16}, {"width", 16}, {"chans", 1}}}};
    EXPECT_THROW(model_config_from_json(j), ConfigError);
}

TEST(Json, BadEnumValuesAreConfigErrors) {
    nlohmann::json j = {{"tokenlearner", {{"enabled", true}, {"variant", "conv5"}}}};
    EXPECT_THROW(model_config_from_json(j), ConfigError);
    j = {{"tokenfuser", {{"alt", "unknown"}}}};
    EXPECT_THROW(model_config_from_json(j), ConfigError);
    j = {{"reduction", {{"kind", "pool3x3"}}}};
    EXPECT_THROW(model_config_from_json(j), ConfigError);
}
