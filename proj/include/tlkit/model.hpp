#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tlkit/tokenfuser.hpp"
#include "tlkit/tokenlearner.hpp"

// Declarative assembly of image/video classifiers: baseline ViT/ViViT,
// architecture (a) = TokenLearner inserted once, architecture (b) = the
// remaining depth replaced by TokenLearner-Transformer-TokenFuser groups,
// and the pooling-reduction baseline. A static plan fixes the layer
// sequence and token counts; the cost model and the runtime walk the same
// plan.

namespace tlkit {

enum class TokenizerKind { Conv4, Mlp, FixedGrid, DirectDense, PoolMlp };
enum class FuserKind { Learned, Unpool, Reproject };
enum class PoolKind { None, Pool2x2, Pool4x4 };

inline bool is_attention_tokenizer(TokenizerKind k) {
    return k == TokenizerKind::Conv4 || k == TokenizerKind::Mlp;
}

struct ModelConfig {
    struct Input {
        int height = 224;
        int width = 224;
        int frames = 1;  // 1 for images
        int channels = 3;
    } input;

    struct Patch {
        int size = 16;
        int tubelet_depth = 1;  // 2 for video tubelets
        // Init scale of the learned positional table. The ViT reference value
        // 0.02 only trains at ViT widths/schedules; desk-scale runs set ~1.0
        // or the stem layer norm amplifies near-constant features and
        // training stalls in the constant-prediction minimum.
        double pos_init_std = 0.02;
    } patch;

    int width = 768;       // C
    int depth = 12;        // L
    int extra_layers = 0;  // the "+11" notation; appended after the insertion point
    int heads = 12;

    struct TokenLearnerCfg {
        bool enabled = false;
        int tokens = 8;  // S
        TokenizerKind variant = TokenizerKind::Conv4;
        int insert_after_layer = 0;  // 0 = before any transformer
    } tokenlearner;

    struct TokenFuserCfg {
        bool enabled = false;
        FuserKind alt = FuserKind::Learned;  // "none" in JSON = the learned fuser
    } tokenfuser;

    struct Reduction {
        PoolKind kind = PoolKind::None;
        // Pooling applies to the input of these 1-based layers.
        std::vector<int> layers;
    } reduction;

    struct Head {
        int classes = 1000;
    } head;
};

enum class StepKind { Patch, Block, TokenLearn, TokenFuse, Pool, Head };

struct PlanStep {
    StepKind kind;
    std::string name;
    long long tokens_in = 0;
    long long tokens_out = 0;
    int grid_h = 0;    // per-frame grid at the step input; 0 = tokens have no grid
    int grid_w = 0;
    int frames = 1;    // T'
    int pool_window = 0;
    bool in_group = false;  // part of a TL-Transformer-Fuser group
};

struct ModelPlan {
    std::vector<PlanStep> steps;
    std::vector<std::string> warnings;
    int frames_tokens = 1;  // T'
    int stem_grid_h = 0;
    int stem_grid_w = 0;
};

namespace detail {

inline void cfg_check(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace detail

inline void validate_config(const ModelConfig& cfg) {
    using detail::cfg_check;
    cfg_check(cfg.input.height >= 1, "input.height must be >= 1");
    cfg_check(cfg.input.width >= 1, "input.width must be >= 1");
    cfg_check(cfg.input.frames >= 1, "input.frames must be >= 1");
    cfg_check(cfg.input.channels >= 1, "input.channels must be >= 1");
    cfg_check(cfg.patch.size >= 1, "patch.size must be >= 1");
    cfg_check(cfg.patch.tubelet_depth >= 1, "patch.tubelet_depth must be >= 1");
    cfg_check(cfg.patch.pos_init_std >= 0.0, "patch.pos_init_std must be >= 0");
    cfg_check(cfg.input.height % cfg.patch.size == 0,
              "input.height (" + std::to_string(cfg.input.height) + ") not divisible by patch.size (" +
                  std::to_string(cfg.patch.size) + ")");
    cfg_check(cfg.input.width % cfg.patch.size == 0,
              "input.width (" + std::to_string(cfg.input.width) + ") not divisible by patch.size (" +
                  std::to_string(cfg.patch.size) + ")");
    cfg_check(cfg.input.frames % cfg.patch.tubelet_depth == 0,
              "input.frames (" + std::to_string(cfg.input.frames) +
                  ") not divisible by patch.tubelet_depth (" +
                  std::to_string(cfg.patch.tubelet_depth) + ")");
    cfg_check(cfg.width >= 1, "width must be >= 1");
    cfg_check(cfg.depth >= 1, "depth must be >= 1");
    cfg_check(cfg.heads >= 1, "heads must be >= 1");
    cfg_check(cfg.width % cfg.heads == 0, "heads (" + std::to_string(cfg.heads) +
                                              ") must divide width (" + std::to_string(cfg.width) + ")");
    cfg_check(cfg.extra_layers >= 0, "extra_layers must be >= 0");
    cfg_check(cfg.extra_layers == 0 || cfg.tokenlearner.enabled,
              "extra_layers requires tokenlearner.enabled");
    cfg_check(cfg.head.classes >= 1, "head.classes must be >= 1");
    if (cfg.tokenlearner.enabled) {
        cfg_check(cfg.tokenlearner.tokens >= 1, "tokenlearner.tokens must be >= 1");
        cfg_check(cfg.tokenlearner.insert_after_layer >= 0 &&
                      cfg.tokenlearner.insert_after_layer <= cfg.depth,
                  "tokenlearner.insert_after_layer must be in [0, depth=" +
                      std::to_string(cfg.depth) + "], got " +
                      std::to_string(cfg.tokenlearner.insert_after_layer));
    }
    if (cfg.tokenfuser.enabled) {
        cfg_check(cfg.tokenlearner.enabled, "tokenfuser.enabled requires tokenlearner.enabled");
        if (cfg.tokenfuser.alt == FuserKind::Unpool) {
            cfg_check(is_attention_tokenizer(cfg.tokenlearner.variant),
                      "tokenfuser.alt=unpool requires an attention tokenizer "
                      "(tokenlearner.variant conv4 or mlp)");
        }
    }
    if (cfg.reduction.kind != PoolKind::None) {
        cfg_check(!cfg.reduction.layers.empty(), "reduction.layers must be non-empty");
        int prev = 0;
        for (int l : cfg.reduction.layers) {
            cfg_check(l >= 1 && l <= cfg.depth,
                      "reduction.layers entries must be in [1, depth=" + std::to_string(cfg.depth) +
                          "], got " + std::to_string(l));
            cfg_check(l > prev, "reduction.layers must be strictly increasing");
            prev = l;
        }
        if (cfg.tokenlearner.enabled) {
            cfg_check(cfg.reduction.layers.back() <= cfg.tokenlearner.insert_after_layer,
                      "reduction.layers must not extend past tokenlearner.insert_after_layer (" +
                          std::to_string(cfg.tokenlearner.insert_after_layer) + ")");
        }
    }
}

inline ModelPlan plan_model(const ModelConfig& cfg) {
    validate_config(cfg);
    ModelPlan plan;
    const int t_tokens = cfg.input.frames / cfg.patch.tubelet_depth;
    int gh = cfg.input.height / cfg.patch.size;
    int gw = cfg.input.width / cfg.patch.size;
    plan.frames_tokens = t_tokens;
    plan.stem_grid_h = gh;
    plan.stem_grid_w = gw;
    const int s = cfg.tokenlearner.tokens;

    long long tokens = static_cast<long long>(t_tokens) * gh * gw;
    auto push = [&](StepKind kind, std::string name, long long t_in, long long t_out, int grid_h,
                    int grid_w, int pool_window = 0, bool in_group = false) {
        PlanStep st;
        st.kind = kind;
        st.name = std::move(name);
        st.tokens_in = t_in;
        st.tokens_out = t_out;
        st.grid_h = grid_h;
        st.grid_w = grid_w;
        st.frames = t_tokens;
        st.pool_window = pool_window;
        st.in_group = in_group;
        plan.steps.push_back(std::move(st));
    };

    push(StepKind::Patch, "patch", 0, tokens, gh, gw);

    if (cfg.tokenlearner.enabled && s >= gh * gw) {
        plan.warnings.push_back("tokenlearner.tokens (S=" + std::to_string(s) +
                                ") is not smaller than the per-frame grid (" + std::to_string(gh) +
                                "x" + std::to_string(gw) + "); no token reduction happens");
    }
    if (cfg.tokenlearner.enabled && cfg.tokenlearner.variant == TokenizerKind::FixedGrid) {
        // Fail at plan time, before any variant starts building or training.
        auto [ch, cw] = fixed_grid_cells(s);
        detail::cfg_check(gh % ch == 0 && gw % cw == 0,
                          "tokenlearner.variant=fixed_grid: grid " + std::to_string(gh) + "x" +
                              std::to_string(gw) + " not divisible into " + std::to_string(ch) +
                              "x" + std::to_string(cw) + " cells (S=" + std::to_string(s) + ")");
    }

    const int pre_blocks = cfg.tokenlearner.enabled ? cfg.tokenlearner.insert_after_layer : cfg.depth;
    const int window = cfg.reduction.kind == PoolKind::Pool2x2 ? 2
                       : cfg.reduction.kind == PoolKind::Pool4x4 ? 4 : 0;
    std::size_t next_pool = 0;
    int block_index = 0;
    for (int layer = 1; layer <= pre_blocks; ++layer) {
        if (window > 0 && next_pool < cfg.reduction.layers.size() &&
            cfg.reduction.layers[next_pool] == layer) {
            detail::cfg_check(gh % window == 0 && gw % window == 0,
                              "reduction: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                                  " at layer " + std::to_string(layer) + " not divisible by " +
                                  std::to_string(window) + "x" + std::to_string(window) + " pooling");
            const long long pooled = tokens / (window * window);
            push(StepKind::Pool, "pool_at" + std::to_string(layer), tokens, pooled, gh, gw, window);
            gh /= window;
            gw /= window;
            tokens = pooled;
            ++next_pool;
        }
        push(StepKind::Block, "block" + std::to_string(block_index++), tokens, tokens, gh, gw);
    }

    if (cfg.tokenlearner.enabled) {
        const int remaining = cfg.depth - cfg.tokenlearner.insert_after_layer + cfg.extra_layers;
        const long long learned = static_cast<long long>(s) * t_tokens;
        if (!cfg.tokenfuser.enabled) {
            push(StepKind::TokenLearn, "tokenlearner0", tokens, learned, gh, gw);
            tokens = learned;
            for (int i = 0; i < remaining; ++i)
                push(StepKind::Block, "block" + std::to_string(block_index++), tokens, tokens, 0, 0);
        } else {
            const long long grid_tokens = tokens;
            for (int g = 0; g < remaining; ++g) {
                push(StepKind::TokenLearn, "tokenlearner" + std::to_string(g), grid_tokens, learned,
                     gh, gw, 0, true);
                push(StepKind::Block, "block" + std::to_string(block_index++), learned, learned, 0,
                     0, 0, true);
                push(StepKind::TokenFuse, "tokenfuser" + std::to_string(g), learned, grid_tokens,
                     gh, gw, 0, true);
            }
        }
    }

    const PlanStep& last = plan.steps.back();
    push(StepKind::Head, "head", last.tokens_out, cfg.head.classes,
         last.kind == StepKind::TokenFuse || !cfg.tokenlearner.enabled ? gh : 0,
         last.kind == StepKind::TokenFuse || !cfg.tokenlearner.enabled ? gw : 0);
    return plan;
}

struct ForwardTrace {
    // Sigmoid weight maps of the first TokenLearner, one [gh*gw x S] tensor
    // per frame.
    std::vector<Tensor> first_tl_maps;
    int tl_grid_h = 0;
    int tl_grid_w = 0;
};

struct ForwardOptions {
    // Construction test: feed zeros instead of the mixed tokens into every
    // fuse_remap, which must reduce the model to its pre-insertion stack.
    bool zero_fuser_tokens = false;
    // Abort with the first layer whose output goes non-finite.
    bool check_finite = false;
    ForwardTrace* trace = nullptr;
    // Observed token count after each non-head step; compared against the
    // static plan by the invariant tests.
    std::vector<std::pair<std::string, long long>>* token_trace = nullptr;
};

class Model {
public:
    static Model build(const ModelConfig& cfg, std::uint64_t seed) {
        Model m;
        m.cfg_ = cfg;
        m.plan_ = plan_model(cfg);
        Rng rng(seed);
        const int c = cfg.width;
        for (const PlanStep& st : m.plan_.steps) {
            switch (st.kind) {
                case StepKind::Patch: {
                    const int tokens = static_cast<int>(st.tokens_out);
                    m.stem_ = PatchEmbed::make(m.params_, st.name, cfg.patch.size,
                                               cfg.patch.tubelet_depth, cfg.input.channels, tokens,
                                               c, rng, cfg.patch.pos_init_std);
                    break;
                }
                case StepKind::Block:
                    m.blocks_.push_back(TransformerBlock::make(m.params_, st.name, c, cfg.heads, rng));
                    break;
                case StepKind::TokenLearn:
                    if (is_attention_tokenizer(cfg.tokenlearner.variant)) {
                        m.learners_.push_back(TokenLearnerLayer::make(
                            m.params_, st.name, c, cfg.tokenlearner.tokens,
                            cfg.tokenlearner.variant == TokenizerKind::Conv4 ? TokenizerVariant::Conv4
                                                                             : TokenizerVariant::Mlp,
                            rng));
                    } else {
                        AltTokenizerKind kind =
                            cfg.tokenlearner.variant == TokenizerKind::FixedGrid
                                ? AltTokenizerKind::FixedGrid
                                : cfg.tokenlearner.variant == TokenizerKind::DirectDense
                                      ? AltTokenizerKind::DirectDense
                                      : AltTokenizerKind::PoolMlp;
                        m.alt_learners_.push_back(AltTokenizer::make(m.params_, st.name, kind,
                                                                     cfg.tokenlearner.tokens, c,
                                                                     st.grid_h, st.grid_w, rng));
                    }
                    break;
                case StepKind::TokenFuse:
                    if (cfg.tokenfuser.alt == FuserKind::Learned) {
                        m.fusers_.push_back(TokenFuserLayer::make(m.params_, st.name, c,
                                                                  cfg.tokenlearner.tokens,
                                                                  m.plan_.frames_tokens, rng));
                    } else {
                        m.alt_fusers_.push_back(AltFuser::make(
                            m.params_, st.name,
                            cfg.tokenfuser.alt == FuserKind::Unpool ? AltFuserKind::Unpool
                                                                    : AltFuserKind::Reproject,
                            c, rng));
                    }
                    break;
                case StepKind::Pool:
                    break;
                case StepKind::Head:
                    m.head_ = ClassifierHead::make(m.params_, st.name, c, cfg.head.classes, rng);
                    break;
            }
        }
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    const ModelPlan& plan() const { return plan_; }
    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }

    // Logits [1 x K] for one [HxWxC] image or [TxHxWxC] video.
    Tensor forward_sample(const Tensor& x, const ForwardOptions& opts = {}) const {
        check_input(x);
        const int c = cfg_.width;
        const int t_tokens = plan_.frames_tokens;
        Tensor tokens;  // [N x C], frame-major
        // Per-frame state for fuser groups.
        std::vector<Tensor> residual_frames;  // [gh x gw x C] each
        std::vector<Tensor> map_frames;       // [gh*gw x S] each
        int grid_h = 0, grid_w = 0;
        std::size_t bi = 0, li = 0, ai = 0, fi = 0, afi = 0;
        bool captured_maps = false;
        for (const PlanStep& st : plan_.steps) {
            switch (st.kind) {
                case StepKind::Patch:
                    tokens = patch_embed(x, stem_);
                    grid_h = st.grid_h;
                    grid_w = st.grid_w;
                    break;
                case StepKind::Block:
                    tokens = transformer_block_forward(tokens, blocks_[bi++]);
                    break;
                case StepKind::Pool: {
                    const int pixels = st.grid_h * st.grid_w;
                    std::vector<Tensor> pooled;
                    pooled.reserve(static_cast<std::size_t>(t_tokens));
                    for (int f = 0; f < t_tokens; ++f) {
                        const Tensor frame = reshape(slice_rows(tokens, f * pixels, pixels),
                                                     {st.grid_h, st.grid_w, c});
                        pooled.push_back(cell_mean(frame, st.grid_h / st.pool_window,
                                                   st.grid_w / st.pool_window));
                    }
                    tokens = t_tokens == 1 ? pooled[0] : concat_rows(pooled);
                    grid_h = st.grid_h / st.pool_window;
                    grid_w = st.grid_w / st.pool_window;
                    break;
                }
                case StepKind::TokenLearn: {
                    const int pixels = grid_h * grid_w;
                    residual_frames.clear();
                    map_frames.clear();
                    std::vector<Tensor> frame_tokens;
                    for (int f = 0; f < t_tokens; ++f) {
                        const Tensor frame = reshape(slice_rows(tokens, f * pixels, pixels),
                                                     {grid_h, grid_w, c});
                        residual_frames.push_back(frame);
                        if (is_attention_tokenizer(cfg_.tokenlearner.variant)) {
                            LearnedTokens lt = learn_tokens(frame, learners_[li]);
                            frame_tokens.push_back(lt.tokens);
                            map_frames.push_back(lt.maps);
                        } else {
                            frame_tokens.push_back(alt_tokenize(frame, alt_learners_[ai]));
                        }
                    }
                    if (is_attention_tokenizer(cfg_.tokenlearner.variant)) ++li; else ++ai;
                    tokens = t_tokens == 1 ? frame_tokens[0] : concat_rows(frame_tokens);
                    if (!captured_maps && opts.trace != nullptr && !map_frames.empty()) {
                        opts.trace->first_tl_maps = map_frames;
                        opts.trace->tl_grid_h = grid_h;
                        opts.trace->tl_grid_w = grid_w;
                    }
                    captured_maps = true;
                    break;
                }
                case StepKind::TokenFuse: {
                    const int s = cfg_.tokenlearner.tokens;
                    Tensor stream = tokens;
                    const bool learned = cfg_.tokenfuser.alt == FuserKind::Learned;
                    if (learned) stream = tokenwise_mix(stream, fusers_[fi].mix);
                    std::vector<Tensor> remapped;
                    for (int f = 0; f < t_tokens; ++f) {
                        Tensor y_t = slice_rows(stream, f * s, s);
                        if (opts.zero_fuser_tokens) y_t = scale(y_t, 0.0);
                        Tensor out_f;
                        if (learned) {
                            out_f = fuse_remap(y_t, residual_frames[static_cast<std::size_t>(f)],
                                               fusers_[fi]);
                        } else {
                            const Tensor* maps =
                                alt_fusers_[afi].kind == AltFuserKind::Unpool
                                    ? &map_frames[static_cast<std::size_t>(f)]
                                    : nullptr;
                            out_f = alt_fuse(y_t, residual_frames[static_cast<std::size_t>(f)],
                                             alt_fusers_[afi], maps);
                        }
                        remapped.push_back(reshape(out_f, {grid_h * grid_w, c}));
                    }
                    if (learned) ++fi; else ++afi;
                    tokens = t_tokens == 1 ? remapped[0] : concat_rows(remapped);
                    break;
                }
                case StepKind::Head:
                    tokens = head_.forward(tokens);
                    break;
            }
            if (opts.check_finite && !all_finite(tokens)) {
                throw NumericError("non-finite values after layer '" + st.name + "'");
            }
            if (opts.token_trace != nullptr && st.kind != StepKind::Head) {
                opts.token_trace->emplace_back(st.name, tokens.dim(0));
            }
        }
        return tokens;  // [1 x K]
    }

    // Logits [B x K].
    Tensor forward_batch(const std::vector<Tensor>& samples, const ForwardOptions& opts = {}) const {
        if (samples.empty()) throw ContractError("forward_batch: empty batch");
        std::vector<Tensor> logits;
        logits.reserve(samples.size());
        for (const Tensor& s : samples) logits.push_back(forward_sample(s, opts));
        return samples.size() == 1 ? logits[0] : concat_rows(logits);
    }

    // First-TokenLearner sigmoid maps for one sample, one [gh*gw x S] tensor
    // per frame. Requires an attention tokenizer in the model.
    ForwardTrace attention_maps(const Tensor& x) const {
        if (learners_.empty()) {
            throw ConfigError("model has no TokenLearner attention layer to visualize");
        }
        ForwardTrace trace;
        ForwardOptions opts;
        opts.trace = &trace;
        forward_sample(x, opts);
        return trace;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        for (const auto& [name, t] : params_.items()) ckpt.push_back(to_entry(name, t));
        return ckpt;
    }

    // Applies matching entries; "opt/" and "meta/" names are tolerated
    // (training state). Anything else unknown, missing, or shape-mismatched
    // is an error naming every offending tensor.
    void load_parameters(const Checkpoint& ckpt) {
        std::map<std::string, const CheckpointEntry*> by_name;
        for (const CheckpointEntry& e : ckpt) by_name[e.name] = &e;
        std::vector<std::string> problems;
        for (auto& [name, t] : params_.items()) {
            auto it = by_name.find(name);
            if (it == by_name.end()) {
                problems.push_back("missing '" + name + "'");
                continue;
            }
            if (it->second->shape != t.shape()) {
                problems.push_back("shape mismatch '" + name + "': checkpoint " +
                                   shape_str(it->second->shape) + " vs model " +
                                   shape_str(t.shape()));
            }
            by_name.erase(it);
        }
        for (const auto& [name, e] : by_name) {
            if (name.rfind("opt/", 0) != 0 && name.rfind("meta/", 0) != 0) {
                problems.push_back("unexpected '" + name + "'");
            }
        }
        if (!problems.empty()) {
            std::string msg = "checkpoint incompatible with model:";
            for (const std::string& p : problems) msg += "\n  " + p;
            throw CheckpointError(msg);
        }
        std::map<std::string, const CheckpointEntry*> again;
        for (const CheckpointEntry& e : ckpt) again[e.name] = &e;
        for (auto& [name, t] : params_.items()) entry_to_tensor(*again[name], t);
    }

private:
    static bool all_finite(const Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i)
            if (!std::isfinite(t.data()[i])) return false;
        return true;
    }

    void check_input(const Tensor& x) const {
        const bool video = cfg_.input.frames > 1;
        Shape want = video ? Shape{cfg_.input.frames, cfg_.input.height, cfg_.input.width,
                                   cfg_.input.channels}
                           : Shape{cfg_.input.height, cfg_.input.width, cfg_.input.channels};
        if (x.shape() != want) {
            throw DimensionError("forward: input " + shape_str(x.shape()) +
                                 " does not match config " + shape_str(want));
        }
    }

    ModelConfig cfg_;
    ModelPlan plan_;
    ParamRegistry params_;
    PatchEmbed stem_;
    std::vector<TransformerBlock> blocks_;
    std::vector<TokenLearnerLayer> learners_;
    std::vector<AltTokenizer> alt_learners_;
    std::vector<TokenFuserLayer> fusers_;
    std::vector<AltFuser> alt_fusers_;
    ClassifierHead head_;
};

}  // namespace tlkit
