#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tlkit/model.hpp"

// Analytical FLOPs / parameter counting over a ModelConfig's static plan.
// Raw counts treat a multiply-accumulate as 2 FLOPs; reported numbers divide
// by a single global convention divisor calibrated once against the
// reference ViT-B/16 @384 baseline (the literature mixes MAC-as-1 and
// MAC-as-2 and the tables do not say which they use). Layer norm, softmax,
// gelu and bias adds are counted linearly in element count; they contribute
// well under 1%.

namespace tlkit {

struct CostEntry {
    std::string layer;
    long long tokens = 0;  // tokens produced by the layer
    long long flops_raw = 0;
    long long params = 0;
};

struct CostReport {
    std::string title;
    std::vector<CostEntry> entries;
    long long total_flops_raw = 0;
    long long total_params = 0;
    int convention_divisor = 2;

    double flops() const {
        return static_cast<double>(total_flops_raw) / convention_divisor;
    }
    double gflops() const { return flops() / 1e9; }
    double entry_flops(const CostEntry& e) const {
        return static_cast<double>(e.flops_raw) / convention_divisor;
    }
};

namespace cost {

inline long long dense_flops(long long rows, long long in, long long out) {
    return 2 * rows * in * out + rows * out;
}
inline long long gelu_flops(long long n) { return 15 * n; }
inline long long sigmoid_flops(long long n) { return 10 * n; }
inline long long softmax_flops(long long entries) { return 5 * entries; }
inline long long layer_norm_flops(long long elems) { return 8 * elems; }

inline long long block_flops(long long n, long long c, long long heads) {
    long long f = 0;
    f += 2 * layer_norm_flops(n * c);
    f += 3 * dense_flops(n, c, c);        // q, k, v
    f += 2 * n * n * c;                   // logits (all heads)
    f += heads * n * n;                   // 1/sqrt(d_h) scaling
    f += softmax_flops(heads * n * n);
    f += 2 * n * n * c;                   // attn * V
    f += dense_flops(n, c, c);            // output projection
    f += n * c;                           // residual
    f += dense_flops(n, c, 4 * c);
    f += gelu_flops(n * 4 * c);
    f += dense_flops(n, 4 * c, c);
    f += n * c;                           // residual
    return f;
}

inline long long block_params(long long c) { return 12 * c * c + 13 * c; }

struct LayerCost {
    long long flops = 0;
    long long params = 0;
};

inline LayerCost tokenlearn_cost(const ModelConfig& cfg, long long pixels, long long frames) {
    const long long c = cfg.width;
    const long long s = cfg.tokenlearner.tokens;
    LayerCost lc;
    switch (cfg.tokenlearner.variant) {
        case TokenizerKind::Conv4: {
            long long per_frame = 2 * 9 * c * s * pixels + s * pixels;           // conv1
            per_frame += 3 * (2 * 9 * s * s * pixels + s * pixels);              // conv2..4
            per_frame += 3 * gelu_flops(s * pixels) + sigmoid_flops(s * pixels);
            per_frame += 2 * pixels * s * c + s * c;                             // weighted pool
            lc.flops = per_frame * frames;
            lc.params = 9 * c * s + 27 * s * s + 4 * s;
            break;
        }
        case TokenizerKind::Mlp: {
            const long long hid = std::max(s, c / 2);
            long long per_frame = dense_flops(pixels, c, hid) + gelu_flops(pixels * hid);
            per_frame += dense_flops(pixels, hid, s) + sigmoid_flops(pixels * s);
            per_frame += 2 * pixels * s * c + s * c;
            lc.flops = per_frame * frames;
            lc.params = c * hid + hid + hid * s + s;
            break;
        }
        case TokenizerKind::FixedGrid:
            lc.flops = pixels * c * frames;
            lc.params = 0;
            break;
        case TokenizerKind::DirectDense:
            lc.flops = dense_flops(1, pixels * c, s * c) * frames;
            lc.params = pixels * c * s * c + s * c;
            break;
        case TokenizerKind::PoolMlp:
            lc.flops = (pixels * c + dense_flops(1, c, c) + gelu_flops(c) +
                        dense_flops(1, c, s * c)) * frames;
            lc.params = c * c + c + c * s * c + s * c;
            break;
    }
    return lc;
}

inline LayerCost tokenfuse_cost(const ModelConfig& cfg, long long pixels, long long frames) {
    const long long c = cfg.width;
    const long long s = cfg.tokenlearner.tokens;
    LayerCost lc;
    switch (cfg.tokenfuser.alt) {
        case FuserKind::Learned: {
            const long long st = s * frames;
            lc.flops = 2 * st * st * c;  // token-wise mix over all S*T tokens
            long long per_frame = dense_flops(pixels, c, s) + sigmoid_flops(pixels * s);
            per_frame += 2 * pixels * s * c + pixels * c;
            lc.flops += per_frame * frames;
            lc.params = st * st + c * s + s;
            break;
        }
        case FuserKind::Unpool:
            lc.flops = (2 * pixels * s * c + pixels * c) * frames;
            lc.params = 0;
            break;
        case FuserKind::Reproject: {
            long long per_frame = dense_flops(pixels, c, c) + 2 * dense_flops(s, c, c);
            per_frame += 2 * pixels * s * c + pixels * s;          // logits + scaling
            per_frame += softmax_flops(pixels * s);
            per_frame += 2 * pixels * s * c;                       // attn * V
            per_frame += dense_flops(pixels, c, c) + pixels * c;   // out proj + residual
            lc.flops = per_frame * frames;
            lc.params = 4 * (c * c + c);
            break;
        }
    }
    return lc;
}

}  // namespace cost

// Per-layer FLOPs and parameters for a config; the single analysis behind
// both count_flops and count_params.
inline CostReport analyze_cost(const ModelConfig& cfg) {
    const ModelPlan plan = plan_model(cfg);
    const long long c = cfg.width;
    CostReport report;
    for (const PlanStep& st : plan.steps) {
        CostEntry e;
        e.layer = st.name;
        e.tokens = st.tokens_out;
        switch (st.kind) {
            case StepKind::Patch: {
                const long long in_dim = static_cast<long long>(cfg.patch.size) * cfg.patch.size *
                                         cfg.patch.tubelet_depth * cfg.input.channels;
                e.flops_raw = cost::dense_flops(st.tokens_out, in_dim, c) + st.tokens_out * c;
                e.params = in_dim * c + c + st.tokens_out * c;
                break;
            }
            case StepKind::Block:
                e.flops_raw = cost::block_flops(st.tokens_in, c, cfg.heads);
                e.params = cost::block_params(c);
                break;
            case StepKind::TokenLearn: {
                const auto lc = cost::tokenlearn_cost(
                    cfg, static_cast<long long>(st.grid_h) * st.grid_w, st.frames);
                e.flops_raw = lc.flops;
                e.params = lc.params;
                break;
            }
            case StepKind::TokenFuse: {
                const auto lc = cost::tokenfuse_cost(
                    cfg, static_cast<long long>(st.grid_h) * st.grid_w, st.frames);
                e.flops_raw = lc.flops;
                e.params = lc.params;
                break;
            }
            case StepKind::Pool:
                e.flops_raw = st.tokens_in * c;
                e.params = 0;
                break;
            case StepKind::Head:
                e.flops_raw = cost::layer_norm_flops(st.tokens_in * c) + st.tokens_in * c +
                              cost::dense_flops(1, c, cfg.head.classes);
                e.params = 2 * c + c * cfg.head.classes + cfg.head.classes;
                break;
        }
        report.total_flops_raw += e.flops_raw;
        report.total_params += e.params;
        report.entries.push_back(std::move(e));
    }
    return report;
}

// The global MAC convention: 2 if the paper's tables count a MAC as one
// FLOP, 1 if as two. Fixed once by whichever lands the ViT-B/16 @384
// baseline nearer its published 55.6 GFLOPs, then frozen for every report.
inline int calibrated_convention_divisor() {
    static const int divisor = [] {
        ModelConfig ref;
        ref.input = {384, 384, 1, 3};
        ref.patch = {16, 1};
        ref.width = 768;
        ref.depth = 12;
        ref.heads = 12;
        ref.head.classes = 1000;
        const double raw = static_cast<double>(analyze_cost(ref).total_flops_raw);
        const double target = 55.6e9;
        return std::abs(raw / 2.0 - target) <= std::abs(raw - target) ? 2 : 1;
    }();
    return divisor;
}

inline CostReport count_flops(const ModelConfig& cfg) {
    CostReport report = analyze_cost(cfg);
    report.convention_divisor = calibrated_convention_divisor();
    return report;
}

inline CostReport count_params(const ModelConfig& cfg) { return count_flops(cfg); }

// One report per insertion fraction (0 = before any transformer, 1 = after
// the last). Total FLOPs are monotone non-decreasing in the fraction.
inline std::vector<CostReport> placement_sweep(const ModelConfig& cfg,
                                               const std::vector<double>& fractions) {
    std::vector<CostReport> reports;
    reports.reserve(fractions.size());
    for (double f : fractions) {
        if (f < 0.0 || f > 1.0) {
            throw ConfigError("placement_sweep: fraction " + std::to_string(f) + " outside [0, 1]");
        }
        ModelConfig swept = cfg;
        swept.tokenlearner.enabled = true;
        swept.tokenlearner.insert_after_layer =
            static_cast<int>(std::llround(f * static_cast<double>(cfg.depth)));
        CostReport r = count_flops(swept);
        r.title = "tokenlearner at " + std::to_string(swept.tokenlearner.insert_after_layer) +
                  " (fraction " + std::to_string(f) + ")";
        reports.push_back(std::move(r));
    }
    return reports;
}

}  // namespace tlkit
