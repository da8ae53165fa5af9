#pragma once

#include <string>
#include <vector>

#include "tlkit/layers.hpp"

// TokenFuser: mix information across learned tokens with a (S*T) x (S*T)
// matrix applied per channel, then remap each frame back onto its spatial
// grid with per-pixel sigmoid combination weights plus a residual. Also the
// unpool / reprojection alternatives.

namespace tlkit {

struct TokenFuserLayer {
    Tensor mix;       // M, [(S*T) x (S*T)]
    DenseLayer beta;  // C -> S, produces the per-pixel combination logits
    int tokens = 8;   // S, per frame

    // M starts at identity plus small noise so early training approximates
    // pass-through.
    static TokenFuserLayer make(ParamRegistry& reg, const std::string& prefix, int width,
                                int tokens, int frames, Rng& rng) {
        TokenFuserLayer f;
        f.tokens = tokens;
        const int st = tokens * frames;
        Tensor m = init::trunc_normal({st, st}, rng);
        for (int i = 0; i < st; ++i) m(i, i) += 1.0;
        f.mix = reg.add(prefix + "/mix", m);
        f.beta = DenseLayer::make(reg, prefix + "/beta", width, tokens, rng);
        return f;
    }
};

// Y' = (Y^T M)^T = M^T Y: every channel's length-ST vector through the same
// learned map.
inline Tensor tokenwise_mix(const Tensor& y, const Tensor& mix) {
    if (mix.rank() != 2 || mix.dim(0) != mix.dim(1)) {
        throw DimensionError("tokenwise_mix: M must be square, got " + shape_str(mix.shape()));
    }
    if (y.rank() != 2 || y.dim(0) != mix.dim(0)) {
        throw DimensionError("tokenwise_mix: tokens " + shape_str(y.shape()) +
                             " vs mixing matrix " + shape_str(mix.shape()));
    }
    return matmul(transpose(mix), y);
}

// Eq. 2 remap for one frame: out[p] = sum_s sigmoid(beta(x_res[p]))_s * y_t[s]
// + x_res[p]. x_residual is the input the paired TokenLearner consumed.
inline Tensor fuse_remap(const Tensor& y_t, const Tensor& x_residual,
                         const TokenFuserLayer& fuser) {
    if (x_residual.rank() != 3) {
        throw DimensionError("fuse_remap: rank-3 [HxWxC] residual required, got " +
                             shape_str(x_residual.shape()));
    }
    const int h = x_residual.dim(0), w = x_residual.dim(1), c = x_residual.dim(2);
    if (y_t.rank() != 2 || y_t.dim(0) != fuser.tokens || y_t.dim(1) != c) {
        throw DimensionError("fuse_remap: tokens " + shape_str(y_t.shape()) + " vs S=" +
                             std::to_string(fuser.tokens) + ", C=" + std::to_string(c));
    }
    const Tensor flat = reshape(x_residual, {h * w, c});
    const Tensor bw = sigmoid(fuser.beta.forward(flat));  // [H*W x S]
    return reshape(add(matmul(bw, y_t), flat), {h, w, c});
}

// ---------------------------------------------------------------------------
// alternatives (ablations)
// ---------------------------------------------------------------------------

enum class AltFuserKind { Unpool, Reproject };

// Reprojection: single-head cross-attention with queries from the pixel grid
// and keys/values from the tokens, plus the residual. Kept attention-only
// (no MLP sublayer) so a zero value projection is exactly the identity.
struct CrossAttention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static CrossAttention make(ParamRegistry& reg, const std::string& prefix, int width,
                               Rng& rng) {
        CrossAttention ca;
        ca.wq = reg.add(prefix + "/wq", init::xavier({width, width}, width, width, rng));
        ca.bq = reg.add(prefix + "/bq", Tensor::zeros({width}));
        ca.wk = reg.add(prefix + "/wk", init::xavier({width, width}, width, width, rng));
        ca.bk = reg.add(prefix + "/bk", Tensor::zeros({width}));
        ca.wv = reg.add(prefix + "/wv", init::xavier({width, width}, width, width, rng));
        ca.bv = reg.add(prefix + "/bv", Tensor::zeros({width}));
        ca.wo = reg.add(prefix + "/wo", init::xavier({width, width}, width, width, rng));
        ca.bo = reg.add(prefix + "/bo", Tensor::zeros({width}));
        return ca;
    }

    int width() const { return wq.dim(0); }

    // queries [Nq x C], context [Nk x C] -> [Nq x C]
    Tensor forward(const Tensor& queries, const Tensor& context) const {
        const int c = width();
        const Tensor q = add_bias(matmul(queries, wq), bq);
        const Tensor k = add_bias(matmul(context, wk), bk);
        const Tensor v = add_bias(matmul(context, wv), bv);
        const Tensor attn = softmax_lastdim(scale(matmul(q, transpose(k)),
                                                  1.0 / std::sqrt(static_cast<double>(c))));
        return add_bias(matmul(matmul(attn, v), wo), bo);
    }
};

struct AltFuser {
    AltFuserKind kind = AltFuserKind::Unpool;
    CrossAttention reproject;  // Reproject only

    static AltFuser make(ParamRegistry& reg, const std::string& prefix, AltFuserKind kind,
                         int width, Rng& rng) {
        AltFuser f;
        f.kind = kind;
        if (kind == AltFuserKind::Reproject) {
            f.reproject = CrossAttention::make(reg, prefix + "/reproject", width, rng);
        }
        return f;
    }
};

// unpool: out[p] = sum_s w_s[p] * y_t[s] + x_res[p], with w the paired
// TokenLearner's weight maps. reproject: cross-attention + residual.
inline Tensor alt_fuse(const Tensor& y_t, const Tensor& x_residual, const AltFuser& alt,
                       const Tensor* learner_maps = nullptr) {
    if (x_residual.rank() != 3) {
        throw DimensionError("alt_fuse: rank-3 [HxWxC] residual required, got " +
                             shape_str(x_residual.shape()));
    }
    const int h = x_residual.dim(0), w = x_residual.dim(1), c = x_residual.dim(2);
    const Tensor flat = reshape(x_residual, {h * w, c});
    if (alt.kind == AltFuserKind::Unpool) {
        if (learner_maps == nullptr || !learner_maps->defined()) {
            throw ContractError("alt_fuse: unpool requires the TokenLearner weight maps");
        }
        if (learner_maps->rank() != 2 || learner_maps->dim(0) != h * w ||
            learner_maps->dim(1) != y_t.dim(0)) {
            throw DimensionError("alt_fuse: maps " + shape_str(learner_maps->shape()) +
                                 " vs grid " + std::to_string(h * w) + " and tokens " +
                                 std::to_string(y_t.dim(0)));
        }
        return reshape(add(matmul(*learner_maps, y_t), flat), {h, w, c});
    }
    return reshape(add(alt.reproject.forward(flat, y_t), flat), {h, w, c});
}

}  // namespace tlkit
