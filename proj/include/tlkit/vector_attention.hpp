#pragma once

#include <string>

#include "tlkit/layers.hpp"

// Pairwise vector attention: the attention weights form an N x N x d tensor
// (one attention matrix per channel) instead of the usual N x N matrix.
// Equivalent to MHSA with d heads of dimension 1 and unscaled logits when
// the projection is the identity.

namespace tlkit {

struct VectorAttentionLayer {
    DenseLayer fq, fk, fv;  // C -> d
    DenseLayer gamma_proj;  // d -> d, instantiated only when d != C
    bool has_projection = false;
    int inner = 0;  // d

    static VectorAttentionLayer make(ParamRegistry& reg, const std::string& prefix, int width,
                                     int inner, Rng& rng) {
        VectorAttentionLayer va;
        va.inner = inner;
        va.fq = DenseLayer::make(reg, prefix + "/fq", width, inner, rng);
        va.fk = DenseLayer::make(reg, prefix + "/fk", width, inner, rng);
        va.fv = DenseLayer::make(reg, prefix + "/fv", width, inner, rng);
        va.has_projection = (inner != width);
        if (va.has_projection) {
            va.gamma_proj = DenseLayer::make(reg, prefix + "/gamma", inner, inner, rng);
        }
        return va;
    }

    static VectorAttentionLayer make(ParamRegistry& reg, const std::string& prefix, int width,
                                     Rng& rng) {
        return make(reg, prefix, width, width, rng);
    }
};

// y_i = sum_j softmax_over_j(gamma(f_q(z_i) (*) f_k(z_j))) (*) f_v(z_j).
// No 1/sqrt(d) logit scaling. Output is [N x d] (d == C by default).
inline Tensor vector_attention(const Tensor& z, const VectorAttentionLayer& layer) {
    if (z.rank() != 2 || z.dim(1) != layer.fq.in_dim()) {
        throw DimensionError("vector_attention: tokens " + shape_str(z.shape()) +
                             " vs layer input width " + std::to_string(layer.fq.in_dim()));
    }
    const int n = z.dim(0);
    const Tensor q = layer.fq.forward(z);
    const Tensor k = layer.fk.forward(z);
    const Tensor v = layer.fv.forward(z);
    Tensor pre = outer_rows_mul(q, k);  // [N*N x d]
    if (layer.has_projection) pre = layer.gamma_proj.forward(pre);
    const Tensor attn = softmax_grouped_rows(pre, n);
    return attend_rows(attn, v);
}

}  // namespace tlkit
