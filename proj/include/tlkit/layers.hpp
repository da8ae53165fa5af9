#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tlkit/checkpoint.hpp"
#include "tlkit/ops.hpp"
#include "tlkit/rng.hpp"

// Standard ViT building blocks: dense, layer norm, MHSA, pre-norm
// transformer block, patch/tubelet embedding. Weights are truncated-normal
// (std 0.02), biases zero.

namespace tlkit {

// Named parameter container; iteration order is registration order, which
// fixes checkpoint layout and RNG consumption.
class ParamRegistry {
public:
    Tensor add(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        items_.emplace_back(name, t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(items_.size());
        for (const auto& [name, t] : items_) out.push_back(t);
        return out;
    }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

namespace init {

inline Tensor trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.truncated_normal(stddev);
    return t;
}

// Truncated Xavier for dense/conv kernels. A fixed 0.02 only works at
// ViT-scale widths (1/sqrt(768) is the same order); desk-scale models need
// fan-in scaling or gradients vanish.
inline Tensor xavier(Shape shape, int fan_in, int fan_out, Rng& rng) {
    return trunc_normal(std::move(shape), rng,
                        std::sqrt(2.0 / (static_cast<double>(fan_in) + fan_out)));
}

}  // namespace init

struct DenseLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]

    static DenseLayer make(ParamRegistry& reg, const std::string& prefix, int in, int out,
                           Rng& rng) {
        DenseLayer d;
        d.weight = reg.add(prefix + "/w", init::xavier({in, out}, in, out, rng));
        d.bias = reg.add(prefix + "/b", Tensor::zeros({out}));
        return d;
    }

    int in_dim() const { return weight.dim(0); }
    int out_dim() const { return weight.dim(1); }

    Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct LayerNormP {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-6;

    static LayerNormP make(ParamRegistry& reg, const std::string& prefix, int width) {
        LayerNormP ln;
        ln.gamma = reg.add(prefix + "/gamma", Tensor::full({width}, 1.0));
        ln.beta = reg.add(prefix + "/beta", Tensor::zeros({width}));
        return ln;
    }

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
};

// Multi-head self-attention. Per-head projections live as column blocks of
// the shared C x C matrices; head h owns columns [h*dh, (h+1)*dh).
struct MhsaLayer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 1;

    static MhsaLayer make(ParamRegistry& reg, const std::string& prefix, int width, int heads,
                          Rng& rng) {
        if (heads < 1 || width % heads != 0) {
            throw ConfigError("heads (" + std::to_string(heads) + ") must divide width (" +
                              std::to_string(width) + ")");
        }
        MhsaLayer m;
        m.heads = heads;
        m.wq = reg.add(prefix + "/wq", init::xavier({width, width}, width, width, rng));
        m.bq = reg.add(prefix + "/bq", Tensor::zeros({width}));
        m.wk = reg.add(prefix + "/wk", init::xavier({width, width}, width, width, rng));
        m.bk = reg.add(prefix + "/bk", Tensor::zeros({width}));
        m.wv = reg.add(prefix + "/wv", init::xavier({width, width}, width, width, rng));
        m.bv = reg.add(prefix + "/bv", Tensor::zeros({width}));
        m.wo = reg.add(prefix + "/wo", init::xavier({width, width}, width, width, rng));
        m.bo = reg.add(prefix + "/bo", Tensor::zeros({width}));
        return m;
    }

    int width() const { return wq.dim(0); }
};

// softmax(Q K^T / sqrt(d_h)) V per head, concatenated, output-projected.
inline Tensor mhsa_forward(const Tensor& tokens, const MhsaLayer& layer) {
    if (tokens.rank() != 2 || tokens.dim(1) != layer.width()) {
        throw DimensionError("mhsa_forward: tokens " + shape_str(tokens.shape()) +
                             " vs layer width " + std::to_string(layer.width()));
    }
    const int c = layer.width();
    const int dh = c / layer.heads;
    const Tensor q = add_bias(matmul(tokens, layer.wq), layer.bq);
    const Tensor k = add_bias(matmul(tokens, layer.wk), layer.bk);
    const Tensor v = add_bias(matmul(tokens, layer.wv), layer.bv);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(layer.heads));
    for (int h = 0; h < layer.heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, dh);
        const Tensor kh = slice_cols(k, h * dh, dh);
        const Tensor vh = slice_cols(v, h * dh, dh);
        const Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        const Tensor attn = softmax_lastdim(logits);
        head_outs.push_back(matmul(attn, vh));
    }
    const Tensor merged = layer.heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return add_bias(matmul(merged, layer.wo), layer.bo);
}

// Pre-norm block: x + MHSA(LN(x)), then h + MLP(LN(h)); MLP ratio 4 with
// gelu.
struct TransformerBlock {
    LayerNormP ln1;
    MhsaLayer mhsa;
    LayerNormP ln2;
    DenseLayer fc1;
    DenseLayer fc2;

    static TransformerBlock make(ParamRegistry& reg, const std::string& prefix, int width,
                                 int heads, Rng& rng, int mlp_ratio = 4) {
        TransformerBlock b;
        b.ln1 = LayerNormP::make(reg, prefix + "/ln1", width);
        b.mhsa = MhsaLayer::make(reg, prefix + "/mhsa", width, heads, rng);
        b.ln2 = LayerNormP::make(reg, prefix + "/ln2", width);
        b.fc1 = DenseLayer::make(reg, prefix + "/mlp/fc1", width, width * mlp_ratio, rng);
        b.fc2 = DenseLayer::make(reg, prefix + "/mlp/fc2", width * mlp_ratio, width, rng);
        return b;
    }
};

inline Tensor transformer_block_forward(const Tensor& tokens, const TransformerBlock& block) {
    const Tensor attn_out = mhsa_forward(block.ln1.forward(tokens), block.mhsa);
    const Tensor h = add(tokens, attn_out);
    const Tensor mlp_out = block.fc2.forward(gelu(block.fc1.forward(block.ln2.forward(h))));
    return add(h, mlp_out);
}

// Patch (images) / tubelet (videos) embedding with a learned positional
// table added once at the stem.
struct PatchEmbed {
    int patch = 16;
    int tubelet_depth = 1;
    DenseLayer proj;
    Tensor pos;  // [tokens x C]

    static PatchEmbed make(ParamRegistry& reg, const std::string& prefix, int patch,
                           int tubelet_depth, int in_channels, int tokens, int width, Rng& rng,
                           double pos_init_std = 0.02) {
        PatchEmbed pe;
        pe.patch = patch;
        pe.tubelet_depth = tubelet_depth;
        pe.proj = DenseLayer::make(reg, prefix + "/proj",
                                   patch * patch * tubelet_depth * in_channels, width, rng);
        pe.pos = reg.add(prefix + "/pos", init::trunc_normal({tokens, width}, rng, pos_init_std));
        return pe;
    }

    int token_count() const { return pos.dim(0); }
};

inline Tensor patch_embed(const Tensor& image_or_video, const PatchEmbed& embed) {
    const Tensor patches = patchify(image_or_video, embed.patch, embed.tubelet_depth);
    if (patches.dim(0) != embed.token_count()) {
        throw DimensionError("patch_embed: input yields " + std::to_string(patches.dim(0)) +
                             " tokens but positional table holds " +
                             std::to_string(embed.token_count()));
    }
    return add(embed.proj.forward(patches), embed.pos);
}

// Classification head: layer norm -> global average over tokens -> dense.
// No CLS token anywhere in this library.
struct ClassifierHead {
    LayerNormP ln;
    DenseLayer out;

    static ClassifierHead make(ParamRegistry& reg, const std::string& prefix, int width,
                               int classes, Rng& rng) {
        ClassifierHead h;
        h.ln = LayerNormP::make(reg, prefix + "/ln", width);
        h.out = DenseLayer::make(reg, prefix + "/out", width, classes, rng);
        return h;
    }

    // tokens [N x C] -> logits [1 x K]
    Tensor forward(const Tensor& tokens) const {
        const Tensor pooled = mean_rows(ln.forward(tokens));
        return out.forward(reshape(pooled, {1, pooled.dim(0)}));
    }
};

}  // namespace tlkit
