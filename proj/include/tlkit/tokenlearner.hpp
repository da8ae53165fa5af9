#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "tlkit/layers.hpp"

// Adaptive tokenization: S tokens per frame via sigmoid spatial attention
// weighting followed by spatial average pooling, plus the fixed-grid /
// direct-dense / pool+MLP alternatives behind the same output contract.

namespace tlkit {

enum class TokenizerVariant { Conv4, Mlp };

// Spatial-attention tokenizer. The attention functions alpha_i are realized
// either as four 3x3 convs with gelu between (channel width S throughout)
// or as a position-wise 2-layer MLP with hidden width max(S, C/2).
struct TokenLearnerLayer {
    TokenizerVariant variant = TokenizerVariant::Conv4;
    int tokens = 8;  // S
    int width = 0;   // C

    // conv4 variant
    std::vector<Tensor> conv_kernels;  // 4 kernels: [3x3xCxS], then [3x3xSxS] x3
    std::vector<Tensor> conv_biases;   // 4 biases [S]
    // mlp variant
    DenseLayer fc1;
    DenseLayer fc2;

    static TokenLearnerLayer make(ParamRegistry& reg, const std::string& prefix, int width,
                                  int tokens, TokenizerVariant variant, Rng& rng) {
        TokenLearnerLayer tl;
        tl.variant = variant;
        tl.tokens = tokens;
        tl.width = width;
        if (variant == TokenizerVariant::Conv4) {
            for (int i = 0; i < 4; ++i) {
                const int cin = (i == 0) ? width : tokens;
                tl.conv_kernels.push_back(reg.add(prefix + "/conv" + std::to_string(i + 1) + "/k",
                                                  init::xavier({3, 3, cin, tokens}, 9 * cin, 9 * tokens, rng)));
                tl.conv_biases.push_back(reg.add(prefix + "/conv" + std::to_string(i + 1) + "/b",
                                                 Tensor::zeros({tokens})));
            }
        } else {
            const int hidden = std::max(tokens, width / 2);
            tl.fc1 = DenseLayer::make(reg, prefix + "/fc1", width, hidden, rng);
            tl.fc2 = DenseLayer::make(reg, prefix + "/fc2", hidden, tokens, rng);
        }
        return tl;
    }
};

struct LearnedTokens {
    Tensor tokens;  // [S x C]
    Tensor maps;    // [H*W x S] sigmoid weight maps, one column per token
};

// Spatial attention logits, one channel per token slot: [H*W x S].
inline Tensor tokenlearner_logits(const Tensor& x, const TokenLearnerLayer& layer) {
    const int h = x.dim(0), w = x.dim(1);
    if (layer.variant == TokenizerVariant::Conv4) {
        Tensor a = x;
        for (int i = 0; i < 4; ++i) {
            a = conv2d_3x3(a, layer.conv_kernels[static_cast<std::size_t>(i)],
                           layer.conv_biases[static_cast<std::size_t>(i)]);
            if (i < 3) a = gelu(a);
        }
        return reshape(a, {h * w, layer.tokens});
    }
    const Tensor flat = reshape(x, {h * w, layer.width});
    return layer.fc2.forward(gelu(layer.fc1.forward(flat)));
}

// z_i = spatial-mean(x (*) broadcast(sigmoid(alpha_i(x)))) for i in 1..S.
// Identically: Z = W^T X / (H*W) with W the [H*W x S] weight-map matrix.
inline LearnedTokens learn_tokens(const Tensor& x, const TokenLearnerLayer& layer) {
    if (x.rank() != 3) {
        throw DimensionError("learn_tokens: rank-3 [HxWxC] input required, got " +
                             shape_str(x.shape()));
    }
    if (x.dim(2) != layer.width) {
        throw DimensionError("learn_tokens: input channels " + std::to_string(x.dim(2)) +
                             " vs layer width " + std::to_string(layer.width));
    }
    const int h = x.dim(0), w = x.dim(1);
    LearnedTokens out;
    out.maps = sigmoid(tokenlearner_logits(x, layer));
    const Tensor flat = reshape(x, {h * w, layer.width});
    out.tokens = scale(matmul(transpose(out.maps), flat), 1.0 / (static_cast<double>(h) * w));
    return out;
}

// Per-frame learn_tokens with shared parameters; frame-major stacking into
// [(S*T) x C].
inline LearnedTokens learn_tokens_video(const Tensor& x, const TokenLearnerLayer& layer) {
    if (x.rank() != 4) {
        throw DimensionError("learn_tokens_video: rank-4 [TxHxWxC] input required, got " +
                             shape_str(x.shape()));
    }
    const int t = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const Tensor flat = reshape(x, {t * h * w, c});
    std::vector<Tensor> token_blocks, map_blocks;
    for (int f = 0; f < t; ++f) {
        const Tensor frame = reshape(slice_rows(flat, f * h * w, h * w), {h, w, c});
        LearnedTokens lt = learn_tokens(frame, layer);
        token_blocks.push_back(lt.tokens);
        map_blocks.push_back(lt.maps);
    }
    LearnedTokens out;
    out.tokens = concat_rows(token_blocks);
    out.maps = concat_rows(map_blocks);  // [(T*H*W) x S]
    return out;
}

// ---------------------------------------------------------------------------
// alternative tokenizers
// ---------------------------------------------------------------------------

enum class AltTokenizerKind { FixedGrid, DirectDense, PoolMlp };

// Most-square factor pair of s; the smaller factor goes to rows.
inline std::pair<int, int> fixed_grid_cells(int s) {
    int best = 1;
    for (int d = 1; d * d <= s; ++d)
        if (s % d == 0) best = d;
    return {best, s / best};
}

struct AltTokenizer {
    AltTokenizerKind kind = AltTokenizerKind::FixedGrid;
    int tokens = 8;
    int width = 0;
    // direct_dense: flattened H*W*C -> S*C; pool_mlp: C -> C -> S*C.
    DenseLayer fc1;
    DenseLayer fc2;

    static AltTokenizer make(ParamRegistry& reg, const std::string& prefix,
                             AltTokenizerKind kind, int tokens, int width, int grid_h, int grid_w,
                             Rng& rng) {
        AltTokenizer at;
        at.kind = kind;
        at.tokens = tokens;
        at.width = width;
        switch (kind) {
            case AltTokenizerKind::FixedGrid: {
                auto [ch, cw] = fixed_grid_cells(tokens);
                if (grid_h % ch != 0 || grid_w % cw != 0) {
                    throw ConfigError("fixed_grid: grid " + std::to_string(grid_h) + "x" +
                                      std::to_string(grid_w) + " not divisible into " +
                                      std::to_string(ch) + "x" + std::to_string(cw) + " cells");
                }
                break;
            }
            case AltTokenizerKind::DirectDense:
                at.fc1 = DenseLayer::make(reg, prefix + "/dense", grid_h * grid_w * width,
                                          tokens * width, rng);
                break;
            case AltTokenizerKind::PoolMlp:
                at.fc1 = DenseLayer::make(reg, prefix + "/fc1", width, width, rng);
                at.fc2 = DenseLayer::make(reg, prefix + "/fc2", width, tokens * width, rng);
                break;
        }
        return at;
    }
};

inline Tensor alt_tokenize(const Tensor& x, const AltTokenizer& alt) {
    if (x.rank() != 3) {
        throw DimensionError("alt_tokenize: rank-3 [HxWxC] input required, got " +
                             shape_str(x.shape()));
    }
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (c != alt.width) {
        throw DimensionError("alt_tokenize: input channels " + std::to_string(c) +
                             " vs tokenizer width " + std::to_string(alt.width));
    }
    switch (alt.kind) {
        case AltTokenizerKind::FixedGrid: {
            auto [ch, cw] = fixed_grid_cells(alt.tokens);
            return cell_mean(x, ch, cw);
        }
        case AltTokenizerKind::DirectDense: {
            const Tensor flat = reshape(x, {1, h * w * c});
            return reshape(alt.fc1.forward(flat), {alt.tokens, c});
        }
        case AltTokenizerKind::PoolMlp: {
            const Tensor pooled = reshape(spatial_mean(x), {1, c});
            const Tensor hidden = gelu(alt.fc1.forward(pooled));
            return reshape(alt.fc2.forward(hidden), {alt.tokens, c});
        }
    }
    throw ContractError("alt_tokenize: unknown kind");
}

}  // namespace tlkit
