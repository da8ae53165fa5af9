#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tlkit/dataset.hpp"
#include "tlkit/model.hpp"
#include "tlkit/train.hpp"

// JSON <-> config structs. Unknown fields are rejected everywhere; a typo'd
// key must not silently fall back to a default.

namespace tlkit {

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& where,
                           const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown field '" + key + "' in '" + where + "'");
    }
}

template <typename T>
inline T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("field '" + key + "' has the wrong type");
    }
}

inline TokenizerKind parse_tokenizer(const std::string& s) {
    if (s == "conv4") return TokenizerKind::Conv4;
    if (s == "mlp") return TokenizerKind::Mlp;
    if (s == "fixed_grid") return TokenizerKind::FixedGrid;
    if (s == "direct_dense") return TokenizerKind::DirectDense;
    if (s == "pool_mlp") return TokenizerKind::PoolMlp;
    throw ConfigError("tokenlearner.variant must be one of conv4|mlp|fixed_grid|direct_dense|"
                      "pool_mlp, got '" + s + "'");
}

inline FuserKind parse_fuser(const std::string& s) {
    if (s == "none") return FuserKind::Learned;
    if (s == "unpool") return FuserKind::Unpool;
    if (s == "reproject") return FuserKind::Reproject;
    throw ConfigError("tokenfuser.alt must be one of none|unpool|reproject, got '" + s + "'");
}

inline PoolKind parse_pool(const std::string& s) {
    if (s == "none") return PoolKind::None;
    if (s == "pool2x2") return PoolKind::Pool2x2;
    if (s == "pool4x4") return PoolKind::Pool4x4;
    throw ConfigError("reduction.kind must be one of none|pool2x2|pool4x4, got '" + s + "'");
}

inline TaskKind parse_task(const std::string& s) {
    if (s == "locate-patch") return TaskKind::LocatePatch;
    if (s == "count-blobs") return TaskKind::CountBlobs;
    if (s == "moving-blob-direction") return TaskKind::MovingBlobDirection;
    throw ConfigError("task must be one of locate-patch|count-blobs|moving-blob-direction, got '" +
                      s + "'");
}

inline std::string tokenizer_name(TokenizerKind k) {
    switch (k) {
        case TokenizerKind::Conv4: return "conv4";
        case TokenizerKind::Mlp: return "mlp";
        case TokenizerKind::FixedGrid: return "fixed_grid";
        case TokenizerKind::DirectDense: return "direct_dense";
        case TokenizerKind::PoolMlp: return "pool_mlp";
    }
    return "conv4";
}

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    using detail::get_or;
    using detail::reject_unknown;
    ModelConfig cfg;
    reject_unknown(j, "model", {"input", "patch", "width", "depth", "extra_layers", "heads",
                                "tokenlearner", "tokenfuser", "reduction", "head"});
    if (j.contains("input")) {
        const auto& in = j.at("input");
        reject_unknown(in, "input", {"height", "width", "frames", "channels"});
        cfg.input.height = get_or(in, "height", cfg.input.height);
        cfg.input.width = get_or(in, "width", cfg.input.width);
        cfg.input.frames = get_or(in, "frames", cfg.input.frames);
        cfg.input.channels = get_or(in, "channels", cfg.input.channels);
    }
    if (j.contains("patch")) {
        const auto& p = j.at("patch");
        reject_unknown(p, "patch", {"size", "tubelet_depth", "pos_init_std"});
        cfg.patch.size = get_or(p, "size", cfg.patch.size);
        cfg.patch.tubelet_depth = get_or(p, "tubelet_depth", cfg.patch.tubelet_depth);
        cfg.patch.pos_init_std = get_or(p, "pos_init_std", cfg.patch.pos_init_std);
    }
    cfg.width = get_or(j, "width", cfg.width);
    cfg.depth = get_or(j, "depth", cfg.depth);
    cfg.extra_layers = get_or(j, "extra_layers", cfg.extra_layers);
    cfg.heads = get_or(j, "heads", cfg.heads);
    if (j.contains("tokenlearner")) {
        const auto& tl = j.at("tokenlearner");
        reject_unknown(tl, "tokenlearner", {"enabled", "tokens", "variant", "insert_after_layer"});
        cfg.tokenlearner.enabled = get_or(tl, "enabled", cfg.tokenlearner.enabled);
        cfg.tokenlearner.tokens = get_or(tl, "tokens", cfg.tokenlearner.tokens);
        cfg.tokenlearner.variant =
            detail::parse_tokenizer(get_or<std::string>(tl, "variant", "conv4"));
        cfg.tokenlearner.insert_after_layer =
            get_or(tl, "insert_after_layer", cfg.tokenlearner.insert_after_layer);
    }
    if (j.contains("tokenfuser")) {
        const auto& tf = j.at("tokenfuser");
        reject_unknown(tf, "tokenfuser", {"enabled", "alt"});
        cfg.tokenfuser.enabled = get_or(tf, "enabled", cfg.tokenfuser.enabled);
        cfg.tokenfuser.alt = detail::parse_fuser(get_or<std::string>(tf, "alt", "none"));
    }
    if (j.contains("reduction")) {
        const auto& r = j.at("reduction");
        reject_unknown(r, "reduction", {"kind", "layers"});
        cfg.reduction.kind = detail::parse_pool(get_or<std::string>(r, "kind", "none"));
        cfg.reduction.layers = get_or(r, "layers", cfg.reduction.layers);
    }
    if (j.contains("head")) {
        const auto& h = j.at("head");
        reject_unknown(h, "head", {"classes"});
        cfg.head.classes = get_or(h, "classes", cfg.head.classes);
    }
    validate_config(cfg);
    return cfg;
}

inline ModelConfig load_model_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open model config '" + path + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in '" + path + "': " + e.what());
    }
    return model_config_from_json(j);
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    using detail::get_or;
    detail::reject_unknown(j, "train", {"steps", "batch_size", "lr", "momentum", "cosine_decay",
                                        "clip_norm", "seed"});
    TrainConfig cfg;
    cfg.steps = get_or(j, "steps", cfg.steps);
    cfg.batch_size = get_or(j, "batch_size", cfg.batch_size);
    cfg.lr = get_or(j, "lr", cfg.lr);
    cfg.momentum = get_or(j, "momentum", cfg.momentum);
    cfg.cosine_decay = get_or(j, "cosine_decay", cfg.cosine_decay);
    cfg.clip_norm = get_or(j, "clip_norm", cfg.clip_norm);
    cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
    return cfg;
}

inline SyntheticTaskSpec task_spec_from_json(const nlohmann::json& j) {
    using detail::get_or;
    detail::reject_unknown(j, "dataset", {"task", "image_size", "classes", "noise", "seed", "n"});
    SyntheticTaskSpec spec;
    spec.kind = detail::parse_task(get_or<std::string>(j, "task", "locate-patch"));
    spec.image_size = get_or(j, "image_size", spec.image_size);
    if (j.contains("classes")) {
        spec.classes = j.at("classes").get<int>();
    } else {
        spec.classes = spec.kind == TaskKind::MovingBlobDirection ? 8
                       : spec.kind == TaskKind::CountBlobs ? 3 : 4;
    }
    spec.noise = get_or(j, "noise", spec.noise);
    spec.seed = get_or<std::uint64_t>(j, "seed", spec.seed);
    return spec;
}

}  // namespace tlkit
