#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "tlkit/config_json.hpp"
#include "tlkit/cost_model.hpp"
#include "tlkit/train.hpp"

// Scripted comparisons over named ModelConfig variants sharing one dataset
// and training recipe: tokenizer kinds, fuser kinds, placement, S. Rows are
// a function of (plan, seeds) only.

namespace tlkit {

struct AblationVariant {
    std::string name;
    ModelConfig model;
};

struct AblationPlanSpec {
    std::vector<AblationVariant> variants;
    SyntheticTaskSpec dataset;
    int train_samples = 512;
    int eval_samples = 256;
    TrainConfig train;
    std::uint64_t model_seed = 1;
    std::string output_prefix;  // when non-empty: writes <prefix>.csv and <prefix>.txt
};

struct AblationRow {
    std::string name;
    double final_train_accuracy = 0.0;
    int steps_to_95 = -1;
    double eval_accuracy = 0.0;
    double eval_loss = 0.0;
    double gflops = 0.0;
    long long params = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::string csv;
    std::string text;
};

inline AblationPlanSpec ablation_plan_from_json(const nlohmann::json& j) {
    using detail::get_or;
    detail::reject_unknown(j, "plan", {"variants", "dataset", "train", "train_samples",
                                       "eval_samples", "model_seed", "output"});
    AblationPlanSpec plan;
    if (!j.contains("variants") || !j.at("variants").is_array() || j.at("variants").empty()) {
        throw ConfigError("plan.variants must be a non-empty array");
    }
    for (const auto& v : j.at("variants")) {
        detail::reject_unknown(v, "variant", {"name", "model"});
        AblationVariant var;
        var.name = get_or<std::string>(v, "name", "");
        if (var.name.empty()) throw ConfigError("every variant needs a non-empty 'name'");
        if (!v.contains("model")) throw ConfigError("variant '" + var.name + "' is missing 'model'");
        var.model = model_config_from_json(v.at("model"));
        plan.variants.push_back(std::move(var));
    }
    if (j.contains("dataset")) plan.dataset = task_spec_from_json(j.at("dataset"));
    if (j.contains("train")) plan.train = train_config_from_json(j.at("train"));
    plan.train_samples = get_or(j, "train_samples", plan.train_samples);
    plan.eval_samples = get_or(j, "eval_samples", plan.eval_samples);
    plan.model_seed = get_or<std::uint64_t>(j, "model_seed", plan.model_seed);
    plan.output_prefix = get_or<std::string>(j, "output", plan.output_prefix);
    return plan;
}

inline AblationPlanSpec load_ablation_plan(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open ablation plan '" + path + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in '" + path + "': " + e.what());
    }
    return ablation_plan_from_json(j);
}

inline AblationReport run_ablation(const AblationPlanSpec& plan) {
    if (plan.variants.empty()) throw ConfigError("ablation plan has no variants");
    // All variants must share the input geometry and class count, and every
    // one must build before any training starts.
    const ModelConfig& first = plan.variants.front().model;
    std::vector<Model> models;
    for (const AblationVariant& v : plan.variants) {
        const ModelConfig& m = v.model;
        if (m.input.height != first.input.height || m.input.width != first.input.width ||
            m.input.frames != first.input.frames || m.input.channels != first.input.channels) {
            throw ConfigError("variant '" + v.name + "' input shape differs from '" +
                              plan.variants.front().name + "'");
        }
        if (m.head.classes != first.head.classes) {
            throw ConfigError("variant '" + v.name + "' class count differs from '" +
                              plan.variants.front().name + "'");
        }
        models.push_back(Model::build(m, plan.model_seed));
    }

    SyntheticTaskSpec train_spec = plan.dataset;
    SyntheticTaskSpec eval_spec = plan.dataset;
    eval_spec.seed = plan.dataset.seed + 1;
    const Dataset train_set = generate_dataset(train_spec, plan.train_samples);
    const Dataset eval_set = generate_dataset(eval_spec, plan.eval_samples);

    AblationReport report;
    report.csv = "name,final_train_accuracy,steps_to_95,eval_accuracy,eval_loss,gflops,params\n";
    report.text = "ablation report\n";
    for (std::size_t i = 0; i < plan.variants.size(); ++i) {
        const AblationVariant& v = plan.variants[i];
        Trainer trainer(models[i], plan.train);
        const TrainResult tr = trainer.run(train_set);
        const EvalResult ev = evaluate_model(models[i], eval_set);
        const CostReport cost = count_flops(v.model);
        AblationRow row;
        row.name = v.name;
        row.final_train_accuracy = tr.final_accuracy;
        row.steps_to_95 = tr.steps_to_95;
        row.eval_accuracy = ev.accuracy;
        row.eval_loss = ev.loss;
        row.gflops = cost.gflops();
        row.params = cost.total_params;
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%d,%.6f,%.12g,%.9g,%lld\n", row.name.c_str(),
                      row.final_train_accuracy, row.steps_to_95, row.eval_accuracy, row.eval_loss,
                      row.gflops, row.params);
        report.csv += buf;
        std::snprintf(buf, sizeof(buf),
                      "  %-24s train_acc %.3f  steps_to_95 %5d  eval_acc %.3f  GFLOPs %.6g  params %lld\n",
                      row.name.c_str(), row.final_train_accuracy, row.steps_to_95,
                      row.eval_accuracy, row.gflops, row.params);
        report.text += buf;
        report.rows.push_back(std::move(row));
    }
    if (!plan.output_prefix.empty()) {
        write_text_file(plan.output_prefix + ".csv", report.csv);
        write_text_file(plan.output_prefix + ".txt", report.text);
    }
    return report;
}

}  // namespace tlkit
