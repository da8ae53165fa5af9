#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "tlkit/checkpoint.hpp"
#include "tlkit/dataset.hpp"
#include "tlkit/model.hpp"
#include "tlkit/ops.hpp"

// Desk-scale training: SGD with momentum, cosine LR decay, global-norm
// gradient clipping, per-step metrics CSV. Single-threaded and fully
// deterministic; parameters and momentum are rounded to f32 after every
// step so TLKT1 checkpoints (f32 payload) resume bit-exactly.

namespace tlkit {

struct TrainConfig {
    int steps = 2000;
    int batch_size = 16;
    double lr = 0.05;
    double momentum = 0.9;
    bool cosine_decay = true;
    double clip_norm = 1.0;  // <= 0 disables clipping
    std::uint64_t seed = 1;
};

struct TrainResult {
    int steps_run = 0;
    double final_loss = 0.0;      // last batch
    double final_accuracy = 0.0;  // last batch
    // Full training-set metrics computed once after the last step; evaluate()
    // on the saved checkpoint reproduces these exactly.
    double train_eval_loss = 0.0;
    double train_eval_accuracy = 0.0;
    int steps_to_95 = -1;  // first step whose 20-step mean train accuracy >= 0.95
    std::string metrics_csv;
};

namespace detail {

inline void round_f32(Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i)
        t.data()[i] = static_cast<double>(static_cast<float>(t.data()[i]));
}

inline std::string format_metric_row(int step, double loss, double accuracy) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%d,%.12g,%.6f\n", step, loss, accuracy);
    return std::string(buf);
}

}  // namespace detail

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t samples = 0;
};

inline EvalResult evaluate_model(const Model& model, const Dataset& data) {
    if (data.size() == 0) throw ConfigError("evaluation dataset is empty");
    if (data.classes != model.config().head.classes) {
        throw ConfigError("dataset has " + std::to_string(data.classes) +
                          " classes but model head has " +
                          std::to_string(model.config().head.classes));
    }
    EvalResult r;
    r.samples = data.size();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor logits = model.forward_sample(data.sample(i));
        const std::vector<int> label = {data.label(i)};
        r.loss += cross_entropy_logits(logits, label).item();
        int best = 0;
        for (int j = 1; j < logits.dim(1); ++j)
            if (logits(0, j) > logits(0, best)) best = j;
        if (best == data.label(i)) r.accuracy += 1.0;
    }
    r.loss /= static_cast<double>(data.size());
    r.accuracy /= static_cast<double>(data.size());
    return r;
}

class Trainer {
public:
    Trainer(Model& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
        if (cfg_.steps < 1) throw ConfigError("train.steps must be >= 1");
        if (cfg_.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        for (auto& [name, t] : model_.params().items()) {
            detail::round_f32(t);
            momentum_.push_back(Tensor::zeros(t.shape()));
        }
    }

    int step() const { return step_; }

    // Model parameters, momentum buffers (opt/momentum/<name>) and the step
    // counter (meta/step).
    Checkpoint to_checkpoint() const {
        Checkpoint ckpt = model_.to_checkpoint();
        const auto& items = model_.params().items();
        for (std::size_t i = 0; i < items.size(); ++i) {
            ckpt.push_back(to_entry("opt/momentum/" + items[i].first, momentum_[i]));
        }
        ckpt.push_back(to_entry("meta/step", Tensor::scalar(static_cast<double>(step_))));
        return ckpt;
    }

    void restore(const Checkpoint& ckpt) {
        model_.load_parameters(ckpt);
        std::size_t found = 0;
        auto& items = model_.params().items();
        for (const CheckpointEntry& e : ckpt) {
            if (e.name == "meta/step") {
                step_ = static_cast<int>(e.data.at(0));
                continue;
            }
            if (e.name.rfind("opt/momentum/", 0) == 0) {
                const std::string pname = e.name.substr(13);
                for (std::size_t i = 0; i < items.size(); ++i) {
                    if (items[i].first == pname) {
                        entry_to_tensor(e, momentum_[i]);
                        ++found;
                        break;
                    }
                }
            }
        }
        if (found != 0 && found != items.size()) {
            throw CheckpointError("checkpoint has momentum for " + std::to_string(found) + " of " +
                                  std::to_string(items.size()) + " parameters");
        }
    }

    // Runs from the current step up to cfg.steps (or stop_after steps if
    // given, without shortening the LR schedule).
    TrainResult run(const Dataset& data, int stop_after = -1) {
        if (data.size() == 0) throw ConfigError("training dataset is empty");
        if (data.classes != model_.config().head.classes) {
            throw ConfigError("dataset has " + std::to_string(data.classes) +
                              " classes but model head has " +
                              std::to_string(model_.config().head.classes));
        }
        const int last_step = stop_after < 0 ? cfg_.steps : std::min(cfg_.steps, stop_after);
        TrainResult result;
        result.metrics_csv = "step,loss,accuracy\n";
        std::vector<double> acc_window;
        auto params = model_.params().tensors();
        for (; step_ < last_step; ++step_) {
            Rng batch_rng = Rng::keyed(cfg_.seed, static_cast<std::uint64_t>(step_));
            std::vector<Tensor> samples;
            std::vector<int> labels;
            samples.reserve(static_cast<std::size_t>(cfg_.batch_size));
            for (int b = 0; b < cfg_.batch_size; ++b) {
                const int idx = batch_rng.uniform_int(0, static_cast<int>(data.size()) - 1);
                samples.push_back(data.sample(static_cast<std::size_t>(idx)));
                labels.push_back(data.label(static_cast<std::size_t>(idx)));
            }

            for (Tensor& p : params) p.zero_grad();
            double loss_value = 0.0;
            double accuracy = 0.0;
            {
                Tape tape;
                const Tensor logits = model_.forward_batch(samples);
                Tensor loss = cross_entropy_logits(logits, labels);
                loss_value = loss.item();
                if (!std::isfinite(loss_value)) diagnose_nonfinite(samples);
                accuracy = batch_accuracy(logits, labels);
                tape.backward(loss);
            }
            clip_gradients(params);
            const double lr = learning_rate(step_);
            apply_sgd(params, lr);

            result.metrics_csv += detail::format_metric_row(step_, loss_value, accuracy);
            result.final_loss = loss_value;
            result.final_accuracy = accuracy;
            ++result.steps_run;
            acc_window.push_back(accuracy);
            if (acc_window.size() > 20) acc_window.erase(acc_window.begin());
            if (result.steps_to_95 < 0 && acc_window.size() == 20) {
                double mean = 0.0;
                for (double a : acc_window) mean += a;
                if (mean / 20.0 >= 0.95) result.steps_to_95 = step_;
            }
        }
        const EvalResult train_eval = evaluate_model(model_, data);
        result.train_eval_loss = train_eval.loss;
        result.train_eval_accuracy = train_eval.accuracy;
        return result;
    }

    double learning_rate(int step) const {
        if (!cfg_.cosine_decay) return cfg_.lr;
        return cfg_.lr * 0.5 *
               (1.0 + std::cos(3.14159265358979323846 * step / static_cast<double>(cfg_.steps)));
    }

private:
    static double batch_accuracy(const Tensor& logits, const std::vector<int>& labels) {
        const int b = logits.dim(0), k = logits.dim(1);
        int correct = 0;
        for (int i = 0; i < b; ++i) {
            int best = 0;
            for (int j = 1; j < k; ++j)
                if (logits(i, j) > logits(i, best)) best = j;
            if (best == labels[static_cast<std::size_t>(i)]) ++correct;
        }
        return static_cast<double>(correct) / b;
    }

    void clip_gradients(std::vector<Tensor>& params) {
        if (cfg_.clip_norm <= 0.0) return;
        double sq = 0.0;
        for (Tensor& p : params) {
            const auto g = p.grad();
            for (double v : g) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm <= cfg_.clip_norm) return;
        const double s = cfg_.clip_norm / norm;
        for (Tensor& p : params) {
            double* g = p.grad_data();
            for (std::size_t i = 0; i < p.numel(); ++i) g[i] *= s;
        }
    }

    void apply_sgd(std::vector<Tensor>& params, double lr) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i];
            Tensor& v = momentum_[i];
            const double* g = p.grad_data();
            for (std::size_t j = 0; j < p.numel(); ++j) {
                v.data()[j] = cfg_.momentum * v.data()[j] - lr * g[j];
                p.data()[j] += v.data()[j];
            }
            detail::round_f32(v);
            detail::round_f32(p);
        }
    }

    // Re-runs the forward pass with per-layer checks to name the first
    // non-finite tensor.
    [[noreturn]] void diagnose_nonfinite(const std::vector<Tensor>& samples) {
        ForwardOptions opts;
        opts.check_finite = true;
        for (const Tensor& s : samples) model_.forward_sample(s, opts);  // throws NumericError
        throw NumericError("non-finite loss at step " + std::to_string(step_) +
                           " (activations finite; loss overflowed)");
    }

    Model& model_;
    TrainConfig cfg_;
    int step_ = 0;
    std::vector<Tensor> momentum_;
};

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

}  // namespace tlkit
