#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "rata/dataset.hpp"
#include "rata/errors.hpp"
#include "rata/nn.hpp"
#include "rata/param_store.hpp"
#include "rata/rng.hpp"

namespace rata {

struct HyperParams {
    double learning_rate = 0.01;
    int batch_size = 32;
    double dropout = 0.0;
    double weight_decay = 0.0;
    int steps = 400;
    int eval_every = 25;
    int freeze_featurizer_steps = 0;
    uint64_t seed = 0;
    OptKind optimizer = OptKind::Adam;

    void validate() const {
        if (steps < 1) throw ConfigError("steps must be positive");
        if (eval_every < 1 || eval_every > steps) throw ConfigError("eval_every must be in [1, steps]");
        if (freeze_featurizer_steps < 0 || freeze_featurizer_steps >= steps)
            throw ConfigError("freeze exceeds steps");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    }
};

inline nlohmann::json hparams_to_json(const HyperParams& hp) {
    return {{"learning_rate", hp.learning_rate},
            {"batch_size", hp.batch_size},
            {"dropout", hp.dropout},
            {"weight_decay", hp.weight_decay},
            {"steps", hp.steps},
            {"eval_every", hp.eval_every},
            {"freeze_featurizer_steps", hp.freeze_featurizer_steps},
            {"seed", hp.seed},
            {"optimizer", hp.optimizer == OptKind::Adam ? "adam" : "sgd"}};
}

inline std::string hparams_digest(const HyperParams& hp) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(hparams_to_json(hp).dump())));
    return std::string(buf);
}

struct TrajectoryPoint {
    int64_t step = 0;
    Checkpoint ckpt;
    double id_val_acc = 0.0;
};

struct RunResult {
    std::vector<TrajectoryPoint> trajectory;  // strictly increasing steps
    Checkpoint best;                          // max ID-val accuracy, earliest step on ties
    double best_val_acc = 0.0;
    int64_t best_step = 0;
    Checkpoint final;
    HyperParams hparams;
};

// Fresh He-initialized linear head for `num_classes`, featurizer untouched.
inline Checkpoint attach_fresh_head(const Checkpoint& ckpt, int num_classes, uint64_t seed) {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    const int feat_out = featurizer_output_dim(ckpt);
    Checkpoint out;
    out.featurizer = ckpt.featurizer;
    out.lineage = ckpt.lineage;
    out.step = 0;
    Rng rng(derive_seed(seed, "head", 0));
    ParamBlock w{"head.weight", {feat_out, num_classes},
                 std::vector<double>(static_cast<size_t>(feat_out) * num_classes)};
    double limit = std::sqrt(6.0 / feat_out);
    for (double& v : w.values) v = rng.uniform(-limit, limit);
    out.classifier.push_back(std::move(w));
    out.classifier.push_back({"head.bias", {num_classes},
                              std::vector<double>(static_cast<size_t>(num_classes), 0.0)});
    return out;
}

namespace detail {

// Minibatch ERM loop shared by fine_tune and linear_probe. Featurizer
// gradients are zeroed while step <= freeze_until, so frozen parameters stay
// bit-identical (Adam moments included). Data order: indices reshuffled once
// per epoch from a seed-derived stream; the last partial batch is kept.
inline RunResult train_loop(const Checkpoint& init, const TaskView& task, const HyperParams& cfg,
                            int freeze_until) {
    if (task.train.size() == 0) throw DataError("empty training split");
    Checkpoint params = init;
    params.lineage.chain.push_back({task.name, hparams_digest(cfg)});

    OptState state = make_opt_state(cfg.optimizer, cfg.learning_rate, params);

    Rng data_rng(derive_seed(cfg.seed, "data", 0));
    std::vector<int> order(static_cast<size_t>(task.train.size()));
    std::iota(order.begin(), order.end(), 0);
    data_rng.shuffle(order);
    size_t cursor = 0;

    RunResult run;
    run.hparams = cfg;
    bool has_best = false;
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<int> batch_idx;
        batch_idx.reserve(static_cast<size_t>(cfg.batch_size));
        for (int k = 0; k < cfg.batch_size && cursor < order.size(); ++k)
            batch_idx.push_back(order[cursor++]);
        if (cursor >= order.size()) {
            data_rng.shuffle(order);
            cursor = 0;
        }
        Dataset batch = task.train.subset(batch_idx);

        auto lg = loss_and_grad(params, batch, cfg.weight_decay, true, cfg.dropout,
                                derive_seed(cfg.seed, "dropout", static_cast<uint64_t>(step)));
        if (step <= freeze_until)
            for (auto& g : lg.grads.featurizer) std::fill(g.begin(), g.end(), 0.0);

        auto [next_state, next_params] = optimizer_step(state, params, lg.grads);
        state = std::move(next_state);
        params = std::move(next_params);
        params.step = step;

        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            double acc = task.val.size() > 0 ? accuracy(params, task.val) : 0.0;
            run.trajectory.push_back({step, params, acc});
            if (!has_best || acc > run.best_val_acc) {
                run.best = params;
                run.best_val_acc = acc;
                run.best_step = step;
                has_best = true;
            }
        }
    }
    run.final = params;
    return run;
}

}  // namespace detail

// Full fine-tuning; the featurizer is frozen for the first
// cfg.freeze_featurizer_steps steps (feature-distortion warmup).
inline RunResult fine_tune(const Checkpoint& init, const TaskView& task, const HyperParams& cfg) {
    cfg.validate();
    return detail::train_loop(init, task, cfg, cfg.freeze_featurizer_steps);
}

// Trains only the classifier with the featurizer frozen throughout; returns
// the trained head (ID-val-selected snapshot). Featurizer bytes untouched.
inline std::vector<ParamBlock> linear_probe(const std::vector<ParamBlock>& featurizer,
                                            const TaskView& task, const HyperParams& cfg) {
    cfg.validate();
    Checkpoint carrier;
    carrier.featurizer = featurizer;
    carrier.lineage.root = "probe-carrier";
    Checkpoint init = attach_fresh_head(carrier, task.num_classes, cfg.seed);
    RunResult run = detail::train_loop(init, task, cfg, cfg.steps);
    return run.best.classifier;
}

// Sequential fine-tuning over a chain of auxiliary tasks: each stage attaches
// a fresh head, fine-tunes, keeps the featurizer and drops the head. The
// empty chain is the identity (the pre-trained model is auxiliary task zero).
// `robust` picks the moving-average snapshot instead of the ID-val best.
inline Checkpoint inter_train(const Checkpoint& pretrained, const std::vector<TaskView>& chain,
                              const std::vector<HyperParams>& cfgs, bool robust = false);

// Elementwise arithmetic mean of every checkpoint recorded along a run.
inline Checkpoint collect_moving_average(const RunResult& run) {
    if (run.trajectory.empty()) throw DataError("empty trajectory");
    Checkpoint mean = run.trajectory.front().ckpt;
    for (size_t t = 1; t < run.trajectory.size(); ++t) {
        const Checkpoint& c = run.trajectory[t].ckpt;
        for (size_t b = 0; b < mean.featurizer.size(); ++b)
            for (size_t i = 0; i < mean.featurizer[b].values.size(); ++i)
                mean.featurizer[b].values[i] += c.featurizer[b].values[i];
        for (size_t b = 0; b < mean.classifier.size(); ++b)
            for (size_t i = 0; i < mean.classifier[b].values.size(); ++i)
                mean.classifier[b].values[i] += c.classifier[b].values[i];
    }
    const double inv = 1.0 / static_cast<double>(run.trajectory.size());
    for (auto* section : {&mean.featurizer, &mean.classifier})
        for (auto& block : *section)
            for (double& v : block.values) v *= inv;
    mean.lineage = run.final.lineage;
    mean.lineage.chain.push_back({"moving-average", hparams_digest(run.hparams)});
    mean.step = run.final.step;
    return mean;
}

inline Checkpoint inter_train(const Checkpoint& pretrained, const std::vector<TaskView>& chain,
                              const std::vector<HyperParams>& cfgs, bool robust) {
    if (chain.empty()) return pretrained;
    if (chain.size() != cfgs.size()) throw ConfigError("one config per chain task required");
    Checkpoint current = pretrained;
    for (size_t i = 0; i < chain.size(); ++i) {
        Checkpoint init = attach_fresh_head(current, chain[i].num_classes,
                                            derive_seed(cfgs[i].seed, "aux-head", i));
        RunResult run = fine_tune(init, chain[i], cfgs[i]);
        Checkpoint chosen = robust ? collect_moving_average(run) : run.best;
        Checkpoint carrier;
        carrier.featurizer = std::move(chosen.featurizer);
        carrier.lineage = std::move(chosen.lineage);
        carrier.step = chosen.step;
        current = std::move(carrier);
    }
    return current;
}

// Candidate sets for the random hyperparameter search; one value is drawn
// uniformly and independently per field.
struct HyperParamDistribution {
    std::vector<double> learning_rates{0.001, 0.003, 0.005};
    std::vector<double> dropouts{0.0, 0.1, 0.5};
    std::vector<double> weight_decays{1e-6, 1e-4};
    std::vector<int> batch_sizes{32};
    int steps = 400;
    int eval_every = 25;
    int freeze_featurizer_steps = 0;
    OptKind optimizer = OptKind::Adam;
};

inline HyperParams sample_hparams(const HyperParamDistribution& dist, uint64_t seed) {
    if (dist.learning_rates.empty() || dist.dropouts.empty() || dist.weight_decays.empty() ||
        dist.batch_sizes.empty())
        throw ConfigError("empty candidate set");
    Rng rng(derive_seed(seed, "hparams", 0));
    HyperParams hp;
    hp.learning_rate = dist.learning_rates[static_cast<size_t>(rng.pick(static_cast<int>(dist.learning_rates.size())))];
    hp.dropout = dist.dropouts[static_cast<size_t>(rng.pick(static_cast<int>(dist.dropouts.size())))];
    hp.weight_decay = dist.weight_decays[static_cast<size_t>(rng.pick(static_cast<int>(dist.weight_decays.size())))];
    hp.batch_size = dist.batch_sizes[static_cast<size_t>(rng.pick(static_cast<int>(dist.batch_sizes.size())))];
    hp.steps = dist.steps;
    hp.eval_every = dist.eval_every;
    hp.freeze_featurizer_steps = dist.freeze_featurizer_steps;
    hp.optimizer = dist.optimizer;
    hp.seed = rng.next();
    return hp;
}

// Highest best-ID-val-accuracy run wins; ties go to the earlier run.
inline const Checkpoint& select_best_by_id_val(const std::vector<RunResult>& runs) {
    if (runs.empty()) throw DataError("no runs to select from");
    size_t best = 0;
    for (size_t i = 1; i < runs.size(); ++i)
        if (runs[i].best_val_acc > runs[best].best_val_acc) best = i;
    return runs[best].best;
}

}  // namespace rata
