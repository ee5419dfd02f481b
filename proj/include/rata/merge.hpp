#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rata/errors.hpp"
#include "rata/param_store.hpp"
#include "rata/trainer.hpp"

namespace rata {

struct MergeWeights {
    std::vector<double> lambdas;

    // Convex combination: all lambdas >= 0, summing to 1 within 1e-12.
    void validate_convex() const {
        double sum = 0.0;
        for (double l : lambdas) {
            if (l < 0.0) throw DataError("negative merge weight");
            sum += l;
        }
        if (std::fabs(sum - 1.0) > 1e-12) throw DataError("merge weights must sum to 1");
    }
};

struct GreedyReport {
    std::vector<int> candidate_order;  // run indices, descending ID-val accuracy
    std::vector<int> accepted;         // subset, in acceptance order
    double final_id_val_acc = 0.0;
};

namespace detail {

inline const ParamBlock& block_by_name(const std::vector<ParamBlock>& blocks, const std::string& name) {
    for (const auto& b : blocks)
        if (b.name == name) return b;
    throw DataError("missing block: " + name);
}

inline Lineage merged_lineage(const std::vector<const Checkpoint*>& parents,
                              const std::vector<double>& lambdas) {
    Lineage lin;
    lin.root = parents.front()->lineage.root;
    for (const auto* p : parents) lin.merge_parents.push_back(lineage_digest(p->lineage));
    lin.merge_lambdas = lambdas;
    nlohmann::json key = {{"parents", lin.merge_parents}, {"lambdas", lambdas}};
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(key.dump())));
    lin.chain.push_back({"merged", std::string(buf)});
    return lin;
}

// sum_i lambda_i * theta_i, accumulated in input order (bit-reproducible).
inline Checkpoint weighted_sum(const std::vector<const Checkpoint*>& models,
                               const std::vector<double>& lambdas) {
    const Checkpoint& first = *models.front();
    Checkpoint out = first;
    for (auto* section : {&out.featurizer, &out.classifier}) {
        const bool feat = section == &out.featurizer;
        for (auto& block : *section) {
            for (double& v : block.values) v *= lambdas[0];
            for (size_t m = 1; m < models.size(); ++m) {
                const auto& src = block_by_name(feat ? models[m]->featurizer : models[m]->classifier,
                                                block.name);
                for (size_t i = 0; i < block.values.size(); ++i)
                    block.values[i] += lambdas[m] * src.values[i];
            }
        }
    }
    out.lineage = merged_lineage(models, lambdas);
    out.step = first.step;
    return out;
}

// Plain mean: accumulate in input order, then divide once.
inline Checkpoint mean_of(const std::vector<const Checkpoint*>& models) {
    Checkpoint out = *models.front();
    for (auto* section : {&out.featurizer, &out.classifier}) {
        const bool feat = section == &out.featurizer;
        for (auto& block : *section) {
            for (size_t m = 1; m < models.size(); ++m) {
                const auto& src = block_by_name(feat ? models[m]->featurizer : models[m]->classifier,
                                                block.name);
                for (size_t i = 0; i < block.values.size(); ++i)
                    block.values[i] += src.values[i];
            }
            const double inv = 1.0 / static_cast<double>(models.size());
            for (double& v : block.values) v *= inv;
        }
    }
    std::vector<double> lambdas(models.size(), 1.0 / static_cast<double>(models.size()));
    out.lineage = merged_lineage(models, lambdas);
    out.step = models.front()->step;
    return out;
}

inline void check_all_compatible(const std::vector<const Checkpoint*>& models) {
    for (size_t m = 1; m < models.size(); ++m)
        if (!validate_compatible(*models.front(), *models[m]))
            throw DataError("incompatible checkpoints in merge");
}

}  // namespace detail

inline Checkpoint average_weights(const std::vector<Checkpoint>& models, const MergeWeights& weights) {
    if (models.empty()) throw DataError("no models to average");
    if (models.size() != weights.lambdas.size()) throw DataError("one weight per model required");
    weights.validate_convex();
    std::vector<const Checkpoint*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    detail::check_all_compatible(ptrs);
    return detail::weighted_sum(ptrs, weights.lambdas);
}

// (1 - lambda) * a + lambda * b
inline Checkpoint interpolate(const Checkpoint& a, const Checkpoint& b, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw DataError("lambda must be in [0,1]");
    if (!validate_compatible(a, b)) throw DataError("incompatible checkpoints");
    return detail::weighted_sum({&a, &b}, {1.0 - lambda, lambda});
}

// (1 - lambda)/2 * a + (1 - lambda)/2 * b + lambda * c
inline Checkpoint interpolate3(const Checkpoint& a, const Checkpoint& b, const Checkpoint& c,
                               double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw DataError("lambda must be in [0,1]");
    std::vector<const Checkpoint*> ptrs{&a, &b, &c};
    detail::check_all_compatible(ptrs);
    const double half = (1.0 - lambda) / 2.0;
    return detail::weighted_sum(ptrs, {half, half, lambda});
}

// Interpolation back toward the pre-trained weights:
// (1 - lambda) * fine_tuned + lambda * pretrained.
inline Checkpoint wise(const Checkpoint& fine_tuned, const Checkpoint& pretrained, double lambda) {
    return interpolate(fine_tuned, pretrained, lambda);
}

// Uniform weight average of every run's ID-val-best checkpoint.
inline Checkpoint uniform_soup(const std::vector<RunResult>& runs) {
    if (runs.empty()) throw DataError("no runs to soup");
    std::vector<const Checkpoint*> ptrs;
    for (const auto& r : runs) ptrs.push_back(&r.best);
    detail::check_all_compatible(ptrs);
    return detail::mean_of(ptrs);
}

// Greedy soup: candidates sorted by descending recorded ID-val accuracy; the
// top candidate is always kept, and each next one joins the uniform average
// iff the evaluator score of the tentative average does not drop below the
// current average's score (ties accept).
inline std::pair<Checkpoint, GreedyReport> greedy_soup(
    const std::vector<RunResult>& runs, const std::function<double(const Checkpoint&)>& evaluator) {
    if (runs.empty()) throw DataError("no runs to soup");
    std::vector<const Checkpoint*> ptrs;
    for (const auto& r : runs) ptrs.push_back(&r.best);
    detail::check_all_compatible(ptrs);

    GreedyReport report;
    report.candidate_order.resize(runs.size());
    std::iota(report.candidate_order.begin(), report.candidate_order.end(), 0);
    std::stable_sort(report.candidate_order.begin(), report.candidate_order.end(),
                     [&](int a, int b) { return runs[static_cast<size_t>(a)].best_val_acc >
                                                runs[static_cast<size_t>(b)].best_val_acc; });

    std::vector<const Checkpoint*> accepted{ptrs[static_cast<size_t>(report.candidate_order[0])]};
    report.accepted.push_back(report.candidate_order[0]);
    Checkpoint current = detail::mean_of(accepted);
    double current_score = evaluator(current);

    for (size_t k = 1; k < report.candidate_order.size(); ++k) {
        const int idx = report.candidate_order[k];
        auto tentative_members = accepted;
        tentative_members.push_back(ptrs[static_cast<size_t>(idx)]);
        Checkpoint tentative = detail::mean_of(tentative_members);
        double score = evaluator(tentative);
        if (score >= current_score) {
            accepted = std::move(tentative_members);
            report.accepted.push_back(idx);
            current = std::move(tentative);
            current_score = score;
        }
    }
    report.final_id_val_acc = current_score;
    return {std::move(current), std::move(report)};
}

struct FusedInit {
    std::vector<ParamBlock> featurizer;
    std::vector<double> lambdas;  // softmax(kappa), sums to 1
};

// Softmax-weighted average of auxiliary featurizers, used as a single
// fine-tuning initialization.
inline FusedInit fusing_init(const std::vector<std::vector<ParamBlock>>& featurizers,
                             const std::vector<double>& kappas) {
    if (featurizers.empty()) throw DataError("no featurizers to fuse");
    if (featurizers.size() != kappas.size()) throw DataError("one kappa per featurizer required");

    FusedInit out;
    double mx = *std::max_element(kappas.begin(), kappas.end());
    double sum = 0.0;
    for (double k : kappas) {
        out.lambdas.push_back(std::exp(k - mx));
        sum += out.lambdas.back();
    }
    for (double& l : out.lambdas) l /= sum;

    out.featurizer = featurizers[0];
    for (auto& block : out.featurizer) {
        for (double& v : block.values) v *= out.lambdas[0];
        for (size_t m = 1; m < featurizers.size(); ++m) {
            const auto& src = detail::block_by_name(featurizers[m], block.name);
            if (src.shape != block.shape) throw DataError("incompatible featurizers in fuse");
            for (size_t i = 0; i < block.values.size(); ++i)
                block.values[i] += out.lambdas[m] * src.values[i];
        }
    }
    return out;
}

// Replace the classifier head, leaving the featurizer untouched.
inline Checkpoint swap_classifier(const Checkpoint& model, const std::vector<ParamBlock>& probe) {
    if (probe.size() != 2 || probe[0].shape.size() != 2)
        throw DataError("probe must be a single weight/bias head");
    if (probe[0].shape[0] != featurizer_output_dim(model))
        throw DataError("probe input dim does not match featurizer output");
    Checkpoint out = model;
    out.classifier = probe;
    char buf[17];
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& b : probe)
        for (double v : b.values) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            h = (h ^ bits) * 0x100000001b3ULL;
        }
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    out.lineage.chain.push_back({"swap-classifier", std::string(buf)});
    return out;
}

enum class SoupSelection { Uniform, Greedy };

struct RatatouilleResult {
    Checkpoint model;
    std::optional<GreedyReport> report;
    std::vector<RunResult> runs;
};

// The recycling pipeline:
//   1. take the pre-trained model;
//   2. fine-tune its featurizer once per auxiliary task (the identity
//      featurizer stands in for auxiliary task zero);
//   3. linear-probe the pre-trained featurizer on the target once and swap
//      that head onto every initialization;
//   4. fine-tune M runs on the target, round-robin over the initializations
//      (auxiliary initializations first, the direct transfer last, so
//      earlier initializations receive any extra runs);
//   5. combine by uniform or greedy soup.
// With no auxiliary tasks this is exactly the model-soups pipeline.
inline RatatouilleResult ratatouille(const Checkpoint& pretrained,
                                     const std::vector<TaskView>& aux_tasks,
                                     const std::vector<HyperParams>& aux_cfgs,
                                     const TaskView& target, int num_runs,
                                     const std::vector<HyperParams>& cfgs,
                                     const HyperParams& probe_cfg, SoupSelection selection) {
    if (num_runs < 1) throw ConfigError("num_runs must be >= 1");
    if (static_cast<size_t>(num_runs) != cfgs.size()) throw ConfigError("one config per run required");
    if (aux_tasks.size() != aux_cfgs.size()) throw ConfigError("one config per auxiliary task required");

    std::vector<Checkpoint> carriers;
    for (size_t i = 0; i < aux_tasks.size(); ++i)
        carriers.push_back(inter_train(pretrained, {aux_tasks[i]}, {aux_cfgs[i]}));
    carriers.push_back(pretrained);  // direct transfer, auxiliary task zero

    std::vector<ParamBlock> probe = linear_probe(pretrained.featurizer, target, probe_cfg);
    std::vector<Checkpoint> inits;
    for (const auto& c : carriers) inits.push_back(swap_classifier(c, probe));

    RatatouilleResult result;
    for (int j = 0; j < num_runs; ++j) {
        const auto& init = inits[static_cast<size_t>(j) % inits.size()];
        result.runs.push_back(fine_tune(init, target, cfgs[static_cast<size_t>(j)]));
    }

    if (selection == SoupSelection::Uniform) {
        result.model = uniform_soup(result.runs);
    } else {
        auto evaluator = [&target](const Checkpoint& c) { return accuracy(c, target.val); };
        auto [model, report] = greedy_soup(result.runs, evaluator);
        result.model = std::move(model);
        result.report = std::move(report);
    }
    return result;
}

}  // namespace rata
