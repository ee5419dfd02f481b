#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "rata/errors.hpp"
#include "rata/rng.hpp"

namespace rata {

// Flat row-major design matrix plus labels. `ids` are globally unique example
// ids, kept so leakage across splits can be checked by set membership.
struct Dataset {
    int feature_dim = 0;
    std::vector<double> features;   // size() == n * feature_dim
    std::vector<int> labels;
    std::vector<uint64_t> ids;

    int size() const { return static_cast<int>(labels.size()); }

    const double* row(int i) const { return features.data() + static_cast<size_t>(i) * feature_dim; }

    void append(const Dataset& other) {
        if (feature_dim == 0) feature_dim = other.feature_dim;
        if (feature_dim != other.feature_dim) throw DataError("feature dim mismatch on append");
        features.insert(features.end(), other.features.begin(), other.features.end());
        labels.insert(labels.end(), other.labels.begin(), other.labels.end());
        ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    }

    Dataset subset(const std::vector<int>& idx) const {
        Dataset out;
        out.feature_dim = feature_dim;
        for (int i : idx) {
            out.features.insert(out.features.end(), row(i), row(i) + feature_dim);
            out.labels.push_back(labels[i]);
            out.ids.push_back(ids[i]);
        }
        return out;
    }
};

struct Domain {
    std::string name;
    Dataset data;
};

struct Task {
    std::string name;
    int num_classes = 0;
    double split_fraction = 0.8;    // train share within each training domain
    std::vector<Domain> domains;
};

// A task reduced to concrete train / ID-val splits, ready for the trainer.
struct TaskView {
    std::string name;
    int num_classes = 0;
    Dataset train;
    Dataset val;
};

namespace detail {

inline std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double fraction, Rng& rng) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    int n_train = static_cast<int>(fraction * n);
    return {std::vector<int>(idx.begin(), idx.begin() + n_train),
            std::vector<int>(idx.begin() + n_train, idx.end())};
}

}  // namespace detail

// Per-domain deterministic split; train/val are disjoint by construction.
inline TaskView make_task_view(const Task& task, uint64_t split_seed) {
    TaskView view;
    view.name = task.name;
    view.num_classes = task.num_classes;
    for (size_t d = 0; d < task.domains.size(); ++d) {
        Rng rng(derive_seed(split_seed, "split:" + task.name + ":" + task.domains[d].name, d));
        auto [train_idx, val_idx] = detail::split_indices(task.domains[d].data.size(),
                                                          task.split_fraction, rng);
        view.train.append(task.domains[d].data.subset(train_idx));
        view.val.append(task.domains[d].data.subset(val_idx));
    }
    if (view.train.size() == 0) throw DataError("empty training split for task " + task.name);
    return view;
}

// Leave-one-domain-out fold: the held-out domain is evaluation-only, the
// remaining domains are split 80/20 into train and ID-val.
struct TargetFold {
    TaskView view;          // training domains only
    Dataset test;           // every example of the held-out domain
    std::string test_domain;
};

inline TargetFold make_target_fold(const Task& task, const std::string& test_domain,
                                   uint64_t split_seed) {
    TargetFold fold;
    fold.test_domain = test_domain;
    fold.view.name = task.name;
    fold.view.num_classes = task.num_classes;
    bool found = false;
    for (size_t d = 0; d < task.domains.size(); ++d) {
        const Domain& dom = task.domains[d];
        if (dom.name == test_domain) {
            fold.test = dom.data;
            found = true;
            continue;
        }
        Rng rng(derive_seed(split_seed, "split:" + task.name + ":" + dom.name, d));
        auto [train_idx, val_idx] = detail::split_indices(dom.data.size(), task.split_fraction, rng);
        fold.view.train.append(dom.data.subset(train_idx));
        fold.view.val.append(dom.data.subset(val_idx));
    }
    if (!found) throw DataError("unknown test domain: " + test_domain);
    if (fold.view.train.size() == 0) throw DataError("no training domains left");
    return fold;
}

}  // namespace rata
