#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rata/dataset.hpp"
#include "rata/errors.hpp"
#include "rata/param_store.hpp"
#include "rata/rng.hpp"

namespace rata {

// MLP featurizer (ReLU hidden layers) + linear classifier head, with dropout
// applied to the features right before the head.
struct NetSpec {
    int input_dim = 0;
    std::vector<int> hidden_widths;
    int num_classes = 0;
    double dropout_rate = 0.0;

    void validate() const {
        if (input_dim < 1) throw ConfigError("input_dim must be positive");
        if (hidden_widths.empty()) throw ConfigError("at least one hidden layer required");
        for (int w : hidden_widths)
            if (w < 1) throw ConfigError("hidden widths must be positive");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout must be in [0,1)");
    }
};

// Per-block gradients, aligned with the checkpoint's block order.
struct Gradients {
    std::vector<std::vector<double>> featurizer;
    std::vector<std::vector<double>> classifier;
};

namespace detail {

struct LayerDims {
    int in = 0, out = 0;
};

// Blocks alternate weight [in,out] / bias [out]; validates and extracts dims.
inline std::vector<LayerDims> layer_dims(const std::vector<ParamBlock>& blocks, const char* what) {
    if (blocks.size() % 2 != 0) throw DataError(std::string(what) + ": expected weight/bias pairs");
    std::vector<LayerDims> dims;
    for (size_t i = 0; i < blocks.size(); i += 2) {
        const auto& w = blocks[i];
        const auto& b = blocks[i + 1];
        if (w.shape.size() != 2 || b.shape.size() != 1 || b.shape[0] != w.shape[1])
            throw DataError(std::string(what) + ": malformed layer at block " + w.name);
        if (i > 0 && w.shape[0] != dims.back().out)
            throw DataError(std::string(what) + ": layer width mismatch at block " + w.name);
        dims.push_back({w.shape[0], w.shape[1]});
    }
    return dims;
}

//  out[n,j] = sum_i in[n,i] * W[i,j] + b[j]
inline void affine(const std::vector<double>& in, int n, const ParamBlock& w, const ParamBlock& b,
                   std::vector<double>& out) {
    const int d_in = w.shape[0], d_out = w.shape[1];
    out.assign(static_cast<size_t>(n) * d_out, 0.0);
    for (int r = 0; r < n; ++r) {
        const double* x = in.data() + static_cast<size_t>(r) * d_in;
        double* o = out.data() + static_cast<size_t>(r) * d_out;
        for (int j = 0; j < d_out; ++j) o[j] = b.values[j];
        for (int i = 0; i < d_in; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            const double* wrow = w.values.data() + static_cast<size_t>(i) * d_out;
            for (int j = 0; j < d_out; ++j) o[j] += xi * wrow[j];
        }
    }
}

struct ForwardTrace {
    std::vector<std::vector<double>> activations;  // activations[0] = input, post-ReLU per layer
    std::vector<double> dropout_mask;              // empty when inactive
    std::vector<double> features;                  // classifier input (after dropout)
    std::vector<double> logits;
    int n = 0;
};

inline ForwardTrace forward_trace(const Checkpoint& ckpt, const double* X, int n, int input_dim,
                                  bool train_mode, double dropout_rate, uint64_t dropout_seed) {
    auto feat_dims = layer_dims(ckpt.featurizer, "featurizer");
    auto head_dims = layer_dims(ckpt.classifier, "classifier");
    if (head_dims.size() != 1) throw DataError("classifier must be a single linear layer");
    const int expect_in = feat_dims.empty() ? head_dims[0].in : feat_dims[0].in;
    if (input_dim != expect_in) throw DataError("input dim mismatch");
    const int feat_out = feat_dims.empty() ? expect_in : feat_dims.back().out;
    if (head_dims[0].in != feat_out) throw DataError("classifier input dim mismatch");

    ForwardTrace t;
    t.n = n;
    t.activations.emplace_back(X, X + static_cast<size_t>(n) * input_dim);
    for (size_t l = 0; l < feat_dims.size(); ++l) {
        std::vector<double> h;
        affine(t.activations.back(), n, ckpt.featurizer[2 * l], ckpt.featurizer[2 * l + 1], h);
        for (double& v : h) v = v > 0.0 ? v : 0.0;
        t.activations.push_back(std::move(h));
    }

    t.features = t.activations.back();
    if (train_mode && dropout_rate > 0.0) {
        // Inverted dropout: kept units scale by 1/(1-p), eval path is scale-free.
        Rng rng(dropout_seed);
        const double keep = 1.0 - dropout_rate;
        t.dropout_mask.resize(t.features.size());
        for (size_t i = 0; i < t.features.size(); ++i) {
            t.dropout_mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
            t.features[i] *= t.dropout_mask[i];
        }
    }
    affine(t.features, n, ckpt.classifier[0], ckpt.classifier[1], t.logits);
    return t;
}

}  // namespace detail

// He-uniform weights, zero biases; lineage root "scratch".
inline Checkpoint init_params(const NetSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, "init", 0));
    Checkpoint ckpt;
    ckpt.lineage.root = "scratch";

    auto make_layer = [&](std::vector<ParamBlock>& section, const std::string& prefix, int in, int out) {
        ParamBlock w{prefix + ".weight", {in, out}, std::vector<double>(static_cast<size_t>(in) * out)};
        double limit = std::sqrt(6.0 / in);
        for (double& v : w.values) v = rng.uniform(-limit, limit);
        section.push_back(std::move(w));
        section.push_back({prefix + ".bias", {out}, std::vector<double>(static_cast<size_t>(out), 0.0)});
    };

    int in = spec.input_dim;
    for (size_t l = 0; l < spec.hidden_widths.size(); ++l) {
        make_layer(ckpt.featurizer, "fc" + std::to_string(l), in, spec.hidden_widths[l]);
        in = spec.hidden_widths[l];
    }
    make_layer(ckpt.classifier, "head", in, spec.num_classes);
    return ckpt;
}

inline int featurizer_output_dim(const Checkpoint& ckpt) {
    auto dims = detail::layer_dims(ckpt.featurizer, "featurizer");
    if (dims.empty()) throw DataError("empty featurizer has no fixed output dim");
    return dims.back().out;
}

// Eval-mode forward: deterministic, dropout-free.
inline std::vector<double> forward(const Checkpoint& ckpt, const double* X, int n, int input_dim) {
    return detail::forward_trace(ckpt, X, n, input_dim, false, 0.0, 0).logits;
}

inline std::vector<double> forward(const Checkpoint& ckpt, const Dataset& data) {
    return forward(ckpt, data.features.data(), data.size(), data.feature_dim);
}

// Train-mode forward with a seed-deterministic dropout mask.
inline std::vector<double> forward_train(const Checkpoint& ckpt, const double* X, int n,
                                         int input_dim, double dropout_rate, uint64_t seed) {
    return detail::forward_trace(ckpt, X, n, input_dim, true, dropout_rate, seed).logits;
}

inline void softmax_rows(std::vector<double>& logits, int num_classes) {
    const int n = static_cast<int>(logits.size()) / num_classes;
    for (int r = 0; r < n; ++r) {
        double* row = logits.data() + static_cast<size_t>(r) * num_classes;
        double mx = *std::max_element(row, row + num_classes);
        double sum = 0.0;
        for (int c = 0; c < num_classes; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (int c = 0; c < num_classes; ++c) row[c] /= sum;
    }
}

struct LossGrad {
    double loss = 0.0;
    Gradients grads;
};

// Mean cross-entropy over the batch plus (weight_decay/2)*||theta||^2, with
// exact analytic gradients of that objective.
inline LossGrad loss_and_grad(const Checkpoint& ckpt, const Dataset& batch, double weight_decay,
                              bool train_mode, double dropout_rate, uint64_t dropout_seed) {
    const int n = batch.size();
    if (n == 0) throw DataError("empty batch");
    auto trace = detail::forward_trace(ckpt, batch.features.data(), n, batch.feature_dim,
                                       train_mode, dropout_rate, dropout_seed);
    const int classes = ckpt.classifier[0].shape[1];
    for (int label : batch.labels)
        if (label < 0 || label >= classes) throw DataError("label out of range");

    std::vector<double> probs = trace.logits;
    softmax_rows(probs, classes);

    LossGrad out;
    for (int r = 0; r < n; ++r)
        out.loss -= std::log(probs[static_cast<size_t>(r) * classes + batch.labels[r]]);
    out.loss /= n;

    // dL/dlogits = (softmax - onehot) / n
    std::vector<double> dlogits = std::move(probs);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < classes; ++c) dlogits[static_cast<size_t>(r) * classes + c] /= n;
        dlogits[static_cast<size_t>(r) * classes + batch.labels[r]] -= 1.0 / n;
    }

    auto backward_affine = [](const std::vector<double>& input, const std::vector<double>& dout,
                              int n_rows, const ParamBlock& w, std::vector<double>& dw,
                              std::vector<double>& db, std::vector<double>& din) {
        const int d_in = w.shape[0], d_out = w.shape[1];
        dw.assign(w.values.size(), 0.0);
        db.assign(static_cast<size_t>(d_out), 0.0);
        din.assign(static_cast<size_t>(n_rows) * d_in, 0.0);
        for (int r = 0; r < n_rows; ++r) {
            const double* x = input.data() + static_cast<size_t>(r) * d_in;
            const double* g = dout.data() + static_cast<size_t>(r) * d_out;
            double* dx = din.data() + static_cast<size_t>(r) * d_in;
            for (int j = 0; j < d_out; ++j) db[j] += g[j];
            for (int i = 0; i < d_in; ++i) {
                const double* wrow = w.values.data() + static_cast<size_t>(i) * d_out;
                double* dwrow = dw.data() + static_cast<size_t>(i) * d_out;
                double acc = 0.0;
                for (int j = 0; j < d_out; ++j) {
                    dwrow[j] += x[i] * g[j];
                    acc += g[j] * wrow[j];
                }
                dx[i] = acc;
            }
        }
    };

    out.grads.featurizer.resize(ckpt.featurizer.size());
    out.grads.classifier.resize(ckpt.classifier.size());

    std::vector<double> dfeatures;
    backward_affine(trace.features, dlogits, n, ckpt.classifier[0], out.grads.classifier[0],
                    out.grads.classifier[1], dfeatures);

    if (!trace.dropout_mask.empty())
        for (size_t i = 0; i < dfeatures.size(); ++i) dfeatures[i] *= trace.dropout_mask[i];

    std::vector<double> dh = std::move(dfeatures);
    const size_t n_layers = ckpt.featurizer.size() / 2;
    for (size_t l = n_layers; l-- > 0;) {
        const auto& post = trace.activations[l + 1];  // post-ReLU output of layer l
        for (size_t i = 0; i < dh.size(); ++i)
            if (post[i] <= 0.0) dh[i] = 0.0;
        std::vector<double> din;
        backward_affine(trace.activations[l], dh, n, ckpt.featurizer[2 * l],
                        out.grads.featurizer[2 * l], out.grads.featurizer[2 * l + 1], din);
        dh = std::move(din);
    }

    if (weight_decay != 0.0) {
        double sq = 0.0;
        auto decay_section = [&](const std::vector<ParamBlock>& blocks,
                                 std::vector<std::vector<double>>& grads) {
            for (size_t b = 0; b < blocks.size(); ++b)
                for (size_t i = 0; i < blocks[b].values.size(); ++i) {
                    sq += blocks[b].values[i] * blocks[b].values[i];
                    grads[b][i] += weight_decay * blocks[b].values[i];
                }
        };
        decay_section(ckpt.featurizer, out.grads.featurizer);
        decay_section(ckpt.classifier, out.grads.classifier);
        out.loss += 0.5 * weight_decay * sq;
    }
    return out;
}

enum class OptKind { Sgd, Adam };

struct OptState {
    OptKind kind = OptKind::Sgd;
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int64_t step = 0;
    std::vector<std::vector<double>> m_featurizer, v_featurizer;
    std::vector<std::vector<double>> m_classifier, v_classifier;
};

inline OptState make_opt_state(OptKind kind, double learning_rate, const Checkpoint& ckpt) {
    OptState st;
    st.kind = kind;
    st.learning_rate = learning_rate;
    if (kind == OptKind::Adam) {
        for (const auto& b : ckpt.featurizer) {
            st.m_featurizer.emplace_back(b.values.size(), 0.0);
            st.v_featurizer.emplace_back(b.values.size(), 0.0);
        }
        for (const auto& b : ckpt.classifier) {
            st.m_classifier.emplace_back(b.values.size(), 0.0);
            st.v_classifier.emplace_back(b.values.size(), 0.0);
        }
    }
    return st;
}

// One SGD or Adam update; pure function of its inputs.
inline std::pair<OptState, Checkpoint> optimizer_step(const OptState& state, const Checkpoint& params,
                                                      const Gradients& grads) {
    if (grads.featurizer.size() != params.featurizer.size() ||
        grads.classifier.size() != params.classifier.size())
        throw DataError("gradient/parameter block count mismatch");

    OptState next_state = state;
    Checkpoint next = params;
    next_state.step = state.step + 1;

    auto update_section = [&](std::vector<ParamBlock>& blocks,
                              const std::vector<std::vector<double>>& g,
                              std::vector<std::vector<double>>& m, std::vector<std::vector<double>>& v) {
        for (size_t b = 0; b < blocks.size(); ++b) {
            if (g[b].size() != blocks[b].values.size()) throw DataError("gradient shape mismatch");
            if (state.kind == OptKind::Sgd) {
                for (size_t i = 0; i < g[b].size(); ++i)
                    blocks[b].values[i] -= state.learning_rate * g[b][i];
            } else {
                const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(next_state.step));
                const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(next_state.step));
                for (size_t i = 0; i < g[b].size(); ++i) {
                    m[b][i] = state.beta1 * m[b][i] + (1.0 - state.beta1) * g[b][i];
                    v[b][i] = state.beta2 * v[b][i] + (1.0 - state.beta2) * g[b][i] * g[b][i];
                    double mhat = m[b][i] / c1;
                    double vhat = v[b][i] / c2;
                    blocks[b].values[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
                }
            }
        }
    };
    update_section(next.featurizer, grads.featurizer, next_state.m_featurizer, next_state.v_featurizer);
    update_section(next.classifier, grads.classifier, next_state.m_classifier, next_state.v_classifier);
    return {std::move(next_state), std::move(next)};
}

inline std::vector<int> predict(const Checkpoint& ckpt, const Dataset& data) {
    auto logits = forward(ckpt, data);
    const int classes = ckpt.classifier[0].shape[1];
    std::vector<int> labels(static_cast<size_t>(data.size()));
    for (int r = 0; r < data.size(); ++r) {
        const double* row = logits.data() + static_cast<size_t>(r) * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;  // ties keep the lowest class index
        labels[static_cast<size_t>(r)] = best;
    }
    return labels;
}

inline double accuracy(const Checkpoint& ckpt, const Dataset& data) {
    if (data.size() == 0) throw DataError("empty dataset");
    auto preds = predict(ckpt, data);
    int correct = 0;
    for (int i = 0; i < data.size(); ++i)
        if (preds[static_cast<size_t>(i)] == data.labels[static_cast<size_t>(i)]) ++correct;
    return static_cast<double>(correct) / data.size();
}

}  // namespace rata
