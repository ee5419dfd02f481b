#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "rata/analysis.hpp"
#include "rata/dataset.hpp"
#include "rata/errors.hpp"
#include "rata/merge.hpp"
#include "rata/nn.hpp"
#include "rata/parallel.hpp"
#include "rata/param_store.hpp"
#include "rata/rng.hpp"
#include "rata/trainer.hpp"

namespace rata {

// ---------------------------------------------------------------------------
// Synthetic multi-domain suite
// ---------------------------------------------------------------------------

struct AuxTaskSpec {
    std::string name;
    double relatedness = 0.8;  // 1 = anchors identical to target, 0 = independent
    int num_classes = 0;       // 0 = same as target
    int samples = 0;           // 0 = samples_per_domain
};

struct GenSpec {
    int feature_dim = 16;
    int num_classes = 5;
    int num_domains = 4;
    int samples_per_domain = 300;
    double domain_shift = 0.6;  // rotation angle / translation scale per domain
    double noise = 2.0;         // within-class stddev
    double split_fraction = 0.8;
    int pretrain_classes = 8;
    int pretrain_samples = 1200;
    std::vector<AuxTaskSpec> aux_tasks{{"aux0", 0.8, 0, 0}, {"aux1", 0.7, 0, 0}};

    void validate() const {
        if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (num_domains < 3) throw ConfigError("num_domains must be >= 3");
        if (samples_per_domain < 4) throw ConfigError("samples_per_domain too small");
        if (split_fraction <= 0.0 || split_fraction >= 1.0)
            throw ConfigError("split_fraction must be in (0,1)");
        if (pretrain_classes < 2) throw ConfigError("pretrain_classes must be >= 2");
        for (const auto& a : aux_tasks)
            if (a.relatedness < 0.0 || a.relatedness > 1.0)
                throw ConfigError("relatedness must be in [0,1]");
    }
};

struct SyntheticSuite {
    GenSpec spec;
    uint64_t seed = 0;
    Task pretrain_task;               // T0: more classes, more samples
    std::vector<Task> aux_tasks;      // T1..Tk
    Task target_task;                 // D domains, leave-one-out protocol
    std::vector<double> target_anchors;               // num_classes x feature_dim
    std::vector<std::vector<double>> aux_anchors;
};

namespace detail {

// Orthogonal rotation as a product of `dim` random Givens rotations with
// angles in [-angle, angle], applied in place.
struct GivensRotation {
    std::vector<int> plane_i, plane_j;
    std::vector<double> cos_t, sin_t;

    static GivensRotation random(int dim, double angle, Rng& rng) {
        GivensRotation rot;
        for (int k = 0; k < dim; ++k) {
            int i = rng.pick(dim);
            int j = rng.pick(dim - 1);
            if (j >= i) ++j;
            double theta = rng.uniform(-angle, angle);
            rot.plane_i.push_back(i);
            rot.plane_j.push_back(j);
            rot.cos_t.push_back(std::cos(theta));
            rot.sin_t.push_back(std::sin(theta));
        }
        return rot;
    }

    void apply(double* x) const {
        for (size_t k = 0; k < plane_i.size(); ++k) {
            const double a = x[plane_i[k]], b = x[plane_j[k]];
            x[plane_i[k]] = cos_t[k] * a - sin_t[k] * b;
            x[plane_j[k]] = sin_t[k] * a + cos_t[k] * b;
        }
    }
};

inline Dataset sample_domain(const std::vector<double>& anchors, int num_classes, int dim,
                             int samples, double noise, const GivensRotation* rot,
                             const std::vector<double>* translation, Rng& rng,
                             uint64_t& next_example_id) {
    Dataset data;
    data.feature_dim = dim;
    std::vector<double> x(static_cast<size_t>(dim));
    for (int s = 0; s < samples; ++s) {
        const int label = s % num_classes;
        const double* anchor = anchors.data() + static_cast<size_t>(label) * dim;
        for (int d = 0; d < dim; ++d) x[static_cast<size_t>(d)] = anchor[d] + noise * rng.normal();
        if (rot != nullptr) rot->apply(x.data());
        if (translation != nullptr)
            for (int d = 0; d < dim; ++d) x[static_cast<size_t>(d)] += (*translation)[static_cast<size_t>(d)];
        data.features.insert(data.features.end(), x.begin(), x.end());
        data.labels.push_back(label);
        data.ids.push_back(next_example_id++);
    }
    return data;
}

inline std::vector<double> gaussian_anchors(int num_classes, int dim, Rng& rng) {
    std::vector<double> anchors(static_cast<size_t>(num_classes) * dim);
    for (double& v : anchors) v = rng.normal();
    return anchors;
}

}  // namespace detail

// Classes are Gaussian clusters around class anchors. Each target domain
// applies its own seeded rotation + translation (covariate shift). Auxiliary
// anchors blend the target anchors with fresh ones by the relatedness knob;
// the pre-training task is a larger, more-classes task of the same form.
inline SyntheticSuite gen_synthetic_suite(const GenSpec& spec, uint64_t seed) {
    spec.validate();
    SyntheticSuite suite;
    suite.spec = spec;
    suite.seed = seed;
    uint64_t next_id = 1;

    Rng anchor_rng(derive_seed(seed, "target-anchors", 0));
    suite.target_anchors = detail::gaussian_anchors(spec.num_classes, spec.feature_dim, anchor_rng);

    suite.target_task.name = "target";
    suite.target_task.num_classes = spec.num_classes;
    suite.target_task.split_fraction = spec.split_fraction;
    for (int d = 0; d < spec.num_domains; ++d) {
        Rng dom_rng(derive_seed(seed, "domain", static_cast<uint64_t>(d)));
        auto rot = detail::GivensRotation::random(spec.feature_dim, spec.domain_shift, dom_rng);
        std::vector<double> translation(static_cast<size_t>(spec.feature_dim));
        for (double& t : translation) t = 0.5 * spec.domain_shift * dom_rng.normal();
        Domain domain;
        domain.name = "d" + std::to_string(d);
        domain.data = detail::sample_domain(suite.target_anchors, spec.num_classes, spec.feature_dim,
                                            spec.samples_per_domain, spec.noise, &rot, &translation,
                                            dom_rng, next_id);
        suite.target_task.domains.push_back(std::move(domain));
    }

    Rng pre_rng(derive_seed(seed, "pretrain", 0));
    auto pre_anchors = detail::gaussian_anchors(spec.pretrain_classes, spec.feature_dim, pre_rng);
    suite.pretrain_task.name = "pretrain";
    suite.pretrain_task.num_classes = spec.pretrain_classes;
    suite.pretrain_task.split_fraction = spec.split_fraction;
    suite.pretrain_task.domains.push_back(
        {"all", detail::sample_domain(pre_anchors, spec.pretrain_classes, spec.feature_dim,
                                      spec.pretrain_samples, spec.noise, nullptr, nullptr, pre_rng,
                                      next_id)});

    for (size_t a = 0; a < spec.aux_tasks.size(); ++a) {
        const auto& aspec = spec.aux_tasks[a];
        const int classes = aspec.num_classes > 0 ? aspec.num_classes : spec.num_classes;
        const int samples = aspec.samples > 0 ? aspec.samples : spec.samples_per_domain;
        Rng aux_rng(derive_seed(seed, "aux:" + aspec.name, a));
        auto fresh = detail::gaussian_anchors(classes, spec.feature_dim, aux_rng);
        std::vector<double> anchors = fresh;
        const double r = aspec.relatedness;
        const double scale = std::sqrt(r * r + (1.0 - r) * (1.0 - r));
        const size_t shared = static_cast<size_t>(std::min(classes, spec.num_classes)) *
                              static_cast<size_t>(spec.feature_dim);
        for (size_t i = 0; i < shared; ++i)
            anchors[i] = (r * suite.target_anchors[i] + (1.0 - r) * fresh[i]) / scale;

        Task task;
        task.name = aspec.name;
        task.num_classes = classes;
        task.split_fraction = spec.split_fraction;
        task.domains.push_back({"all", detail::sample_domain(anchors, classes, spec.feature_dim,
                                                             samples, spec.noise, nullptr, nullptr,
                                                             aux_rng, next_id)});
        suite.aux_tasks.push_back(std::move(task));
        suite.aux_anchors.push_back(std::move(anchors));
    }
    return suite;
}

// ---------------------------------------------------------------------------
// Suite (de)serialization
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json dataset_to_json(const Dataset& d) {
    return {{"feature_dim", d.feature_dim}, {"features", d.features}, {"labels", d.labels},
            {"ids", d.ids}};
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
    Dataset d;
    d.feature_dim = j.at("feature_dim").get<int>();
    d.features = j.at("features").get<std::vector<double>>();
    d.labels = j.at("labels").get<std::vector<int>>();
    d.ids = j.at("ids").get<std::vector<uint64_t>>();
    if (d.feature_dim <= 0 || d.features.size() != static_cast<size_t>(d.labels.size()) * d.feature_dim ||
        d.ids.size() != d.labels.size())
        throw DataError("malformed dataset payload");
    return d;
}

inline nlohmann::json task_to_json(const Task& t) {
    nlohmann::json domains = nlohmann::json::array();
    for (const auto& d : t.domains) domains.push_back({{"name", d.name}, {"data", dataset_to_json(d.data)}});
    return {{"name", t.name}, {"num_classes", t.num_classes}, {"split_fraction", t.split_fraction},
            {"domains", domains}};
}

inline Task task_from_json(const nlohmann::json& j) {
    Task t;
    t.name = j.at("name").get<std::string>();
    t.num_classes = j.at("num_classes").get<int>();
    t.split_fraction = j.at("split_fraction").get<double>();
    for (const auto& jd : j.at("domains"))
        t.domains.push_back({jd.at("name").get<std::string>(), dataset_from_json(jd.at("data"))});
    return t;
}

}  // namespace detail

inline nlohmann::json genspec_to_json(const GenSpec& s) {
    nlohmann::json aux = nlohmann::json::array();
    for (const auto& a : s.aux_tasks)
        aux.push_back({{"name", a.name}, {"relatedness", a.relatedness},
                       {"num_classes", a.num_classes}, {"samples", a.samples}});
    return {{"feature_dim", s.feature_dim},       {"num_classes", s.num_classes},
            {"num_domains", s.num_domains},       {"samples_per_domain", s.samples_per_domain},
            {"domain_shift", s.domain_shift},     {"noise", s.noise},
            {"split_fraction", s.split_fraction}, {"pretrain_classes", s.pretrain_classes},
            {"pretrain_samples", s.pretrain_samples}, {"aux_tasks", aux}};
}

inline GenSpec genspec_from_json(const nlohmann::json& j) {
    GenSpec s;
    s.feature_dim = j.at("feature_dim").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.num_domains = j.at("num_domains").get<int>();
    s.samples_per_domain = j.at("samples_per_domain").get<int>();
    s.domain_shift = j.at("domain_shift").get<double>();
    s.noise = j.at("noise").get<double>();
    s.split_fraction = j.at("split_fraction").get<double>();
    s.pretrain_classes = j.at("pretrain_classes").get<int>();
    s.pretrain_samples = j.at("pretrain_samples").get<int>();
    s.aux_tasks.clear();
    for (const auto& ja : j.at("aux_tasks"))
        s.aux_tasks.push_back({ja.at("name").get<std::string>(), ja.at("relatedness").get<double>(),
                               ja.at("num_classes").get<int>(), ja.at("samples").get<int>()});
    return s;
}

inline void save_suite(const SyntheticSuite& suite, const std::filesystem::path& path) {
    nlohmann::json j;
    j["spec"] = genspec_to_json(suite.spec);
    j["seed"] = suite.seed;
    j["pretrain_task"] = detail::task_to_json(suite.pretrain_task);
    auto aux = nlohmann::json::array();
    for (const auto& t : suite.aux_tasks) aux.push_back(detail::task_to_json(t));
    j["aux_tasks"] = aux;
    j["target_task"] = detail::task_to_json(suite.target_task);
    j["target_anchors"] = suite.target_anchors;
    j["aux_anchors"] = suite.aux_anchors;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline SyntheticSuite load_suite(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        SyntheticSuite suite;
        suite.spec = genspec_from_json(j.at("spec"));
        suite.seed = j.at("seed").get<uint64_t>();
        suite.pretrain_task = detail::task_from_json(j.at("pretrain_task"));
        for (const auto& jt : j.at("aux_tasks")) suite.aux_tasks.push_back(detail::task_from_json(jt));
        suite.target_task = detail::task_from_json(j.at("target_task"));
        suite.target_anchors = j.at("target_anchors").get<std::vector<double>>();
        suite.aux_anchors = j.at("aux_anchors").get<std::vector<std::vector<double>>>();
        return suite;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed suite file: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

enum class Strategy {
    Vanilla,
    MovingAverage,
    Wise,
    SoupsUniform,
    SoupsGreedy,
    InterTraining,
    Fusing,
    RatatouilleUniform,
    RatatouilleGreedy,
    DeepEnsemble,
};

inline Strategy strategy_from_string(const std::string& s) {
    static const std::map<std::string, Strategy> table = {
        {"vanilla", Strategy::Vanilla},
        {"moving_average", Strategy::MovingAverage},
        {"wise", Strategy::Wise},
        {"soups_uniform", Strategy::SoupsUniform},
        {"soups_greedy", Strategy::SoupsGreedy},
        {"inter_training", Strategy::InterTraining},
        {"fusing", Strategy::Fusing},
        {"ratatouille_uniform", Strategy::RatatouilleUniform},
        {"ratatouille_greedy", Strategy::RatatouilleGreedy},
        {"deep_ensemble", Strategy::DeepEnsemble},
    };
    auto it = table.find(s);
    if (it == table.end()) throw ConfigError("unknown strategy: " + s);
    return it->second;
}

inline std::pair<std::string, std::string> strategy_row_names(Strategy s) {
    switch (s) {
        case Strategy::Vanilla: return {"vanilla", "id_val"};
        case Strategy::MovingAverage: return {"moving_average", "id_val"};
        case Strategy::Wise: return {"wise", "id_val"};
        case Strategy::SoupsUniform: return {"soups", "uniform"};
        case Strategy::SoupsGreedy: return {"soups", "greedy"};
        case Strategy::InterTraining: return {"inter_training", "id_val"};
        case Strategy::Fusing: return {"fusing", "id_val"};
        case Strategy::RatatouilleUniform: return {"ratatouille", "uniform"};
        case Strategy::RatatouilleGreedy: return {"ratatouille", "greedy"};
        case Strategy::DeepEnsemble: return {"deep_ensemble", "uniform"};
    }
    throw ConfigError("unknown strategy");
}

struct ResultRow {
    std::string strategy;
    std::string selection;
    std::string test_domain;
    double ood_acc = 0.0;
    double id_val_acc = 0.0;
    int64_t seed = 0;
    int runs_used = 0;
    std::vector<std::string> aux_tasks_used;
};

struct ProtocolConfig {
    std::vector<int> hidden_widths{32};
    HyperParamDistribution dist;   // target-run random search
    HyperParams aux_cfg;           // auxiliary inter-training template
    HyperParams probe_cfg;         // linear probe template
    HyperParams pretrain_cfg;      // T0 training from scratch
    int freeze_recycled = 25;      // warmup for inter-trained / fused initializations
    std::vector<double> wise_lambdas{0.0, 0.25, 0.5, 0.75, 1.0};
    int threads = 1;
    bool pool_across_seeds = false;

    ProtocolConfig() {
        aux_cfg.learning_rate = 0.005;
        aux_cfg.steps = 300;
        aux_cfg.eval_every = 25;
        probe_cfg.learning_rate = 0.03;
        probe_cfg.steps = 200;
        probe_cfg.eval_every = 25;
        pretrain_cfg.learning_rate = 0.01;
        pretrain_cfg.steps = 600;
        pretrain_cfg.eval_every = 50;
    }
};

// Mean-softmax prediction averaging (deep ensembles).
inline double ensemble_accuracy(const std::vector<const Checkpoint*>& members, const Dataset& data) {
    if (members.empty()) throw DataError("empty ensemble");
    const int classes = members.front()->classifier[0].shape[1];
    std::vector<double> probs(static_cast<size_t>(data.size()) * classes, 0.0);
    for (const auto* m : members) {
        auto logits = forward(*m, data);
        softmax_rows(logits, classes);
        for (size_t i = 0; i < probs.size(); ++i) probs[i] += logits[i];
    }
    int correct = 0;
    for (int r = 0; r < data.size(); ++r) {
        const double* row = probs.data() + static_cast<size_t>(r) * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;
        if (best == data.labels[static_cast<size_t>(r)]) ++correct;
    }
    return static_cast<double>(correct) / data.size();
}

struct AblationPoint {
    std::string ablation;
    std::string strategy;
    double x = 0.0;
    double mean_ood_acc = 0.0;
    double std_ood_acc = 0.0;
    int count = 0;
};

// Runs the leave-one-domain-out protocol on a fixed suite. The pre-trained
// model is trained once from the suite seed (shared across every protocol
// seed, like a downloaded foundation model); the auxiliary inter-training
// pass is computed once per protocol seed and reused across folds.
class ProtocolRunner {
  public:
    ProtocolRunner(const SyntheticSuite& suite, ProtocolConfig cfg)
        : suite_(suite), cfg_(std::move(cfg)) {
        NetSpec spec;
        spec.input_dim = suite.spec.feature_dim;
        spec.hidden_widths = cfg_.hidden_widths;
        spec.num_classes = suite.spec.pretrain_classes;
        Checkpoint scratch = init_params(spec, derive_seed(suite.seed, "pretrain-init", 0));
        TaskView view = make_task_view(suite.pretrain_task, derive_seed(suite.seed, "pretrain-split", 0));
        HyperParams pcfg = cfg_.pretrain_cfg;
        pcfg.seed = derive_seed(suite.seed, "pretrain-run", 0);
        pretrained_ = fine_tune(scratch, view, pcfg).best;
    }

    const Checkpoint& pretrained() const { return pretrained_; }

    std::vector<ResultRow> run(const std::vector<Strategy>& strategies, int num_runs,
                               const std::vector<uint64_t>& seeds) const {
        return run_impl(strategies, num_runs, seeds, static_cast<int>(suite_.aux_tasks.size()));
    }

    // Ratatouille-uniform restricted to the first k auxiliary tasks,
    // k = 0..max_aux; k = 0 degenerates to model soups over the direct
    // transfer only.
    std::vector<AblationPoint> ablate_num_aux(int num_runs, int max_aux,
                                              const std::vector<uint64_t>& seeds) const {
        if (max_aux > static_cast<int>(suite_.aux_tasks.size()))
            throw ConfigError("max_aux exceeds available auxiliary tasks");
        std::vector<AblationPoint> points;
        for (int k = 0; k <= max_aux; ++k) {
            auto rows = run_impl({Strategy::RatatouilleUniform}, num_runs, seeds, k);
            points.push_back(summarize(rows, "num_aux", "ratatouille_uniform", k));
        }
        return points;
    }

    std::vector<AblationPoint> ablate_steps(const std::vector<int>& step_grid, int num_runs,
                                            const std::vector<uint64_t>& seeds) const {
        std::vector<AblationPoint> points;
        for (int steps : step_grid) {
            if (steps < 1) throw ConfigError("steps must be positive");
            ProtocolRunner variant = *this;
            variant.cfg_.dist.steps = steps;
            variant.cfg_.dist.eval_every = std::min(cfg_.dist.eval_every, steps);
            variant.cfg_.freeze_recycled = std::min(cfg_.freeze_recycled, steps / 2);
            auto rows = variant.run_impl({Strategy::SoupsUniform, Strategy::RatatouilleUniform},
                                         num_runs, seeds, static_cast<int>(suite_.aux_tasks.size()));
            points.push_back(summarize(filter(rows, "soups"), "steps", "soups_uniform", steps));
            points.push_back(summarize(filter(rows, "ratatouille"), "steps", "ratatouille_uniform", steps));
        }
        return points;
    }

    // Soup sizes share run-pool prefixes: run j's hyperparameters depend only
    // on (seed, fold, j), so M and M' < M use the same first M' runs.
    std::vector<AblationPoint> ablate_num_runs(const std::vector<int>& run_grid,
                                               const std::vector<uint64_t>& seeds) const {
        std::vector<AblationPoint> points;
        for (int m : run_grid) {
            if (m < 1) throw ConfigError("run counts must be positive");
            auto rows = run_impl({Strategy::SoupsUniform, Strategy::RatatouilleUniform}, m, seeds,
                                 static_cast<int>(suite_.aux_tasks.size()));
            points.push_back(summarize(filter(rows, "soups"), "num_runs", "soups_uniform", m));
            points.push_back(summarize(filter(rows, "ratatouille"), "num_runs", "ratatouille_uniform", m));
        }
        return points;
    }

  private:
    struct FoldPools {
        std::vector<RunResult> shared;    // all runs from (w_lp, phi_pt)
        std::vector<RunResult> recycled;  // round-robin over aux + direct inits
        std::vector<RunResult> fused;     // per-run softmax-fused initializations
        Checkpoint shared_init;           // (w_lp, phi_pt)
    };

    static std::vector<ResultRow> filter(const std::vector<ResultRow>& rows, const std::string& name) {
        std::vector<ResultRow> out;
        for (const auto& r : rows)
            if (r.strategy == name) out.push_back(r);
        return out;
    }

    static AblationPoint summarize(const std::vector<ResultRow>& rows, const std::string& ablation,
                                   const std::string& strategy, double x) {
        double sum = 0.0, sum_sq = 0.0;
        for (const auto& r : rows) {
            sum += r.ood_acc;
            sum_sq += r.ood_acc * r.ood_acc;
        }
        const int n = static_cast<int>(rows.size());
        const double mean = n > 0 ? sum / n : 0.0;
        const double var = n > 0 ? std::max(0.0, sum_sq / n - mean * mean) : 0.0;
        return {ablation, strategy, x, mean, std::sqrt(var), n};
    }

    std::vector<Checkpoint> aux_carriers(uint64_t seed, int num_aux) const {
        std::vector<Checkpoint> carriers;
        for (int i = 0; i < num_aux; ++i) {
            TaskView view = make_task_view(suite_.aux_tasks[static_cast<size_t>(i)],
                                           derive_seed(seed, "aux-split", static_cast<uint64_t>(i)));
            HyperParams acfg = cfg_.aux_cfg;
            acfg.seed = derive_seed(seed, "aux-run", static_cast<uint64_t>(i));
            carriers.push_back(inter_train(pretrained_, {view}, {acfg}));
        }
        return carriers;
    }

    enum class Family { Shared, Recycled, Fused };

    std::vector<RunResult> build_pool(Family family, const std::vector<Checkpoint>& carriers,
                                      const Checkpoint& shared_init,
                                      const std::vector<ParamBlock>& probe, const TaskView& target,
                                      int num_runs, uint64_t fold_seed) const {
        // Initializations: auxiliary carriers first, the direct transfer
        // last, so a single run lands on an inter-trained featurizer.
        std::vector<Checkpoint> inits;
        std::vector<bool> recycled_flag;
        if (family == Family::Recycled) {
            for (const auto& c : carriers) {
                inits.push_back(swap_classifier(c, probe));
                recycled_flag.push_back(true);
            }
            inits.push_back(shared_init);
            recycled_flag.push_back(false);
        }

        std::vector<RunResult> pool;
        for (int j = 0; j < num_runs; ++j) {
            HyperParams hp = sample_hparams(cfg_.dist, derive_seed(fold_seed, "hp", static_cast<uint64_t>(j)));
            const Checkpoint* init = &shared_init;
            bool frozen_warmup = false;
            Checkpoint fused_holder;
            if (family == Family::Recycled) {
                const size_t slot = static_cast<size_t>(j) % inits.size();
                init = &inits[slot];
                frozen_warmup = recycled_flag[slot];
            } else if (family == Family::Fused) {
                Rng rng(derive_seed(fold_seed, "fuse", static_cast<uint64_t>(j)));
                std::vector<std::vector<ParamBlock>> feats;
                for (const auto& c : carriers) feats.push_back(c.featurizer);
                feats.push_back(pretrained_.featurizer);
                std::vector<double> kappas;
                for (size_t i = 0; i < feats.size(); ++i) kappas.push_back(rng.uniform(0.0, 4.0));
                auto fused = fusing_init(feats, kappas);
                fused_holder.featurizer = std::move(fused.featurizer);
                fused_holder.lineage = pretrained_.lineage;
                fused_holder.lineage.chain.push_back({"fused", hparams_digest(hp)});
                fused_holder = swap_classifier(fused_holder, probe);
                init = &fused_holder;
                frozen_warmup = true;
            }
            hp.freeze_featurizer_steps = frozen_warmup ? std::min(cfg_.freeze_recycled, hp.steps - 1) : 0;
            pool.push_back(fine_tune(*init, target, hp));
        }
        return pool;
    }

    std::vector<ResultRow> run_impl(const std::vector<Strategy>& strategies, int num_runs,
                                    const std::vector<uint64_t>& seeds, int num_aux) const {
        if (num_runs < 1) throw ConfigError("num_runs must be >= 1");
        if (strategies.empty()) throw ConfigError("no strategies requested");
        if (seeds.empty()) throw ConfigError("no seeds given");
        if (num_aux > static_cast<int>(suite_.aux_tasks.size()))
            throw ConfigError("not enough auxiliary tasks");

        bool need_shared = false, need_recycled = false, need_fused = false;
        for (Strategy s : strategies) {
            switch (s) {
                case Strategy::Vanilla:
                case Strategy::MovingAverage:
                case Strategy::Wise:
                case Strategy::SoupsUniform:
                case Strategy::SoupsGreedy: need_shared = true; break;
                case Strategy::InterTraining:
                case Strategy::RatatouilleUniform:
                case Strategy::RatatouilleGreedy:
                case Strategy::DeepEnsemble: need_recycled = true; break;
                case Strategy::Fusing: need_fused = true; break;
            }
        }

        std::vector<std::string> aux_names;
        for (int i = 0; i < num_aux; ++i) aux_names.push_back(suite_.aux_tasks[static_cast<size_t>(i)].name);

        const auto& domains = suite_.target_task.domains;
        struct SeedOutput {
            std::vector<ResultRow> rows;
            // bests per fold, kept only when pooling across seeds
            std::vector<std::vector<Checkpoint>> shared_bests, recycled_bests;
        };
        std::vector<SeedOutput> outputs(seeds.size());

        parallel_for(static_cast<int>(seeds.size()), cfg_.threads, [&](int si) {
            const uint64_t seed = seeds[static_cast<size_t>(si)];
            SeedOutput& out = outputs[static_cast<size_t>(si)];
            const auto carriers = (need_recycled || need_fused) ? aux_carriers(seed, num_aux)
                                                                : std::vector<Checkpoint>{};
            if (cfg_.pool_across_seeds) {
                out.shared_bests.resize(domains.size());
                out.recycled_bests.resize(domains.size());
            }

            for (size_t di = 0; di < domains.size(); ++di) {
                const std::string& test_domain = domains[di].name;
                const uint64_t fold_seed = derive_seed(seed, "fold:" + test_domain, di);
                TargetFold fold = make_target_fold(suite_.target_task, test_domain,
                                                   derive_seed(seed, "target-split", 0));
                HyperParams pcfg = cfg_.probe_cfg;
                pcfg.seed = derive_seed(fold_seed, "probe", 0);
                auto probe = linear_probe(pretrained_.featurizer, fold.view, pcfg);
                Checkpoint shared_init = swap_classifier(pretrained_, probe);

                FoldPools pools;
                pools.shared_init = shared_init;
                if (need_shared)
                    pools.shared = build_pool(Family::Shared, carriers, shared_init, probe,
                                              fold.view, num_runs, fold_seed);
                if (need_recycled)
                    pools.recycled = build_pool(Family::Recycled, carriers, shared_init, probe,
                                                fold.view, num_runs, fold_seed);
                if (need_fused)
                    pools.fused = build_pool(Family::Fused, carriers, shared_init, probe, fold.view,
                                             num_runs, fold_seed);

                for (Strategy s : strategies)
                    out.rows.push_back(evaluate_strategy(s, pools, fold, seed, aux_names));

                if (cfg_.pool_across_seeds) {
                    for (const auto& r : pools.shared) out.shared_bests[di].push_back(r.best);
                    for (const auto& r : pools.recycled) out.recycled_bests[di].push_back(r.best);
                }
            }
        });

        std::vector<ResultRow> rows;
        for (auto& out : outputs)
            rows.insert(rows.end(), out.rows.begin(), out.rows.end());

        if (cfg_.pool_across_seeds) {
            // "uniform (pooled)": average every weight across all data-split
            // seeds; no shared ID-val set exists, so greedy is not offered.
            for (size_t di = 0; di < domains.size(); ++di) {
                TargetFold fold = make_target_fold(suite_.target_task, domains[di].name,
                                                   derive_seed(seeds.front(), "target-split", 0));
                auto pooled_row = [&](const char* strategy, bool recycled) -> void {
                    std::vector<const Checkpoint*> members;
                    for (const auto& out : outputs)
                        for (const auto& b : recycled ? out.recycled_bests[di] : out.shared_bests[di])
                            members.push_back(&b);
                    if (members.empty()) return;
                    Checkpoint merged = detail::mean_of(members);
                    ResultRow row;
                    row.strategy = strategy;
                    row.selection = "uniform_pooled";
                    row.test_domain = domains[di].name;
                    row.ood_acc = accuracy(merged, fold.test);
                    row.id_val_acc = accuracy(merged, fold.view.val);
                    row.seed = -1;
                    row.runs_used = static_cast<int>(members.size());
                    row.aux_tasks_used = recycled ? aux_names : std::vector<std::string>{};
                    rows.push_back(std::move(row));
                };
                if (need_shared) pooled_row("soups", false);
                if (need_recycled) pooled_row("ratatouille", true);
            }
        }

        std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
            return std::tie(a.strategy, a.selection, a.test_domain, a.seed) <
                   std::tie(b.strategy, b.selection, b.test_domain, b.seed);
        });
        return rows;
    }

    ResultRow evaluate_strategy(Strategy s, const FoldPools& pools, const TargetFold& fold,
                                uint64_t seed, const std::vector<std::string>& aux_names) const {
        ResultRow row;
        auto [name, selection] = strategy_row_names(s);
        row.strategy = name;
        row.selection = selection;
        row.test_domain = fold.test_domain;
        row.seed = static_cast<int64_t>(seed);

        auto eval_ckpt = [&](const Checkpoint& c, int runs_used) {
            row.ood_acc = accuracy(c, fold.test);
            row.id_val_acc = accuracy(c, fold.view.val);
            row.runs_used = runs_used;
        };
        auto id_val = [&](const Checkpoint& c) { return accuracy(c, fold.view.val); };

        switch (s) {
            case Strategy::Vanilla:
                eval_ckpt(select_best_by_id_val(pools.shared), 1);
                break;
            case Strategy::MovingAverage: {
                // Moving average per trajectory, then ID-val selection across runs.
                Checkpoint best;
                double best_acc = -1.0;
                for (const auto& run : pools.shared) {
                    Checkpoint ma = collect_moving_average(run);
                    double acc = id_val(ma);
                    if (acc > best_acc) {
                        best_acc = acc;
                        best = std::move(ma);
                    }
                }
                eval_ckpt(best, 1);
                break;
            }
            case Strategy::Wise: {
                // Interpolate the ID-val-best run toward its initialization;
                // the mixing coefficient is picked on ID-val.
                const Checkpoint& ft = select_best_by_id_val(pools.shared);
                Checkpoint best;
                double best_acc = -1.0;
                for (double lambda : cfg_.wise_lambdas) {
                    Checkpoint cand = wise(ft, pools.shared_init, lambda);
                    double acc = id_val(cand);
                    if (acc > best_acc) {
                        best_acc = acc;
                        best = std::move(cand);
                    }
                }
                eval_ckpt(best, 1);
                break;
            }
            case Strategy::SoupsUniform:
                eval_ckpt(uniform_soup(pools.shared), static_cast<int>(pools.shared.size()));
                break;
            case Strategy::SoupsGreedy: {
                auto [model, report] = greedy_soup(pools.shared, id_val);
                eval_ckpt(model, static_cast<int>(report.accepted.size()));
                break;
            }
            case Strategy::InterTraining:
                eval_ckpt(select_best_by_id_val(pools.recycled), 1);
                row.aux_tasks_used = aux_names;
                break;
            case Strategy::Fusing:
                eval_ckpt(select_best_by_id_val(pools.fused), 1);
                row.aux_tasks_used = aux_names;
                break;
            case Strategy::RatatouilleUniform:
                eval_ckpt(uniform_soup(pools.recycled), static_cast<int>(pools.recycled.size()));
                row.aux_tasks_used = aux_names;
                break;
            case Strategy::RatatouilleGreedy: {
                auto [model, report] = greedy_soup(pools.recycled, id_val);
                eval_ckpt(model, static_cast<int>(report.accepted.size()));
                row.aux_tasks_used = aux_names;
                break;
            }
            case Strategy::DeepEnsemble: {
                std::vector<const Checkpoint*> members;
                for (const auto& r : pools.recycled) members.push_back(&r.best);
                row.ood_acc = ensemble_accuracy(members, fold.test);
                row.id_val_acc = ensemble_accuracy(members, fold.view.val);
                row.runs_used = static_cast<int>(members.size());
                row.aux_tasks_used = aux_names;
                break;
            }
        }
        return row;
    }

    SyntheticSuite suite_;
    ProtocolConfig cfg_;
    Checkpoint pretrained_;
};

inline std::vector<ResultRow> run_protocol(const SyntheticSuite& suite,
                                           const std::vector<Strategy>& strategies, int num_runs,
                                           const std::vector<uint64_t>& seeds,
                                           const ProtocolConfig& cfg = {}) {
    return ProtocolRunner(suite, cfg).run(strategies, num_runs, seeds);
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

inline std::string join_aux(const std::vector<std::string>& names) {
    std::string out;
    for (size_t i = 0; i < names.size(); ++i) {
        if (i > 0) out += ';';
        out += names[i];
    }
    return out;
}

inline std::string results_csv_string(const std::vector<ResultRow>& rows) {
    std::string out = "strategy,selection,test_domain,ood_acc,id_val_acc,seed,runs_used,aux_tasks_used\n";
    char buf[64];
    for (const auto& r : rows) {
        out += r.strategy + ',' + r.selection + ',' + r.test_domain + ',';
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,", r.ood_acc, r.id_val_acc);
        out += buf;
        out += std::to_string(r.seed) + ',' + std::to_string(r.runs_used) + ',' + join_aux(r.aux_tasks_used);
        out += '\n';
    }
    return out;
}

inline void emit_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << results_csv_string(rows);
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<ResultRow> parse_results_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) ||
        line != "strategy,selection,test_domain,ood_acc,id_val_acc,seed,runs_used,aux_tasks_used")
        throw DataError("unexpected results header");
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() == 7) fields.emplace_back();  // empty trailing aux list
        if (fields.size() != 8) throw DataError("malformed results row");
        ResultRow r;
        r.strategy = fields[0];
        r.selection = fields[1];
        r.test_domain = fields[2];
        r.ood_acc = std::stod(fields[3]);
        r.id_val_acc = std::stod(fields[4]);
        r.seed = std::stoll(fields[5]);
        r.runs_used = std::stoi(fields[6]);
        std::istringstream aux(fields[7]);
        std::string name;
        while (std::getline(aux, name, ';'))
            if (!name.empty()) r.aux_tasks_used.push_back(name);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::string ablation_csv_string(const std::vector<AblationPoint>& points) {
    std::string out = "ablation,strategy,x,mean_ood_acc,std_ood_acc,count\n";
    char buf[96];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%d\n", p.x, p.mean_ood_acc, p.std_ood_acc,
                      p.count);
        out += p.ablation + ',' + p.strategy + ',' + buf;
    }
    return out;
}

inline void emit_ablation_csv(const std::vector<AblationPoint>& points,
                              const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << ablation_csv_string(points);
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace rata
