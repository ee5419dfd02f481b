#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rata/dataset.hpp"
#include "rata/errors.hpp"
#include "rata/merge.hpp"
#include "rata/nn.hpp"
#include "rata/trainer.hpp"

namespace rata {

struct LmcCurve {
    std::vector<double> grid;        // strictly increasing, grid[0]=0, grid[last]=1
    std::vector<double> accuracies;
    std::pair<std::string, std::string> endpoint_labels;
};

// Joint correctness counts for two classifiers: n11 both correct, n10 only
// the first correct, n01 only the second, n00 both wrong.
struct ContingencyCounts {
    int64_t n11 = 0, n10 = 0, n01 = 0, n00 = 0;

    int64_t total() const { return n11 + n10 + n01 + n00; }
};

inline ContingencyCounts contingency(const std::vector<int>& preds_a, const std::vector<int>& preds_b,
                                     const std::vector<int>& labels) {
    if (labels.empty()) throw DataError("empty prediction lists");
    if (preds_a.size() != labels.size() || preds_b.size() != labels.size())
        throw DataError("prediction/label length mismatch");
    ContingencyCounts c;
    for (size_t i = 0; i < labels.size(); ++i) {
        const bool a = preds_a[i] == labels[i];
        const bool b = preds_b[i] == labels[i];
        if (a && b) ++c.n11;
        else if (a) ++c.n10;
        else if (b) ++c.n01;
        else ++c.n00;
    }
    return c;
}

// 1 - Q where Q = (n11*n00 - n01*n10) / (n11*n00 + n01*n10). Range [0, 2],
// higher means the two classifiers err on more different examples.
inline double q_diversity(const ContingencyCounts& c) {
    const double coupled = static_cast<double>(c.n11) * static_cast<double>(c.n00);
    const double crossed = static_cast<double>(c.n01) * static_cast<double>(c.n10);
    if (coupled + crossed <= 0.0) throw DataError("q-statistic undefined");
    return 1.0 - (coupled - crossed) / (coupled + crossed);
}

// Different-errors over shared-errors: (n01 + n10) / n00. Follows the
// ratio-error convention of Aksela's comparison measure; higher = more diverse.
inline double ratio_error_diversity(const ContingencyCounts& c) {
    if (c.n00 == 0) throw DataError("ratio-error undefined");
    return static_cast<double>(c.n01 + c.n10) / static_cast<double>(c.n00);
}

enum class DiversityMeasure { Q, RatioError };

inline double diversity(const ContingencyCounts& c, DiversityMeasure measure) {
    return measure == DiversityMeasure::Q ? q_diversity(c) : ratio_error_diversity(c);
}

struct PairwiseDiversity {
    std::vector<std::vector<double>> matrix;  // NaN marks undefined pairs
    double mean = 0.0;                        // over defined unordered pairs
};

inline PairwiseDiversity pairwise_diversity(const std::vector<Checkpoint>& models,
                                            const Dataset& data, DiversityMeasure measure) {
    if (models.size() < 2) throw DataError("need at least two models");
    std::vector<std::vector<int>> preds;
    for (const auto& m : models) preds.push_back(predict(m, data));

    const size_t n = models.size();
    PairwiseDiversity out;
    out.matrix.assign(n, std::vector<double>(n, 0.0));
    double sum = 0.0;
    int defined = 0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            double d;
            try {
                d = diversity(contingency(preds[i], preds[j], data.labels), measure);
                sum += d;
                ++defined;
            } catch (const DataError&) {
                d = std::numeric_limits<double>::quiet_NaN();
            }
            out.matrix[i][j] = out.matrix[j][i] = d;
        }
    }
    if (defined == 0) throw DataError("diversity undefined for every pair");
    out.mean = sum / defined;
    return out;
}

namespace detail {

inline std::vector<double> uniform_grid(int grid_size) {
    if (grid_size < 3) throw DataError("grid size must be >= 3");
    std::vector<double> grid(static_cast<size_t>(grid_size));
    for (int k = 0; k < grid_size; ++k)
        grid[static_cast<size_t>(k)] = static_cast<double>(k) / (grid_size - 1);
    return grid;
}

}  // namespace detail

// Accuracy of (1-lambda)*a + lambda*b across a uniform lambda grid.
inline LmcCurve lmc_sweep(const Checkpoint& a, const Checkpoint& b, const Dataset& data,
                          int grid_size, std::pair<std::string, std::string> labels = {"a", "b"}) {
    LmcCurve curve;
    curve.grid = detail::uniform_grid(grid_size);
    curve.endpoint_labels = std::move(labels);
    for (double lambda : curve.grid)
        curve.accuracies.push_back(accuracy(interpolate(a, b, lambda), data));
    return curve;
}

// Three-way variant: lambda=0 is the uniform average of a and b, lambda=1 is c.
inline LmcCurve lmc_sweep3(const Checkpoint& a, const Checkpoint& b, const Checkpoint& c,
                           const Dataset& data, int grid_size,
                           std::pair<std::string, std::string> labels = {"avg(a,b)", "c"}) {
    LmcCurve curve;
    curve.grid = detail::uniform_grid(grid_size);
    curve.endpoint_labels = std::move(labels);
    for (double lambda : curve.grid)
        curve.accuracies.push_back(accuracy(interpolate3(a, b, c, lambda), data));
    return curve;
}

// Linear mode connectivity: every point stays above the chord between the
// endpoint accuracies, up to slack epsilon.
inline bool lmc_holds(const LmcCurve& curve, double epsilon) {
    if (curve.grid.size() != curve.accuracies.size() || curve.grid.size() < 2)
        throw DataError("malformed curve");
    const double acc0 = curve.accuracies.front();
    const double acc1 = curve.accuracies.back();
    for (size_t k = 0; k < curve.grid.size(); ++k) {
        const double chord = (1.0 - curve.grid[k]) * acc0 + curve.grid[k] * acc1;
        if (curve.accuracies[k] < chord - epsilon) return false;
    }
    return true;
}

// Accuracy of the uniform weight average minus the mean individual accuracy.
inline double accuracy_gain(const std::vector<Checkpoint>& models, const Dataset& data) {
    if (models.size() < 2) throw DataError("need at least two models");
    std::vector<const Checkpoint*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    detail::check_all_compatible(ptrs);
    double mean_individual = 0.0;
    for (const auto& m : models) mean_individual += accuracy(m, data);
    mean_individual /= static_cast<double>(models.size());
    return accuracy(detail::mean_of(ptrs), data) - mean_individual;
}

struct MixingPoint {
    double mu = 0.0;
    double mean_acc = 0.0;
    double std_acc = 0.0;
};

// Average M run-best checkpoints where a fraction mu is drawn from pool_b and
// the rest from pool_a (without replacement), repeated `repeats` times.
inline std::vector<MixingPoint> mixing_curve(const std::vector<RunResult>& pool_a,
                                             const std::vector<RunResult>& pool_b, int num_models,
                                             const std::vector<double>& mu_grid, const Dataset& data,
                                             int repeats, uint64_t seed) {
    if (num_models < 1 || repeats < 1) throw DataError("num_models and repeats must be positive");
    std::vector<MixingPoint> points;
    for (size_t mi = 0; mi < mu_grid.size(); ++mi) {
        const double mu = mu_grid[mi];
        if (mu < 0.0 || mu > 1.0) throw DataError("mu must be in [0,1]");
        const int from_b = static_cast<int>(std::lround(mu * num_models));
        const int from_a = num_models - from_b;
        if (from_a > static_cast<int>(pool_a.size()) || from_b > static_cast<int>(pool_b.size()))
            throw DataError("insufficient pool size");

        double sum = 0.0, sum_sq = 0.0;
        for (int r = 0; r < repeats; ++r) {
            Rng rng(derive_seed(seed, "mixing", mi * 1000003ULL + static_cast<uint64_t>(r)));
            std::vector<int> ia(pool_a.size()), ib(pool_b.size());
            std::iota(ia.begin(), ia.end(), 0);
            std::iota(ib.begin(), ib.end(), 0);
            rng.shuffle(ia);
            rng.shuffle(ib);
            std::vector<const Checkpoint*> members;
            for (int k = 0; k < from_a; ++k) members.push_back(&pool_a[static_cast<size_t>(ia[static_cast<size_t>(k)])].best);
            for (int k = 0; k < from_b; ++k) members.push_back(&pool_b[static_cast<size_t>(ib[static_cast<size_t>(k)])].best);
            const double acc = accuracy(detail::mean_of(members), data);
            sum += acc;
            sum_sq += acc * acc;
        }
        const double mean = sum / repeats;
        const double var = std::max(0.0, sum_sq / repeats - mean * mean);
        points.push_back({mu, mean, std::sqrt(var)});
    }
    return points;
}

struct DiversityAtStep {
    int64_t step = 0;
    double mean_diversity = 0.0;
};

// Mean pairwise diversity between paired runs at each evaluation step shared
// by every trajectory.
inline std::vector<DiversityAtStep> diversity_vs_steps(
    const std::vector<std::pair<const RunResult*, const RunResult*>>& run_pairs, const Dataset& data,
    DiversityMeasure measure) {
    if (run_pairs.empty()) throw DataError("no run pairs");

    auto steps_of = [](const RunResult& r) {
        std::vector<int64_t> s;
        for (const auto& p : r.trajectory) s.push_back(p.step);
        return s;
    };
    std::vector<int64_t> common = steps_of(*run_pairs[0].first);
    auto intersect = [&common](const std::vector<int64_t>& other) {
        std::vector<int64_t> kept;
        for (int64_t s : common)
            if (std::find(other.begin(), other.end(), s) != other.end()) kept.push_back(s);
        common = kept;
    };
    for (const auto& [ra, rb] : run_pairs) {
        intersect(steps_of(*ra));
        intersect(steps_of(*rb));
    }
    if (common.empty()) throw DataError("no common steps");

    auto at_step = [](const RunResult& r, int64_t step) -> const Checkpoint& {
        for (const auto& p : r.trajectory)
            if (p.step == step) return p.ckpt;
        throw DataError("step not in trajectory");
    };

    std::vector<DiversityAtStep> series;
    for (int64_t step : common) {
        double sum = 0.0;
        int defined = 0;
        for (const auto& [ra, rb] : run_pairs) {
            auto pa = predict(at_step(*ra, step), data);
            auto pb = predict(at_step(*rb, step), data);
            try {
                sum += diversity(contingency(pa, pb, data.labels), measure);
                ++defined;
            } catch (const DataError&) {
            }
        }
        series.push_back({step, defined > 0 ? sum / defined
                                            : std::numeric_limits<double>::quiet_NaN()});
    }
    return series;
}

inline void write_lmc_csv(const LmcCurve& curve, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "lambda,accuracy\n";
    char buf[64];
    for (size_t k = 0; k < curve.grid.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", curve.grid[k], curve.accuracies[k]);
        out << buf;
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline void write_diversity_csv(const PairwiseDiversity& div, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "i,j,diversity\n";
    char buf[64];
    for (size_t i = 0; i < div.matrix.size(); ++i)
        for (size_t j = i + 1; j < div.matrix.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f\n", i, j, div.matrix[i][j]);
            out << buf;
        }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace rata
