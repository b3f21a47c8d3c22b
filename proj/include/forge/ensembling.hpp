#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forge/util.hpp"

namespace forge {

// Rank transformation and hill-climbing rank-average blending, exposed to
// the aggregator as a deterministic tool.

struct PredictionMatrix {
    std::vector<std::string> model_ids;      // m >= 1, unique
    std::vector<std::vector<double>> values; // m rows of length r
    std::optional<std::vector<double>> labels; // length r, required for fitting

    std::size_t models() const { return model_ids.size(); }
    std::size_t rows() const { return values.empty() ? 0 : values.front().size(); }
    void validate() const;
};

struct BlendWeights {
    std::map<std::string, double> weights; // non-negative, sum to 1 +- 1e-9
};

struct EvalMetric {
    std::string name;
    bool higher_is_better = true;
    std::function<double(const std::vector<double>& predictions,
                         const std::vector<double>& labels)> fn;
};

EvalMetric rank_correlation_metric(); // Spearman rho, higher better
EvalMetric mean_absolute_error_metric();
EvalMetric metric_by_name(const std::string& name);

// Average-rank fractions in (0, 1]: output[i] = avg 1-based rank of
// values[i] divided by r; ties share the average of their ranks.
std::vector<double> rank_transform(const std::vector<double>& values);

struct BlendFit {
    BlendWeights weights;
    double fitted_score = 0.0;
    std::vector<int> bag_counts; // per model, sums to rounds_used
    int rounds_used = 0;         // size of the best bag seen, <= rounds
};

// Ensemble selection with replacement: each of `rounds` steps adds the model
// whose inclusion maximizes the metric of the bag average (ties by lowest
// model index), and the best bag seen across rounds is returned (earliest
// round on ties). Round 1 is the best single model, so the fitted score is
// never below it. Weights are bag counts / rounds_used.
BlendFit hill_climb_blend(const PredictionMatrix& oof, const EvalMetric& metric, int rounds);

// Per-row weighted average of the rank-transformed model rows.
std::vector<double> blend(const PredictionMatrix& matrix, const BlendWeights& weights);

// ── OOF prediction files ────────────────────────────────────────────────
// Two-column text, one "row_id,value" (or whitespace-separated) pair per
// line; row ids must align exactly across all files.

struct ScoreFile {
    std::vector<std::string> row_ids;
    std::vector<double> values;
};

ScoreFile load_score_file(const fs::path& path);
void save_score_file(const fs::path& path, const ScoreFile& scores);

PredictionMatrix load_prediction_matrix(
    const std::vector<std::pair<std::string, fs::path>>& model_files,
    const fs::path& labels_file);

} // namespace forge
