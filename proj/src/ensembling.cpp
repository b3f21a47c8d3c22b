#include "forge/ensembling.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace forge {

void PredictionMatrix::validate() const {
    if (model_ids.empty()) raise(ErrorKind::precondition, "prediction matrix has no models");
    if (model_ids.size() != values.size())
        raise(ErrorKind::precondition, "model_ids/values size mismatch");
    std::set<std::string> unique(model_ids.begin(), model_ids.end());
    if (unique.size() != model_ids.size())
        raise(ErrorKind::precondition, "duplicate model ids");
    const std::size_t r = rows();
    if (r == 0) raise(ErrorKind::precondition, "prediction matrix has no rows");
    for (const auto& row : values) {
        if (row.size() != r) raise(ErrorKind::precondition, "ragged prediction matrix");
        for (double v : row)
            if (!std::isfinite(v)) raise(ErrorKind::precondition, "non-finite prediction value");
    }
    if (labels) {
        if (labels->size() != r)
            raise(ErrorKind::precondition, "label length does not match rows");
        for (double v : *labels)
            if (!std::isfinite(v)) raise(ErrorKind::precondition, "non-finite label");
    }
}

std::vector<double> rank_transform(const std::vector<double>& values) {
    const std::size_t r = values.size();
    if (r == 0) raise(ErrorKind::precondition, "rank_transform of empty sequence");
    for (double v : values)
        if (!std::isfinite(v)) raise(ErrorKind::precondition, "rank_transform of non-finite value");

    std::vector<std::size_t> order(r);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

    std::vector<double> ranks(r);
    std::size_t i = 0;
    while (i < r) {
        std::size_t j = i;
        while (j + 1 < r && values[order[j + 1]] == values[order[i]]) ++j;
        // 1-based ranks i+1 .. j+1 share their average.
        const double avg_rank = static_cast<double>(i + 1 + j + 1) / 2.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg_rank / static_cast<double>(r);
        i = j + 1;
    }
    return ranks;
}

EvalMetric rank_correlation_metric() {
    EvalMetric metric;
    metric.name = "rank_correlation";
    metric.higher_is_better = true;
    metric.fn = [](const std::vector<double>& predictions, const std::vector<double>& labels) {
        const std::vector<double> pr = rank_transform(predictions);
        const std::vector<double> lr = rank_transform(labels);
        const std::size_t n = pr.size();
        double mean_p = std::accumulate(pr.begin(), pr.end(), 0.0) / n;
        double mean_l = std::accumulate(lr.begin(), lr.end(), 0.0) / n;
        double cov = 0.0, var_p = 0.0, var_l = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            cov += (pr[i] - mean_p) * (lr[i] - mean_l);
            var_p += (pr[i] - mean_p) * (pr[i] - mean_p);
            var_l += (lr[i] - mean_l) * (lr[i] - mean_l);
        }
        if (var_l == 0.0)
            raise(ErrorKind::metric, "rank correlation undefined: labels are constant");
        if (var_p == 0.0) return 0.0; // constant predictions carry no signal
        return cov / std::sqrt(var_p * var_l);
    };
    return metric;
}

EvalMetric mean_absolute_error_metric() {
    EvalMetric metric;
    metric.name = "mae";
    metric.higher_is_better = false;
    metric.fn = [](const std::vector<double>& predictions, const std::vector<double>& labels) {
        double total = 0.0;
        for (std::size_t i = 0; i < predictions.size(); ++i)
            total += std::abs(predictions[i] - labels[i]);
        return total / static_cast<double>(predictions.size());
    };
    return metric;
}

EvalMetric metric_by_name(const std::string& name) {
    if (name == "rank_correlation") return rank_correlation_metric();
    if (name == "mae") return mean_absolute_error_metric();
    raise(ErrorKind::not_found, "unknown metric '" + name + "' (built-ins: rank_correlation, mae)");
}

BlendFit hill_climb_blend(const PredictionMatrix& oof, const EvalMetric& metric, int rounds) {
    oof.validate();
    if (!oof.labels) raise(ErrorKind::precondition, "hill_climb_blend needs labels");
    if (rounds < 1) raise(ErrorKind::precondition, "rounds must be >= 1");

    const std::size_t m = oof.models();
    const std::size_t r = oof.rows();
    std::vector<std::vector<double>> ranked(m);
    for (std::size_t i = 0; i < m; ++i) ranked[i] = rank_transform(oof.values[i]);

    auto score_of = [&](const std::vector<double>& predictions) {
        try {
            return metric.fn(predictions, *oof.labels);
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            raise(ErrorKind::metric, std::string("metric evaluation failed: ") + e.what());
        }
    };
    auto better = [&](double candidate, double incumbent) {
        return metric.higher_is_better ? candidate > incumbent : candidate < incumbent;
    };

    std::vector<int> counts(m, 0);
    std::vector<double> bag_sum(r, 0.0);
    std::vector<double> candidate(r);

    // Greedy additions can make later bags worse (every round must add a
    // model), so the returned blend is the best bag seen, not the last one.
    // Round 1 is exactly the best single model, which makes the fitted
    // score no-regret against any single candidate.
    std::vector<int> best_counts;
    double best_bag_score = 0.0;
    int best_round = 0;

    for (int round = 1; round <= rounds; ++round) {
        std::size_t best_model = 0;
        double best_score = 0.0;
        bool have_best = false;
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t row = 0; row < r; ++row)
                candidate[row] = (bag_sum[row] + ranked[j][row]) / static_cast<double>(round);
            const double s = score_of(candidate);
            if (!have_best || better(s, best_score)) {
                have_best = true;
                best_score = s;
                best_model = j; // strict improvement only, so ties keep the lowest index
            }
        }
        ++counts[best_model];
        for (std::size_t row = 0; row < r; ++row) bag_sum[row] += ranked[best_model][row];
        if (best_round == 0 || better(best_score, best_bag_score)) {
            best_bag_score = best_score;
            best_counts = counts;
            best_round = round;
        }
    }

    BlendFit fit;
    fit.bag_counts = best_counts;
    fit.fitted_score = best_bag_score;
    fit.rounds_used = best_round;
    for (std::size_t j = 0; j < m; ++j)
        if (best_counts[j] > 0)
            fit.weights.weights[oof.model_ids[j]] =
                static_cast<double>(best_counts[j]) / static_cast<double>(best_round);
    return fit;
}

std::vector<double> blend(const PredictionMatrix& matrix, const BlendWeights& weights) {
    matrix.validate();
    double total = 0.0;
    for (const auto& [id, w] : weights.weights) {
        if (std::find(matrix.model_ids.begin(), matrix.model_ids.end(), id) ==
            matrix.model_ids.end())
            raise(ErrorKind::not_found, "blend weight for unknown model '" + id + "'");
        if (w < 0.0) raise(ErrorKind::precondition, "negative blend weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9)
        raise(ErrorKind::precondition, "blend weights must sum to 1");

    std::vector<double> out(matrix.rows(), 0.0);
    for (std::size_t j = 0; j < matrix.models(); ++j) {
        const auto it = weights.weights.find(matrix.model_ids[j]);
        if (it == weights.weights.end() || it->second == 0.0) continue;
        const std::vector<double> ranked = rank_transform(matrix.values[j]);
        for (std::size_t row = 0; row < out.size(); ++row) out[row] += it->second * ranked[row];
    }
    return out;
}

// ── OOF prediction files ────────────────────────────────────────────────

ScoreFile load_score_file(const fs::path& path) {
    ScoreFile scores;
    int line_no = 0;
    for (const auto& line : split_lines(read_file(path))) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty()) continue;
        const std::size_t sep = t.find_first_of(", \t");
        if (sep == std::string::npos)
            raise(ErrorKind::format, path.string() + ":" + std::to_string(line_no) +
                                         ": expected 'row_id,value'");
        const std::string row_id = trim(t.substr(0, sep));
        const std::string value_text = trim(t.substr(sep + 1));
        try {
            scores.values.push_back(std::stod(value_text));
        } catch (const std::exception&) {
            raise(ErrorKind::format, path.string() + ":" + std::to_string(line_no) +
                                         ": bad numeric value '" + value_text + "'");
        }
        scores.row_ids.push_back(row_id);
    }
    if (scores.row_ids.empty())
        raise(ErrorKind::format, path.string() + ": empty score file");
    return scores;
}

void save_score_file(const fs::path& path, const ScoreFile& scores) {
    std::ostringstream out;
    for (std::size_t i = 0; i < scores.row_ids.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.10g", scores.values[i]);
        out << scores.row_ids[i] << "," << buf << "\n";
    }
    atomic_write_file(path, out.str());
}

PredictionMatrix load_prediction_matrix(
    const std::vector<std::pair<std::string, fs::path>>& model_files,
    const fs::path& labels_file) {
    if (model_files.empty())
        raise(ErrorKind::precondition, "no model prediction files given");

    const ScoreFile labels = load_score_file(labels_file);
    PredictionMatrix matrix;
    matrix.labels = labels.values;
    for (const auto& [model_id, path] : model_files) {
        const ScoreFile scores = load_score_file(path);
        if (scores.row_ids != labels.row_ids)
            raise(ErrorKind::format, "row ids in " + path.string() +
                                         " do not align with labels file " + labels_file.string());
        matrix.model_ids.push_back(model_id);
        matrix.values.push_back(scores.values);
    }
    matrix.validate();
    return matrix;
}

} // namespace forge
