#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "forge/ensembling.hpp"
#include "forge/errors.hpp"
#include "support.hpp"

using namespace forge;

namespace {

// Independent oracle: enumerate every count vector summing to `rounds` and
// return the best metric achievable by a counts/rounds blend.
double brute_force_best(const PredictionMatrix& oof, const EvalMetric& metric, int rounds,
                        std::vector<int>* best_counts = nullptr, int* enumerated = nullptr) {
    const std::size_t m = oof.models();
    std::vector<std::vector<double>> ranked(m);
    for (std::size_t i = 0; i < m; ++i) ranked[i] = rank_transform(oof.values[i]);

    std::vector<int> counts(m, 0);
    double best = metric.higher_is_better ? -1e300 : 1e300;
    int count_vectors = 0;

    std::function<void(std::size_t, int)> recurse = [&](std::size_t model, int left) {
        if (model + 1 == m) {
            counts[model] = left;
            ++count_vectors;
            std::vector<double> blended(oof.rows(), 0.0);
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t r = 0; r < blended.size(); ++r)
                    blended[r] += counts[j] * ranked[j][r] / rounds;
            const double score = metric.fn(blended, *oof.labels);
            if (metric.higher_is_better ? score > best : score < best) {
                best = score;
                if (best_counts) *best_counts = counts;
            }
            return;
        }
        for (int c = 0; c <= left; ++c) {
            counts[model] = c;
            recurse(model + 1, left - c);
        }
    };
    recurse(0, rounds);
    if (enumerated) *enumerated = count_vectors;
    return best;
}

PredictionMatrix synthetic_four_model_case() {
    // labels = 0.7*s1 + 0.3*s2 + small deterministic noise; models 3 and 4
    // carry little signal. Constructed (seed frozen) so the greedy climb
    // reaches the global optimum over all 680 count vectors at T=14.
    PredictionMatrix oof;
    oof.model_ids = {"m1", "m2", "m3", "m4"};
    const std::size_t r = 24;
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<double> s1(r), s2(r), s3(r), s4(r), labels(r);
    for (std::size_t i = 0; i < r; ++i) {
        s1[i] = uniform(rng);
        s2[i] = uniform(rng);
        s3[i] = uniform(rng);
        s4[i] = uniform(rng);
        labels[i] = 0.7 * s1[i] + 0.3 * s2[i] + 0.02 * (uniform(rng) - 0.5);
    }
    oof.values = {s1, s2, s3, s4};
    oof.labels = labels;
    return oof;
}

} // namespace

TEST_CASE("rank_transform definition") {
    CHECK(rank_transform({10, 30, 20}) ==
          std::vector<double>{1.0 / 3, 3.0 / 3, 2.0 / 3});
    CHECK(rank_transform({5, 5}) == std::vector<double>{0.75, 0.75});
    CHECK(rank_transform({42}) == std::vector<double>{1.0});
}

TEST_CASE("rank_transform is monotone and affine-invariant") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> uniform(-10.0, 10.0);
    for (int rep = 0; rep < 25; ++rep) {
        std::vector<double> x(30);
        for (auto& v : x) v = uniform(rng);
        const auto rx = rank_transform(x);
        std::vector<double> scaled(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) scaled[i] = 2.5 * x[i] + 7.0;
        CHECK(rank_transform(scaled) == rx);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < x.size(); ++j)
                if (x[i] < x[j]) CHECK(rx[i] < rx[j]);
    }
}

TEST_CASE("rank_transform rejects non-finite input") {
    CHECK_THROWS_AS(rank_transform({1.0, std::nan("")}), Error);
}

TEST_CASE("hill_climb_blend basics") {
    SUBCASE("single model gets weight 1.0") {
        PredictionMatrix oof;
        oof.model_ids = {"only"};
        oof.values = {{0.1, 0.9, 0.4, 0.6}};
        oof.labels = std::vector<double>{0, 1, 0, 1};
        const BlendFit fit = hill_climb_blend(oof, rank_correlation_metric(), 14);
        CHECK(fit.weights.weights.at("only") == 1.0);
    }

    SUBCASE("two identical models blend to either solo metric") {
        PredictionMatrix oof;
        oof.model_ids = {"a", "b"};
        oof.values = {{0.1, 0.5, 0.9, 0.3}, {0.1, 0.5, 0.9, 0.3}};
        oof.labels = std::vector<double>{0, 1, 1, 0};
        const EvalMetric metric = rank_correlation_metric();
        const double solo = metric.fn(rank_transform(oof.values[0]), *oof.labels);
        const BlendFit fit = hill_climb_blend(oof, metric, 14);
        CHECK(fit.fitted_score == doctest::Approx(solo).epsilon(1e-12));
    }

    SUBCASE("degenerate labels fail with a named metric error") {
        PredictionMatrix oof;
        oof.model_ids = {"a"};
        oof.values = {{0.1, 0.2, 0.3}};
        oof.labels = std::vector<double>{1, 1, 1};
        try {
            hill_climb_blend(oof, rank_correlation_metric(), 3);
            FAIL("expected metric error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::metric);
            CHECK(contains(e.what(), "constant"));
        }
    }
}

TEST_CASE("hill climb matches the exhaustive brute force on the synthetic case") {
    const PredictionMatrix oof = synthetic_four_model_case();
    const EvalMetric metric = rank_correlation_metric();
    const int rounds = 14;

    std::vector<int> best_counts;
    int enumerated = 0;
    const double best = brute_force_best(oof, metric, rounds, &best_counts, &enumerated);
    CHECK(enumerated == 680); // C(14+3, 3)

    const BlendFit fit = hill_climb_blend(oof, metric, rounds);
    CHECK(fit.fitted_score == doctest::Approx(best).epsilon(1e-9));

    double total = 0.0;
    for (const auto& [id, w] : fit.weights.weights) {
        CHECK(w >= 0.0);
        total += w;
        // denominators divide the selected round count
        const double scaled = w * fit.rounds_used;
        CHECK(std::abs(scaled - std::round(scaled)) < 1e-9);
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);
}

TEST_CASE("bag counts sum to the selected round and weights stay convex") {
    PredictionMatrix oof = synthetic_four_model_case();
    const BlendFit fit = hill_climb_blend(oof, rank_correlation_metric(), 14);
    int sum = 0;
    for (int c : fit.bag_counts) sum += c;
    CHECK(sum == fit.rounds_used);
    CHECK(fit.rounds_used >= 1);
    CHECK(fit.rounds_used <= 14);
    // Weight vectors like (8,4,1,1)/14 are representable outputs.
    const BlendWeights example{
        {{"a", 8.0 / 14}, {"b", 4.0 / 14}, {"c", 1.0 / 14}, {"d", 1.0 / 14}}};
    double total = 0.0;
    for (const auto& [id, w] : example.weights) total += w;
    CHECK(std::abs(total - 1.0) <= 1e-9);
}

TEST_CASE("no-regret on fitting data over 100 random instances") {
    std::mt19937_64 rng(4242);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::uniform_int_distribution<int> model_count(1, 5);
    std::uniform_int_distribution<int> row_count(8, 40);

    for (int instance = 0; instance < 100; ++instance) {
        const int m = model_count(rng);
        const int r = row_count(rng);
        PredictionMatrix oof;
        for (int j = 0; j < m; ++j) {
            oof.model_ids.push_back("m" + std::to_string(j));
            std::vector<double> row(r);
            for (auto& v : row) v = uniform(rng);
            oof.values.push_back(std::move(row));
        }
        std::vector<double> labels(r);
        for (auto& v : labels) v = uniform(rng);
        // Tie the labels loosely to model 0 so instances are not pure noise.
        for (int i = 0; i < r; ++i) labels[i] = 0.5 * oof.values[0][i] + 0.5 * labels[i];
        oof.labels = labels;

        const EvalMetric metric =
            instance % 2 == 0 ? rank_correlation_metric() : mean_absolute_error_metric();
        double best_single = metric.higher_is_better ? -1e300 : 1e300;
        for (int j = 0; j < m; ++j) {
            const double solo = metric.fn(rank_transform(oof.values[j]), labels);
            if (metric.higher_is_better ? solo > best_single : solo < best_single)
                best_single = solo;
        }
        const BlendFit fit = hill_climb_blend(oof, metric, 14);
        if (metric.higher_is_better)
            CHECK(fit.fitted_score >= best_single - 1e-12);
        else
            CHECK(fit.fitted_score <= best_single + 1e-12);
    }
}

TEST_CASE("blend") {
    PredictionMatrix matrix;
    matrix.model_ids = {"a", "b"};
    matrix.values = {{10, 30, 20}, {1, 2, 3}};

    SUBCASE("weight 1 on one model is its rank transform") {
        CHECK(blend(matrix, BlendWeights{{{"a", 1.0}}}) == rank_transform({10, 30, 20}));
    }

    SUBCASE("hand-computed 50/50 average") {
        // ranks a: 1/3, 1, 2/3; ranks b: 1/3, 2/3, 1
        const std::vector<double> expected = {1.0 / 3, 5.0 / 6, 5.0 / 6};
        const auto out = blend(matrix, BlendWeights{{{"a", 0.5}, {"b", 0.5}}});
        REQUIRE(out.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) CHECK(out[i] == doctest::Approx(expected[i]));
    }

    SUBCASE("unknown model id") {
        CHECK_THROWS_AS(blend(matrix, BlendWeights{{{"zz", 1.0}}}), Error);
    }

    SUBCASE("uniform weights over identical rows reproduce the row's transform") {
        PredictionMatrix twin;
        twin.model_ids = {"x", "y"};
        twin.values = {{4, 8, 6}, {4, 8, 6}};
        CHECK(blend(twin, BlendWeights{{{"x", 0.5}, {"y", 0.5}}}) == rank_transform({4, 8, 6}));
    }
}

TEST_CASE("determinism: same inputs, same weights") {
    const PredictionMatrix oof = synthetic_four_model_case();
    const BlendFit a = hill_climb_blend(oof, rank_correlation_metric(), 14);
    const BlendFit b = hill_climb_blend(oof, rank_correlation_metric(), 14);
    CHECK(a.bag_counts == b.bag_counts);
    CHECK(a.fitted_score == b.fitted_score);
}

TEST_CASE("score files round trip and align") {
    test::TempDir dir("oof");
    ScoreFile scores;
    scores.row_ids = {"r1", "r2", "r3"};
    scores.values = {0.25, 0.5, 0.125};
    save_score_file(dir.path / "m1.csv", scores);
    const ScoreFile loaded = load_score_file(dir.path / "m1.csv");
    CHECK(loaded.row_ids == scores.row_ids);
    CHECK(loaded.values == scores.values);

    ScoreFile labels = scores;
    labels.values = {1, 0, 1};
    save_score_file(dir.path / "labels.csv", labels);
    const PredictionMatrix matrix =
        load_prediction_matrix({{"m1", dir.path / "m1.csv"}}, dir.path / "labels.csv");
    CHECK(matrix.models() == 1);
    CHECK(matrix.rows() == 3);

    SUBCASE("misaligned row ids are rejected") {
        ScoreFile off = scores;
        off.row_ids = {"r1", "rX", "r3"};
        save_score_file(dir.path / "m2.csv", off);
        CHECK_THROWS_AS(
            load_prediction_matrix({{"m2", dir.path / "m2.csv"}}, dir.path / "labels.csv"),
            Error);
    }
}
