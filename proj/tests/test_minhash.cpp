#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forge/errors.hpp"
#include "forge/minhash.hpp"
#include "support.hpp"

using namespace forge;

TEST_CASE("shingle definition") {
    CHECK(shingle("a b c d", 2) == std::set<std::string>{"a b", "b c", "c d"});
    CHECK(shingle("a b", 3).empty());
    CHECK(shingle("", 1).empty());
}

TEST_CASE("shingle normalization") {
    CHECK(shingle("Hello   World", 1) == shingle("hello world", 1));
    CHECK(shingle("a b", 2) == shingle("a b ", 2));
    CHECK(shingle("a , b", 2) == shingle("a b", 2)); // punctuation-only token dropped
    CHECK(shingle("a\tb\nc", 2) == shingle("a b c", 2));
}

TEST_CASE("signatures are deterministic and parameterized") {
    const auto s = shingle("the quick brown fox jumps over the lazy dog", 2);
    const MinHashSignature a = minhash_signature(s, 64, 7);
    const MinHashSignature b = minhash_signature(s, 64, 7);
    CHECK(a.values == b.values);
    CHECK(estimate_jaccard(a, b) == 1.0);

    const MinHashSignature other_seed = minhash_signature(s, 64, 8);
    CHECK_THROWS_AS(estimate_jaccard(a, other_seed), Error);
    const MinHashSignature other_count = minhash_signature(s, 32, 7);
    CHECK_THROWS_AS(estimate_jaccard(a, other_count), Error);
}

TEST_CASE("empty shingle set gives a flagged sentinel signature") {
    const MinHashSignature sig = minhash_signature({}, 16, 1);
    CHECK(sig.empty_input);
    for (const auto v : sig.values) CHECK(v == std::numeric_limits<std::uint64_t>::max());
}

TEST_CASE("disjoint sets estimate near zero") {
    // 100 vs 100 distinct shingles, 128 hashes, exact Jaccard 0; checked
    // over 20 seeds.
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto [a, b] = test::sets_with_jaccard(0, 100, static_cast<int>(seed));
        REQUIRE(test::exact_jaccard(a, b) == 0.0);
        const double estimate = estimate_jaccard(minhash_signature(a, 128, seed),
                                                 minhash_signature(b, 128, seed));
        CHECK(estimate <= 0.1);
    }
}

TEST_CASE("estimate is close to the exact Jaccard at 0.5") {
    // |A intersect B| = 50, |A union B| = 100: exact Jaccard 0.5 by direct
    // set arithmetic; the mean estimate over 50 seeds must land within 0.05.
    const auto [a, b] = test::sets_with_jaccard(50, 25, 0);
    REQUIRE(test::exact_jaccard(a, b) == doctest::Approx(0.5));
    double sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed)
        sum += estimate_jaccard(minhash_signature(a, 128, seed), minhash_signature(b, 128, seed));
    CHECK(sum / 50.0 == doctest::Approx(0.5).epsilon(0.1));
    CHECK(std::abs(sum / 50.0 - 0.5) <= 0.05);
}

TEST_CASE("random pairs: |estimate - exact| <= 0.12 in 95% of 200 trials") {
    int ok = 0;
    int trial = 0;
    for (int rep = 0; rep < 40; ++rep) {
        for (const double target : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            ++trial;
            // Analytic construction at the target Jaccard with union 80.
            const std::size_t uni = 80;
            const auto shared = static_cast<std::size_t>(target * uni);
            const std::size_t unique_each = (uni - shared) / 2;
            const auto [a, b] =
                test::sets_with_jaccard(shared, unique_each, trial);
            const double exact = test::exact_jaccard(a, b);
            const double estimate =
                estimate_jaccard(minhash_signature(a, 128, static_cast<std::uint64_t>(trial)),
                                 minhash_signature(b, 128, static_cast<std::uint64_t>(trial)));
            if (std::abs(estimate - exact) <= 0.12) ++ok;
        }
    }
    CHECK(trial == 200);
    CHECK(ok >= 190);
}

TEST_CASE("unbiasedness: mean estimate converges to exact Jaccard") {
    for (const double target : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        const std::size_t uni = 100;
        const auto shared = static_cast<std::size_t>(target * uni);
        const auto [a, b] = test::sets_with_jaccard(shared, (uni - shared) / 2, 777);
        const double exact = test::exact_jaccard(a, b);
        double sum = 0.0;
        const int seeds = 50;
        for (int seed = 1; seed <= seeds; ++seed)
            sum += estimate_jaccard(
                minhash_signature(a, 128, static_cast<std::uint64_t>(seed)),
                minhash_signature(b, 128, static_cast<std::uint64_t>(seed)));
        CHECK(std::abs(sum / seeds - exact) <= 0.05);
    }
}
