#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace forge {

// Word-level shingling + MinHash signatures for near-duplicate detection.

// All contiguous k-token windows after normalization: lowercase, collapse
// whitespace, drop punctuation-only tokens. Empty when fewer than k tokens.
std::set<std::string> shingle(const std::string& text, std::size_t k);

struct MinHashSignature {
    std::vector<std::uint64_t> values; // length == num_hashes
    std::size_t num_hashes = 0;
    std::uint64_t seed = 0;
    bool empty_input = false; // all-sentinel signature of an empty shingle set

    bool comparable_with(const MinHashSignature& other) const {
        return num_hashes == other.num_hashes && seed == other.seed;
    }
};

MinHashSignature minhash_signature(const std::set<std::string>& shingles,
                                   std::size_t num_hashes, std::uint64_t seed);

// Fraction of positions where the signatures agree.
double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b);

} // namespace forge
