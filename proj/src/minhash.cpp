#include "forge/minhash.hpp"
#include "forge/errors.hpp"
#include "forge/util.hpp"

#include <algorithm>
#include <cctype>
#include <limits>

namespace forge {

namespace {

bool punctuation_only(const std::string& token) {
    return std::all_of(token.begin(), token.end(),
                       [](unsigned char c) { return std::ispunct(c); });
}

std::vector<std::string> normalized_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty() && !punctuation_only(current)) tokens.push_back(current);
        current.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return tokens;
}

} // namespace

std::set<std::string> shingle(const std::string& text, std::size_t k) {
    if (k < 1) raise(ErrorKind::precondition, "shingle window must be >= 1");
    const std::vector<std::string> tokens = normalized_tokens(text);
    std::set<std::string> shingles;
    if (tokens.size() < k) return shingles;
    for (std::size_t i = 0; i + k <= tokens.size(); ++i) {
        std::string window = tokens[i];
        for (std::size_t j = 1; j < k; ++j) {
            window += ' ';
            window += tokens[i + j];
        }
        shingles.insert(std::move(window));
    }
    return shingles;
}

MinHashSignature minhash_signature(const std::set<std::string>& shingles,
                                   std::size_t num_hashes, std::uint64_t seed) {
    if (num_hashes < 1) raise(ErrorKind::precondition, "num_hashes must be >= 1");

    MinHashSignature signature;
    signature.num_hashes = num_hashes;
    signature.seed = seed;
    signature.values.assign(num_hashes, std::numeric_limits<std::uint64_t>::max());
    signature.empty_input = shingles.empty();
    if (signature.empty_input) return signature;

    // h_i(x) = splitmix64(fnv1a(x) ^ key_i) with keys derived from the seed,
    // a deterministic 64-bit hash family independent of the platform.
    std::vector<std::uint64_t> keys(num_hashes);
    for (std::size_t i = 0; i < num_hashes; ++i)
        keys[i] = splitmix64(seed + 0x9e3779b97f4a7c15ULL * (i + 1));

    for (const auto& item : shingles) {
        const std::uint64_t base = fnv1a_64(item);
        for (std::size_t i = 0; i < num_hashes; ++i) {
            const std::uint64_t h = splitmix64(base ^ keys[i]);
            if (h < signature.values[i]) signature.values[i] = h;
        }
    }
    return signature;
}

double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
    if (!a.comparable_with(b))
        raise(ErrorKind::comparability,
              "signatures not comparable: (num_hashes, seed) differ");
    if (a.values.size() != a.num_hashes || b.values.size() != b.num_hashes)
        raise(ErrorKind::precondition, "malformed signature");
    std::size_t agreeing = 0;
    for (std::size_t i = 0; i < a.num_hashes; ++i)
        if (a.values[i] == b.values[i]) ++agreeing;
    return static_cast<double>(agreeing) / static_cast<double>(a.num_hashes);
}

} // namespace forge
