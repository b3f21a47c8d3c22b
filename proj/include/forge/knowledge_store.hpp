#pragma once

#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "forge/util.hpp"

namespace forge {

// Two-level knowledge lookup: a fixed index of categories (L1 index), one
// instruction + pointer index per built category (L1 values), and the
// documents those pointers resolve to (L2).

using CategoryKey = std::string;

enum class CategoryKind { modality_task, modeling_strategy };

const char* to_string(CategoryKind kind);
CategoryKind category_kind_from_string(const std::string& s);

struct L1IndexEntry {
    CategoryKey key;
    std::string description; // <= 6 lines
    CategoryKind kind = CategoryKind::modality_task;

    bool operator==(const L1IndexEntry&) const = default;
};

struct L2Pointer {
    std::string doc_id;
    std::string description; // <= 3 lines

    bool operator==(const L2Pointer&) const = default;
};

struct L1Value {
    CategoryKey key;
    std::string instruction;
    std::vector<L2Pointer> l2_index;
    std::uint64_t revision = 0;

    bool operator==(const L1Value&) const = default;
};

enum class Provenance { web_sources, run_takeaway };

const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct L2Document {
    CategoryKey key;
    std::string doc_id;
    std::string body;
    std::string description; // <= 3 lines
    Provenance provenance = Provenance::web_sources;
    std::vector<std::string> sources; // URLs or a run id, >= 1
    std::string created_at;           // ISO-8601 UTC

    bool operator==(const L2Document&) const = default;
};

struct KnowledgeBase {
    std::vector<L1IndexEntry> l1_index;
    std::map<CategoryKey, L1Value> l1_values;
    std::map<CategoryKey, std::map<std::string, L2Document>> l2;

    bool operator==(const KnowledgeBase&) const = default;

    bool in_taxonomy(const CategoryKey& key) const;
    const L1IndexEntry* index_entry(const CategoryKey& key) const;
    std::size_t total_documents() const;
};

// ── validation ──────────────────────────────────────────────────────────

enum class IntegrityMode {
    strict,            // full referential closure
    pending_evolution, // unindexed docs tolerated, dangling pointers still fatal
};

struct IntegrityViolation {
    CategoryKey key;
    std::string doc_id;
    std::string rule;

    bool operator==(const IntegrityViolation&) const = default;
};

struct IntegrityReport {
    std::vector<IntegrityViolation> violations;

    bool ok() const { return violations.empty(); }
    std::string to_string() const;
};

bool is_valid_category_key(const std::string& key);

// Checks field invariants of a single document (non-empty body/description,
// description cap, provenance sources).
void check_document_invariants(const L2Document& doc);

IntegrityReport validate_integrity(const KnowledgeBase& kb, IntegrityMode mode);

// ── persistence ─────────────────────────────────────────────────────────
//
// Layout under root:
//   manifest.json                      format version + category list
//   categories/<key>/instruction.md    front-matter {revision} + instruction
//   categories/<key>/index.json        array of {doc_id, description}
//   categories/<key>/docs/<doc_id>.md  front-matter meta + body

KnowledgeBase load_knowledge_base(const fs::path& root_path);
void save_knowledge_base(const KnowledgeBase& kb, const fs::path& root_path);

// ── lookups and mutation ────────────────────────────────────────────────

// Category-level lookup; never returns L2 bodies.
const L1Value& query_category(const KnowledgeBase& kb, const CategoryKey& key);
const L2Document& query_document(const KnowledgeBase& kb, const CategoryKey& key,
                                 const std::string& doc_id);

// Stores `doc` under a fresh sequential doc_id ("<key>-0004") and returns it.
// The new document stays unindexed until the L1 layer is updated, so the KB
// is in pending_evolution state afterwards.
std::string insert_document(KnowledgeBase& kb, const CategoryKey& key, L2Document doc);

void replace_l1_value(KnowledgeBase& kb, const CategoryKey& key, L1Value value);

// ── shared handle ───────────────────────────────────────────────────────

// Concurrent read access with serialized writers. Readers get value
// snapshots; writers run under an exclusive lock and persist on success.
class KnowledgeStore {
public:
    explicit KnowledgeStore(fs::path root);

    KnowledgeBase snapshot() const;
    fs::path root() const { return root_; }

    // Runs `mutate` on a copy; if it returns normally and the copy passes
    // strict validation, saves and swaps it in. Throws otherwise and leaves
    // memory and disk untouched. Intermediate pending_evolution states exist
    // only inside `mutate`; what commits is always strict-valid.
    void update(const std::function<void(KnowledgeBase&)>& mutate);

private:
    fs::path root_;
    KnowledgeBase kb_;
    mutable std::shared_mutex mutex_;
};

} // namespace forge
