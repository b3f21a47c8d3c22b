#include "forge/knowledge_store.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <mutex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace forge {

namespace {

constexpr int kFormatVersion = 1;
constexpr std::size_t kMaxKeyLength = 64;
constexpr std::size_t kMaxIndexDescriptionLines = 6;
constexpr std::size_t kMaxDocDescriptionLines = 3;

// Front matter is a one-object JSON block between `---` lines at the top of
// a markdown file; everything after the closing line is the verbatim body.
std::string render_front_matter(const json& meta, const std::string& body) {
    return "---\n" + meta.dump() + "\n---\n" + body;
}

std::pair<json, std::string> parse_front_matter(const std::string& text, const fs::path& origin) {
    if (text.rfind("---\n", 0) != 0)
        raise(ErrorKind::format, "missing front matter in " + origin.string());
    const std::size_t close = text.find("\n---\n", 3);
    if (close == std::string::npos)
        raise(ErrorKind::format, "unterminated front matter in " + origin.string());
    json meta = json::parse(text.substr(4, close - 3), nullptr, false);
    if (meta.is_discarded() || !meta.is_object())
        raise(ErrorKind::format, "invalid front matter in " + origin.string());
    return {meta, text.substr(close + 5)};
}

void check_description(const std::string& description, std::size_t max_lines,
                       const std::string& what) {
    if (trim(description).empty())
        raise(ErrorKind::format, what + " description is empty");
    if (line_count(description) > max_lines)
        raise(ErrorKind::format, what + " description exceeds " +
                                     std::to_string(max_lines) + " lines");
}

} // namespace

const char* to_string(CategoryKind kind) {
    return kind == CategoryKind::modality_task ? "modality_task" : "modeling_strategy";
}

CategoryKind category_kind_from_string(const std::string& s) {
    if (s == "modality_task") return CategoryKind::modality_task;
    if (s == "modeling_strategy") return CategoryKind::modeling_strategy;
    raise(ErrorKind::format, "unknown category kind '" + s + "'");
}

const char* to_string(Provenance p) {
    return p == Provenance::web_sources ? "web_sources" : "run_takeaway";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "web_sources") return Provenance::web_sources;
    if (s == "run_takeaway") return Provenance::run_takeaway;
    raise(ErrorKind::format, "unknown provenance '" + s + "'");
}

bool is_valid_category_key(const std::string& key) {
    if (key.empty() || key.size() > kMaxKeyLength) return false;
    auto lower_or_digit = [](char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); };
    if (!lower_or_digit(key.front())) return false;
    return std::all_of(key.begin(), key.end(),
                       [&](char c) { return lower_or_digit(c) || c == '-'; });
}

bool KnowledgeBase::in_taxonomy(const CategoryKey& key) const {
    return index_entry(key) != nullptr;
}

const L1IndexEntry* KnowledgeBase::index_entry(const CategoryKey& key) const {
    for (const auto& entry : l1_index)
        if (entry.key == key) return &entry;
    return nullptr;
}

std::size_t KnowledgeBase::total_documents() const {
    std::size_t n = 0;
    for (const auto& [key, docs] : l2) n += docs.size();
    return n;
}

void check_document_invariants(const L2Document& doc) {
    if (trim(doc.body).empty())
        raise(ErrorKind::format, "document body is empty");
    check_description(doc.description, kMaxDocDescriptionLines, "document");
    if (doc.sources.empty())
        raise(ErrorKind::format, "document provenance lists no sources");
}

std::string IntegrityReport::to_string() const {
    std::ostringstream out;
    for (const auto& v : violations)
        out << v.key << "/" << v.doc_id << ": " << v.rule << "\n";
    return out.str();
}

IntegrityReport validate_integrity(const KnowledgeBase& kb, IntegrityMode mode) {
    IntegrityReport report;
    auto add = [&](const CategoryKey& key, const std::string& doc_id, std::string rule) {
        report.violations.push_back({key, doc_id, std::move(rule)});
    };

    std::set<CategoryKey> index_keys;
    for (const auto& entry : kb.l1_index) {
        if (!is_valid_category_key(entry.key))
            add(entry.key, "", "invalid category key");
        if (!index_keys.insert(entry.key).second)
            add(entry.key, "", "duplicate key in L1 index");
    }

    // The index is the closed taxonomy: values and documents may only exist
    // under indexed keys.
    for (const auto& [key, value] : kb.l1_values) {
        if (!index_keys.count(key)) add(key, "", "L1 value for key outside taxonomy");
        if (value.key != key) add(key, "", "L1 value key mismatch");
        if (trim(value.instruction).empty()) add(key, "", "empty L1 instruction");
        std::set<std::string> seen;
        for (const auto& ptr : value.l2_index) {
            if (!seen.insert(ptr.doc_id).second)
                add(key, ptr.doc_id, "duplicate doc_id in l2_index");
            const auto cat = kb.l2.find(key);
            if (cat == kb.l2.end() || !cat->second.count(ptr.doc_id))
                add(key, ptr.doc_id, "dangling pointer: indexed document not stored");
        }
    }

    for (const auto& [key, docs] : kb.l2) {
        if (!index_keys.count(key)) add(key, "", "L2 documents under key outside taxonomy");
        for (const auto& [doc_id, doc] : docs) {
            if (doc.key != key || doc.doc_id != doc_id)
                add(key, doc_id, "document key/id mismatch");
            if (mode == IntegrityMode::strict) {
                const auto value = kb.l1_values.find(key);
                const bool indexed =
                    value != kb.l1_values.end() &&
                    std::any_of(value->second.l2_index.begin(), value->second.l2_index.end(),
                                [&](const L2Pointer& p) { return p.doc_id == doc_id; });
                if (!indexed) add(key, doc_id, "orphan document: stored but not indexed");
            }
        }
    }

    return report;
}

// ── persistence ─────────────────────────────────────────────────────────

static void save_into(const KnowledgeBase& kb, const fs::path& root) {
    json categories = json::array();
    for (const auto& entry : kb.l1_index) {
        categories.push_back({{"key", entry.key},
                              {"kind", to_string(entry.kind)},
                              {"description", entry.description}});
    }
    save_json_file(root / "manifest.json",
                   {{"format_version", kFormatVersion}, {"categories", categories}});

    for (const auto& entry : kb.l1_index) {
        const fs::path cat_dir = root / "categories" / entry.key;

        const auto value = kb.l1_values.find(entry.key);
        if (value != kb.l1_values.end()) {
            fs::create_directories(cat_dir);
            atomic_write_file(cat_dir / "instruction.md",
                              render_front_matter({{"revision", value->second.revision}},
                                                  value->second.instruction));
            json index = json::array();
            for (const auto& ptr : value->second.l2_index)
                index.push_back({{"doc_id", ptr.doc_id}, {"description", ptr.description}});
            save_json_file(cat_dir / "index.json", index);
        }

        const auto docs = kb.l2.find(entry.key);
        if (docs != kb.l2.end() && !docs->second.empty()) {
            fs::create_directories(cat_dir / "docs");
            for (const auto& [doc_id, doc] : docs->second) {
                json meta = {{"description", doc.description},
                             {"provenance", to_string(doc.provenance)},
                             {"sources", doc.sources},
                             {"created_at", doc.created_at}};
                atomic_write_file(cat_dir / "docs" / (doc_id + ".md"),
                                  render_front_matter(meta, doc.body));
            }
        }
    }
}

void save_knowledge_base(const KnowledgeBase& kb, const fs::path& root_path) {
    const IntegrityReport report = validate_integrity(kb, IntegrityMode::strict);
    if (!report.ok())
        raise(ErrorKind::integrity, "refusing to save invalid knowledge base:\n" + report.to_string());

    // Stage the whole tree, then swap directories so readers never see a
    // half-written store.
    const fs::path staging = root_path.string() + ".staging";
    const fs::path discard = root_path.string() + ".old";
    std::error_code ec;
    fs::remove_all(staging, ec);
    fs::create_directories(staging);
    save_into(kb, staging);

    fs::remove_all(discard, ec);
    if (fs::exists(root_path)) {
        fs::rename(root_path, discard, ec);
        if (ec) raise(ErrorKind::io, "cannot stage out old store at " + root_path.string());
    }
    fs::rename(staging, root_path, ec);
    if (ec) raise(ErrorKind::io, "cannot move staged store into " + root_path.string());
    fs::remove_all(discard, ec);
}

KnowledgeBase load_knowledge_base(const fs::path& root_path) {
    const fs::path manifest_path = root_path / "manifest.json";
    if (!fs::exists(manifest_path))
        raise(ErrorKind::format, "missing manifest: " + manifest_path.string());

    const json manifest = load_json_file(manifest_path);
    if (!manifest.contains("format_version") || !manifest.contains("categories"))
        raise(ErrorKind::format, "manifest lacks format_version/categories");
    if (manifest["format_version"].get<int>() != kFormatVersion)
        raise(ErrorKind::format, "unsupported knowledge base format version");

    KnowledgeBase kb;
    for (const auto& entry : manifest["categories"]) {
        L1IndexEntry e;
        e.key = entry.at("key").get<std::string>();
        e.kind = category_kind_from_string(entry.at("kind").get<std::string>());
        e.description = entry.at("description").get<std::string>();
        if (!is_valid_category_key(e.key))
            raise(ErrorKind::format, "invalid category key '" + e.key + "' in manifest");
        check_description(e.description, kMaxIndexDescriptionLines, "L1 index");
        kb.l1_index.push_back(std::move(e));
    }

    for (const auto& entry : kb.l1_index) {
        const fs::path cat_dir = root_path / "categories" / entry.key;

        const fs::path instruction_path = cat_dir / "instruction.md";
        if (fs::exists(instruction_path)) {
            auto [meta, body] = parse_front_matter(read_file(instruction_path), instruction_path);
            L1Value value;
            value.key = entry.key;
            value.instruction = body;
            value.revision = meta.value("revision", std::uint64_t{1});
            const fs::path index_path = cat_dir / "index.json";
            if (!fs::exists(index_path))
                raise(ErrorKind::format, "category " + entry.key + " has instruction but no index.json");
            for (const auto& item : load_json_file(index_path)) {
                value.l2_index.push_back({item.at("doc_id").get<std::string>(),
                                          item.at("description").get<std::string>()});
            }
            kb.l1_values.emplace(entry.key, std::move(value));
        }

        const fs::path docs_dir = cat_dir / "docs";
        if (fs::exists(docs_dir)) {
            for (const auto& file : fs::directory_iterator(docs_dir)) {
                if (file.path().extension() != ".md") continue;
                auto [meta, body] = parse_front_matter(read_file(file.path()), file.path());
                L2Document doc;
                doc.key = entry.key;
                doc.doc_id = file.path().stem().string();
                doc.body = std::move(body);
                doc.description = meta.at("description").get<std::string>();
                doc.provenance = provenance_from_string(meta.at("provenance").get<std::string>());
                doc.sources = meta.at("sources").get<std::vector<std::string>>();
                doc.created_at = meta.value("created_at", "");
                kb.l2[entry.key].emplace(doc.doc_id, std::move(doc));
            }
        }
    }

    // A load must yield a usable store; dangling pointers are named so the
    // operator can repair the corpus.
    const IntegrityReport report = validate_integrity(kb, IntegrityMode::pending_evolution);
    if (!report.ok())
        raise(ErrorKind::integrity, "knowledge base at " + root_path.string() +
                                        " is corrupt:\n" + report.to_string());
    return kb;
}

// ── lookups ─────────────────────────────────────────────────────────────

const L1Value& query_category(const KnowledgeBase& kb, const CategoryKey& key) {
    const auto value = kb.l1_values.find(key);
    if (value != kb.l1_values.end()) return value->second;

    if (kb.in_taxonomy(key))
        raise(ErrorKind::not_found,
              "category '" + key + "' exists but is not yet built (no L1 value)");

    std::vector<std::string> keys;
    for (const auto& entry : kb.l1_index) keys.push_back(entry.key);
    raise(ErrorKind::not_found,
          "unknown category '" + key + "'; valid keys: " + join(keys, ", "));
}

const L2Document& query_document(const KnowledgeBase& kb, const CategoryKey& key,
                                 const std::string& doc_id) {
    const auto cat = kb.l2.find(key);
    if (cat != kb.l2.end()) {
        const auto doc = cat->second.find(doc_id);
        if (doc != cat->second.end()) return doc->second;
    }
    raise(ErrorKind::not_found, "no document '" + doc_id + "' under category '" + key + "'");
}

std::string insert_document(KnowledgeBase& kb, const CategoryKey& key, L2Document doc) {
    if (!kb.in_taxonomy(key))
        raise(ErrorKind::taxonomy,
              "category '" + key + "' is not in the L1 index; insertion never creates categories");
    check_document_invariants(doc);

    // Sequential ids: one past the highest existing sequence number.
    std::uint64_t next = 1;
    const auto docs = kb.l2.find(key);
    if (docs != kb.l2.end()) {
        for (const auto& [doc_id, existing] : docs->second) {
            const std::size_t dash = doc_id.rfind('-');
            if (dash == std::string::npos) continue;
            try {
                next = std::max<std::uint64_t>(next, std::stoull(doc_id.substr(dash + 1)) + 1);
            } catch (const std::exception&) {
            }
        }
    }
    char sequence[8];
    std::snprintf(sequence, sizeof(sequence), "%04llu", static_cast<unsigned long long>(next));
    const std::string doc_id = key + "-" + sequence;

    doc.key = key;
    doc.doc_id = doc_id;
    kb.l2[key].emplace(doc_id, std::move(doc));
    return doc_id;
}

void replace_l1_value(KnowledgeBase& kb, const CategoryKey& key, L1Value value) {
    if (!kb.in_taxonomy(key))
        raise(ErrorKind::taxonomy, "category '" + key + "' is not in the L1 index");
    if (value.key != key)
        raise(ErrorKind::precondition, "L1 value key '" + value.key +
                                           "' does not match target category '" + key + "'");
    if (trim(value.instruction).empty())
        raise(ErrorKind::format, "L1 instruction for '" + key + "' is empty");

    std::set<std::string> seen;
    for (const auto& ptr : value.l2_index) {
        if (!seen.insert(ptr.doc_id).second)
            raise(ErrorKind::integrity, "duplicate doc_id '" + ptr.doc_id + "' in l2_index");
        const auto cat = kb.l2.find(key);
        if (cat == kb.l2.end() || !cat->second.count(ptr.doc_id))
            raise(ErrorKind::integrity,
                  "l2_index points at missing document (" + key + ", " + ptr.doc_id + ")");
    }

    const auto current = kb.l1_values.find(key);
    const std::uint64_t current_revision =
        current == kb.l1_values.end() ? 0 : current->second.revision;
    if (value.revision <= current_revision)
        raise(ErrorKind::conflict, "stale revision " + std::to_string(value.revision) +
                                       " for '" + key + "' (current " +
                                       std::to_string(current_revision) + ")");

    kb.l1_values[key] = std::move(value);
}

// ── shared handle ───────────────────────────────────────────────────────

KnowledgeStore::KnowledgeStore(fs::path root)
    : root_(std::move(root)), kb_(load_knowledge_base(root_)) {}

KnowledgeBase KnowledgeStore::snapshot() const {
    std::shared_lock lock(mutex_);
    return kb_;
}

void KnowledgeStore::update(const std::function<void(KnowledgeBase&)>& mutate) {
    std::unique_lock lock(mutex_);
    KnowledgeBase copy = kb_;
    mutate(copy);
    const IntegrityReport report = validate_integrity(copy, IntegrityMode::strict);
    if (!report.ok())
        raise(ErrorKind::integrity, "rejected knowledge base update:\n" + report.to_string());
    save_knowledge_base(copy, root_);
    kb_ = std::move(copy);
}

} // namespace forge
