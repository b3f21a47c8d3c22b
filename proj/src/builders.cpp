#include "forge/builders.hpp"
#include "forge/errors.hpp"
#include "forge/workspace.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

namespace forge {

// ── envelope parsing ────────────────────────────────────────────────────

namespace {

// Extracts the contents of the first fenced block; the whole text must
// contain exactly one such block.
std::string extract_fenced_block(const std::string& text) {
    const std::vector<std::string> lines = split_lines(text);
    std::optional<std::size_t> open;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).rfind("```", 0) != 0) continue;
        if (!open) {
            open = i;
            continue;
        }
        std::vector<std::string> inner(lines.begin() + static_cast<long>(*open) + 1,
                                       lines.begin() + static_cast<long>(i));
        return join(inner, "\n");
    }
    raise(ErrorKind::format, "no fenced envelope block in builder response");
}

struct EnvelopeParts {
    std::map<std::string, std::string> single; // CATEGORY, DESCRIPTION
    std::vector<std::string> index_lines;      // INDEX values in order
    std::string body;
};

EnvelopeParts split_envelope(const std::string& block) {
    EnvelopeParts parts;
    const std::vector<std::string> lines = split_lines(block);
    std::size_t i = 0;
    for (; i < lines.size(); ++i) {
        const std::string line = trim(lines[i]);
        if (line.empty()) {
            ++i;
            break;
        }
        const std::size_t colon = line.find(':');
        if (colon == std::string::npos)
            raise(ErrorKind::format, "envelope header line without ':': " + line);
        const std::string field = trim(line.substr(0, colon));
        const std::string value = trim(line.substr(colon + 1));
        if (field == "INDEX") {
            parts.index_lines.push_back(value);
        } else if (field == "CATEGORY" || field == "DESCRIPTION") {
            if (parts.single.count(field))
                raise(ErrorKind::format, "duplicate " + field + " line in envelope");
            parts.single[field] = value;
        } else {
            raise(ErrorKind::format, "unknown envelope field '" + field + "'");
        }
    }
    std::vector<std::string> body_lines(lines.begin() + static_cast<long>(i), lines.end());
    parts.body = join(body_lines, "\n");
    if (!parts.body.empty()) parts.body += "\n";
    return parts;
}

L2Pointer parse_index_line(const std::string& value) {
    const std::size_t sep = value.find("::");
    if (sep == std::string::npos)
        raise(ErrorKind::format, "INDEX line needs '<doc_id> :: <description>': " + value);
    L2Pointer ptr;
    ptr.doc_id = trim(value.substr(0, sep));
    ptr.description = trim(value.substr(sep + 2));
    if (ptr.doc_id.empty() || ptr.description.empty())
        raise(ErrorKind::format, "INDEX line with empty doc_id or description: " + value);
    return ptr;
}

} // namespace

BuilderOutputEnvelope parse_l2_envelope(const std::string& response_text) {
    const EnvelopeParts parts = split_envelope(extract_fenced_block(response_text));
    if (!parts.single.count("CATEGORY"))
        raise(ErrorKind::format, "L2 envelope lacks a CATEGORY line");
    if (!parts.single.count("DESCRIPTION"))
        raise(ErrorKind::format, "L2 envelope lacks a DESCRIPTION line");
    BuilderOutputEnvelope envelope;
    envelope.chosen_category = parts.single.at("CATEGORY");
    envelope.description = parts.single.at("DESCRIPTION");
    envelope.document_body = parts.body;
    if (trim(envelope.document_body).empty())
        raise(ErrorKind::format, "L2 envelope has an empty document body");
    if (envelope.description.empty())
        raise(ErrorKind::format, "L2 envelope has an empty description");
    return envelope;
}

L1BuilderEnvelope parse_l1_envelope(const std::string& response_text) {
    const EnvelopeParts parts = split_envelope(extract_fenced_block(response_text));
    if (!parts.single.count("DESCRIPTION"))
        raise(ErrorKind::format, "L1 envelope lacks a DESCRIPTION line");
    L1BuilderEnvelope envelope;
    for (const auto& line : parts.index_lines) envelope.l2_index.push_back(parse_index_line(line));
    envelope.instruction = parts.body;
    if (trim(envelope.instruction).empty())
        raise(ErrorKind::format, "L1 envelope has an empty instruction");
    if (envelope.l2_index.empty())
        raise(ErrorKind::format, "L1 envelope lists no INDEX entries");
    return envelope;
}

// ── shared builder conversation ─────────────────────────────────────────

namespace {

// One completion plus at most one corrective re-prompt. `validate` throws
// on a bad envelope; its message becomes the correction.
template <typename T>
T converse(Backend& backend, const PromptLibrary& prompts, const std::string& system_prompt,
           const std::string& user_input, const std::function<T(const std::string&)>& validate) {
    CompletionRequest request;
    request.temperature = 0.0;
    request.messages = {ChatMessage::system(system_prompt), ChatMessage::user(user_input)};

    std::string last_error;
    for (int attempt = 1; attempt <= 2; ++attempt) {
        const CompletionResponse response = complete_with_retries(backend, request);
        if (!response.is_final()) {
            last_error = "builder responded with tool calls instead of an envelope";
        } else {
            try {
                return validate(response.final_text());
            } catch (const Error& e) {
                last_error = e.what();
            }
            request.messages.push_back(ChatMessage::assistant(response.final_text()));
        }
        if (attempt == 1)
            request.messages.push_back(ChatMessage::user(
                prompts.render("builder_correction", {{"reason", last_error}})));
    }
    raise(ErrorKind::format,
          "builder failed after one corrective re-prompt; last error: " + last_error);
}

std::string render_index_for_builder(const std::vector<L1IndexEntry>& l1_index) {
    std::ostringstream out;
    out << "Valid category keys:\n";
    for (const auto& entry : l1_index) {
        std::string description = entry.description;
        std::replace(description.begin(), description.end(), '\n', ' ');
        out << "- " << entry.key << " [" << to_string(entry.kind) << "] " << description << "\n";
    }
    return out.str();
}

const L1IndexEntry* find_entry(const std::vector<L1IndexEntry>& l1_index,
                               const CategoryKey& key) {
    for (const auto& entry : l1_index)
        if (entry.key == key) return &entry;
    return nullptr;
}

} // namespace

// ── L2 builder ──────────────────────────────────────────────────────────

std::pair<CategoryKey, L2Document> build_l2_from_sources(
    const SourceGroup& group, const std::vector<SourceDocument>& members,
    const std::vector<L1IndexEntry>& l1_index, Backend& backend, const PromptLibrary& prompts,
    const BuilderConfig& config) {
    if (members.empty()) raise(ErrorKind::precondition, "source group has no members");
    if (l1_index.empty()) raise(ErrorKind::precondition, "empty L1 index");

    std::ostringstream input;
    input << render_index_for_builder(l1_index) << "\n## sources (group " << group.group_id
          << ")\n";
    for (const auto& member : members) {
        input << "--- source " << member.source_id << " (" << to_string(member.origin)
              << ") ---\n"
              << truncate_middle(member.text, config.source_cap_chars * 3 / 4,
                                 config.source_cap_chars / 4)
              << "\n";
    }

    const BuilderOutputEnvelope envelope = converse<BuilderOutputEnvelope>(
        backend, prompts, prompts.raw("l2_builder_sources"), input.str(),
        [&](const std::string& text) {
            BuilderOutputEnvelope parsed = parse_l2_envelope(text);
            if (!find_entry(l1_index, parsed.chosen_category))
                raise(ErrorKind::taxonomy, "category '" + parsed.chosen_category +
                                               "' is not in the L1 index; choose one of the "
                                               "listed keys");
            if (line_count(parsed.description) > 3)
                raise(ErrorKind::format, "description exceeds 3 lines");
            return parsed;
        });

    L2Document doc;
    doc.key = envelope.chosen_category;
    doc.body = envelope.document_body;
    doc.description = envelope.description;
    doc.provenance = Provenance::web_sources;
    for (const auto& member : members) doc.sources.push_back(member.source_id);
    doc.created_at = config.now();
    return {envelope.chosen_category, doc};
}

std::string assemble_run_digest(const fs::path& run_dir, std::size_t cap_chars) {
    std::ostringstream digest;

    const fs::path run_meta = run_dir / "run.json";
    if (fs::exists(run_meta)) {
        const json meta = load_json_file(run_meta);
        digest << "## task\n"
               << meta.value("task_id", "") << ": " << meta.value("description", "") << "\n"
               << "metric: " << meta.value("metric_name", "") << "\n\n";
    }

    for (int repo_id = 1;; ++repo_id) {
        const fs::path repo_root = run_dir / ("repo-" + std::to_string(repo_id));
        if (!fs::is_directory(repo_root)) break;
        auto repo = Repository::open(run_dir, repo_id);
        digest << "## repository " << repo_id << " [" << to_string(repo->status()) << "]\n";
        try {
            const std::string plan = repo->read_artifact("plan.md").content;
            if (!trim(plan).empty()) digest << "### plan\n" << plan << "\n";
        } catch (const Error&) {
        }
        const auto best = repo->best_metric();
        if (best)
            digest << "best metric: " << best->metric_name << "=" << best->value << " ("
                   << (best->higher_is_better ? "higher" : "lower") << " is better)\n";
        for (const auto& result : repo->results()) {
            if (result.exit_code == 0) continue;
            digest << "### failed run " << result.run_id << " (exit " << result.exit_code
                   << (result.timed_out ? ", timed out" : "") << ")\n";
            try {
                const std::string err = repo->read_artifact(result.stderr_path).content;
                std::vector<std::string> lines = split_lines(err);
                const std::size_t keep = std::min<std::size_t>(lines.size(), 50);
                std::vector<std::string> tail(lines.end() - static_cast<long>(keep), lines.end());
                digest << join(tail, "\n") << "\n";
            } catch (const Error&) {
            }
        }
        digest << "\n";
    }

    const fs::path report = run_dir / "final" / "report.md";
    if (fs::exists(report)) digest << "## final report\n" << read_file(report) << "\n";

    return truncate_middle(digest.str(), cap_chars * 3 / 4, cap_chars / 4 - 64);
}

std::pair<CategoryKey, L2Document> build_l2_from_rundir(const fs::path& run_dir,
                                                        const std::vector<L1IndexEntry>& l1_index,
                                                        Backend& backend,
                                                        const PromptLibrary& prompts,
                                                        const BuilderConfig& config) {
    if (!fs::exists(run_dir / "final" / "report.md"))
        raise(ErrorKind::precondition,
              "run directory has no final report; only completed runs are distilled");
    std::string run_id = run_dir.filename().string();
    const fs::path run_meta = run_dir / "run.json";
    if (fs::exists(run_meta)) run_id = load_json_file(run_meta).value("run_id", run_id);

    const std::string digest = assemble_run_digest(run_dir, config.digest_cap_chars);
    const std::string input = render_index_for_builder(l1_index) + "\n## run digest\n" + digest;

    const BuilderOutputEnvelope envelope = converse<BuilderOutputEnvelope>(
        backend, prompts, prompts.raw("l2_builder_rundir"), input,
        [&](const std::string& text) {
            BuilderOutputEnvelope parsed = parse_l2_envelope(text);
            if (!find_entry(l1_index, parsed.chosen_category))
                raise(ErrorKind::taxonomy, "category '" + parsed.chosen_category +
                                               "' is not in the L1 index; choose one of the "
                                               "listed keys");
            if (line_count(parsed.description) > 3)
                raise(ErrorKind::format, "description exceeds 3 lines");
            return parsed;
        });

    L2Document doc;
    doc.key = envelope.chosen_category;
    doc.body = envelope.document_body;
    doc.description = envelope.description;
    doc.provenance = Provenance::run_takeaway;
    doc.sources = {run_id};
    doc.created_at = config.now();
    return {envelope.chosen_category, doc};
}

// ── L1 builder ──────────────────────────────────────────────────────────

namespace {

std::string render_docs_for_builder(const std::map<std::string, L2Document>& docs,
                                    std::size_t cap) {
    std::ostringstream out;
    for (const auto& [doc_id, doc] : docs) {
        std::string description = doc.description;
        std::replace(description.begin(), description.end(), '\n', ' ');
        out << "--- document " << doc_id << " ---\ndescription: " << description << "\n"
            << truncate_middle(doc.body, cap * 3 / 4, cap / 4) << "\n";
    }
    return out.str();
}

void check_instruction_budget(const L1BuilderEnvelope& envelope, std::size_t max_lines) {
    if (line_count(envelope.instruction) > max_lines)
        raise(ErrorKind::format, "instruction exceeds the length budget of " +
                                     std::to_string(max_lines) + " lines");
    for (const auto& ptr : envelope.l2_index)
        if (line_count(ptr.description) > 3)
            raise(ErrorKind::format,
                  "index description for " + ptr.doc_id + " exceeds 3 lines");
}

} // namespace

std::optional<L1Value> bootstrap_l1(const KnowledgeBase& kb, const CategoryKey& key,
                                    Backend& backend, const PromptLibrary& prompts,
                                    const BuilderConfig& config) {
    const L1IndexEntry* entry = find_entry(kb.l1_index, key);
    if (!entry) raise(ErrorKind::taxonomy, "category '" + key + "' is not in the L1 index");
    if (kb.l1_values.count(key))
        raise(ErrorKind::precondition, "category '" + key + "' already has an L1 value");

    const auto docs = kb.l2.find(key);
    if (docs == kb.l2.end() || docs->second.empty()) {
        log_warning("bootstrap_l1: category '" + key + "' has no documents, skipping");
        return std::nullopt;
    }

    std::set<std::string> required;
    for (const auto& [doc_id, doc] : docs->second) required.insert(doc_id);

    std::ostringstream input;
    input << "category: " << key << "\nkind: " << to_string(entry->kind)
          << "\ndescription: " << entry->description << "\n\n## documents under this category\n"
          << render_docs_for_builder(docs->second, config.doc_cap_chars);

    const L1BuilderEnvelope envelope = converse<L1BuilderEnvelope>(
        backend, prompts, prompts.raw("l1_builder_bootstrap"), input.str(),
        [&](const std::string& text) {
            L1BuilderEnvelope parsed = parse_l1_envelope(text);
            check_instruction_budget(parsed, config.instruction_max_lines);
            std::set<std::string> listed;
            for (const auto& ptr : parsed.l2_index) {
                if (!required.count(ptr.doc_id))
                    raise(ErrorKind::integrity,
                          "INDEX lists unknown document '" + ptr.doc_id + "'");
                if (!listed.insert(ptr.doc_id).second)
                    raise(ErrorKind::integrity, "INDEX lists '" + ptr.doc_id + "' twice");
            }
            for (const auto& doc_id : required)
                if (!listed.count(doc_id))
                    raise(ErrorKind::integrity, "INDEX is missing stored document '" + doc_id +
                                                    "'; every existing document must be listed");
            return parsed;
        });

    L1Value value;
    value.key = key;
    value.instruction = envelope.instruction;
    value.l2_index = envelope.l2_index;
    value.revision = 1;
    return value;
}

L1Value evolve_l1(const KnowledgeBase& kb, const CategoryKey& key, const std::string& new_doc_id,
                  Backend& backend, const PromptLibrary& prompts, const BuilderConfig& config) {
    const auto current = kb.l1_values.find(key);
    if (current == kb.l1_values.end())
        raise(ErrorKind::precondition, "no L1 value for '" + key + "' to evolve");
    const L2Document& new_doc = query_document(kb, key, new_doc_id);
    for (const auto& ptr : current->second.l2_index)
        if (ptr.doc_id == new_doc_id)
            raise(ErrorKind::precondition,
                  "document '" + new_doc_id + "' is already indexed under '" + key + "'");

    std::ostringstream input;
    input << "category: " << key << "\n\n## current instruction\n"
          << current->second.instruction << "\n## current index\n";
    for (const auto& ptr : current->second.l2_index) {
        std::string description = ptr.description;
        std::replace(description.begin(), description.end(), '\n', ' ');
        input << "INDEX: " << ptr.doc_id << " :: " << description << "\n";
    }
    std::string doc_description = new_doc.description;
    std::replace(doc_description.begin(), doc_description.end(), '\n', ' ');
    input << "\n## new document " << new_doc_id << "\ndescription: " << doc_description << "\n"
          << truncate_middle(new_doc.body, config.doc_cap_chars * 3 / 4,
                             config.doc_cap_chars / 4)
          << "\n";

    const L1BuilderEnvelope envelope = converse<L1BuilderEnvelope>(
        backend, prompts, prompts.raw("l1_builder_evolve"), input.str(),
        [&](const std::string& text) {
            L1BuilderEnvelope parsed = parse_l1_envelope(text);
            check_instruction_budget(parsed, config.instruction_max_lines);
            std::set<std::string> listed;
            for (const auto& ptr : parsed.l2_index) {
                if (!listed.insert(ptr.doc_id).second)
                    raise(ErrorKind::integrity, "INDEX lists '" + ptr.doc_id + "' twice");
                if (ptr.doc_id != new_doc_id) {
                    const bool known = std::any_of(
                        current->second.l2_index.begin(), current->second.l2_index.end(),
                        [&](const L2Pointer& p) { return p.doc_id == ptr.doc_id; });
                    if (!known)
                        raise(ErrorKind::integrity,
                              "INDEX lists unknown document '" + ptr.doc_id + "'");
                }
            }
            // Index monotonicity: evolution only grows the index.
            for (const auto& ptr : current->second.l2_index)
                if (!listed.count(ptr.doc_id))
                    raise(ErrorKind::integrity, "INDEX dropped prior entry '" + ptr.doc_id +
                                                    "'; existing entries must be preserved");
            if (!listed.count(new_doc_id))
                raise(ErrorKind::integrity,
                      "INDEX does not list the new document '" + new_doc_id + "'");
            return parsed;
        });

    L1Value value;
    value.key = key;
    value.instruction = envelope.instruction;
    value.l2_index = envelope.l2_index;
    value.revision = current->second.revision + 1;
    return value;
}

// ── bootstrap pipeline ──────────────────────────────────────────────────

json BootstrapReport::to_json() const {
    return {{"ingested", ingested},
            {"duplicates_dropped", duplicates_dropped},
            {"relevance_dropped", relevance_dropped},
            {"fail_open", fail_open},
            {"groups", groups},
            {"docs_built", docs_built},
            {"group_failures", group_failures},
            {"categories_built", categories_built},
            {"categories_skipped", categories_skipped},
            {"failures", failures}};
}

BootstrapOutcome bootstrap_knowledge_base(const std::vector<SourceDocument>& corpus,
                                          const std::vector<L1IndexEntry>& l1_index,
                                          Backend& backend, EmbeddingProvider& provider,
                                          const PromptLibrary& prompts,
                                          const IngestionConfig& ingest_config,
                                          const BuilderConfig& builder_config) {
    BootstrapOutcome outcome;
    outcome.kb.l1_index = l1_index;
    BootstrapReport& report = outcome.report;
    report.ingested = corpus.size();

    const DedupResult deduped =
        dedup_corpus(corpus, ingest_config.dedup_threshold, ingest_config);
    report.duplicates_dropped = corpus.size() - deduped.kept.size();

    const RelevanceResult relevant =
        filter_relevance(deduped.kept, backend, prompts, ingest_config.max_parallel);
    report.relevance_dropped = relevant.dropped.size();
    report.fail_open = static_cast<std::size_t>(relevant.fail_open_count);

    std::vector<SourceGroup> groups =
        cluster_sources(relevant.kept, provider, ingest_config.cosine_threshold);
    groups = confirm_groups(groups, relevant.kept, backend, prompts);
    report.groups = groups.size();

    std::map<std::string, const SourceDocument*> by_id;
    for (const auto& doc : relevant.kept) by_id[doc.source_id] = &doc;

    // Builds may run concurrently; insertions happen afterwards in group
    // order so doc ids are deterministic.
    std::vector<std::optional<std::pair<CategoryKey, L2Document>>> built(groups.size());
    std::vector<std::string> build_errors(groups.size());
    parallel_for(groups.size(), builder_config.max_parallel_builds, [&](std::size_t i) {
        std::vector<SourceDocument> members;
        for (const auto& id : groups[i].members) {
            const auto it = by_id.find(id);
            if (it != by_id.end()) members.push_back(*it->second);
        }
        try {
            built[i] = build_l2_from_sources(groups[i], members, l1_index, backend, prompts,
                                             builder_config);
        } catch (const std::exception& e) {
            build_errors[i] = e.what();
        }
    });

    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (!built[i]) {
            ++report.group_failures;
            report.failures.push_back("group " + groups[i].group_id + ": " + build_errors[i]);
            continue;
        }
        insert_document(outcome.kb, built[i]->first, built[i]->second);
        ++report.docs_built;
    }

    for (const auto& entry : l1_index) {
        const auto docs = outcome.kb.l2.find(entry.key);
        if (docs == outcome.kb.l2.end() || docs->second.empty()) {
            ++report.categories_skipped;
            continue;
        }
        try {
            auto value = bootstrap_l1(outcome.kb, entry.key, backend, prompts, builder_config);
            if (value) {
                replace_l1_value(outcome.kb, entry.key, *value);
                ++report.categories_built;
            } else {
                ++report.categories_skipped;
            }
        } catch (const std::exception& e) {
            ++report.group_failures;
            report.failures.push_back("category " + entry.key + ": " + e.what());
        }
    }

    if (outcome.kb.total_documents() == 0)
        raise(ErrorKind::format, "bootstrap produced an empty knowledge base; every group failed");

    return outcome;
}

std::vector<L1IndexEntry> load_l1_index_file(const fs::path& path) {
    const json data = load_json_file(path);
    if (!data.is_array()) raise(ErrorKind::format, "L1 index file must be a JSON array");
    std::vector<L1IndexEntry> index;
    std::set<std::string> seen;
    for (const auto& record : data) {
        L1IndexEntry entry;
        entry.key = record.at("key").get<std::string>();
        entry.kind = category_kind_from_string(record.at("kind").get<std::string>());
        entry.description = record.at("description").get<std::string>();
        if (!is_valid_category_key(entry.key))
            raise(ErrorKind::format, "invalid category key '" + entry.key + "'");
        if (!seen.insert(entry.key).second)
            raise(ErrorKind::format, "duplicate category key '" + entry.key + "'");
        if (trim(entry.description).empty())
            raise(ErrorKind::format, "category '" + entry.key + "' has an empty description");
        index.push_back(std::move(entry));
    }
    if (index.empty()) raise(ErrorKind::format, "L1 index file lists no categories");
    return index;
}

} // namespace forge
