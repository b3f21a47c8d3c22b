#include "forge/prompts.hpp"
#include "forge/errors.hpp"

#include <cstdlib>

namespace forge {

PromptLibrary PromptLibrary::load(const fs::path& dir) {
    if (!fs::is_directory(dir))
        raise(ErrorKind::invalid_input, "prompt directory not found: " + dir.string());
    PromptLibrary library;
    for (const auto& file : fs::directory_iterator(dir)) {
        if (file.path().extension() != ".txt") continue;
        Entry entry;
        entry.text = read_file(file.path());
        const std::string header = "# version:";
        if (entry.text.rfind(header, 0) == 0) {
            const std::size_t eol = entry.text.find('\n');
            const std::string value = trim(entry.text.substr(header.size(),
                                                             eol - header.size()));
            entry.version = std::stoi(value);
            entry.text = eol == std::string::npos ? "" : entry.text.substr(eol + 1);
        }
        library.entries_.emplace(file.path().stem().string(), std::move(entry));
    }
    if (library.entries_.empty())
        raise(ErrorKind::invalid_input, "no prompt templates in " + dir.string());
    return library;
}

const std::string& PromptLibrary::raw(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end())
        raise(ErrorKind::not_found, "no prompt template named '" + name + "'");
    return it->second.text;
}

int PromptLibrary::version(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end())
        raise(ErrorKind::not_found, "no prompt template named '" + name + "'");
    return it->second.version;
}

std::string PromptLibrary::render(const std::string& name,
                                  const std::map<std::string, std::string>& vars) const {
    std::string out = raw(name);
    for (const auto& [key, value] : vars) {
        const std::string placeholder = "{{" + key + "}}";
        std::size_t pos = 0;
        while ((pos = out.find(placeholder, pos)) != std::string::npos) {
            out.replace(pos, placeholder.size(), value);
            pos += value.size();
        }
    }
    return out;
}

fs::path default_prompt_dir() {
    if (const char* env = std::getenv("FORGE_PROMPT_DIR"); env && *env) return env;
#ifdef FORGE_ASSET_DIR
    return fs::path(FORGE_ASSET_DIR) / "prompts";
#else
    return fs::path("assets") / "prompts";
#endif
}

} // namespace forge
