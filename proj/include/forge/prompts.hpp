#pragma once

#include <map>
#include <string>

#include "forge/util.hpp"

namespace forge {

// Prompt templates are data, not code: one .txt asset per template, with an
// optional leading "# version: N" header and {{placeholder}} substitution.

class PromptLibrary {
public:
    static PromptLibrary load(const fs::path& dir);

    const std::string& raw(const std::string& name) const;
    int version(const std::string& name) const;
    std::string render(const std::string& name,
                       const std::map<std::string, std::string>& vars) const;

private:
    struct Entry {
        std::string text;
        int version = 1;
    };
    std::map<std::string, Entry> entries_;
};

// $FORGE_PROMPT_DIR when set, otherwise the directory baked in at build time.
fs::path default_prompt_dir();

} // namespace forge
