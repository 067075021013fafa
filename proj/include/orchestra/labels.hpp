#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "orchestra/domain.hpp"

namespace orchestra {

struct LabeledRef {
    UtteranceRef ref;
    Label label;

    bool operator==(const LabeledRef&) const = default;
};

/// Labels keyed by utterance, sorted by ref with no duplicates. `source` names who
/// produced the labels (a run id, a coder, "gold").
class LabelSeries {
public:
    LabelSeries() = default;

    static LabelSeries from_entries(std::vector<LabeledRef> entries, std::string source = {}) {
        std::sort(entries.begin(), entries.end(),
                  [](const LabeledRef& a, const LabeledRef& b) { return a.ref < b.ref; });
        for (std::size_t i = 1; i < entries.size(); ++i) {
            if (entries[i].ref == entries[i - 1].ref)
                throw ContractError("label series " + source + " repeats utterance " +
                                    to_string(entries[i].ref));
        }
        LabelSeries s;
        s.entries_ = std::move(entries);
        s.source_ = std::move(source);
        return s;
    }

    const std::vector<LabeledRef>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::string& source() const noexcept { return source_; }
    void set_source(std::string s) { source_ = std::move(s); }

    const Label* find(const UtteranceRef& ref) const {
        auto it = std::lower_bound(entries_.begin(), entries_.end(), ref,
                                   [](const LabeledRef& e, const UtteranceRef& r) { return e.ref < r; });
        if (it == entries_.end() || it->ref != ref) return nullptr;
        return &it->label;
    }

    bool same_refs(const LabelSeries& other) const {
        if (size() != other.size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (entries_[i].ref != other.entries_[i].ref) return false;
        return true;
    }

    bool operator==(const LabelSeries& o) const { return entries_ == o.entries_; }

private:
    std::vector<LabeledRef> entries_;
    std::string source_;
};

inline void require_same_refs(const LabelSeries& a, const LabelSeries& b, std::string_view what) {
    if (a.same_refs(b)) return;
    std::string detail = "sizes " + std::to_string(a.size()) + " vs " + std::to_string(b.size());
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        if (a.entries()[i].ref != b.entries()[i].ref) {
            detail = "first mismatch at " + to_string(a.entries()[i].ref) + " vs " +
                     to_string(b.entries()[i].ref);
            break;
        }
    }
    throw ContractError(std::string(what) + ": label series cover different utterances (" +
                        detail + ")");
}

inline std::string serialize_label_series(const LabelSeries& s) {
    std::string out;
    for (const auto& e : s.entries()) {
        Json j{{"session_id", e.ref.session_id},
               {"turn_index", e.ref.turn_index},
               {"label", e.label.name()}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline LabelSeries parse_label_series(std::string_view text, const Codebook& codebook,
                                      std::string source, std::string_view origin = "<labels>") {
    std::vector<LabeledRef> entries;
    std::size_t n = 0;
    for (auto line : util::split_lines(text)) {
        ++n;
        if (util::trim(line).empty()) continue;
        try {
            auto j = Json::parse(line);
            UtteranceRef ref{j.at("session_id").get<std::string>(), j.at("turn_index").get<int>()};
            entries.push_back({std::move(ref),
                               codebook.require_or_sentinel(j.at("label").get<std::string>())});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string(origin) + ":" + std::to_string(n) + ": " + e.what());
        } catch (const ConfigError& e) {
            throw ParseError(std::string(origin) + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return LabelSeries::from_entries(std::move(entries), std::move(source));
}

inline LabelSeries load_label_series(const std::filesystem::path& path, const Codebook& codebook,
                                     std::string source = {}) {
    if (source.empty()) source = path.stem().string();
    return parse_label_series(util::read_file(path), codebook, std::move(source), path.string());
}

}  // namespace orchestra
