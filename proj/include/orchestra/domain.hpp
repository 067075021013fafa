#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "orchestra/error.hpp"
#include "orchestra/util.hpp"

namespace orchestra {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Utterances

enum class Speaker { Tutor, Student };

inline std::string_view to_string(Speaker s) noexcept {
    return s == Speaker::Tutor ? "TUTOR" : "STUDENT";
}

inline std::optional<Speaker> parse_speaker(std::string_view raw) {
    auto s = util::trim(raw);
    if (util::iequals(s, "TUTOR")) return Speaker::Tutor;
    if (util::iequals(s, "STUDENT")) return Speaker::Student;
    return std::nullopt;
}

/// Identifies one utterance in a corpus. Ordered by session, then turn.
struct UtteranceRef {
    std::string session_id;
    int turn_index = 0;

    auto operator<=>(const UtteranceRef&) const = default;
    bool operator==(const UtteranceRef&) const = default;
};

inline std::string to_string(const UtteranceRef& ref) {
    return ref.session_id + "#" + std::to_string(ref.turn_index);
}

struct UtteranceRefHash {
    std::size_t operator()(const UtteranceRef& r) const noexcept {
        return static_cast<std::size_t>(util::fnv1a64(r.session_id) ^
                                        util::splitmix64(static_cast<std::uint64_t>(r.turn_index)));
    }
};

struct Utterance {
    std::string session_id;
    int turn_index = 0;
    Speaker speaker = Speaker::Tutor;
    std::string text;

    UtteranceRef ref() const { return {session_id, turn_index}; }
    bool operator==(const Utterance&) const = default;
};

// ---------------------------------------------------------------------------
// Codebook

inline constexpr std::string_view kUnparseable = "UNPARSEABLE";

struct Category {
    std::string name;
    std::string definition;
    std::vector<std::string> positive_examples;
    std::vector<std::string> near_misses;

    bool operator==(const Category&) const = default;
};

class Codebook;

/// A label that is either a codebook category or the UNPARSEABLE sentinel.
/// Only a Codebook (or Label::unparseable) can mint one.
class Label {
public:
    static Label unparseable() { return Label(std::string(kUnparseable)); }

    const std::string& name() const noexcept { return name_; }
    bool is_unparseable() const noexcept { return name_ == kUnparseable; }

    bool operator==(const Label&) const = default;
    auto operator<=>(const Label&) const = default;

private:
    friend class Codebook;
    explicit Label(std::string name) : name_(std::move(name)) {}
    std::string name_;
};

class Codebook {
public:
    Codebook() = default;

    /// Category names are normalized to canonical form on construction; use
    /// validate_codebook() to check the remaining invariants.
    Codebook(std::vector<Category> categories, std::string version, std::string source_note = {})
        : categories_(std::move(categories)),
          version_(std::move(version)),
          source_note_(std::move(source_note)) {
        for (std::size_t i = 0; i < categories_.size(); ++i) {
            categories_[i].name = util::normalize_label(categories_[i].name);
            index_.emplace(categories_[i].name, i);
        }
    }

    const std::vector<Category>& categories() const noexcept { return categories_; }
    std::size_t size() const noexcept { return categories_.size(); }
    const std::string& version() const noexcept { return version_; }
    const std::string& source_note() const noexcept { return source_note_; }

    /// Case- and whitespace-insensitive lookup.
    std::optional<Label> match(std::string_view raw) const {
        auto it = index_.find(util::normalize_label(raw));
        if (it == index_.end()) return std::nullopt;
        return Label(categories_[it->second].name);
    }

    /// Like match(), but also accepts the UNPARSEABLE sentinel.
    std::optional<Label> match_or_sentinel(std::string_view raw) const {
        if (util::normalize_label(raw) == kUnparseable) return Label::unparseable();
        return match(raw);
    }

    Label require(std::string_view raw) const {
        if (auto l = match(raw)) return *l;
        throw ConfigError("label '" + std::string(raw) + "' is not in codebook " + version_);
    }

    Label require_or_sentinel(std::string_view raw) const {
        if (auto l = match_or_sentinel(raw)) return *l;
        throw ConfigError("label '" + std::string(raw) + "' is not in codebook " + version_ +
                          " and is not " + std::string(kUnparseable));
    }

    Label label_at(std::size_t i) const { return Label(categories_.at(i).name); }

    std::optional<std::size_t> index_of(std::string_view canonical_name) const {
        auto it = index_.find(std::string(canonical_name));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t index_of(const Label& label) const {
        auto it = index_.find(label.name());
        if (it == index_.end())
            throw ContractError("label " + label.name() + " has no codebook index");
        return it->second;
    }

    const Category* find(std::string_view name) const {
        auto i = index_of(util::normalize_label(name));
        return i ? &categories_[*i] : nullptr;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(categories_.size());
        for (const auto& c : categories_) out.push_back(c.name);
        return out;
    }

    bool operator==(const Codebook& o) const {
        return categories_ == o.categories_ && version_ == o.version_;
    }

private:
    std::vector<Category> categories_;
    std::string version_;
    std::string source_note_;
    // Duplicate names keep the first index; validate_codebook reports them.
    std::unordered_map<std::string, std::size_t> index_;
};

struct ValidationIssue {
    enum class Kind { TooFewCategories, EmptyName, DuplicateName, ReservedName, MissingDefinition };
    Kind kind;
    std::optional<std::size_t> category_index;
    std::string message;
};

using ValidationReport = std::vector<ValidationIssue>;

inline ValidationReport validate_codebook(const Codebook& codebook) {
    ValidationReport report;
    using K = ValidationIssue::Kind;
    if (codebook.size() < 2) {
        report.push_back({K::TooFewCategories, std::nullopt,
                          "codebook needs at least 2 categories, has " +
                              std::to_string(codebook.size())});
    }
    std::unordered_map<std::string, std::size_t> seen;
    const auto& cats = codebook.categories();
    for (std::size_t i = 0; i < cats.size(); ++i) {
        const auto& c = cats[i];
        if (c.name.empty()) {
            report.push_back({K::EmptyName, i, "category #" + std::to_string(i) + " has no name"});
        } else if (auto [it, fresh] = seen.emplace(c.name, i); !fresh) {
            report.push_back({K::DuplicateName, i,
                              "category name " + c.name + " repeats category #" +
                                  std::to_string(it->second)});
        }
        if (c.name == kUnparseable) {
            report.push_back({K::ReservedName, i, std::string(kUnparseable) + " is reserved"});
        }
        if (util::trim(c.definition).empty()) {
            report.push_back({K::MissingDefinition, i,
                              "category " + (c.name.empty() ? "#" + std::to_string(i) : c.name) +
                                  " has an empty definition"});
        }
    }
    return report;
}

inline Json codebook_to_json(const Codebook& cb) {
    Json j;
    j["version"] = cb.version();
    j["source_note"] = cb.source_note();
    Json cats = Json::array();
    for (const auto& c : cb.categories()) {
        cats.push_back({{"name", c.name},
                        {"definition", c.definition},
                        {"positive_examples", c.positive_examples},
                        {"near_misses", c.near_misses}});
    }
    j["categories"] = std::move(cats);
    return j;
}

inline Codebook codebook_from_json(const Json& j) {
    try {
        std::vector<Category> cats;
        for (const auto& cj : j.at("categories")) {
            Category c;
            c.name = cj.at("name").get<std::string>();
            c.definition = cj.value("definition", std::string{});
            c.positive_examples = cj.value("positive_examples", std::vector<std::string>{});
            c.near_misses = cj.value("near_misses", std::vector<std::string>{});
            cats.push_back(std::move(c));
        }
        return Codebook(std::move(cats), j.value("version", std::string{}),
                        j.value("source_note", std::string{}));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed codebook: ") + e.what());
    }
}

inline Codebook load_codebook(const std::filesystem::path& path) {
    Json j;
    try {
        j = Json::parse(util::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), e.byte);
    }
    return codebook_from_json(j);
}

// ---------------------------------------------------------------------------
// verifier(annotator) notation

enum class Condition { Unverified, SelfVerify, CrossVerify };

inline std::string_view to_string(Condition c) noexcept {
    switch (c) {
        case Condition::Unverified: return "UNVERIFIED";
        case Condition::SelfVerify: return "SELF_VERIFY";
        case Condition::CrossVerify: return "CROSS_VERIFY";
    }
    return "?";
}

/// An orchestration configuration. The condition is derived from the backend ids,
/// so the condition/verifier invariants hold by construction.
class OrchestrationSpec {
public:
    static OrchestrationSpec unverified(std::string annotator) {
        return OrchestrationSpec(check_name(std::move(annotator)), std::nullopt);
    }

    static OrchestrationSpec verified(std::string verifier, std::string annotator) {
        return OrchestrationSpec(check_name(std::move(annotator)), check_name(std::move(verifier)));
    }

    Condition condition() const noexcept {
        if (!verifier_) return Condition::Unverified;
        return *verifier_ == annotator_ ? Condition::SelfVerify : Condition::CrossVerify;
    }
    const std::string& annotator() const noexcept { return annotator_; }
    const std::optional<std::string>& verifier() const noexcept { return verifier_; }

    bool operator==(const OrchestrationSpec&) const = default;

private:
    OrchestrationSpec(std::string annotator, std::optional<std::string> verifier)
        : annotator_(std::move(annotator)), verifier_(std::move(verifier)) {}

    static std::string check_name(std::string name) {
        auto t = util::trim(name);
        if (t.empty() || t.size() != name.size() ||
            name.find_first_of("()") != std::string::npos)
            throw ContractError("invalid backend identifier '" + name + "'");
        return name;
    }

    std::string annotator_;
    std::optional<std::string> verifier_;
};

namespace detail {

inline ParseError spec_error(std::string_view text, std::size_t offset, std::size_t len,
                             std::string_view what) {
    std::string msg = "invalid orchestration spec \"" + std::string(text) + "\": " +
                      std::string(what) + " at offset " + std::to_string(offset);
    if (len > 0 && offset < text.size())
        msg += " ('" + std::string(text.substr(offset, len)) + "')";
    return ParseError(msg, offset, len);
}

}  // namespace detail

/// Parses "VERIFIER(ANNOTATOR)" or a bare "ANNOTATOR" (unverified).
inline OrchestrationSpec parse_orchestration_spec(std::string_view text) {
    if (util::trim(text).empty()) throw detail::spec_error(text, 0, 0, "empty spec");

    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < text.size() && util::is_space(text[pos])) ++pos;
    };
    // A name runs until a parenthesis; internal spaces are kept, outer ones trimmed.
    auto read_name = [&](std::string_view role) -> std::string {
        skip_ws();
        std::size_t start = pos;
        while (pos < text.size() && text[pos] != '(' && text[pos] != ')') ++pos;
        auto name = util::trim(text.substr(start, pos - start));
        if (name.empty()) {
            throw detail::spec_error(text, start, pos < text.size() ? 1 : 0,
                                     "empty " + std::string(role) + " name");
        }
        return std::string(name);
    };

    std::string outer = read_name("annotator");
    if (pos == text.size()) return OrchestrationSpec::unverified(std::move(outer));
    if (text[pos] == ')') throw detail::spec_error(text, pos, 1, "unbalanced ')'");

    std::size_t open = pos++;  // '('
    if (text.find(')', pos) == std::string_view::npos)
        throw detail::spec_error(text, open, 1, "unbalanced '('");
    std::string inner = read_name("annotator");
    if (pos == text.size()) throw detail::spec_error(text, open, 1, "unbalanced '('");
    if (text[pos] == '(') throw detail::spec_error(text, pos, 1, "nested '(' is not allowed");
    ++pos;  // ')'
    skip_ws();
    if (pos != text.size())
        throw detail::spec_error(text, pos, text.size() - pos, "trailing input");
    return OrchestrationSpec::verified(std::move(outer), std::move(inner));
}

inline std::string format_orchestration_spec(const OrchestrationSpec& spec) {
    if (!spec.verifier()) return spec.annotator();
    return *spec.verifier() + "(" + spec.annotator() + ")";
}

// ---------------------------------------------------------------------------
// Audit records

enum class Decision { None, Retain, Revise };

inline std::string_view to_string(Decision d) noexcept {
    switch (d) {
        case Decision::None: return "NONE";
        case Decision::Retain: return "RETAIN";
        case Decision::Revise: return "REVISE";
    }
    return "?";
}

inline std::optional<Decision> parse_decision(std::string_view raw) {
    auto s = util::normalize_label(raw);
    if (s == "NONE") return Decision::None;
    if (s == "RETAIN") return Decision::Retain;
    if (s == "REVISE") return Decision::Revise;
    return std::nullopt;
}

/// The annotator's initial label for one utterance.
struct AnnotationRecord {
    UtteranceRef ref;
    Label label;
    std::string justification;
    std::string backend;
    std::string run_id;
    std::uint64_t sequence_no = 0;
};

/// The verifier's decision on one initial label. Built only through create(), which
/// enforces the RETAIN/REVISE invariants.
class VerificationRecord {
public:
    static VerificationRecord create(const Label& initial, Decision decision, Label final_label,
                                     std::string justification, std::string backend,
                                     std::string run_id, std::uint64_t sequence_no,
                                     UtteranceRef ref, bool flagged = false) {
        switch (decision) {
            case Decision::Retain:
                if (final_label != initial)
                    throw ContractError("RETAIN must keep the initial label " + initial.name());
                break;
            case Decision::Revise:
                if (final_label == initial || final_label.is_unparseable())
                    throw ContractError("REVISE must move to a different codebook label");
                break;
            case Decision::None:
                throw ContractError("a verification record needs RETAIN or REVISE");
        }
        VerificationRecord r(std::move(final_label));
        r.ref_ = std::move(ref);
        r.decision_ = decision;
        r.justification_ = std::move(justification);
        r.backend_ = std::move(backend);
        r.run_id_ = std::move(run_id);
        r.sequence_no_ = sequence_no;
        r.flagged_ = flagged;
        return r;
    }

    const UtteranceRef& ref() const noexcept { return ref_; }
    Decision decision() const noexcept { return decision_; }
    const Label& final_label() const noexcept { return final_label_; }
    const std::string& justification() const noexcept { return justification_; }
    const std::string& backend() const noexcept { return backend_; }
    const std::string& run_id() const noexcept { return run_id_; }
    std::uint64_t sequence_no() const noexcept { return sequence_no_; }
    /// True when the verifier's response could not be parsed and RETAIN was assumed.
    bool flagged() const noexcept { return flagged_; }

private:
    explicit VerificationRecord(Label final_label) : final_label_(std::move(final_label)) {}

    UtteranceRef ref_;
    Decision decision_ = Decision::Retain;
    Label final_label_;
    std::string justification_;
    std::string backend_;
    std::string run_id_;
    std::uint64_t sequence_no_ = 0;
    bool flagged_ = false;
};

}  // namespace orchestra
