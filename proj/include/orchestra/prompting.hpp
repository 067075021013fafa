#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "orchestra/domain.hpp"
#include "orchestra/ingest.hpp"

namespace orchestra {

/// A prompt template: plain text with {{NAME}} placeholders. The file form starts
/// with a "version: <id>" line followed by a line containing only "---".
struct PromptTemplate {
    std::string version;
    std::string body;

    static PromptTemplate parse(std::string_view text, std::string_view source = "<template>") {
        auto lines = util::split_lines(text);
        if (lines.size() < 2 || !util::istarts_with(util::trim(lines[0]), "version:") ||
            util::trim(lines[1]) != "---")
            throw ParseError(std::string(source) +
                             ": template must start with 'version: <id>' and a '---' line");
        PromptTemplate t;
        t.version = std::string(util::trim(util::trim(lines[0]).substr(8)));
        if (t.version.empty()) throw ParseError(std::string(source) + ": empty template version");
        auto second_nl = text.find('\n', text.find('\n') + 1);
        t.body = second_nl == std::string_view::npos ? std::string{}
                                                     : std::string(text.substr(second_nl + 1));
        return t;
    }

    static PromptTemplate load(const std::filesystem::path& path) {
        return parse(util::read_file(path), path.string());
    }

    std::string to_file_text() const { return "version: " + version + "\n---\n" + body; }
};

inline constexpr std::string_view kDefaultAnnotationTemplate =
    R"(version: tutor-moves-annotate/1
---
You are an experienced annotator of one-to-one math tutoring chats. Label the focal TUTOR utterance with the single best-fit tutor move from the rubric. Apply the operational definitions and examples; do not invent new categories.

Rubric:
{{RUBRIC}}

Context:
{{PRIOR_TUTOR}}
{{PRECEDING_STUDENT}}
{{FOCAL}}

Reply with exactly these two lines and nothing else:
LABEL: <one category name copied from the rubric>
JUSTIFICATION: <one sentence that cites the rubric definition you applied>
)";

inline constexpr std::string_view kDefaultVerificationTemplate =
    R"(version: tutor-moves-verify/1
---
You are verifying a tutor-move label that an annotator assigned to the focal TUTOR utterance of a one-to-one math tutoring chat. Check the initial label against the rubric, explicitly comparing it with the definitions and examples. Then either RETAIN the label or REVISE it to the single best-fit category.

Rubric:
{{RUBRIC}}

Context:
{{PRIOR_TUTOR}}
{{PRECEDING_STUDENT}}
{{FOCAL}}

Initial label: {{INITIAL_LABEL}}
Annotator rationale: {{RATIONALE}}

Reply with exactly these three lines and nothing else:
DECISION: <RETAIN or REVISE>
LABEL: <the final category name copied from the rubric>
JUSTIFICATION: <one sentence that cites the rubric definition you applied>
)";

/// Appended to the original prompt when a response could not be parsed.
inline constexpr std::string_view kReaskSuffix =
    "\n\nYour previous reply could not be parsed. Answer again using exactly the requested "
    "line format, with a category name copied from the rubric.\n";

struct PromptTemplates {
    PromptTemplate annotation;
    PromptTemplate verification;

    static PromptTemplates defaults() {
        return {PromptTemplate::parse(kDefaultAnnotationTemplate),
                PromptTemplate::parse(kDefaultVerificationTemplate)};
    }
};

// ---------------------------------------------------------------------------
// Rendering

/// The rubric section: one block per category, each name appearing exactly once.
inline std::string render_rubric(const Codebook& codebook) {
    std::string out;
    for (const auto& c : codebook.categories()) {
        out += "- " + c.name + ": " + std::string(util::trim(c.definition)) + "\n";
        auto join = [](const std::vector<std::string>& items) {
            std::string s;
            for (const auto& e : items) {
                if (!s.empty()) s += "; ";
                s += "\"" + std::string(util::trim(e)) + "\"";
            }
            return s;
        };
        if (!c.positive_examples.empty()) out += "  Examples: " + join(c.positive_examples) + "\n";
        if (!c.near_misses.empty()) out += "  Near misses (not this move): " + join(c.near_misses) + "\n";
    }
    if (!out.empty()) out.pop_back();
    return out;
}

namespace detail {

inline std::string quote_turn(std::string_view label, const Utterance& u) {
    return std::string(label) + " (turn " + std::to_string(u.turn_index) + "): \"" +
           std::string(util::trim(u.text)) + "\"";
}

/// Substitutes placeholders. A line consisting solely of a placeholder whose value is
/// empty is dropped entirely, so absent context leaves no trace.
inline std::string fill_template(const std::string& body,
                                 const std::vector<std::pair<std::string, std::string>>& values) {
    std::string out;
    out.reserve(body.size() * 2);
    for (auto line : util::split_lines(body)) {
        auto t = util::trim(line);
        bool drop = false;
        for (const auto& [key, value] : values) {
            if (t == "{{" + key + "}}" && value.empty()) {
                drop = true;
                break;
            }
        }
        if (drop) continue;
        std::string filled(line);
        for (const auto& [key, value] : values) filled = util::replace_all(filled, "{{" + key + "}}", value);
        out += filled;
        out += '\n';
    }
    return out;
}

inline std::vector<std::pair<std::string, std::string>> context_values(
    const Codebook& codebook, const AnnotationContext& ctx) {
    return {
        {"RUBRIC", render_rubric(codebook)},
        {"FOCAL", quote_turn("Focal tutor utterance", ctx.focal)},
        {"PRECEDING_STUDENT",
         ctx.preceding_student ? quote_turn("Preceding student turn", *ctx.preceding_student) : ""},
        {"PRIOR_TUTOR", ctx.prior_tutor ? quote_turn("Tutor's prior turn", *ctx.prior_tutor) : ""},
    };
}

}  // namespace detail

inline std::string render_annotation_prompt(const Codebook& codebook, const AnnotationContext& ctx,
                                            const PromptTemplate& tmpl =
                                                PromptTemplates::defaults().annotation) {
    if (ctx.focal.speaker != Speaker::Tutor)
        throw ContractError("annotation prompts are rendered for TUTOR utterances only");
    return detail::fill_template(tmpl.body, detail::context_values(codebook, ctx));
}

/// Same template for self- and cross-verification; only the executing backend differs.
/// An UNPARSEABLE initial label is presented as such so the verifier can repair it.
inline std::string render_verification_prompt(const Codebook& codebook,
                                              const AnnotationContext& ctx,
                                              const Label& initial_label,
                                              std::string_view annotator_justification,
                                              const PromptTemplate& tmpl =
                                                  PromptTemplates::defaults().verification) {
    if (ctx.focal.speaker != Speaker::Tutor)
        throw ContractError("verification prompts are rendered for TUTOR utterances only");
    auto values = detail::context_values(codebook, ctx);
    values.emplace_back("INITIAL_LABEL", initial_label.name());
    auto rationale = util::trim(annotator_justification);
    values.emplace_back("RATIONALE", rationale.empty() ? "(none given)" : std::string(rationale));
    return detail::fill_template(tmpl.body, values);
}

// ---------------------------------------------------------------------------
// Response parsing

struct ParsedAnnotation {
    Label label;
    std::string justification;
};

struct ParsedVerification {
    Decision decision;
    Label final_label;
    std::string justification;
    /// The response was unusable; decision is RETAIN and final_label the initial label.
    bool flagged = false;
};

namespace detail {

/// Finds "KEY: value" (case-insensitive key, tolerant of markdown bullets/bold) and
/// returns the trimmed value of the first match.
inline std::optional<std::string> find_field(std::string_view raw, std::string_view key) {
    for (auto line : util::split_lines(raw)) {
        auto t = util::trim(line);
        while (!t.empty() && (t.front() == '*' || t.front() == '-' || t.front() == '#' ||
                              t.front() == '>'))
            t = util::trim(t.substr(1));
        if (!util::istarts_with(t, key)) continue;
        auto rest = t.substr(key.size());
        while (!rest.empty() && rest.front() == '*') rest.remove_prefix(1);
        rest = util::trim(rest);
        if (rest.empty() || rest.front() != ':') continue;
        rest.remove_prefix(1);
        while (!rest.empty() && rest.front() == '*') rest.remove_prefix(1);
        return std::string(util::trim(rest));
    }
    return std::nullopt;
}

}  // namespace detail

/// Total: never throws on any input. Unknown or missing labels yield UNPARSEABLE.
inline ParsedAnnotation parse_annotation_response(std::string_view raw, const Codebook& codebook) {
    std::string justification = detail::find_field(raw, "JUSTIFICATION").value_or("");
    auto label_text = detail::find_field(raw, "LABEL");
    if (!label_text) return {Label::unparseable(), justification};
    auto label = codebook.match(*label_text);
    return {label ? *label : Label::unparseable(), justification};
}

/// RETAIN always keeps the initial label. REVISE must name a codebook label different
/// from the initial one; otherwise the result is a flagged RETAIN.
inline ParsedVerification parse_verification_response(std::string_view raw,
                                                      const Codebook& codebook,
                                                      const Label& initial_label) {
    std::string justification = detail::find_field(raw, "JUSTIFICATION").value_or("");
    auto flagged = [&] {
        return ParsedVerification{Decision::Retain, initial_label, justification, true};
    };
    auto decision_text = detail::find_field(raw, "DECISION");
    if (!decision_text) return flagged();
    auto word = util::normalize_label(*decision_text);
    if (auto sp = word.find(' '); sp != std::string::npos) word.resize(sp);
    if (word == "RETAIN" || word == "RETAINS" || word == "RETAINED")
        return {Decision::Retain, initial_label, justification, false};
    if (word != "REVISE" && word != "REVISES" && word != "REVISED") return flagged();
    auto label_text = detail::find_field(raw, "LABEL");
    if (!label_text) return flagged();
    auto label = codebook.match(*label_text);
    if (!label || *label == initial_label) return flagged();
    return {Decision::Revise, *label, justification, false};
}

}  // namespace orchestra
