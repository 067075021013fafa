#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "orchestra/ingest.hpp"
#include "orchestra/labels.hpp"

namespace orchestra {

/// Exactly one of total_utterances / tutor_utterances must be set; it is split evenly
/// across sessions (earlier sessions take the remainder).
struct SyntheticCorpusParams {
    std::size_t sessions = 1;
    std::optional<std::size_t> total_utterances;
    std::optional<std::size_t> tutor_utterances;
    double tutor_repeat_prob = 0.15;  // chance a tutor turn is followed by another tutor turn
    std::uint64_t seed = 0;
};

struct SyntheticCorpus {
    Corpus corpus;
    LabelSeries gold;
};

namespace detail {

inline const char* const kStudentLines[] = {
    "I think it's 12?", "I'm not sure.", "Do I divide both sides?", "Okay.", "Wait, why?",
    "I got x equals 4.", "Is that the numerator?", "I forgot the sign.", "That makes sense.",
    "Can you show me again?",
};

inline const char* const kTutorLines[] = {
    "Let's look at this together.", "Take another look at the second line.", "Okay, so what do we have so far?",
    "Think about what the question is asking.", "Here is one way to see it.", "Let's write that down.",
    "Look at the picture on the board.", "So you're saying the total stays the same.",
    "That part is right.", "Try the next one.",
};

}  // namespace detail

inline SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusParams& p, const Codebook& codebook) {
    if (p.sessions == 0) throw ConfigError("synthetic corpus needs at least one session");
    if (p.total_utterances.has_value() == p.tutor_utterances.has_value())
        throw ConfigError("set exactly one of total_utterances and tutor_utterances");
    if (codebook.size() == 0) throw ConfigError("synthetic corpus needs a non-empty codebook");
    if (!(p.tutor_repeat_prob >= 0.0 && p.tutor_repeat_prob < 1.0))
        throw ConfigError("tutor_repeat_prob must lie in [0, 1)");
    const bool count_all = p.total_utterances.has_value();
    const std::size_t target = count_all ? *p.total_utterances : *p.tutor_utterances;

    SyntheticCorpus out;
    std::vector<LabeledRef> gold;
    for (std::size_t s = 0; s < p.sessions; ++s) {
        std::size_t quota = target / p.sessions + (s < target % p.sessions ? 1 : 0);
        char sid[32];
        std::snprintf(sid, sizeof sid, "s%03zu", s + 1);
        Transcript t{sid, {}};
        auto speakers = util::keyed_stream(p.seed, {"speakers", sid});
        std::size_t counted = 0;
        Speaker next = Speaker::Tutor;
        while (counted < quota) {
            const int turn = static_cast<int>(t.turns.size());
            std::string text;
            if (next == Speaker::Tutor) {
                auto g = util::keyed_stream(p.seed, {"gold", sid, std::to_string(turn)});
                Label label = codebook.label_at(util::uniform_index(g, codebook.size()));
                text = std::string(detail::kTutorLines[util::uniform_index(g, std::size(detail::kTutorLines))]);
                gold.push_back({{sid, turn}, label});
            } else {
                auto g = util::keyed_stream(p.seed, {"student", sid, std::to_string(turn)});
                text = detail::kStudentLines[util::uniform_index(g, std::size(detail::kStudentLines))];
            }
            t.turns.push_back({sid, turn, next, std::move(text)});
            if (count_all || next == Speaker::Tutor) ++counted;
            if (next == Speaker::Student || util::uniform01(speakers) < p.tutor_repeat_prob)
                next = Speaker::Tutor;
            else
                next = Speaker::Student;
        }
        if (!t.turns.empty()) out.corpus.push_back(std::move(t));
    }
    out.gold = LabelSeries::from_entries(std::move(gold), "gold");
    return out;
}

/// Copies `base` and rewrites `count` seeded-chosen entries to a different label.
inline LabelSeries plant_disagreements(const LabelSeries& base, std::size_t count, const Codebook& codebook,
                                       std::uint64_t seed, std::string source) {
    if (count > base.size()) throw ConfigError("cannot plant more disagreements than there are labels");
    if (codebook.size() < 2) throw ConfigError("planting disagreements needs at least two categories");
    std::vector<std::size_t> idx(base.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto g = util::keyed_stream(seed, {"plant"});
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + util::uniform_index(g, idx.size() - i)]);
    std::vector<LabeledRef> entries(base.entries().begin(), base.entries().end());
    for (std::size_t i = 0; i < count; ++i) {
        auto& e = entries[idx[i]];
        std::size_t cur = e.label.is_unparseable() ? codebook.size() : codebook.index_of(e.label);
        std::size_t pick = util::uniform_index(g, codebook.size() - (cur < codebook.size() ? 1 : 0));
        if (cur < codebook.size() && pick >= cur) ++pick;
        e.label = codebook.label_at(pick);
    }
    return LabelSeries::from_entries(std::move(entries), std::move(source));
}

}  // namespace orchestra
