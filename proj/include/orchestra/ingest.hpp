#pragma once

#include <algorithm>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "orchestra/domain.hpp"

namespace orchestra {

/// One tutoring session: turns ordered by turn_index, contiguous from 0.
struct Transcript {
    std::string session_id;
    std::vector<Utterance> turns;

    bool operator==(const Transcript&) const = default;
};

/// Sorted by session_id.
using Corpus = std::vector<Transcript>;

enum class TranscriptFormat { Auto, JsonLines, Csv, Tsv };

inline std::optional<TranscriptFormat> parse_transcript_format(std::string_view s) {
    if (util::iequals(s, "auto")) return TranscriptFormat::Auto;
    if (util::iequals(s, "jsonl") || util::iequals(s, "ndjson")) return TranscriptFormat::JsonLines;
    if (util::iequals(s, "csv")) return TranscriptFormat::Csv;
    if (util::iequals(s, "tsv")) return TranscriptFormat::Tsv;
    return std::nullopt;
}

namespace detail {

struct RawRow {
    std::size_t line = 0;
    std::string session_id;
    std::string turn_index;
    std::string speaker;
    std::string text;
    std::optional<long long> turn_number;  // set when the source already typed it
};

inline ParseError row_error(std::string_view source, std::size_t line, const std::string& what) {
    return ParseError(std::string(source) + ":" + std::to_string(line) + ": " + what);
}

/// Reads delimiter-separated records, honoring double-quoted fields (which may span lines).
/// Each record carries the 1-based line number it started on.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_delimited(
    std::istream& in, char delim, std::string_view source) {
    std::vector<std::pair<std::size_t, std::vector<std::string>>> records;
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t line = 1, i = 0;
    while (i < content.size()) {
        std::size_t start_line = line;
        std::vector<std::string> fields;
        std::string field;
        bool in_quotes = false, field_quoted = false, record_done = false;
        while (i < content.size() && !record_done) {
            char c = content[i++];
            if (in_quotes) {
                if (c == '"') {
                    if (i < content.size() && content[i] == '"') {
                        field.push_back('"');
                        ++i;
                    } else {
                        in_quotes = false;
                    }
                } else {
                    if (c == '\n') ++line;
                    field.push_back(c);
                }
            } else if (c == '"' && field.empty() && !field_quoted) {
                in_quotes = field_quoted = true;
            } else if (c == delim) {
                fields.push_back(std::move(field));
                field.clear();
                field_quoted = false;
            } else if (c == '\n') {
                ++line;
                record_done = true;
            } else if (c != '\r') {
                field.push_back(c);
            }
        }
        if (in_quotes) throw row_error(source, start_line, "unterminated quoted field");
        fields.push_back(std::move(field));
        bool blank = fields.size() == 1 && util::trim(fields[0]).empty();
        if (!blank) records.emplace_back(start_line, std::move(fields));
    }
    return records;
}

inline std::vector<RawRow> read_tabular(std::istream& in, char delim, std::string_view source) {
    auto records = read_delimited(in, delim, source);
    std::vector<RawRow> rows;
    if (records.empty()) return rows;
    const auto& header = records.front().second;
    auto col = [&](std::string_view name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (util::iequals(util::trim(header[i]), name)) return i;
        throw row_error(source, records.front().first, "missing column '" + std::string(name) + "'");
    };
    const std::size_t c_sess = col("session_id"), c_turn = col("turn_index"),
                      c_spk = col("speaker"), c_text = col("text");
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& [line, f] = records[r];
        if (f.size() != header.size())
            throw row_error(source, line,
                            "expected " + std::to_string(header.size()) + " fields, found " +
                                std::to_string(f.size()));
        rows.push_back({line, f[c_sess], f[c_turn], f[c_spk], f[c_text], std::nullopt});
    }
    return rows;
}

inline std::vector<RawRow> read_json_lines(std::istream& in, std::string_view source) {
    std::vector<RawRow> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (util::trim(line).empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw row_error(source, n, std::string("malformed JSON record: ") + e.what());
        }
        if (!j.is_object()) throw row_error(source, n, "record is not an object");
        RawRow row;
        row.line = n;
        try {
            row.session_id = j.at("session_id").is_string()
                                 ? j.at("session_id").get<std::string>()
                                 : j.at("session_id").dump();
            const auto& t = j.at("turn_index");
            if (t.is_number_integer()) row.turn_number = t.get<long long>();
            else if (t.is_string()) row.turn_index = t.get<std::string>();
            else throw row_error(source, n, "turn_index must be an integer");
            row.speaker = j.at("speaker").get<std::string>();
            row.text = j.at("text").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw row_error(source, n, std::string("missing or mistyped field: ") + e.what());
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Corpus assemble_corpus(std::vector<RawRow> rows, std::string_view source) {
    std::map<std::string, std::map<int, std::pair<std::size_t, Utterance>>> sessions;
    for (auto& row : rows) {
        if (util::trim(row.session_id).empty())
            throw row_error(source, row.line, "empty session_id");
        long long turn = 0;
        if (row.turn_number) {
            turn = *row.turn_number;
        } else {
            auto t = std::string(util::trim(row.turn_index));
            std::size_t used = 0;
            try {
                turn = std::stoll(t, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (t.empty() || used != t.size())
                throw row_error(source, row.line, "turn_index '" + t + "' is not an integer");
        }
        if (turn < 0 || turn > std::numeric_limits<int>::max())
            throw row_error(source, row.line, "turn_index out of range");
        auto speaker = parse_speaker(row.speaker);
        if (!speaker)
            throw row_error(source, row.line, "unknown speaker '" + row.speaker + "'");
        if (util::trim(row.text).empty())
            throw row_error(source, row.line, "empty utterance text");
        auto& session = sessions[row.session_id];
        Utterance u{row.session_id, static_cast<int>(turn), *speaker, std::move(row.text)};
        auto [it, fresh] = session.emplace(static_cast<int>(turn), std::make_pair(row.line, u));
        if (!fresh)
            throw row_error(source, row.line,
                            "duplicate (session_id, turn_index) = (" + row.session_id + ", " +
                                std::to_string(turn) + "), first seen on line " +
                                std::to_string(it->second.first));
    }
    Corpus corpus;
    corpus.reserve(sessions.size());
    for (auto& [sid, turns] : sessions) {
        Transcript t{sid, {}};
        int expected = 0;
        for (auto& [idx, entry] : turns) {
            if (idx != expected)
                throw row_error(source, entry.first,
                                "session " + sid + " turn_index " + std::to_string(idx) +
                                    " leaves a gap (expected " + std::to_string(expected) + ")");
            t.turns.push_back(std::move(entry.second));
            ++expected;
        }
        corpus.push_back(std::move(t));
    }
    return corpus;
}

}  // namespace detail

inline Corpus parse_transcripts(std::istream& in, TranscriptFormat format,
                                std::string_view source = "<input>") {
    using detail::RawRow;
    std::vector<RawRow> rows;
    switch (format) {
        case TranscriptFormat::JsonLines: rows = detail::read_json_lines(in, source); break;
        case TranscriptFormat::Csv: rows = detail::read_tabular(in, ',', source); break;
        case TranscriptFormat::Tsv: rows = detail::read_tabular(in, '\t', source); break;
        case TranscriptFormat::Auto: {
            std::string content((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
            auto first = content.find_first_not_of(" \t\r\n");
            TranscriptFormat f = TranscriptFormat::Csv;
            if (first != std::string::npos && content[first] == '{') {
                f = TranscriptFormat::JsonLines;
            } else {
                auto header = content.substr(0, content.find('\n'));
                if (header.find('\t') != std::string::npos) f = TranscriptFormat::Tsv;
            }
            std::istringstream ss(content);
            return parse_transcripts(ss, f, source);
        }
    }
    return detail::assemble_corpus(std::move(rows), source);
}

inline TranscriptFormat format_from_extension(const std::filesystem::path& path) {
    auto ext = util::to_upper(path.extension().string());
    if (ext == ".JSONL" || ext == ".NDJSON") return TranscriptFormat::JsonLines;
    if (ext == ".CSV") return TranscriptFormat::Csv;
    if (ext == ".TSV") return TranscriptFormat::Tsv;
    return TranscriptFormat::Auto;
}

inline Corpus load_transcripts(const std::filesystem::path& path,
                               TranscriptFormat format = TranscriptFormat::Auto) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open transcript file " + path.string());
    if (format == TranscriptFormat::Auto) format = format_from_extension(path);
    return parse_transcripts(in, format, path.string());
}

inline std::string serialize_transcripts_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& t : corpus) {
        for (const auto& u : t.turns) {
            Json j{{"session_id", u.session_id},
                   {"turn_index", u.turn_index},
                   {"speaker", to_string(u.speaker)},
                   {"text", u.text}};
            out += j.dump();
            out += '\n';
        }
    }
    return out;
}

inline std::string corpus_digest(const Corpus& corpus) {
    return util::sha256_hex(serialize_transcripts_jsonl(corpus));
}

inline std::size_t count_utterances(const Corpus& corpus) {
    std::size_t n = 0;
    for (const auto& t : corpus) n += t.turns.size();
    return n;
}

inline std::size_t count_tutor_utterances(const Corpus& corpus) {
    std::size_t n = 0;
    for (const auto& t : corpus)
        for (const auto& u : t.turns) n += u.speaker == Speaker::Tutor;
    return n;
}

inline const Transcript* find_session(const Corpus& corpus, std::string_view session_id) {
    auto it = std::lower_bound(corpus.begin(), corpus.end(), session_id,
                               [](const Transcript& t, std::string_view id) {
                                   return t.session_id < id;
                               });
    if (it == corpus.end() || it->session_id != session_id) return nullptr;
    return &*it;
}

inline const Utterance* find_utterance(const Corpus& corpus, const UtteranceRef& ref) {
    const Transcript* t = find_session(corpus, ref.session_id);
    if (!t || ref.turn_index < 0 || static_cast<std::size_t>(ref.turn_index) >= t->turns.size())
        return nullptr;
    return &t->turns[static_cast<std::size_t>(ref.turn_index)];
}

// ---------------------------------------------------------------------------
// Chunking

struct ChunkingParams {
    std::size_t target_size = 80;
    std::size_t overlap = 2;

    bool operator==(const ChunkingParams&) const = default;
};

/// Turns [begin, end) of one session. The first overlap_prefix_len turns repeat the
/// tail of the previous chunk.
struct Chunk {
    std::string session_id;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t overlap_prefix_len = 0;

    std::size_t size() const noexcept { return end - begin; }
    bool operator==(const Chunk&) const = default;
};

inline void validate_chunking(const ChunkingParams& p) {
    if (p.target_size < 4)
        throw ConfigError("chunk target_size must be at least 4, got " +
                          std::to_string(p.target_size));
    if (p.overlap >= p.target_size)
        throw ConfigError("chunk overlap (" + std::to_string(p.overlap) +
                          ") must be smaller than target_size (" +
                          std::to_string(p.target_size) + ")");
}

/// Splits a session into chunks whose fresh part is at most target_size turns. Each
/// interior boundary snaps back to the last speaker change inside the window; if the
/// window has no speaker change the boundary falls at the window edge.
inline std::vector<Chunk> chunk_session(const Transcript& transcript, const ChunkingParams& params) {
    validate_chunking(params);
    std::vector<Chunk> chunks;
    const auto& turns = transcript.turns;
    const std::size_t n = turns.size();
    std::size_t core = 0;
    while (core < n) {
        std::size_t boundary = n;
        if (core + params.target_size < n) {
            boundary = core + params.target_size;
            // A boundary at b means turn b starts the next chunk; prefer b where the
            // speaker changes so adjacency pairs stay together.
            for (std::size_t b = core + params.target_size; b > core + 1; --b) {
                if (turns[b].speaker != turns[b - 1].speaker) {
                    boundary = b;
                    break;
                }
            }
        }
        std::size_t prefix = chunks.empty() ? 0 : std::min(params.overlap, core);
        chunks.push_back({transcript.session_id, core - prefix, boundary, prefix});
        core = boundary;
    }
    return chunks;
}

// ---------------------------------------------------------------------------
// Annotation context

struct AnnotationContext {
    Utterance focal;
    std::optional<Utterance> preceding_student;
    std::optional<Utterance> prior_tutor;
};

inline AnnotationContext build_context(const Transcript& transcript, int focal_turn) {
    if (focal_turn < 0 || static_cast<std::size_t>(focal_turn) >= transcript.turns.size())
        throw ContractError("session " + transcript.session_id + " has no turn " +
                            std::to_string(focal_turn));
    const auto& focal = transcript.turns[static_cast<std::size_t>(focal_turn)];
    if (focal.speaker != Speaker::Tutor)
        throw ContractError("focal turn " + to_string(focal.ref()) +
                            " is a STUDENT turn; only TUTOR turns are annotated");
    AnnotationContext ctx{focal, std::nullopt, std::nullopt};
    for (int i = focal_turn - 1; i >= 0 && (!ctx.preceding_student || !ctx.prior_tutor); --i) {
        const auto& u = transcript.turns[static_cast<std::size_t>(i)];
        if (u.speaker == Speaker::Student && !ctx.preceding_student) ctx.preceding_student = u;
        if (u.speaker == Speaker::Tutor && !ctx.prior_tutor) ctx.prior_tutor = u;
    }
    return ctx;
}

/// Up to `radius` turns on each side of the focal turn, in order, focal included.
inline std::vector<Utterance> surrounding_turns(const Transcript& transcript, int focal_turn,
                                                std::size_t radius) {
    std::vector<Utterance> out;
    const long long n = static_cast<long long>(transcript.turns.size());
    const long long r = static_cast<long long>(radius);
    for (long long i = std::max(0LL, focal_turn - r); i <= std::min(n - 1, focal_turn + r); ++i)
        out.push_back(transcript.turns[static_cast<std::size_t>(i)]);
    return out;
}

}  // namespace orchestra
