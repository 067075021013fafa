#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "orchestra/domain.hpp"
#include "orchestra/ingest.hpp"
#include "orchestra/labels.hpp"

namespace orchestra {

enum class Rater { Rater1, Rater2 };

inline std::string_view to_string(Rater r) noexcept { return r == Rater::Rater1 ? "RATER_1" : "RATER_2"; }

inline std::optional<Rater> parse_rater(std::string_view s) {
    auto n = util::normalize_label(s);
    if (n == "RATER 1" || n == "1") return Rater::Rater1;
    if (n == "RATER 2" || n == "2") return Rater::Rater2;
    return std::nullopt;
}

enum class ItemState { Pending, Decided };

inline std::string_view to_string(ItemState s) noexcept { return s == ItemState::Pending ? "PENDING" : "DECIDED"; }

struct ContextTurn {
    int turn_index = 0;
    Speaker speaker = Speaker::Tutor;
    std::string text;
    /// focal | preceding_student | prior_tutor | surrounding
    std::string role;

    bool operator==(const ContextTurn&) const = default;
};

/// A disagreement before blinding: which source said what is still known.
struct DisagreementItem {
    std::string item_id;
    UtteranceRef ref;
    std::vector<ContextTurn> context;
    Label label_a;
    Label label_b;
};

struct DisagreementSet {
    std::string source_a;
    std::string source_b;
    LabelSeries agreements;
    std::vector<DisagreementItem> items;
};

/// Reviewer-facing item. Carries no trace of which source produced which label.
struct AdjudicationItem {
    std::string item_id;
    UtteranceRef ref;
    std::vector<ContextTurn> context;
    Label label_rater_1;
    Label label_rater_2;
    ItemState state = ItemState::Pending;
    std::optional<Rater> decision;

    const Label& chosen_label() const {
        if (!decision) throw ContractError("item " + item_id + " is undecided");
        return *decision == Rater::Rater1 ? label_rater_1 : label_rater_2;
    }
};

inline std::vector<ContextTurn> review_context(const Transcript& t, int focal_turn, std::size_t radius) {
    auto ctx = build_context(t, focal_turn);
    std::map<int, ContextTurn> turns;
    for (const auto& u : surrounding_turns(t, focal_turn, radius))
        turns[u.turn_index] = {u.turn_index, u.speaker, u.text, "surrounding"};
    auto put = [&](const Utterance& u, const char* role) {
        turns[u.turn_index] = {u.turn_index, u.speaker, u.text, role};
    };
    if (ctx.prior_tutor) put(*ctx.prior_tutor, "prior_tutor");
    if (ctx.preceding_student) put(*ctx.preceding_student, "preceding_student");
    put(ctx.focal, "focal");
    std::vector<ContextTurn> out;
    for (auto& [_, c] : turns) out.push_back(std::move(c));
    return out;
}

/// Partitions the refs into agreements and disagreement items (in ref order, ids item-0001...).
inline DisagreementSet extract_disagreements(const LabelSeries& a, const LabelSeries& b, const Corpus& corpus,
                                             std::size_t context_radius = 6) {
    require_same_refs(a, b, "extract_disagreements");
    DisagreementSet out;
    out.source_a = a.source();
    out.source_b = b.source();
    std::vector<LabeledRef> agreed;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a.entries()[i];
        const auto& y = b.entries()[i];
        if (x.label == y.label) {
            agreed.push_back(x);
            continue;
        }
        const Transcript* t = find_session(corpus, x.ref.session_id);
        if (!t || !find_utterance(corpus, x.ref))
            throw ContractError("utterance " + to_string(x.ref) + " is not in the corpus");
        char id[32];
        std::snprintf(id, sizeof id, "item-%04zu", out.items.size() + 1);
        out.items.push_back({id, x.ref, review_context(*t, x.ref.turn_index, context_radius), x.label, y.label});
    }
    out.agreements = LabelSeries::from_entries(std::move(agreed), "agreement");
    return out;
}

// ---------------------------------------------------------------------------
// Packet and sealed map

struct OverrideEntry {
    std::string item_id;
    Rater from;
    Rater to;
};

class AdjudicationPacket {
public:
    std::string codebook_version;
    std::map<std::string, std::string> label_definitions;
    std::vector<AdjudicationItem> items;
    std::vector<OverrideEntry> override_log;

    enum class RecordOutcome { Recorded, Unchanged, Overridden };

    AdjudicationItem* find(std::string_view item_id) {
        for (auto& it : items)
            if (it.item_id == item_id) return &it;
        return nullptr;
    }
    const AdjudicationItem* find(std::string_view item_id) const {
        return const_cast<AdjudicationPacket*>(this)->find(item_id);
    }

    std::size_t decided() const {
        return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const auto& i) {
            return i.state == ItemState::Decided;
        }));
    }

    std::vector<std::string> pending_ids() const {
        std::vector<std::string> out;
        for (const auto& i : items)
            if (i.state == ItemState::Pending) out.push_back(i.item_id);
        return out;
    }

    /// Re-submitting the same choice is a no-op; changing a choice needs `override_existing`
    /// and is written to the override log.
    RecordOutcome record(std::string_view item_id, Rater choice, bool override_existing = false) {
        AdjudicationItem* item = find(item_id);
        if (!item)
            throw AdjudicationError(AdjudicationError::Kind::UnknownItem,
                                    "unknown adjudication item '" + std::string(item_id) + "'");
        if (item->state == ItemState::Decided) {
            if (*item->decision == choice) return RecordOutcome::Unchanged;
            if (!override_existing)
                throw AdjudicationError(AdjudicationError::Kind::Conflict,
                                        "item " + item->item_id + " is already decided as " +
                                            std::string(to_string(*item->decision)) +
                                            "; pass override to change it");
            override_log.push_back({item->item_id, *item->decision, choice});
            item->decision = choice;
            return RecordOutcome::Overridden;
        }
        item->state = ItemState::Decided;
        item->decision = choice;
        return RecordOutcome::Recorded;
    }

    /// Digest of item identity and labels (not decisions); binds the sealed map to the packet.
    std::string content_digest() const {
        Json j = Json::array();
        for (const auto& i : items)
            j.push_back({i.item_id, i.ref.session_id, i.ref.turn_index, i.label_rater_1.name(),
                         i.label_rater_2.name()});
        return util::sha256_hex(j.dump());
    }

    static Json item_json(const AdjudicationItem& i) {
        Json ctx = Json::array();
        for (const auto& c : i.context)
            ctx.push_back({{"turn_index", c.turn_index},
                           {"speaker", to_string(c.speaker)},
                           {"text", c.text},
                           {"role", c.role}});
        return {{"item_id", i.item_id},
                {"session_id", i.ref.session_id},
                {"turn_index", i.ref.turn_index},
                {"context", std::move(ctx)},
                {"labels", {{"RATER_1", i.label_rater_1.name()}, {"RATER_2", i.label_rater_2.name()}}},
                {"state", to_string(i.state)},
                {"decision", i.decision ? Json(to_string(*i.decision)) : Json(nullptr)}};
    }

    Json to_json() const {
        Json j;
        j["packet_version"] = 1;
        j["codebook_version"] = codebook_version;
        j["label_definitions"] = label_definitions;
        Json arr = Json::array();
        for (const auto& i : items) arr.push_back(item_json(i));
        j["items"] = std::move(arr);
        Json log = Json::array();
        for (const auto& o : override_log)
            log.push_back({{"item_id", o.item_id}, {"from", to_string(o.from)}, {"to", to_string(o.to)}});
        j["override_log"] = std::move(log);
        return j;
    }

    static AdjudicationPacket from_json(const Json& j, const Codebook& codebook) {
        try {
            AdjudicationPacket p;
            p.codebook_version = j.value("codebook_version", std::string{});
            p.label_definitions = j.value("label_definitions", std::map<std::string, std::string>{});
            for (const auto& x : j.at("items")) {
                std::vector<ContextTurn> ctx;
                for (const auto& c : x.at("context")) {
                    auto spk = parse_speaker(c.at("speaker").get<std::string>());
                    if (!spk) throw ParseError("unknown speaker in packet context");
                    ctx.push_back({c.at("turn_index").get<int>(), *spk, c.at("text").get<std::string>(),
                                   c.value("role", std::string("surrounding"))});
                }
                AdjudicationItem item{x.at("item_id").get<std::string>(),
                                      {x.at("session_id").get<std::string>(), x.at("turn_index").get<int>()},
                                      std::move(ctx),
                                      codebook.require_or_sentinel(x.at("labels").at("RATER_1").get<std::string>()),
                                      codebook.require_or_sentinel(x.at("labels").at("RATER_2").get<std::string>()),
                                      ItemState::Pending,
                                      std::nullopt};
                if (item.label_rater_1 == item.label_rater_2)
                    throw ParseError("packet item " + item.item_id + " shows the same label twice");
                auto state = x.value("state", std::string("PENDING"));
                if (state == "DECIDED") {
                    auto d = x.at("decision").is_string() ? parse_rater(x.at("decision").get<std::string>())
                                                          : std::nullopt;
                    if (!d) throw ParseError("decided item " + item.item_id + " has no valid decision");
                    item.state = ItemState::Decided;
                    item.decision = d;
                } else if (state != "PENDING") {
                    throw ParseError("item " + item.item_id + " has unknown state " + state);
                }
                p.items.push_back(std::move(item));
            }
            for (const auto& o : j.value("override_log", Json::array())) {
                auto from = parse_rater(o.at("from").get<std::string>());
                auto to = parse_rater(o.at("to").get<std::string>());
                if (!from || !to) throw ParseError("bad override log entry");
                p.override_log.push_back({o.at("item_id").get<std::string>(), *from, *to});
            }
            return p;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed adjudication packet: ") + e.what());
        }
    }
};

/// item_id -> which source sits behind RATER_1. Lives in its own file, never in the packet.
struct SealedAssignmentMap {
    std::uint64_t seed = 0;
    std::string source_a;
    std::string source_b;
    std::map<std::string, bool> rater1_is_a;
    std::string packet_digest;

    Json to_json() const {
        Json m = Json::object();
        for (const auto& [id, a] : rater1_is_a) m[id] = a ? "A" : "B";
        return {{"seed", seed},
                {"source_a", source_a},
                {"source_b", source_b},
                {"packet_digest", packet_digest},
                {"rater_1_source", std::move(m)}};
    }

    static SealedAssignmentMap from_json(const Json& j) {
        try {
            SealedAssignmentMap s;
            s.seed = j.at("seed").get<std::uint64_t>();
            s.source_a = j.at("source_a").get<std::string>();
            s.source_b = j.at("source_b").get<std::string>();
            s.packet_digest = j.at("packet_digest").get<std::string>();
            for (const auto& [id, v] : j.at("rater_1_source").items()) s.rater1_is_a[id] = v.get<std::string>() == "A";
            return s;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed sealed assignment map: ") + e.what());
        }
    }
};

struct BlindedPacket {
    AdjudicationPacket packet;
    SealedAssignmentMap sealed;
};

/// An independent seeded fair coin per item decides which source becomes RATER_1, and a
/// seeded shuffle fixes presentation order.
inline BlindedPacket blind_and_randomize(const DisagreementSet& set, std::uint64_t seed, const Codebook& codebook) {
    BlindedPacket out;
    out.packet.codebook_version = codebook.version();
    out.sealed.seed = seed;
    out.sealed.source_a = set.source_a;
    out.sealed.source_b = set.source_b;
    for (const auto& d : set.items) {
        auto coin = util::keyed_stream(seed, {"blind", d.item_id});
        const bool a_first = util::uniform01(coin) < 0.5;
        out.sealed.rater1_is_a[d.item_id] = a_first;
        out.packet.items.push_back({d.item_id, d.ref, d.context, a_first ? d.label_a : d.label_b,
                                    a_first ? d.label_b : d.label_a, ItemState::Pending, std::nullopt});
        for (const auto* l : {&d.label_a, &d.label_b}) {
            if (const Category* c = codebook.find(l->name()))
                out.packet.label_definitions[c->name] = c->definition;
        }
    }
    auto order = util::keyed_stream(seed, {"order"});
    auto& items = out.packet.items;
    for (std::size_t i = items.size(); i > 1; --i)
        std::swap(items[i - 1], items[util::uniform_index(order, i)]);
    out.sealed.packet_digest = out.packet.content_digest();
    return out;
}

inline AdjudicationPacket record_adjudication(AdjudicationPacket packet, std::string_view item_id, Rater choice,
                                              bool override_existing = false) {
    packet.record(item_id, choice, override_existing);
    return packet;
}

// ---------------------------------------------------------------------------
// Gold derivation

enum class Provenance { Agreement, Adjudicated };

inline std::string_view to_string(Provenance p) noexcept {
    return p == Provenance::Agreement ? "AGREEMENT" : "ADJUDICATED";
}

struct GoldSet {
    LabelSeries labels;
    std::map<UtteranceRef, Provenance> provenance;
};

struct AlignmentStats {
    std::size_t items = 0;
    std::size_t chose_a = 0;
    std::size_t chose_b = 0;

    double fraction_a() const { return items ? static_cast<double>(chose_a) / static_cast<double>(items) : 0.0; }
    double fraction_b() const { return items ? static_cast<double>(chose_b) / static_cast<double>(items) : 0.0; }
};

struct GoldDerivation {
    GoldSet gold;
    AlignmentStats alignment;
    std::string source_a;
    std::string source_b;

    /// e.g. "reviewer aligned with gemini on 53.23% of disagreements".
    std::string alignment_text(bool source_a_side) const {
        return "reviewer aligned with " + (source_a_side ? source_a : source_b) + " on " +
               util::format_percent(source_a_side ? alignment.fraction_a() : alignment.fraction_b()) +
               " of disagreements";
    }
};

/// The only place the sealed map is opened.
inline GoldDerivation derive_gold(const LabelSeries& agreements, const AdjudicationPacket& packet,
                                  const SealedAssignmentMap& sealed) {
    if (sealed.packet_digest != packet.content_digest())
        throw DigestMismatch("sealed assignment map does not belong to this packet");
    if (auto pending = packet.pending_ids(); !pending.empty()) {
        std::string ids;
        for (std::size_t i = 0; i < std::min<std::size_t>(pending.size(), 10); ++i)
            ids += (i ? ", " : "") + pending[i];
        if (pending.size() > 10) ids += ", ...";
        throw AdjudicationError(AdjudicationError::Kind::Incomplete,
                                std::to_string(pending.size()) + " item(s) still pending: " + ids);
    }
    GoldDerivation out;
    out.source_a = sealed.source_a;
    out.source_b = sealed.source_b;
    std::vector<LabeledRef> entries(agreements.entries().begin(), agreements.entries().end());
    for (const auto& e : agreements.entries()) out.gold.provenance[e.ref] = Provenance::Agreement;
    for (const auto& item : packet.items) {
        auto it = sealed.rater1_is_a.find(item.item_id);
        if (it == sealed.rater1_is_a.end())
            throw DigestMismatch("sealed map has no assignment for " + item.item_id);
        if (!out.gold.provenance.emplace(item.ref, Provenance::Adjudicated).second)
            throw ContractError(to_string(item.ref) + " is both an agreement and an adjudication item");
        const bool chose_rater1 = *item.decision == Rater::Rater1;
        const bool chose_a = chose_rater1 == it->second;
        ++out.alignment.items;
        ++(chose_a ? out.alignment.chose_a : out.alignment.chose_b);
        entries.push_back({item.ref, item.chosen_label()});
    }
    out.gold.labels = LabelSeries::from_entries(std::move(entries), "gold");
    return out;
}

// ---------------------------------------------------------------------------
// Files and leak checks

inline void save_packet(const std::filesystem::path& path, const AdjudicationPacket& p) {
    util::write_file_atomic(path, p.to_json().dump(2) + "\n");
}

inline AdjudicationPacket load_packet(const std::filesystem::path& path, const Codebook& codebook) {
    return AdjudicationPacket::from_json(Json::parse(util::read_file(path)), codebook);
}

/// Written owner-read/write only.
inline void save_sealed_map(const std::filesystem::path& path, const SealedAssignmentMap& s) {
    util::write_file_atomic(path, s.to_json().dump(2) + "\n");
    std::filesystem::permissions(path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write,
                                 std::filesystem::perm_options::replace);
}

inline SealedAssignmentMap load_sealed_map(const std::filesystem::path& path) {
    return SealedAssignmentMap::from_json(Json::parse(util::read_file(path)));
}

/// Case-insensitive occurrences of any identifier in a reviewer-facing payload.
inline std::size_t count_identifier_leaks(std::string_view payload, const std::vector<std::string>& identifiers) {
    const std::string hay = util::to_upper(payload);
    std::size_t n = 0;
    for (const auto& id : identifiers) {
        if (util::trim(id).empty()) continue;
        n += util::count_occurrences(hay, util::to_upper(id));
    }
    return n;
}

}  // namespace orchestra
