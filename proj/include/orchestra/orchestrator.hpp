#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "orchestra/backends.hpp"
#include "orchestra/domain.hpp"
#include "orchestra/ingest.hpp"
#include "orchestra/labels.hpp"
#include "orchestra/prompting.hpp"

namespace orchestra {

struct RunConfig {
    ChunkingParams chunking;
    /// Concurrent backend calls.
    std::size_t parallelism = 4;
    /// Requests per second across the whole run; 0 disables the limiter.
    double rate_limit_per_second = 0.0;
    double rate_burst = 4.0;
    /// Extra attempts after an unparseable response.
    int reask_budget = 2;
    /// Output may feed gold derivation, so gold-reading (synthetic) backends are refused.
    bool gold_eligible = false;
    bool record_timestamps = true;
    /// Suspend after committing this many utterances in one invocation.
    std::optional<std::size_t> commit_limit;
};

inline std::string codebook_digest(const Codebook& cb) {
    return util::sha256_hex(codebook_to_json(cb).dump());
}

// ---------------------------------------------------------------------------
// Manifest

struct RunManifest {
    std::string run_id;
    OrchestrationSpec spec = OrchestrationSpec::unverified("unset");
    std::string codebook_version;
    std::string codebook_digest;
    std::string annotation_template_version;
    std::string verification_template_version;
    ChunkingParams chunking;
    int reask_budget = 2;
    bool gold_eligible = false;
    Json backends = Json::object();
    std::string corpus_digest;
    std::string created_at;

    /// Everything except run_id and created_at, in a fixed field order.
    Json identity_json() const {
        Json j;
        j["spec"] = format_orchestration_spec(spec);
        j["condition"] = to_string(spec.condition());
        j["annotator"] = spec.annotator();
        j["verifier"] = spec.verifier() ? Json(*spec.verifier()) : Json(nullptr);
        j["codebook_version"] = codebook_version;
        j["codebook_digest"] = codebook_digest;
        j["annotation_template_version"] = annotation_template_version;
        j["verification_template_version"] = verification_template_version;
        j["chunking"] = {{"target_size", chunking.target_size},
                         {"overlap", chunking.overlap},
                         {"turn_counting", "both speakers, one row per turn"}};
        j["reask_budget"] = reask_budget;
        j["gold_eligible"] = gold_eligible;
        j["annotation_reuse"] = "one annotation pass per (annotator, corpus, template)";
        j["verification_scope"] = "every tutor utterance, stateless per utterance";
        j["backends"] = backends;
        j["corpus_digest"] = corpus_digest;
        return j;
    }

    Json to_json() const {
        Json j;
        j["run_id"] = run_id;
        const Json identity = identity_json();
        for (const auto& [k, v] : identity.items()) j[k] = v;
        j["created_at"] = created_at;
        return j;
    }

    std::string digest() const { return util::sha256_hex(identity_json().dump()); }

    static RunManifest from_json(const Json& j) {
        try {
            RunManifest m;
            m.run_id = j.at("run_id").get<std::string>();
            m.spec = parse_orchestration_spec(j.at("spec").get<std::string>());
            m.codebook_version = j.at("codebook_version").get<std::string>();
            m.codebook_digest = j.at("codebook_digest").get<std::string>();
            m.annotation_template_version = j.at("annotation_template_version").get<std::string>();
            m.verification_template_version = j.at("verification_template_version").get<std::string>();
            m.chunking.target_size = j.at("chunking").at("target_size").get<std::size_t>();
            m.chunking.overlap = j.at("chunking").at("overlap").get<std::size_t>();
            m.reask_budget = j.at("reask_budget").get<int>();
            m.gold_eligible = j.at("gold_eligible").get<bool>();
            m.backends = j.at("backends");
            m.corpus_digest = j.at("corpus_digest").get<std::string>();
            m.created_at = j.value("created_at", std::string{});
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed run manifest: ") + e.what());
        }
    }
};

// ---------------------------------------------------------------------------
// Results

enum class RunStatus { Completed, Suspended };

inline std::string_view to_string(RunStatus s) noexcept {
    return s == RunStatus::Completed ? "COMPLETED" : "SUSPENDED";
}

struct FinalLabelRecord {
    UtteranceRef ref;
    std::size_t chunk_index = 0;
    Label initial_label;
    Decision decision = Decision::None;
    Label final_label;
    std::string annotator_justification;
    std::string verifier_justification;
    bool verification_flagged = false;
    int annotation_attempts = 1;
    int verification_attempts = 0;

    bool operator==(const FinalLabelRecord&) const = default;
};

struct RunCounts {
    std::size_t annotated = 0;
    std::size_t verified = 0;
    std::size_t unparseable = 0;
    std::size_t revised = 0;
    std::size_t flagged = 0;
    std::size_t reasks = 0;

    bool operator==(const RunCounts&) const = default;
};

struct RunResult {
    std::string run_id;
    std::string manifest_digest;
    std::string corpus_digest;
    RunStatus status = RunStatus::Suspended;
    std::string suspend_reason;
    std::size_t expected_records = 0;
    std::vector<FinalLabelRecord> records;
    RunCounts counts;

    LabelSeries final_labels() const {
        std::vector<LabeledRef> e;
        e.reserve(records.size());
        for (const auto& r : records) e.push_back({r.ref, r.final_label});
        return LabelSeries::from_entries(std::move(e), run_id);
    }

    LabelSeries initial_labels() const {
        std::vector<LabeledRef> e;
        e.reserve(records.size());
        for (const auto& r : records) e.push_back({r.ref, r.initial_label});
        return LabelSeries::from_entries(std::move(e), run_id + ":initial");
    }

    Json to_json() const {
        Json j;
        j["run_id"] = run_id;
        j["manifest_digest"] = manifest_digest;
        j["corpus_digest"] = corpus_digest;
        j["status"] = to_string(status);
        j["suspend_reason"] = suspend_reason;
        j["expected_records"] = expected_records;
        j["counts"] = {{"annotated", counts.annotated},   {"verified", counts.verified},
                       {"unparseable", counts.unparseable}, {"revised", counts.revised},
                       {"flagged", counts.flagged},        {"reasks", counts.reasks}};
        Json recs = Json::array();
        for (const auto& r : records) {
            recs.push_back({{"session_id", r.ref.session_id},
                            {"turn_index", r.ref.turn_index},
                            {"chunk", r.chunk_index},
                            {"initial_label", r.initial_label.name()},
                            {"decision", to_string(r.decision)},
                            {"final_label", r.final_label.name()},
                            {"annotator_justification", r.annotator_justification},
                            {"verifier_justification", r.verifier_justification},
                            {"verification_flagged", r.verification_flagged},
                            {"annotation_attempts", r.annotation_attempts},
                            {"verification_attempts", r.verification_attempts}});
        }
        j["records"] = std::move(recs);
        return j;
    }

    static RunResult from_json(const Json& j, const Codebook& codebook) {
        try {
            RunResult r;
            r.run_id = j.at("run_id").get<std::string>();
            r.manifest_digest = j.at("manifest_digest").get<std::string>();
            r.corpus_digest = j.at("corpus_digest").get<std::string>();
            auto status = j.at("status").get<std::string>();
            r.status = status == "COMPLETED" ? RunStatus::Completed : RunStatus::Suspended;
            r.suspend_reason = j.value("suspend_reason", std::string{});
            r.expected_records = j.value("expected_records", std::size_t{0});
            const auto& c = j.at("counts");
            r.counts = {c.at("annotated"), c.at("verified"), c.at("unparseable"),
                        c.at("revised"),   c.at("flagged"),  c.at("reasks")};
            for (const auto& x : j.at("records")) {
                auto decision = parse_decision(x.at("decision").get<std::string>());
                if (!decision) throw ParseError("unknown decision in run result");
                r.records.push_back(FinalLabelRecord{
                    {x.at("session_id").get<std::string>(), x.at("turn_index").get<int>()},
                    x.at("chunk").get<std::size_t>(),
                    codebook.require_or_sentinel(x.at("initial_label").get<std::string>()),
                    *decision,
                    codebook.require_or_sentinel(x.at("final_label").get<std::string>()),
                    x.value("annotator_justification", std::string{}),
                    x.value("verifier_justification", std::string{}),
                    x.value("verification_flagged", false),
                    x.value("annotation_attempts", 1),
                    x.value("verification_attempts", 0)});
            }
            return r;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed run result: ") + e.what());
        }
    }
};

struct Disagreement {
    UtteranceRef ref;
    Label label_a;
    Label label_b;
};

inline std::vector<Disagreement> diff_labels(const LabelSeries& a, const LabelSeries& b) {
    require_same_refs(a, b, "diff");
    std::vector<Disagreement> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a.entries()[i];
        const auto& y = b.entries()[i];
        if (x.label != y.label) out.push_back({x.ref, x.label, y.label});
    }
    return out;
}

inline std::vector<Disagreement> diff_runs(const RunResult& a, const RunResult& b) {
    if (a.corpus_digest != b.corpus_digest)
        throw ContractError("runs " + a.run_id + " and " + b.run_id + " were made on different corpora");
    return diff_labels(a.final_labels(), b.final_labels());
}

// ---------------------------------------------------------------------------
// Audit log

struct AuditEvent {
    std::string run_id;
    std::uint64_t sequence_no = 0;
    std::string event;  // ANNOTATE | VERIFY | REASK
    UtteranceRef ref;
    std::string backend;
    Json payload = Json::object();
    std::string timestamp;

    Json to_json() const {
        Json j{{"run_id", run_id},
               {"sequence_no", sequence_no},
               {"event", event},
               {"session_id", ref.session_id},
               {"turn_index", ref.turn_index},
               {"backend", backend},
               {"payload", payload}};
        if (!timestamp.empty()) j["timestamp"] = timestamp;
        return j;
    }

    static AuditEvent from_json(const Json& j) {
        AuditEvent e;
        e.run_id = j.at("run_id").get<std::string>();
        e.sequence_no = j.at("sequence_no").get<std::uint64_t>();
        e.event = j.at("event").get<std::string>();
        e.ref = {j.at("session_id").get<std::string>(), j.at("turn_index").get<int>()};
        e.backend = j.at("backend").get<std::string>();
        e.payload = j.at("payload");
        e.timestamp = j.value("timestamp", std::string{});
        return e;
    }
};

/// Append-only, line-delimited. Writes are serialized; with no path the log is kept in memory.
class AuditLog {
public:
    AuditLog() = default;
    explicit AuditLog(const std::filesystem::path& path) : out_(path, std::ios::app | std::ios::binary) {
        if (!out_) throw ConfigError("cannot open audit log " + path.string());
        file_backed_ = true;
    }

    void append(const std::vector<AuditEvent>& events) {
        std::string chunk;
        for (const auto& e : events) {
            chunk += e.to_json().dump();
            chunk += '\n';
        }
        std::lock_guard lock(mu_);
        if (file_backed_) {
            out_.write(chunk.data(), static_cast<std::streamsize>(chunk.size()));
            out_.flush();
        } else {
            memory_ += chunk;
        }
    }

    /// In-memory contents (empty for file-backed logs).
    std::string contents() const {
        std::lock_guard lock(mu_);
        return memory_;
    }

private:
    mutable std::mutex mu_;
    std::ofstream out_;
    bool file_backed_ = false;
    std::string memory_;
};

inline std::vector<AuditEvent> parse_audit_log(std::string_view text) {
    std::vector<AuditEvent> events;
    std::size_t n = 0;
    for (auto line : util::split_lines(text)) {
        ++n;
        if (util::trim(line).empty()) continue;
        try {
            events.push_back(AuditEvent::from_json(Json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("audit log line " + std::to_string(n) + ": " + e.what());
        }
    }
    return events;
}

/// The log with timestamp fields removed; replay comparisons run on this.
inline std::string strip_timestamps(std::string_view audit_text) {
    std::string out;
    for (auto line : util::split_lines(audit_text)) {
        if (util::trim(line).empty()) continue;
        auto j = Json::parse(line);
        j.erase("timestamp");
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline std::string audit_digest(std::string_view audit_text) {
    return util::sha256_hex(strip_timestamps(audit_text));
}

// ---------------------------------------------------------------------------
// Annotation cache

struct CachedAnnotation {
    Label label;
    std::string justification;
    std::string response;
    int attempts = 1;
};

/// Reuses one annotation pass per (annotator, corpus, template, codebook) across runs, so
/// every verifier of the same annotator starts from identical initial labels.
class AnnotationCache {
public:
    AnnotationCache(Codebook codebook, std::optional<std::filesystem::path> dir = std::nullopt)
        : codebook_(std::move(codebook)), dir_(std::move(dir)) {
        if (dir_) std::filesystem::create_directories(*dir_);
    }

    std::optional<CachedAnnotation> find(const std::string& pass_key, const UtteranceRef& ref) {
        std::lock_guard lock(mu_);
        auto& pass = load(pass_key);
        auto it = pass.find(ref);
        if (it == pass.end()) return std::nullopt;
        return it->second;
    }

    void store(const std::string& pass_key, const UtteranceRef& ref, CachedAnnotation entry) {
        std::lock_guard lock(mu_);
        auto& pass = load(pass_key);
        if (!pass.emplace(ref, entry).second) return;
        if (dir_) {
            std::ofstream out(*dir_ / (pass_key + ".jsonl"), std::ios::app | std::ios::binary);
            out << Json{{"session_id", ref.session_id},
                        {"turn_index", ref.turn_index},
                        {"label", entry.label.name()},
                        {"justification", entry.justification},
                        {"response", entry.response},
                        {"attempts", entry.attempts}}
                       .dump()
                << '\n';
        }
    }

    std::size_t size(const std::string& pass_key) {
        std::lock_guard lock(mu_);
        return load(pass_key).size();
    }

private:
    using Pass = std::map<UtteranceRef, CachedAnnotation>;

    Pass& load(const std::string& key) {
        auto [it, fresh] = passes_.try_emplace(key);
        if (!fresh || !dir_) return it->second;
        auto path = *dir_ / (key + ".jsonl");
        if (!std::filesystem::exists(path)) return it->second;
        const std::string text = util::read_file(path);
        for (auto line : util::split_lines(text)) {
            if (util::trim(line).empty()) continue;
            auto j = Json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;  // torn tail from an interrupted write
            it->second.emplace(
                UtteranceRef{j.at("session_id").get<std::string>(), j.at("turn_index").get<int>()},
                CachedAnnotation{codebook_.require_or_sentinel(j.at("label").get<std::string>()),
                                 j.value("justification", std::string{}),
                                 j.value("response", std::string{}), j.value("attempts", 1)});
        }
        return it->second;
    }

    Codebook codebook_;
    std::optional<std::filesystem::path> dir_;
    std::mutex mu_;
    std::map<std::string, Pass> passes_;
};

// ---------------------------------------------------------------------------
// Rate limiting

class TokenBucket {
public:
    TokenBucket(double rate_per_second, double burst)
        : rate_(rate_per_second), burst_(std::max(1.0, burst)), tokens_(burst_),
          last_(std::chrono::steady_clock::now()) {}

    void acquire() {
        if (rate_ <= 0.0) return;
        for (;;) {
            std::chrono::duration<double> wait{};
            {
                std::lock_guard lock(mu_);
                auto now = std::chrono::steady_clock::now();
                tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
                last_ = now;
                if (tokens_ >= 1.0) {
                    tokens_ -= 1.0;
                    return;
                }
                wait = std::chrono::duration<double>((1.0 - tokens_) / rate_);
            }
            std::this_thread::sleep_for(wait);
        }
    }

private:
    double rate_;
    double burst_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Engine

/// Everything persisted by an interrupted run.
struct PartialState {
    std::string audit_log;
    std::optional<RunResult> stored_result;
};

class Orchestrator {
public:
    Orchestrator(const Corpus& corpus, const Codebook& codebook, PromptTemplates templates,
                 const BackendRegistry& backends, RunConfig config,
                 AnnotationCache* cache = nullptr)
        : corpus_(corpus), codebook_(codebook), templates_(std::move(templates)),
          backends_(backends), config_(std::move(config)), cache_(cache) {
        validate_chunking(config_.chunking);
        if (config_.parallelism == 0) throw ConfigError("parallelism must be at least 1");
        if (config_.reask_budget < 0) throw ConfigError("reask_budget must be >= 0");
        if (auto report = validate_codebook(codebook_); !report.empty())
            throw ConfigError("invalid codebook: " + report.front().message);
        build_work_items();
    }

    /// Validates the spec against the configured backends and freezes a manifest. The
    /// default run id is derived from the manifest contents.
    RunManifest prepare(const OrchestrationSpec& spec, std::optional<std::string> run_id = {}) const {
        std::vector<std::string> ids{spec.annotator()};
        if (spec.verifier() && *spec.verifier() != spec.annotator()) ids.push_back(*spec.verifier());
        RunManifest m;
        m.spec = spec;
        for (const auto& id : ids) {
            Backend& b = backends_.get(id);
            if (b.consumes_gold() && config_.gold_eligible)
                throw ConfigError("backend " + id +
                                  " reads gold labels and cannot be used in a gold-eligible run");
            if (auto* synthetic = dynamic_cast<const SyntheticBackend*>(&b)) {
                for (const auto& item : items_) {
                    if (!synthetic->gold().find(item.ref))
                        throw ConfigError("backend " + id + " has no gold label for tutor utterance " +
                                          to_string(item.ref) + "; corpus and gold labels do not match");
                }
            }
        }
        m.backends["annotator"] = backends_.get(spec.annotator()).describe();
        if (spec.verifier()) m.backends["verifier"] = backends_.get(*spec.verifier()).describe();
        m.codebook_version = codebook_.version();
        m.codebook_digest = codebook_digest(codebook_);
        m.annotation_template_version = templates_.annotation.version;
        m.verification_template_version = templates_.verification.version;
        m.chunking = config_.chunking;
        m.reask_budget = config_.reask_budget;
        m.gold_eligible = config_.gold_eligible;
        m.corpus_digest = corpus_digest_;
        m.run_id = run_id ? *run_id : "run-" + m.digest().substr(0, 16);
        m.created_at = config_.record_timestamps ? util::utc_timestamp() : std::string{};
        return m;
    }

    RunResult run(const RunManifest& manifest, AuditLog& log) {
        check_manifest(manifest);
        return execute(manifest, {}, 0, log);
    }

    /// Continues an interrupted run from its committed audit prefix. A stored completed
    /// result is returned unchanged.
    RunResult resume(const RunManifest& manifest, const PartialState& state, AuditLog& log) {
        check_manifest(manifest);
        if (state.stored_result && state.stored_result->status == RunStatus::Completed) {
            if (state.stored_result->manifest_digest != manifest.digest())
                throw DigestMismatch("stored result belongs to a different manifest");
            return *state.stored_result;
        }
        auto events = parse_audit_log(state.audit_log);
        std::map<UtteranceRef, std::vector<const AuditEvent*>> by_ref;
        std::uint64_t last_seq = 0;
        for (const auto& e : events) {
            if (e.run_id != manifest.run_id)
                throw DigestMismatch("audit log event " + std::to_string(e.sequence_no) +
                                     " belongs to run " + e.run_id + ", not " + manifest.run_id);
            if (e.sequence_no != last_seq + 1)
                throw DigestMismatch("audit log sequence breaks at " + std::to_string(e.sequence_no));
            last_seq = e.sequence_no;
            by_ref[e.ref].push_back(&e);
        }
        std::vector<FinalLabelRecord> committed;
        for (std::size_t i = 0; i < items_.size(); ++i) {
            auto it = by_ref.find(items_[i].ref);
            if (it == by_ref.end()) break;
            auto rec = rebuild_record(manifest, items_[i], it->second);
            if (!rec) break;
            committed.push_back(std::move(*rec));
            by_ref.erase(it);
        }
        for (const auto& [ref, evs] : by_ref) {
            // Only a torn final item may remain; anything else means the log is foreign.
            bool ref_in_corpus =
                std::any_of(items_.begin(), items_.end(), [&](const WorkItem& w) { return w.ref == ref; });
            if (!ref_in_corpus)
                throw DigestMismatch("audit log mentions " + to_string(ref) + ", which is not in the corpus");
        }
        return execute(manifest, std::move(committed), last_seq, log);
    }

    std::size_t work_item_count() const noexcept { return items_.size(); }
    const std::string& corpus_digest_value() const noexcept { return corpus_digest_; }

    /// Key of the annotation pass this run would reuse or populate.
    std::string annotation_pass_key(const OrchestrationSpec& spec) const {
        Json k{{"annotator", backends_.get(spec.annotator()).describe()},
               {"corpus", corpus_digest_},
               {"template", templates_.annotation.version},
               {"codebook", codebook_digest(codebook_)},
               {"reask_budget", config_.reask_budget}};
        return util::sha256_hex(k.dump()).substr(0, 32);
    }

private:
    struct WorkItem {
        UtteranceRef ref;
        std::size_t chunk_index;
        const Transcript* transcript;
    };

    struct ItemOutcome {
        FinalLabelRecord record;
        std::vector<AuditEvent> events;
    };

    void build_work_items() {
        corpus_digest_ = corpus_digest(corpus_);
        for (const auto& t : corpus_) {
            auto chunks = chunk_session(t, config_.chunking);
            std::size_t chunk_idx = 0;
            for (const auto& u : t.turns) {
                // First containing chunk: the one whose fresh part holds the turn.
                const auto idx = static_cast<std::size_t>(u.turn_index);
                while (chunk_idx + 1 < chunks.size() && idx >= chunks[chunk_idx].end) ++chunk_idx;
                if (u.speaker == Speaker::Tutor) items_.push_back({u.ref(), chunk_idx, &t});
            }
        }
    }

    void check_manifest(const RunManifest& m) const {
        if (m.corpus_digest != corpus_digest_)
            throw DigestMismatch("corpus digest " + corpus_digest_.substr(0, 12) +
                                 " does not match manifest " + m.corpus_digest.substr(0, 12));
        if (m.codebook_digest != codebook_digest(codebook_))
            throw DigestMismatch("codebook differs from the one recorded in the manifest");
        if (m.annotation_template_version != templates_.annotation.version ||
            m.verification_template_version != templates_.verification.version)
            throw DigestMismatch("prompt templates differ from the manifest");
        if (m.chunking != config_.chunking || m.reask_budget != config_.reask_budget)
            throw DigestMismatch("run configuration differs from the manifest");
        if (m.backends.at("annotator") != backends_.get(m.spec.annotator()).describe() ||
            (m.spec.verifier() && m.backends.at("verifier") != backends_.get(*m.spec.verifier()).describe()))
            throw DigestMismatch("backend configuration differs from the manifest");
        if (m.gold_eligible != config_.gold_eligible)
            throw DigestMismatch("gold eligibility differs from the manifest");
        if (m.gold_eligible) {
            for (const auto& role : {"annotator", "verifier"}) {
                if (m.backends.contains(role) && m.backends[role].value("kind", "") == "synthetic")
                    throw ConfigError("synthetic backends cannot be used in a gold-eligible run");
            }
        }
    }

    AuditEvent make_event(const RunManifest& m, std::string type, const UtteranceRef& ref,
                          const std::string& backend, Json payload) const {
        AuditEvent e;
        e.run_id = m.run_id;
        e.event = std::move(type);
        e.ref = ref;
        e.backend = backend;
        e.payload = std::move(payload);
        return e;
    }

    ItemOutcome process(const RunManifest& m, const WorkItem& item, TokenBucket& limiter,
                        const std::string& pass_key) {
        ItemOutcome out{FinalLabelRecord{item.ref, item.chunk_index, Label::unparseable(),
                                         Decision::None, Label::unparseable(), {}, {}},
                        {}};
        auto& rec = out.record;
        const auto ctx = build_context(*item.transcript, item.ref.turn_index);
        const std::string& annotator_id = m.spec.annotator();

        // (a) initial label
        std::optional<CachedAnnotation> cached;
        if (cache_) cached = cache_->find(pass_key, item.ref);
        if (cached) {
            rec.initial_label = cached->label;
            rec.annotator_justification = cached->justification;
            rec.annotation_attempts = cached->attempts;
            out.events.push_back(make_event(m, "ANNOTATE", item.ref, annotator_id,
                                            {{"cached", true},
                                             {"pass", pass_key},
                                             {"attempt", cached->attempts - 1},
                                             {"response", cached->response},
                                             {"label", cached->label.name()},
                                             {"justification", cached->justification}}));
        } else {
            Backend& annotator = backends_.get(annotator_id);
            const std::string prompt = render_annotation_prompt(codebook_, ctx, templates_.annotation);
            for (int attempt = 0;; ++attempt) {
                std::string full = attempt == 0 ? prompt : prompt + std::string(kReaskSuffix);
                limiter.acquire();
                std::string response =
                    annotator.complete({full, TaskKind::Annotate, item.ref, attempt, std::nullopt});
                auto parsed = parse_annotation_response(response, codebook_);
                Json payload{{"pass", "annotate"},
                             {"attempt", attempt},
                             {"prompt_digest", util::sha256_hex(full)},
                             {"response", response}};
                if (parsed.label.is_unparseable() && attempt < config_.reask_budget) {
                    out.events.push_back(make_event(m, "REASK", item.ref, annotator_id, std::move(payload)));
                    continue;
                }
                payload.erase("pass");
                payload["label"] = parsed.label.name();
                payload["justification"] = parsed.justification;
                out.events.push_back(make_event(m, "ANNOTATE", item.ref, annotator_id, std::move(payload)));
                rec.initial_label = parsed.label;
                rec.annotator_justification = parsed.justification;
                rec.annotation_attempts = attempt + 1;
                if (cache_)
                    cache_->store(pass_key, item.ref,
                                  {parsed.label, parsed.justification, response, attempt + 1});
                break;
            }
        }

        if (!m.spec.verifier()) {
            rec.decision = Decision::None;
            rec.final_label = rec.initial_label;
            return out;
        }

        // (b)-(d) decision, final label, justification
        const std::string& verifier_id = *m.spec.verifier();
        Backend& verifier = backends_.get(verifier_id);
        const std::string prompt = render_verification_prompt(
            codebook_, ctx, rec.initial_label, rec.annotator_justification, templates_.verification);
        for (int attempt = 0;; ++attempt) {
            std::string full = attempt == 0 ? prompt : prompt + std::string(kReaskSuffix);
            limiter.acquire();
            std::string response =
                verifier.complete({full, TaskKind::Verify, item.ref, attempt, rec.initial_label});
            auto parsed = parse_verification_response(response, codebook_, rec.initial_label);
            Json payload{{"pass", "verify"},
                         {"attempt", attempt},
                         {"prompt_digest", util::sha256_hex(full)},
                         {"response", response}};
            if (parsed.flagged && attempt < config_.reask_budget) {
                out.events.push_back(make_event(m, "REASK", item.ref, verifier_id, std::move(payload)));
                continue;
            }
            auto vr = VerificationRecord::create(rec.initial_label, parsed.decision, parsed.final_label,
                                                 parsed.justification, verifier_id, m.run_id, 0,
                                                 item.ref, parsed.flagged);
            payload.erase("pass");
            payload["initial_label"] = rec.initial_label.name();
            payload["decision"] = to_string(vr.decision());
            payload["final_label"] = vr.final_label().name();
            payload["justification"] = vr.justification();
            payload["flagged"] = vr.flagged();
            out.events.push_back(make_event(m, "VERIFY", item.ref, verifier_id, std::move(payload)));
            rec.decision = vr.decision();
            rec.final_label = vr.final_label();
            rec.verifier_justification = vr.justification();
            rec.verification_flagged = vr.flagged();
            rec.verification_attempts = attempt + 1;
            break;
        }
        return out;
    }

    /// Reconstructs a committed item from its audit events; nullopt if incomplete.
    std::optional<FinalLabelRecord> rebuild_record(const RunManifest& m, const WorkItem& item,
                                                   const std::vector<const AuditEvent*>& events) const {
        const AuditEvent* ann = nullptr;
        const AuditEvent* ver = nullptr;
        std::uint64_t ann_seq = 0;
        for (const auto* e : events) {
            if (e->event == "ANNOTATE") {
                ann = e;
                ann_seq = e->sequence_no;
            } else if (e->event == "VERIFY") {
                ver = e;
            }
        }
        if (!ann) return std::nullopt;
        if (m.spec.verifier() && !ver) return std::nullopt;
        try {
            FinalLabelRecord rec{item.ref, item.chunk_index,
                                 codebook_.require_or_sentinel(ann->payload.at("label").get<std::string>()),
                                 Decision::None, Label::unparseable(), {}, {}};
            rec.annotator_justification = ann->payload.value("justification", std::string{});
            rec.annotation_attempts = ann->payload.value("attempt", 0) + 1;
            rec.final_label = rec.initial_label;
            if (ver) {
                if (ver->sequence_no <= ann_seq)
                    throw DigestMismatch("verification of " + to_string(item.ref) + " precedes its annotation");
                auto d = parse_decision(ver->payload.at("decision").get<std::string>());
                if (!d) throw ParseError("bad decision in audit log");
                rec.decision = *d;
                rec.final_label = codebook_.require_or_sentinel(ver->payload.at("final_label").get<std::string>());
                rec.verifier_justification = ver->payload.value("justification", std::string{});
                rec.verification_flagged = ver->payload.value("flagged", false);
                rec.verification_attempts = ver->payload.value("attempt", 0) + 1;
            }
            return rec;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed audit payload: ") + e.what());
        }
    }

    static void tally(RunCounts& c, const FinalLabelRecord& r) {
        ++c.annotated;
        if (r.initial_label.is_unparseable()) ++c.unparseable;
        if (r.decision != Decision::None) ++c.verified;
        if (r.decision == Decision::Revise) ++c.revised;
        if (r.verification_flagged) ++c.flagged;
        c.reasks += static_cast<std::size_t>(r.annotation_attempts - 1);
        if (r.verification_attempts > 0) c.reasks += static_cast<std::size_t>(r.verification_attempts - 1);
    }

    RunResult execute(const RunManifest& m, std::vector<FinalLabelRecord> committed,
                      std::uint64_t last_seq, AuditLog& log) {
        const std::size_t start = committed.size();
        const std::size_t n = items_.size();
        const std::size_t end = config_.commit_limit ? std::min(n, start + *config_.commit_limit) : n;
        const std::string pass_key = annotation_pass_key(m.spec);
        TokenBucket limiter(config_.rate_limit_per_second, config_.rate_burst);

        std::mutex mu;
        std::map<std::size_t, ItemOutcome> ready;
        std::size_t next_commit = start;
        std::size_t fail_index = n;
        std::string fail_reason;
        std::uint64_t seq = last_seq;
        std::atomic<std::size_t> next_dispatch{start};
        std::atomic<bool> stop{false};

        // Commits strictly in corpus order so the log and sequence numbers do not depend
        // on which worker finished first. Caller holds `mu`.
        auto drain = [&] {
            for (auto it = ready.find(next_commit); it != ready.end() && next_commit < fail_index;
                 it = ready.find(next_commit)) {
                for (auto& e : it->second.events) {
                    e.sequence_no = ++seq;
                    if (config_.record_timestamps) e.timestamp = util::utc_timestamp();
                }
                log.append(it->second.events);
                committed.push_back(std::move(it->second.record));
                ready.erase(it);
                ++next_commit;
            }
        };

        auto worker = [&] {
            for (;;) {
                if (stop.load()) return;
                const std::size_t i = next_dispatch.fetch_add(1);
                if (i >= end) return;
                try {
                    auto outcome = process(m, items_[i], limiter, pass_key);
                    std::lock_guard lock(mu);
                    ready.emplace(i, std::move(outcome));
                    drain();
                } catch (const std::exception& e) {
                    std::lock_guard lock(mu);
                    if (i < fail_index) {
                        fail_index = i;
                        fail_reason = to_string(items_[i].ref) + ": " + e.what();
                    }
                    stop.store(true);
                    drain();
                    return;
                }
            }
        };

        const std::size_t workers = std::min(config_.parallelism, std::max<std::size_t>(1, end - start));
        if (workers <= 1) {
            worker();
        } else {
            std::vector<std::jthread> pool;
            pool.reserve(workers);
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        }
        {
            std::lock_guard lock(mu);
            drain();
        }

        RunResult result;
        result.run_id = m.run_id;
        result.manifest_digest = m.digest();
        result.corpus_digest = corpus_digest_;
        result.expected_records = n;
        result.records = std::move(committed);
        for (const auto& r : result.records) tally(result.counts, r);
        if (result.records.size() == n) {
            result.status = RunStatus::Completed;
        } else {
            result.status = RunStatus::Suspended;
            result.suspend_reason = fail_index < n ? fail_reason
                                                   : "stopped after " + std::to_string(result.records.size()) +
                                                         " of " + std::to_string(n) + " utterances";
        }
        return result;
    }

    const Corpus& corpus_;
    const Codebook& codebook_;
    PromptTemplates templates_;
    const BackendRegistry& backends_;
    RunConfig config_;
    AnnotationCache* cache_;
    std::string corpus_digest_;
    std::vector<WorkItem> items_;
};

/// One-shot convenience: prepare a manifest and run it.
inline RunResult run(const Corpus& corpus, const Codebook& codebook, const OrchestrationSpec& spec,
                     const BackendRegistry& backends, const RunConfig& config, AuditLog& log,
                     PromptTemplates templates = PromptTemplates::defaults()) {
    Orchestrator engine(corpus, codebook, std::move(templates), backends, config);
    return engine.run(engine.prepare(spec), log);
}

// ---------------------------------------------------------------------------
// Run directories

/// Artifacts of one run, keyed by run id: manifest.json, audit.jsonl, result.json and
/// the initial/final label series. Existing files are never overwritten with different
/// content; an existing directory is resumed.
class RunStore {
public:
    explicit RunStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

    const std::filesystem::path& dir() const noexcept { return dir_; }
    std::filesystem::path manifest_path() const { return dir_ / "manifest.json"; }
    std::filesystem::path audit_path() const { return dir_ / "audit.jsonl"; }
    std::filesystem::path result_path() const { return dir_ / "result.json"; }
    std::filesystem::path partial_path() const { return dir_ / "partial.json"; }

    bool exists() const { return std::filesystem::exists(manifest_path()); }

    RunManifest load_manifest() const {
        return RunManifest::from_json(Json::parse(util::read_file(manifest_path())));
    }

    std::optional<RunResult> load_result(const Codebook& cb) const {
        if (!std::filesystem::exists(result_path())) return std::nullopt;
        return RunResult::from_json(Json::parse(util::read_file(result_path())), cb);
    }

    /// Starts the run, or resumes it if this directory already holds its manifest.
    RunResult execute(Orchestrator& engine, const RunManifest& fresh, const Codebook& cb) {
        std::filesystem::create_directories(dir_);
        RunManifest manifest = fresh;
        PartialState state;
        bool resuming = exists();
        if (resuming) {
            manifest = load_manifest();
            if (manifest.digest() != fresh.digest() || manifest.run_id != fresh.run_id)
                throw DigestMismatch("run directory " + dir_.string() +
                                     " holds a different run; refusing to resume");
            state.stored_result = load_result(cb);
            if (std::filesystem::exists(audit_path())) state.audit_log = util::read_file(audit_path());
        } else {
            util::write_new_file(manifest_path(), manifest.to_json().dump(2) + "\n");
        }
        RunResult result;
        {
            AuditLog log(audit_path());
            result = resuming ? engine.resume(manifest, state, log) : engine.run(manifest, log);
        }
        if (result.status == RunStatus::Completed) {
            util::write_new_file(result_path(), result.to_json().dump(2) + "\n");
            util::write_new_file(dir_ / "labels_initial.jsonl", serialize_label_series(result.initial_labels()));
            util::write_new_file(dir_ / "labels_final.jsonl", serialize_label_series(result.final_labels()));
            std::filesystem::remove(partial_path());
        } else {
            // Progress snapshot only; the audit log is the resumable state.
            util::write_file_atomic(partial_path(), result.to_json().dump(2) + "\n");
        }
        return result;
    }

private:
    std::filesystem::path dir_;
};

}  // namespace orchestra
