#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
#include "orchestra/domain.hpp"
#include "orchestra/labels.hpp"

namespace orchestra {

enum class BackendKind { Remote, Synthetic };

inline std::string_view to_string(BackendKind k) noexcept {
    return k == BackendKind::Remote ? "remote" : "synthetic";
}

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds backoff_base{500};
};

/// Parameters for a generic chat-completion endpoint. Provider differences (paths,
/// headers, body fields, where the text sits in the reply) are configuration.
struct RemoteParams {
    std::string base_url;
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env;
    std::string system_prompt;
    double temperature = 0.0;
    int max_tokens = 256;
    int timeout_seconds = 60;
    std::string response_pointer = "/choices/0/message/content";
    std::map<std::string, std::string> headers;
    Json extra_body = Json::object();
};

// ---------------------------------------------------------------------------
// Synthetic parameters

/// Row-stochastic matrix over codebook categories: row = gold label, column = emitted label.
class SyntheticConfusion {
public:
    static SyntheticConfusion create(const Codebook& codebook, std::vector<std::vector<double>> rows) {
        const std::size_t k = codebook.size();
        if (rows.size() != k)
            throw ConfigError("confusion matrix has " + std::to_string(rows.size()) +
                              " rows for a " + std::to_string(k) + "-category codebook");
        for (std::size_t i = 0; i < k; ++i) {
            if (rows[i].size() != k)
                throw ConfigError("confusion row " + std::to_string(i) + " has " +
                                  std::to_string(rows[i].size()) + " entries, expected " +
                                  std::to_string(k));
            double sum = 0.0;
            for (double p : rows[i]) {
                if (!(p >= 0.0) || !std::isfinite(p))
                    throw ConfigError("confusion row " + std::to_string(i) +
                                      " has a negative or non-finite entry");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw ConfigError("confusion row " + std::to_string(i) + " sums to " +
                                  util::format_fixed(sum, 12) + ", not 1");
        }
        SyntheticConfusion m;
        m.labels_.reserve(k);
        for (std::size_t i = 0; i < k; ++i) m.labels_.push_back(codebook.label_at(i));
        m.rows_ = std::move(rows);
        return m;
    }

    /// Emits gold with probability `accuracy`, spreading the rest uniformly.
    static SyntheticConfusion uniform(const Codebook& codebook, double accuracy) {
        const std::size_t k = codebook.size();
        if (k < 2) throw ConfigError("uniform confusion needs at least 2 categories");
        if (!(accuracy >= 0.0 && accuracy <= 1.0))
            throw ConfigError("accuracy must lie in [0, 1]");
        const double off = (1.0 - accuracy) / static_cast<double>(k - 1);
        std::vector<std::vector<double>> rows(k, std::vector<double>(k, off));
        for (std::size_t i = 0; i < k; ++i) rows[i][i] = accuracy;
        return create(codebook, std::move(rows));
    }

    static SyntheticConfusion identity(const Codebook& codebook) { return uniform(codebook, 1.0); }

    const std::vector<Label>& labels() const noexcept { return labels_; }
    const std::vector<std::vector<double>>& rows() const noexcept { return rows_; }

    std::optional<std::size_t> row_of(const Label& l) const {
        for (std::size_t i = 0; i < labels_.size(); ++i)
            if (labels_[i] == l) return i;
        return std::nullopt;
    }

private:
    SyntheticConfusion() = default;
    std::vector<Label> labels_;
    std::vector<std::vector<double>> rows_;
};

struct SyntheticAnnotatorParams {
    SyntheticConfusion confusion;
    std::uint64_t seed = 0;
};

class SyntheticVerifierParams {
public:
    static SyntheticVerifierParams create(double correction_prob, double corruption_prob,
                                          std::uint64_t seed) {
        auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!in_unit(correction_prob))
            throw ConfigError("correction_prob must lie in [0, 1]");
        if (!in_unit(corruption_prob))
            throw ConfigError("corruption_prob must lie in [0, 1]");
        return SyntheticVerifierParams(correction_prob, corruption_prob, seed);
    }

    double correction_prob() const noexcept { return r_; }
    double corruption_prob() const noexcept { return c_; }
    std::uint64_t seed() const noexcept { return seed_; }

private:
    SyntheticVerifierParams(double r, double c, std::uint64_t seed) : r_(r), c_(c), seed_(seed) {}
    double r_;
    double c_;
    std::uint64_t seed_;
};

using GoldMap = std::shared_ptr<const LabelSeries>;

/// A synthetic backend acts as both annotator and verifier, reading gold labels.
struct SyntheticParams {
    SyntheticAnnotatorParams annotator;
    SyntheticVerifierParams verifier;
    /// Probability that a response is emitted in an unparseable shape (exercises re-asks).
    double unparseable_prob = 0.0;
    GoldMap gold;
};

struct BackendConfig {
    std::string id;
    BackendKind kind = BackendKind::Synthetic;
    std::optional<RemoteParams> remote;
    std::optional<SyntheticParams> synthetic;
    RetryPolicy retry;

    void validate() const {
        if (util::trim(id).empty() || id.find_first_of("()") != std::string::npos)
            throw ConfigError("backend id '" + id + "' is empty or contains parentheses");
        if (kind == BackendKind::Remote && (!remote || synthetic))
            throw ConfigError("remote backend " + id + " must carry remote parameters only");
        if (kind == BackendKind::Synthetic && (!synthetic || remote))
            throw ConfigError("synthetic backend " + id + " must carry synthetic parameters only");
        if (synthetic && !synthetic->gold)
            throw ConfigError("synthetic backend " + id + " needs gold labels");
        if (retry.max_attempts < 1)
            throw ConfigError("backend " + id + ": retry.max_attempts must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Synthetic draws

inline Label synthetic_annotate(const Label& gold, const SyntheticAnnotatorParams& params,
                                std::mt19937_64& rng) {
    auto row = params.confusion.row_of(gold);
    if (!row) throw ConfigError("gold label " + gold.name() + " is not a confusion-matrix row");
    const auto& probs = params.confusion.rows()[*row];
    const double u = util::uniform01(rng);
    double cum = 0.0;
    std::size_t last_positive = *row;
    for (std::size_t j = 0; j < probs.size(); ++j) {
        if (probs[j] <= 0.0) continue;
        last_positive = j;
        cum += probs[j];
        if (u < cum) return params.confusion.labels()[j];
    }
    return params.confusion.labels()[last_positive];
}

/// initial != gold: REVISE to gold with probability r. initial == gold: REVISE to a
/// uniformly drawn wrong label with probability c. Otherwise RETAIN.
inline std::pair<Decision, Label> synthetic_verify(const Label& initial, const Label& gold,
                                                   const SyntheticVerifierParams& params,
                                                   const Codebook& codebook, std::mt19937_64& rng) {
    const double u = util::uniform01(rng);
    if (initial != gold) {
        if (u < params.correction_prob()) return {Decision::Revise, gold};
        return {Decision::Retain, initial};
    }
    if (u < params.corruption_prob() && codebook.size() >= 2) {
        const std::size_t gold_idx = codebook.index_of(gold);
        std::size_t pick = util::uniform_index(rng, codebook.size() - 1);
        if (pick >= gold_idx) ++pick;
        return {Decision::Revise, codebook.label_at(pick)};
    }
    return {Decision::Retain, initial};
}

// ---------------------------------------------------------------------------
// Backend contract

enum class TaskKind { Annotate, Verify };

inline std::string_view to_string(TaskKind t) noexcept {
    return t == TaskKind::Annotate ? "annotate" : "verify";
}

/// What callers send to a backend. Remote backends only read `prompt`; synthetic
/// backends key their draws on (ref, task, attempt).
struct CompletionRequest {
    std::string prompt;
    TaskKind task = TaskKind::Annotate;
    UtteranceRef ref;
    int attempt = 0;
    std::optional<Label> initial_label;
};

class Backend {
public:
    virtual ~Backend() = default;
    virtual const std::string& id() const noexcept = 0;
    virtual BackendKind kind() const noexcept = 0;
    /// Must be safe to call concurrently.
    virtual std::string complete(const CompletionRequest& request) = 0;
    /// Configuration with credentials redacted, for run manifests.
    virtual Json describe() const = 0;
    virtual bool consumes_gold() const noexcept { return false; }
};

class SyntheticBackend final : public Backend {
public:
    SyntheticBackend(std::string id, SyntheticParams params, Codebook codebook)
        : id_(std::move(id)), params_(std::move(params)), codebook_(std::move(codebook)) {
        if (!params_.gold) throw ConfigError("synthetic backend " + id_ + " needs gold labels");
        if (!(params_.unparseable_prob >= 0.0 && params_.unparseable_prob <= 1.0))
            throw ConfigError("unparseable_prob must lie in [0, 1]");
        if (params_.annotator.confusion.labels().size() != codebook_.size())
            throw ConfigError("synthetic backend " + id_ + ": confusion matrix does not match codebook");
    }

    const std::string& id() const noexcept override { return id_; }
    BackendKind kind() const noexcept override { return BackendKind::Synthetic; }
    bool consumes_gold() const noexcept override { return true; }
    const LabelSeries& gold() const noexcept { return *params_.gold; }

    std::string complete(const CompletionRequest& req) override {
        const Label* gold = params_.gold->find(req.ref);
        if (!gold)
            throw ConfigError("synthetic backend " + id_ + " has no gold label for " +
                              to_string(req.ref));
        const std::string turn = std::to_string(req.ref.turn_index);
        const std::string attempt = std::to_string(req.attempt);
        const std::uint64_t seed = req.task == TaskKind::Annotate ? params_.annotator.seed
                                                                  : params_.verifier.seed();
        auto rng = util::keyed_stream(seed, {to_string(req.task), req.ref.session_id, turn, attempt});
        if (params_.unparseable_prob > 0.0 && util::uniform01(rng) < params_.unparseable_prob)
            return "I'm not sure which move this is.";

        if (req.task == TaskKind::Annotate) {
            Label drawn = synthetic_annotate(*gold, params_.annotator, rng);
            return "LABEL: " + drawn.name() + "\nJUSTIFICATION: Synthetic annotator draw.";
        }
        if (!req.initial_label)
            throw ContractError("verification request for " + to_string(req.ref) +
                                " carries no initial label");
        auto [decision, final_label] =
            synthetic_verify(*req.initial_label, *gold, params_.verifier, codebook_, rng);
        return "DECISION: " + std::string(to_string(decision)) + "\nLABEL: " + final_label.name() +
               "\nJUSTIFICATION: Synthetic verifier decision.";
    }

    Json describe() const override {
        Json rows = Json::array();
        for (const auto& r : params_.annotator.confusion.rows()) rows.push_back(r);
        return {{"id", id_},
                {"kind", "synthetic"},
                {"annotator_seed", params_.annotator.seed},
                {"confusion", std::move(rows)},
                {"correction_prob", params_.verifier.correction_prob()},
                {"corruption_prob", params_.verifier.corruption_prob()},
                {"verifier_seed", params_.verifier.seed()},
                {"unparseable_prob", params_.unparseable_prob},
                {"gold_digest", util::sha256_hex(serialize_label_series(*params_.gold))}};
    }

private:
    std::string id_;
    SyntheticParams params_;
    Codebook codebook_;
};

namespace detail {

inline bool is_secret_header(std::string_view name) {
    auto n = util::to_upper(name);
    return n == "AUTHORIZATION" || n.find("KEY") != std::string::npos ||
           n.find("TOKEN") != std::string::npos || n.find("SECRET") != std::string::npos;
}

}  // namespace detail

/// Chat-completion client. Retries connection failures, 429 and 5xx with exponential
/// backoff; 4xx responses (including 401/403) are never retried.
class RemoteBackend final : public Backend {
public:
    RemoteBackend(std::string id, RemoteParams params, RetryPolicy retry)
        : id_(std::move(id)), params_(std::move(params)), retry_(retry) {
        if (params_.base_url.empty()) throw ConfigError("remote backend " + id_ + " has no base_url");
    }

    const std::string& id() const noexcept override { return id_; }
    BackendKind kind() const noexcept override { return BackendKind::Remote; }

    std::string complete(const CompletionRequest& req) override {
        httplib::Headers headers;
        if (!params_.api_key_env.empty()) {
            const char* key = std::getenv(params_.api_key_env.c_str());
            if (!key || !*key)
                throw ConfigError("backend " + id_ + ": environment variable " +
                                  params_.api_key_env + " is not set");
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        for (const auto& [k, v] : params_.headers) headers.emplace(k, v);

        Json body = Json::object();
        if (!params_.model.empty()) body["model"] = params_.model;
        Json messages = Json::array();
        if (!params_.system_prompt.empty())
            messages.push_back({{"role", "system"}, {"content", params_.system_prompt}});
        messages.push_back({{"role", "user"}, {"content", req.prompt}});
        body["messages"] = std::move(messages);
        body["temperature"] = params_.temperature;
        body["max_tokens"] = params_.max_tokens;
        for (const auto& [k, v] : params_.extra_body.items()) body[k] = v;
        const std::string payload = body.dump();

        std::string last_error;
        for (int attempt = 1; attempt <= retry_.max_attempts; ++attempt) {
            if (attempt > 1) std::this_thread::sleep_for(retry_.backoff_base * (1LL << (attempt - 2)));
            httplib::Client client(params_.base_url);
            client.set_connection_timeout(params_.timeout_seconds, 0);
            client.set_read_timeout(params_.timeout_seconds, 0);
            client.set_write_timeout(params_.timeout_seconds, 0);
            auto res = client.Post(params_.path, headers, payload, "application/json");
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue;
            }
            const int status = res->status;
            if (status == 200) return extract_text(res->body);
            if (status == 401 || status == 403)
                throw BackendRejected("backend " + id_ + " rejected credentials (HTTP " +
                                          std::to_string(status) + ")",
                                      status);
            if (status == 429 || status >= 500) {
                last_error = "HTTP " + std::to_string(status);
                continue;
            }
            throw BackendRejected("backend " + id_ + " rejected the request (HTTP " +
                                      std::to_string(status) + "): " + res->body.substr(0, 200),
                                  status);
        }
        throw TransportError("backend " + id_ + " failed after " +
                             std::to_string(retry_.max_attempts) + " attempts: " + last_error);
    }

    Json describe() const override {
        Json headers = Json::object();
        for (const auto& [k, v] : params_.headers)
            headers[k] = detail::is_secret_header(k) ? std::string("<redacted>") : v;
        return {{"id", id_},
                {"kind", "remote"},
                {"base_url", params_.base_url},
                {"path", params_.path},
                {"model", params_.model},
                {"api_key_env", params_.api_key_env},
                {"system_prompt", params_.system_prompt},
                {"temperature", params_.temperature},
                {"max_tokens", params_.max_tokens},
                {"timeout_seconds", params_.timeout_seconds},
                {"response_pointer", params_.response_pointer},
                {"headers", std::move(headers)},
                {"extra_body", params_.extra_body},
                {"retry", {{"max_attempts", retry_.max_attempts},
                           {"backoff_base_ms", retry_.backoff_base.count()}}}};
    }

private:
    /// Pulls the completion text out of the reply; unexpected shapes fall back to the raw
    /// body so the response parser records it as unparseable instead of failing the run.
    std::string extract_text(const std::string& body) const {
        try {
            auto j = Json::parse(body);
            const auto& v = j.at(Json::json_pointer(params_.response_pointer));
            if (v.is_string()) return v.get<std::string>();
        } catch (const nlohmann::json::exception&) {
        }
        return body;
    }

    std::string id_;
    RemoteParams params_;
    RetryPolicy retry_;
};

inline std::shared_ptr<Backend> make_backend(const BackendConfig& cfg, const Codebook& codebook) {
    cfg.validate();
    if (cfg.kind == BackendKind::Remote)
        return std::make_shared<RemoteBackend>(cfg.id, *cfg.remote, cfg.retry);
    return std::make_shared<SyntheticBackend>(cfg.id, *cfg.synthetic, codebook);
}

/// Backends by id.
class BackendRegistry {
public:
    void add(std::shared_ptr<Backend> backend) {
        if (!backend) throw ContractError("null backend");
        auto id = backend->id();
        if (!backends_.emplace(id, std::move(backend)).second)
            throw ConfigError("backend id " + id + " is configured twice");
    }

    bool has(const std::string& id) const { return backends_.count(id) != 0; }

    Backend& get(const std::string& id) const {
        auto it = backends_.find(id);
        if (it == backends_.end()) throw ConfigError("no backend configured with id '" + id + "'");
        return *it->second;
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& [id, _] : backends_) out.push_back(id);
        return out;
    }

private:
    std::map<std::string, std::shared_ptr<Backend>> backends_;
};

// ---------------------------------------------------------------------------
// Configuration files

/// Parses one backend entry. Relative gold paths resolve against `base_dir`.
inline BackendConfig backend_config_from_json(const Json& j, const Codebook& codebook,
                                              const std::filesystem::path& base_dir) {
    try {
        BackendConfig cfg;
        cfg.id = j.at("id").get<std::string>();
        auto kind = j.at("kind").get<std::string>();
        if (util::iequals(kind, "remote")) cfg.kind = BackendKind::Remote;
        else if (util::iequals(kind, "synthetic")) cfg.kind = BackendKind::Synthetic;
        else throw ConfigError("backend " + cfg.id + ": unknown kind '" + kind + "'");

        if (j.contains("retry")) {
            const auto& r = j["retry"];
            cfg.retry.max_attempts = r.value("max_attempts", cfg.retry.max_attempts);
            cfg.retry.backoff_base =
                std::chrono::milliseconds(r.value("backoff_base_ms", cfg.retry.backoff_base.count()));
        }
        if (j.contains("remote")) {
            const auto& r = j["remote"];
            RemoteParams p;
            p.base_url = r.at("base_url").get<std::string>();
            p.path = r.value("path", p.path);
            p.model = r.value("model", p.model);
            p.api_key_env = r.value("api_key_env", p.api_key_env);
            p.system_prompt = r.value("system_prompt", p.system_prompt);
            p.temperature = r.value("temperature", p.temperature);
            p.max_tokens = r.value("max_tokens", p.max_tokens);
            p.timeout_seconds = r.value("timeout_seconds", p.timeout_seconds);
            p.response_pointer = r.value("response_pointer", p.response_pointer);
            if (r.contains("headers"))
                p.headers = r["headers"].get<std::map<std::string, std::string>>();
            if (r.contains("extra_body")) p.extra_body = r["extra_body"];
            cfg.remote = std::move(p);
        }
        if (j.contains("synthetic")) {
            const auto& s = j["synthetic"];
            const std::uint64_t seed = s.value("seed", std::uint64_t{0});
            auto confusion = s.contains("confusion")
                                 ? SyntheticConfusion::create(
                                       codebook, s["confusion"].get<std::vector<std::vector<double>>>())
                                 : SyntheticConfusion::uniform(codebook, s.value("accuracy", 1.0));
            auto gold_path = std::filesystem::path(s.at("gold").get<std::string>());
            if (gold_path.is_relative()) gold_path = base_dir / gold_path;
            auto gold = std::make_shared<const LabelSeries>(load_label_series(gold_path, codebook, "gold"));
            cfg.synthetic = SyntheticParams{
                {std::move(confusion), s.value("annotator_seed", seed)},
                SyntheticVerifierParams::create(s.value("correction_prob", 0.0),
                                                s.value("corruption_prob", 0.0),
                                                s.value("verifier_seed", seed)),
                s.value("unparseable_prob", 0.0),
                std::move(gold)};
        }
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed backend configuration: ") + e.what());
    }
}

}  // namespace orchestra
