#pragma once

#include <atomic>
#include <filesystem>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>

#include <httplib.h>

#include "orchestra/goldsmith.hpp"

namespace orchestra {

struct ServiceOptions {
    std::string host = "127.0.0.1";
    int port = 0;  // 0 picks a free port
    std::filesystem::path static_dir;
};

/// HTTP front for one adjudication packet. Every accepted decision is persisted before
/// the response is sent. The sealed map never enters this process.
class AdjudicationService {
public:
    AdjudicationService(AdjudicationPacket packet, std::filesystem::path packet_path, ServiceOptions opts = {})
        : packet_(std::move(packet)), packet_path_(std::move(packet_path)), opts_(std::move(opts)) {
        routes();
    }

    AdjudicationService(const AdjudicationService&) = delete;
    AdjudicationService& operator=(const AdjudicationService&) = delete;

    ~AdjudicationService() { stop(); }

    /// Binds and serves on a background thread; returns the bound port.
    int start() {
        int port = opts_.port;
        if (port == 0) {
            port = server_.bind_to_any_port(opts_.host);
        } else if (!server_.bind_to_port(opts_.host, port)) {
            port = -1;
        }
        if (port < 0) throw ConfigError("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
        port_ = port;
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Serves on the calling thread until stop().
    void serve_blocking() {
        if (opts_.port == 0) {
            port_ = server_.bind_to_any_port(opts_.host);
        } else {
            if (!server_.bind_to_port(opts_.host, opts_.port))
                throw ConfigError("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
            port_ = opts_.port;
        }
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const noexcept { return port_; }

    AdjudicationPacket snapshot() const {
        std::shared_lock lock(mu_);
        return packet_;
    }

    std::function<void(const std::string&)> on_decision;

private:
    static void send_json(httplib::Response& res, int status, const Json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& msg) {
        send_json(res, status, {{"error", msg}});
    }

    Json meta_json() const {
        return {{"codebook_version", packet_.codebook_version},
                {"total", packet_.items.size()},
                {"decided", packet_.decided()},
                {"pending", packet_.items.size() - packet_.decided()},
                {"label_definitions", packet_.label_definitions}};
    }

    void persist() const {
        if (!packet_path_.empty()) save_packet(packet_path_, packet_);
    }

    void routes() {
        server_.Get("/api/packet/meta", [this](const httplib::Request&, httplib::Response& res) {
            std::shared_lock lock(mu_);
            send_json(res, 200, meta_json());
        });

        server_.Get("/api/items", [this](const httplib::Request& req, httplib::Response& res) {
            std::optional<ItemState> filter;
            if (req.has_param("state")) {
                auto s = util::to_upper(req.get_param_value("state"));
                if (s == "PENDING") filter = ItemState::Pending;
                else if (s == "DECIDED") filter = ItemState::Decided;
                else if (s != "ALL") return send_error(res, 400, "state must be PENDING, DECIDED or ALL");
            }
            std::size_t offset = 0, limit = 50;
            try {
                if (req.has_param("offset")) offset = std::stoul(req.get_param_value("offset"));
                if (req.has_param("limit")) limit = std::stoul(req.get_param_value("limit"));
            } catch (const std::exception&) {
                return send_error(res, 400, "offset and limit must be non-negative integers");
            }
            std::shared_lock lock(mu_);
            Json items = Json::array();
            std::size_t matched = 0;
            for (const auto& it : packet_.items) {
                if (filter && it.state != *filter) continue;
                if (matched >= offset && items.size() < limit) items.push_back(AdjudicationPacket::item_json(it));
                ++matched;
            }
            send_json(res, 200, {{"total", matched}, {"offset", offset}, {"items", std::move(items)}});
        });

        server_.Get(R"(/api/items/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(mu_);
            const auto* it = packet_.find(req.matches[1].str());
            if (!it) return send_error(res, 404, "unknown item " + req.matches[1].str());
            send_json(res, 200, AdjudicationPacket::item_json(*it));
        });

        server_.Post(R"(/api/items/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
            std::optional<Rater> choice;
            bool override_existing = false;
            auto body = util::trim(req.body);
            if (!body.empty() && body.front() == '{') {
                try {
                    auto j = Json::parse(body);
                    if (j.contains("choice") && j["choice"].is_string())
                        choice = parse_rater(j["choice"].get<std::string>());
                    override_existing = j.value("override", false);
                } catch (const nlohmann::json::exception&) {
                    return send_error(res, 400, "malformed JSON body");
                }
            } else {
                choice = parse_rater(body);
            }
            if (!choice) return send_error(res, 400, "choice must be RATER_1 or RATER_2");
            const std::string id = req.matches[1].str();
            std::unique_lock lock(mu_);
            AdjudicationPacket before = packet_;
            AdjudicationPacket::RecordOutcome outcome;
            try {
                outcome = packet_.record(id, *choice, override_existing);
            } catch (const AdjudicationError& e) {
                const int status = e.kind() == AdjudicationError::Kind::UnknownItem ? 404 : 409;
                return send_error(res, status, e.what());
            }
            try {
                if (outcome != AdjudicationPacket::RecordOutcome::Unchanged) persist();
            } catch (const std::exception& e) {
                packet_ = std::move(before);
                return send_error(res, 500, std::string("could not persist decision: ") + e.what());
            }
            static constexpr const char* names[] = {"recorded", "unchanged", "overridden"};
            Json out = AdjudicationPacket::item_json(*packet_.find(id));
            out["outcome"] = names[static_cast<int>(outcome)];
            send_json(res, 200, out);
            lock.unlock();
            if (on_decision) on_decision(id);
        });

        server_.Post("/api/export", [this](const httplib::Request&, httplib::Response& res) {
            std::shared_lock lock(mu_);
            try {
                persist();
            } catch (const std::exception& e) {
                return send_error(res, 500, e.what());
            }
            Json out = meta_json();
            out["packet_path"] = packet_path_.filename().string();
            out["complete"] = packet_.decided() == packet_.items.size();
            send_json(res, 200, out);
        });

        if (!opts_.static_dir.empty()) server_.set_mount_point("/", opts_.static_dir.string());
    }

    mutable std::shared_mutex mu_;
    AdjudicationPacket packet_;
    std::filesystem::path packet_path_;
    ServiceOptions opts_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

}  // namespace orchestra
