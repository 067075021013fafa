#include <gtest/gtest.h>

#include <cstdlib>

#include "support.hpp"

using namespace orchestra;
using namespace testsupport;

namespace {

LabelSeries uniform_gold(const Codebook& cb, std::size_t n, std::uint64_t seed) {
    std::vector<LabeledRef> e;
    auto rng = util::keyed_stream(seed, {"gold"});
    for (std::size_t i = 0; i < n; ++i)
        e.push_back({{"s", static_cast<int>(i)}, cb.label_at(util::uniform_index(rng, cb.size()))});
    return LabelSeries::from_entries(std::move(e), "gold");
}

/// A chat endpoint on loopback whose behavior is scripted per request.
struct MockEndpoint {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> hits{0};
    std::function<void(const httplib::Request&, httplib::Response&, int)> handler;
    std::string last_auth;
    std::string last_body;
    std::mutex mu;

    MockEndpoint() {
        server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const int n = ++hits;
            {
                std::lock_guard lock(mu);
                last_auth = req.get_header_value("Authorization");
                last_body = req.body;
            }
            handler(req, res, n);
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~MockEndpoint() {
        server.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

RemoteBackend remote(const std::string& url, int attempts = 3, std::string key_env = "ORCHESTRA_TEST_KEY") {
    RemoteParams p;
    p.base_url = url;
    p.model = "test-model";
    p.api_key_env = std::move(key_env);
    p.timeout_seconds = 5;
    p.headers = {{"X-Api-Key", "hunter2"}, {"X-Trace", "visible"}};
    return RemoteBackend("remote", p, RetryPolicy{attempts, std::chrono::milliseconds(1)});
}

const char* kOkBody = R"({"choices":[{"message":{"content":"LABEL: A\nJUSTIFICATION: ok"}}]})";

}  // namespace

TEST(SyntheticAnnotator, TenThousandDrawsStayNearAccuracy) {
    auto cb = table_codebook();
    SyntheticAnnotatorParams p{SyntheticConfusion::uniform(cb, 0.6), 0};
    auto rng = util::keyed_stream(2024, {"draws"});
    const auto gold = cb.require("PROMPTING");
    int hits = 0;
    for (int i = 0; i < 10000; ++i) hits += synthetic_annotate(gold, p, rng) == gold;
    const double rate = hits / 10000.0;
    EXPECT_GE(rate, 0.58);
    EXPECT_LE(rate, 0.62);
}

TEST(SyntheticAnnotator, IdentityMatrixAlwaysReturnsGold) {
    auto cb = table_codebook();
    SyntheticAnnotatorParams p{SyntheticConfusion::identity(cb), 0};
    auto rng = util::keyed_stream(1, {});
    for (std::size_t i = 0; i < cb.size(); ++i)
        for (int k = 0; k < 50; ++k) EXPECT_EQ(synthetic_annotate(cb.label_at(i), p, rng), cb.label_at(i));
}

TEST(SyntheticAnnotator, ConfusionValidation) {
    auto cb = small_codebook();
    EXPECT_THROW(SyntheticConfusion::create(cb, {{1, 0, 0}, {0, 1, 0}}), ConfigError);
    EXPECT_THROW(SyntheticConfusion::create(cb, {{1, 0, 0}, {0, 1, 0}, {0, 0.5, 0.4}}), ConfigError);
    EXPECT_THROW(SyntheticConfusion::create(cb, {{1, 0, 0}, {0, 1, 0}, {-0.5, 0.5, 1}}), ConfigError);
    EXPECT_THROW(SyntheticConfusion::uniform(cb, 1.5), ConfigError);
    EXPECT_THROW(SyntheticVerifierParams::create(-0.1, 0, 0), ConfigError);
    EXPECT_THROW(SyntheticVerifierParams::create(0, 1.1, 0), ConfigError);
}

TEST(SyntheticVerifier, ZeroCorruptionNeverHurtsAnyDraw) {
    auto cb = table_codebook();
    std::mt19937_64 pick(9);
    for (double r : {0.0, 0.3, 0.8, 1.0}) {
        auto params = SyntheticVerifierParams::create(r, 0.0, 0);
        auto rng = util::keyed_stream(static_cast<std::uint64_t>(r * 10), {"mono"});
        for (int i = 0; i < 5000; ++i) {
            auto gold = cb.label_at(pick() % cb.size());
            auto initial = cb.label_at(pick() % cb.size());
            auto [decision, final_label] = synthetic_verify(initial, gold, params, cb, rng);
            EXPECT_GE(final_label == gold, initial == gold);
            if (decision == Decision::Retain) {
                EXPECT_EQ(final_label, initial);
            }
            else {
                EXPECT_NE(final_label, initial);
            }
        }
    }
}

TEST(SyntheticVerifier, FullCorruptionAlwaysLeavesGold) {
    auto cb = table_codebook();
    auto params = SyntheticVerifierParams::create(0.0, 1.0, 0);
    auto rng = util::keyed_stream(4, {});
    for (std::size_t i = 0; i < cb.size(); ++i) {
        auto [d, f] = synthetic_verify(cb.label_at(i), cb.label_at(i), params, cb, rng);
        EXPECT_EQ(d, Decision::Revise);
        EXPECT_NE(f, cb.label_at(i));
    }
}

TEST(SyntheticVerifier, PostVerificationAccuracyMatchesAnalyticValue) {
    // E[acc] = a + (1 - a) r for c = 0: 0.6 + 0.4 * 0.8 = 0.92.
    auto cb = table_codebook();
    SyntheticAnnotatorParams ap{SyntheticConfusion::uniform(cb, 0.6), 0};
    auto vp = SyntheticVerifierParams::create(0.8, 0.0, 0);
    auto rng = util::keyed_stream(77, {});
    int correct = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        auto gold = cb.label_at(static_cast<std::size_t>(i) % cb.size());
        auto initial = synthetic_annotate(gold, ap, rng);
        correct += synthetic_verify(initial, gold, vp, cb, rng).second == gold;
    }
    EXPECT_NEAR(correct / static_cast<double>(n), 0.92, 0.03);
}

TEST(SyntheticBackend, ResponsesDependOnlyOnRequestKey) {
    auto cb = table_codebook();
    auto gold = uniform_gold(cb, 200, 1);
    auto b = synthetic("syn", cb, gold, 0.5, 0.5, 0.1, 42);
    std::vector<std::string> forward, backward(200);
    for (int i = 0; i < 200; ++i)
        forward.push_back(b->complete({"ignored", TaskKind::Annotate, {"s", i}, 0, std::nullopt}));
    for (int i = 199; i >= 0; --i)
        backward[static_cast<std::size_t>(i)] =
            b->complete({"different prompt", TaskKind::Annotate, {"s", i}, 0, std::nullopt});
    EXPECT_EQ(forward, backward);

    auto again = synthetic("syn", cb, gold, 0.5, 0.5, 0.1, 42);
    EXPECT_EQ(again->complete({"", TaskKind::Annotate, {"s", 3}, 0, std::nullopt}), forward[3]);
    auto other_seed = synthetic("syn", cb, gold, 0.5, 0.5, 0.1, 43);
    int same = 0;
    for (int i = 0; i < 200; ++i)
        same += other_seed->complete({"", TaskKind::Annotate, {"s", i}, 0, std::nullopt}) == forward[static_cast<std::size_t>(i)];
    EXPECT_LT(same, 200);
}

TEST(SyntheticBackend, ResponsesRoundTripThroughParsers) {
    auto cb = table_codebook();
    auto gold = uniform_gold(cb, 50, 2);
    auto b = synthetic("syn", cb, gold, 0.7, 0.5, 0.2, 5);
    for (int i = 0; i < 50; ++i) {
        auto ann = parse_annotation_response(b->complete({"", TaskKind::Annotate, {"s", i}, 0, std::nullopt}), cb);
        ASSERT_FALSE(ann.label.is_unparseable());
        auto ver = parse_verification_response(
            b->complete({"", TaskKind::Verify, {"s", i}, 0, ann.label}), cb, ann.label);
        EXPECT_FALSE(ver.flagged);
    }
    auto noisy = synthetic("noisy", cb, gold, 0.7, 0.5, 0.2, 5, 1.0);
    EXPECT_TRUE(parse_annotation_response(noisy->complete({"", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), cb)
                    .label.is_unparseable());
    EXPECT_THROW(b->complete({"", TaskKind::Annotate, {"missing", 0}, 0, std::nullopt}), ConfigError);
}

TEST(RemoteBackend, SendsChatRequestAndExtractsText) {
    MockEndpoint mock;
    mock.handler = [](const httplib::Request&, httplib::Response& res, int) {
        res.set_content(kOkBody, "application/json");
    };
    ::setenv("ORCHESTRA_TEST_KEY", "sk-test", 1);
    auto b = remote(mock.url());
    EXPECT_EQ(b.complete({"the prompt", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), "LABEL: A\nJUSTIFICATION: ok");
    EXPECT_EQ(mock.last_auth, "Bearer sk-test");
    auto body = Json::parse(mock.last_body);
    EXPECT_EQ(body["model"], "test-model");
    EXPECT_EQ(body["messages"].back()["content"], "the prompt");
    EXPECT_EQ(body["temperature"], 0.0);
}

TEST(RemoteBackend, RetriesServerErrorsThenSucceeds) {
    MockEndpoint mock;
    mock.handler = [](const httplib::Request&, httplib::Response& res, int n) {
        if (n < 3) {
            res.status = n == 1 ? 503 : 429;
            return;
        }
        res.set_content(kOkBody, "application/json");
    };
    ::setenv("ORCHESTRA_TEST_KEY", "sk-test", 1);
    auto b = remote(mock.url(), 3);
    EXPECT_EQ(b.complete({"p", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), "LABEL: A\nJUSTIFICATION: ok");
    EXPECT_EQ(mock.hits.load(), 3);
}

TEST(RemoteBackend, ExhaustedRetriesRaiseTransportError) {
    MockEndpoint mock;
    mock.handler = [](const httplib::Request&, httplib::Response& res, int) { res.status = 500; };
    ::setenv("ORCHESTRA_TEST_KEY", "sk-test", 1);
    auto b = remote(mock.url(), 4);
    EXPECT_THROW(b.complete({"p", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), TransportError);
    EXPECT_EQ(mock.hits.load(), 4);
}

TEST(RemoteBackend, AuthFailureIsNotRetried) {
    MockEndpoint mock;
    mock.handler = [](const httplib::Request&, httplib::Response& res, int) { res.status = 401; };
    ::setenv("ORCHESTRA_TEST_KEY", "sk-wrong", 1);
    auto b = remote(mock.url(), 5);
    try {
        b.complete({"p", TaskKind::Annotate, {"s", 0}, 0, std::nullopt});
        FAIL() << "no exception";
    } catch (const BackendRejected& e) {
        EXPECT_EQ(e.status(), 401);
    }
    EXPECT_EQ(mock.hits.load(), 1);
}

TEST(RemoteBackend, UnreachableEndpointRaisesTransportError) {
    int port;
    {
        MockEndpoint closed;
        port = closed.port;
    }
    ::setenv("ORCHESTRA_TEST_KEY", "sk-test", 1);
    auto b = remote("http://127.0.0.1:" + std::to_string(port), 2);
    EXPECT_THROW(b.complete({"p", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), TransportError);
}

TEST(RemoteBackend, MissingCredentialIsAConfigError) {
    ::unsetenv("ORCHESTRA_TEST_MISSING");
    auto b = remote("http://127.0.0.1:9", 1, "ORCHESTRA_TEST_MISSING");
    EXPECT_THROW(b.complete({"p", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), ConfigError);
}

TEST(RemoteBackend, UnexpectedReplyShapeFallsBackToRawBody) {
    MockEndpoint mock;
    mock.handler = [](const httplib::Request&, httplib::Response& res, int) {
        res.set_content("LABEL: B", "text/plain");
    };
    ::setenv("ORCHESTRA_TEST_KEY", "sk-test", 1);
    EXPECT_EQ(remote(mock.url()).complete({"p", TaskKind::Annotate, {"s", 0}, 0, std::nullopt}), "LABEL: B");
}

TEST(RemoteBackend, DescribeRedactsSecrets) {
    ::setenv("ORCHESTRA_TEST_KEY", "sk-secret-value", 1);
    auto d = remote("http://127.0.0.1:9").describe().dump();
    EXPECT_EQ(d.find("hunter2"), std::string::npos);
    EXPECT_EQ(d.find("sk-secret-value"), std::string::npos);
    EXPECT_NE(d.find("visible"), std::string::npos);
    EXPECT_NE(d.find("ORCHESTRA_TEST_KEY"), std::string::npos);
}

TEST(BackendConfig, ParsesSyntheticAndRemoteEntries) {
    auto cb = table_codebook();
    const std::filesystem::path base = std::string(ORCHESTRA_DATA_DIR) + "/config";
    auto syn = backend_config_from_json(Json::parse(R"({"id": "g", "kind": "synthetic",
        "synthetic": {"gold": "../fixtures/sessions_30_gold.jsonl", "accuracy": 0.6, "correction_prob": 0.8}})"),
                                        cb, base);
    EXPECT_EQ(syn.kind, BackendKind::Synthetic);
    EXPECT_EQ(syn.synthetic->gold->size(), 1034u);
    EXPECT_DOUBLE_EQ(syn.synthetic->verifier.correction_prob(), 0.8);
    auto rem = backend_config_from_json(
        Json::parse(R"({"id": "r", "kind": "remote", "remote": {"base_url": "http://x"}, "retry": {"max_attempts": 5}})"),
        cb, base);
    EXPECT_EQ(rem.retry.max_attempts, 5);
    EXPECT_THROW(backend_config_from_json(Json::parse(R"({"id": "r", "kind": "telepathy"})"), cb, base), ConfigError);
    EXPECT_THROW(backend_config_from_json(Json::parse(R"j({"id": "a(b)", "kind": "remote", "remote": {"base_url": "x"}})j"),
                                          cb, base),
                 ConfigError);
    EXPECT_THROW(backend_config_from_json(Json::parse(R"({"kind": "remote"})"), cb, base), ConfigError);
}

TEST(BackendRegistry, UnknownAndDuplicateIds) {
    auto cb = small_codebook();
    auto gold = series(cb, {"A"});
    BackendRegistry reg;
    reg.add(synthetic("x", cb, gold, 1, 0, 0, 1));
    EXPECT_THROW(reg.add(synthetic("x", cb, gold, 1, 0, 0, 1)), ConfigError);
    EXPECT_THROW(reg.get("y"), ConfigError);
    EXPECT_TRUE(reg.has("x"));
}
