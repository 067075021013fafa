// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <functional>

#include "orchestra/service.hpp"
#include "support.hpp"

using namespace orchestra;
using namespace testsupport;

namespace {

struct Verdict {
    bool pass;
    std::string detail;
};

int failures = 0;

void criterion(const char* name, double budget_seconds, const std::function<Verdict()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (budget_seconds > 0 && secs > budget_seconds) {
        v.pass = false;
        v.detail += "; over time budget of " + util::format_fixed(budget_seconds, 0) + " s";
    }
    if (!v.pass) ++failures;
    std::printf("%s  %-28s %6.2f s  %s\n", v.pass ? "PASS" : "FAIL", name, secs, v.detail.c_str());
    std::fflush(stdout);
}

double macro_mean(const LabelSeries& pred, const LabelSeries& gold, const Codebook& cb) {
    return summarize(pred, gold, cb).macro.mean.value_or(0.0);
}

double accuracy(const LabelSeries& pred, const LabelSeries& gold) { return percent_agreement(pred, gold); }

SyntheticCorpus balanced_corpus(const Codebook& cb, std::size_t tutor_utterances, std::uint64_t seed) {
    SyntheticCorpusParams p;
    p.sessions = 30;
    p.tutor_utterances = tutor_utterances;
    p.seed = seed;
    return generate_synthetic_corpus(p, cb);
}

RunResult self_verified_run(const Codebook& cb, const SyntheticCorpus& data, double a, double r, double c,
                            std::uint64_t seed, std::size_t parallelism = 1, AuditLog* log = nullptr,
                            double unparseable = 0.0) {
    BackendRegistry reg;
    reg.add(synthetic("model", cb, data.gold, a, r, c, seed, unparseable));
    RunConfig cfg;
    cfg.parallelism = parallelism;
    cfg.record_timestamps = true;
    Orchestrator engine(data.corpus, cb, PromptTemplates::defaults(), reg, cfg);
    AuditLog local;
    return engine.run(engine.prepare(parse_orchestration_spec("model(model)")), log ? *log : local);
}

/// Kappa from its definition on small integer codes.
std::optional<double> brute_kappa(const std::uint32_t* a, const std::uint32_t* b, std::size_t n) {
    double ca[3] = {0, 0, 0}, cb[3] = {0, 0, 0}, agree = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ca[a[i]] += 1;
        cb[b[i]] += 1;
        agree += a[i] == b[i];
    }
    const double dn = static_cast<double>(n);
    const double po = agree / dn;
    double pe = 0;
    for (int k = 0; k < 3; ++k) pe += (ca[k] / dn) * (cb[k] / dn);
    if (pe >= 1.0 - 1e-15) return std::nullopt;
    return (po - pe) / (1.0 - pe);
}

}  // namespace

int main() {
    const Codebook table = table_codebook();

    criterion("kappa-oracle", 5.0, [] {
        auto cb = small_codebook(2);
        auto hand = cohens_kappa(series(cb, {"A", "A", "A", "B"}), series(cb, {"A", "A", "B", "B"}));
        if (!hand.value || std::abs(*hand.value - 0.5) > 1e-12) return Verdict{false, "hand case is not 0.5"};
        std::size_t pairs = 0, undefined = 0;
        double worst = 0.0;
        for (std::size_t n = 1; n <= 8; ++n) {
            // Each position holds one of 9 (a, b) code pairs; count through all 9^n.
            std::vector<std::uint32_t> a(n, 0), b(n, 0), cell(n, 0);
            for (;;) {
                auto got = kappa_from_codes(a, b, 3);
                auto want = brute_kappa(a.data(), b.data(), n);
                if (got.value.has_value() != want.has_value())
                    return Verdict{false, "definedness differs at length " + std::to_string(n)};
                if (want) worst = std::max(worst, std::abs(*got.value - *want));
                else ++undefined;
                ++pairs;
                std::size_t i = 0;
                while (i < n && ++cell[i] == 9) {
                    cell[i] = 0;
                    a[i] = b[i] = 0;
                    ++i;
                }
                if (i == n) break;
                a[i] = cell[i] / 3;
                b[i] = cell[i] % 3;
            }
        }
        char buf[160];
        std::snprintf(buf, sizeof buf, "hand 0.5000; %zu pairs, %zu undefined, max |diff| %.2e", pairs, undefined,
                      worst);
        return Verdict{worst <= 1e-12, buf};
    });

    criterion("delta-kappa", 0, [] {
        auto cb = small_codebook(4);
        std::mt19937_64 rng(101);
        double worst_identity = 0.0, worst_anti = 0.0;
        for (int trial = 0; trial < 2000; ++trial) {
            const std::size_t n = 4 + rng() % 60;
            std::vector<std::string> g, x, y;
            for (std::size_t i = 0; i < n; ++i) {
                g.emplace_back(1, static_cast<char>('A' + rng() % 4));
                x.emplace_back(1, static_cast<char>('A' + rng() % 4));
                y.emplace_back(1, static_cast<char>('A' + rng() % 4));
            }
            auto sg = series(cb, g), sx = series(cb, x), sy = series(cb, y);
            for (const std::string cat : {"A", "B", "C", "D"}) {
                auto same = delta_kappa(sx, sx, sg, cb, cat);
                if (same.value) worst_identity = std::max(worst_identity, std::abs(*same.value));
                auto xy = delta_kappa(sx, sy, sg, cb, cat), yx = delta_kappa(sy, sx, sg, cb, cat);
                if (xy.value.has_value() != yx.value.has_value()) return Verdict{false, "antisymmetry definedness"};
                if (xy.value) worst_anti = std::max(worst_anti, std::abs(*xy.value + *yx.value));
            }
        }
        const double self_gain = 0.64 - 0.32;
        const std::string rel = format_relative_improvement(0.51, 0.32);
        const bool ok = worst_identity <= 1e-12 && worst_anti <= 1e-12 && std::abs(self_gain - 0.32) <= 1e-12 &&
                        rel == "+59.38%";
        return Verdict{ok, "identity " + util::format_fixed(worst_identity, 1) + ", antisymmetry max " +
                               util::format_fixed(worst_anti, 15) + "; 0.64-0.32 = " + util::format_fixed(self_gain, 2) +
                               "; (0.51-0.32)/0.32 = " + rel + " (a headline of roughly 58% rounds differently)"};
    });

    criterion("synthetic-verification-gain", 10.0, [&] {
        std::size_t wins = 0;
        double acc_sum = 0.0, worst_dev = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            auto data = balanced_corpus(table, 2000, 1000 + seed);
            auto r = self_verified_run(table, data, 0.6, 0.8, 0.0, seed);
            const double acc = accuracy(r.final_labels(), data.gold);
            acc_sum += acc;
            worst_dev = std::max(worst_dev, std::abs(acc - 0.92));
            wins += macro_mean(r.final_labels(), data.gold, table) > macro_mean(r.initial_labels(), data.gold, table);
        }
        const bool ok = worst_dev <= 0.03 && wins >= 19;
        return Verdict{ok, "mean accuracy " + util::format_fixed(acc_sum / 20, 4) + " (target 0.92 +/- 0.03, worst dev " +
                               util::format_fixed(worst_dev, 4) + "); verified > baseline in " + std::to_string(wins) +
                               "/20"};
    });

    criterion("strict-verifier-degradation", 10.0, [&] {
        std::size_t losses = 0;
        double acc_sum = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            auto data = balanced_corpus(table, 2000, 2000 + seed);
            auto r = self_verified_run(table, data, 0.6, 0.1, 0.3, seed);
            acc_sum += accuracy(r.final_labels(), data.gold);
            losses += macro_mean(r.final_labels(), data.gold, table) < macro_mean(r.initial_labels(), data.gold, table);
        }
        return Verdict{losses >= 19, "verified < baseline in " + std::to_string(losses) + "/20; mean accuracy " +
                                         util::format_fixed(acc_sum / 20, 4) + " (analytic 0.46)"};
    });

    criterion("bookkeeping", 0, [&] {
        Corpus corpus{session("x", std::string(1881, 'T'))};
        std::vector<std::string> la;
        for (std::size_t i = 0; i < 1881; ++i) la.push_back(table.categories()[i % 11].name);
        auto planted = plant_disagreements(series(table, la, "a"), 501, table, 9, "b");
        auto a = series(table, la, "a");
        const std::string rate = util::format_percent(disagreement_rate(a, planted));
        auto set = extract_disagreements(a, planted, corpus);
        const bool ok = rate == "26.63%" && set.agreements.size() == 1380 && set.items.size() == 501;
        return Verdict{ok, "rate " + rate + ", " + std::to_string(set.agreements.size()) + " agreements + " +
                               std::to_string(set.items.size()) + " items"};
    });

    criterion("determinism-replay", 0, [&] {
        auto data = balanced_corpus(table, 600, 77);
        std::vector<std::string> audits, reports;
        for (int i = 0; i < 2; ++i) {
            AuditLog log;
            auto r = self_verified_run(table, data, 0.6, 0.8, 0.0, 5, 4, &log, 0.05);
            audits.push_back(audit_digest(log.contents()));
            auto base = r.initial_labels();
            reports.push_back(util::sha256_hex(report_json(summarize(r.final_labels(), data.gold, table, &base)).dump()));
        }
        auto p1 = self_verified_run(table, data, 0.6, 0.8, 0.0, 5, 1, nullptr, 0.05);
        auto p8 = self_verified_run(table, data, 0.6, 0.8, 0.0, 5, 8, nullptr, 0.05);
        const bool labels_equal = serialize_label_series(p1.final_labels()) == serialize_label_series(p8.final_labels());
        const bool ok = audits[0] == audits[1] && reports[0] == reports[1] && labels_equal;
        return Verdict{ok, "audit " + audits[0].substr(0, 12) + (audits[0] == audits[1] ? " x2" : " differs") +
                               ", report " + reports[0].substr(0, 12) + (reports[0] == reports[1] ? " x2" : " differs") +
                               ", parallelism 1 vs 8 " + (labels_equal ? "identical" : "differ")};
    });

    criterion("blinding", 0, [&] {
        const std::vector<std::string> backend_ids = {"gemini", "gpt"};
        Corpus corpus{session("x", std::string(1881, 'T'))};
        std::vector<std::string> la;
        for (std::size_t i = 0; i < 1881; ++i) la.push_back(table.categories()[(i * 7) % 11].name);
        auto a = series(table, la, "gemini");
        auto b = plant_disagreements(a, 501, table, 13, "gpt");
        auto set = extract_disagreements(a, b, corpus);
        std::size_t lo = 501, hi = 0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            auto blinded = blind_and_randomize(set, seed, table);
            std::size_t ones = 0;
            for (const auto& [_, v] : blinded.sealed.rater1_is_a) ones += v;
            lo = std::min(lo, ones);
            hi = std::max(hi, ones);
        }
        auto blinded = blind_and_randomize(set, 42, table);
        std::size_t leaks = count_identifier_leaks(blinded.packet.to_json().dump(), backend_ids);

        TempDir dir;
        save_packet(dir / "packet.json", blinded.packet);
        std::mt19937_64 rng(3);
        std::map<UtteranceRef, std::string> chosen;
        {
            AdjudicationService svc(blinded.packet, dir / "packet.json");
            httplib::Client cli("127.0.0.1", svc.start());
            auto scan = [&](const httplib::Result& r) {
                if (!r || r->status != 200) throw std::runtime_error("API request failed");
                leaks += count_identifier_leaks(r->body, backend_ids);
            };
            scan(cli.Get("/api/packet/meta"));
            for (std::size_t off = 0; off < 501; off += 50) scan(cli.Get("/api/items?offset=" + std::to_string(off)));
            for (const auto& item : blinded.packet.items) {
                scan(cli.Get("/api/items/" + item.item_id));
                const bool first = rng() % 2;
                scan(cli.Post("/api/items/" + item.item_id + "/decision", first ? "RATER_1" : "RATER_2", "text/plain"));
                chosen[item.ref] = (first ? item.label_rater_1 : item.label_rater_2).name();
            }
            scan(cli.Post("/api/export", "", "text/plain"));
        }
        auto d = derive_gold(set.agreements, load_packet(dir / "packet.json", table), blinded.sealed);
        std::size_t mismatched = 0;
        for (const auto& [ref, label] : chosen) mismatched += d.gold.labels.find(ref)->name() != label;
        const bool sizes = d.gold.labels.size() == set.agreements.size() + set.items.size();
        const bool ok = lo >= 218 && hi <= 283 && leaks == 0 && mismatched == 0 && sizes;
        return Verdict{ok, "rater-1 counts over 20 seeds in [" + std::to_string(lo) + ", " + std::to_string(hi) +
                               "] (bound [218, 283]); leaks " + std::to_string(leaks) + "; gold " +
                               std::to_string(d.gold.labels.size()) + " = " + std::to_string(set.agreements.size()) +
                               " + " + std::to_string(set.items.size()) + ", " + std::to_string(mismatched) +
                               " mismatched choices"};
    });

    criterion("state-machine", 0, [&] {
        auto data = balanced_corpus(table, 2000, 55);
        BackendRegistry reg;
        reg.add(synthetic("ann", table, data.gold, 0.6, 0.5, 0.1, 1, 0.05));
        reg.add(synthetic("ver", table, data.gold, 0.5, 0.6, 0.2, 2, 0.05));
        RunConfig cfg;
        cfg.parallelism = 4;
        Orchestrator engine(data.corpus, table, PromptTemplates::defaults(), reg, cfg);
        AuditLog l1, l2;
        auto verified = engine.run(engine.prepare(parse_orchestration_spec("ver(ann)")), l1);
        auto plain = engine.run(engine.prepare(parse_orchestration_spec("ann")), l2);
        std::size_t bad = 0, retain = 0, revise = 0;
        for (const auto& r : verified.records) {
            if (r.decision == Decision::Retain) {
                ++retain;
                bad += r.final_label != r.initial_label;
            } else if (r.decision == Decision::Revise) {
                ++revise;
                bad += r.final_label == r.initial_label || !table.match(r.final_label.name());
            } else {
                ++bad;
            }
        }
        for (const auto& r : plain.records) bad += r.decision != Decision::None || r.final_label != r.initial_label;
        const bool ok = bad == 0 && verified.records.size() == 2000 && plain.records.size() == 2000;
        return Verdict{ok, std::to_string(verified.records.size()) + " verified records (" + std::to_string(retain) +
                               " retain, " + std::to_string(revise) + " revise) + " +
                               std::to_string(plain.records.size()) + " unverified; " + std::to_string(bad) +
                               " violations"};
    });

    std::printf("%s\n", failures ? "acceptance: FAILED" : "acceptance: all criteria passed");
    return failures ? 1 : 0;
}
