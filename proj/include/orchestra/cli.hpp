#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "orchestra/backends.hpp"
#include "orchestra/goldsmith.hpp"
#include "orchestra/ingest.hpp"
#include "orchestra/metrics.hpp"
#include "orchestra/orchestrator.hpp"
#include "orchestra/prompting.hpp"
#include "orchestra/service.hpp"
#include "orchestra/synthetic_corpus.hpp"

namespace orchestra {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUserError = 1;
inline constexpr int kExitRunFailure = 2;

/// Parsed configuration file. Relative paths resolve against the file's directory.
struct CliConfig {
    std::filesystem::path file;
    Codebook codebook;
    PromptTemplates templates = PromptTemplates::defaults();
    RunConfig run;
    std::vector<BackendConfig> backends;
    std::optional<std::filesystem::path> corpus;
    std::optional<std::filesystem::path> cache_dir;
    std::filesystem::path runs_dir = "runs";
};

namespace cli_detail {

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() ? base / path : path;
}

inline CliConfig load_config(const std::filesystem::path& file) {
    Json j;
    try {
        j = Json::parse(util::read_file(file));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(file.string() + ": " + e.what(), e.byte);
    }
    const auto base = file.parent_path();
    CliConfig c;
    c.file = file;
    try {
        c.codebook = load_codebook(resolve(base, j.at("codebook").get<std::string>()));
        if (auto report = validate_codebook(c.codebook); !report.empty())
            throw ConfigError("codebook: " + report.front().message);
        if (j.contains("templates")) {
            const auto& t = j["templates"];
            if (t.contains("annotation"))
                c.templates.annotation = PromptTemplate::load(resolve(base, t["annotation"].get<std::string>()));
            if (t.contains("verification"))
                c.templates.verification =
                    PromptTemplate::load(resolve(base, t["verification"].get<std::string>()));
        }
        if (j.contains("chunking")) {
            c.run.chunking.target_size = j["chunking"].value("target_size", c.run.chunking.target_size);
            c.run.chunking.overlap = j["chunking"].value("overlap", c.run.chunking.overlap);
        }
        c.run.parallelism = j.value("parallelism", c.run.parallelism);
        c.run.rate_limit_per_second = j.value("rate_limit_per_second", c.run.rate_limit_per_second);
        c.run.rate_burst = j.value("rate_burst", c.run.rate_burst);
        c.run.reask_budget = j.value("reask_budget", c.run.reask_budget);
        c.run.gold_eligible = j.value("gold_eligible", c.run.gold_eligible);
        c.run.record_timestamps = j.value("record_timestamps", c.run.record_timestamps);
        if (j.contains("corpus")) c.corpus = resolve(base, j["corpus"].get<std::string>());
        if (j.contains("cache_dir")) c.cache_dir = resolve(base, j["cache_dir"].get<std::string>());
        if (j.contains("runs_dir")) c.runs_dir = resolve(base, j["runs_dir"].get<std::string>());
        for (const auto& b : j.value("backends", Json::array()))
            c.backends.push_back(backend_config_from_json(b, c.codebook, base));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(file.string() + ": " + e.what());
    }
    return c;
}

/// A label source is either a run directory (its final labels, or initial labels with
/// `initial`) or a label-series file.
inline LabelSeries load_labels(const std::filesystem::path& p, const Codebook& cb, bool initial = false) {
    if (std::filesystem::is_directory(p)) {
        RunStore store(p);
        auto result = store.load_result(cb);
        if (!result || result->status != RunStatus::Completed)
            throw ConfigError(p.string() + " does not hold a completed run");
        return initial ? result->initial_labels() : result->final_labels();
    }
    if (!std::filesystem::exists(p)) throw ConfigError("no such label file or run directory: " + p.string());
    return load_label_series(p, cb);
}

inline std::optional<RunResult> load_run(const std::filesystem::path& p, const Codebook& cb) {
    if (!std::filesystem::is_directory(p)) return std::nullopt;
    return RunStore(p).load_result(cb);
}

inline std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
}

inline std::string json_kappa_text(const Json& k) {
    const auto& v = k.at("kappa");
    return v.is_null() ? "NA" : util::format_fixed(v.get<double>(), 4);
}

inline std::string opt_text(const Json& v, int decimals = 4, bool signed_ = false) {
    if (v.is_null()) return "NA";
    return signed_ ? util::format_signed(v.get<double>(), decimals) : util::format_fixed(v.get<double>(), decimals);
}

/// Human-readable table for one report.json document.
inline std::string render_report_text(const Json& r) {
    const bool with_baseline = r.contains("baseline_overall");
    std::string out = "source: " + r.at("source").get<std::string>() + "\n";
    if (with_baseline) out += "baseline: " + r.at("baseline_source").get<std::string>() + "\n";
    out += "utterances: " + std::to_string(r.at("n").get<std::size_t>()) +
           "  unparseable: " + std::to_string(r.at("unparseable").get<std::size_t>()) + "\n";
    out += "overall kappa: " + json_kappa_text(r.at("overall"));
    if (with_baseline) out += "  (baseline " + json_kappa_text(r.at("baseline_overall")) + ")";
    out += "\npercent agreement: " + r.at("percent_agreement_text").get<std::string>() + "\n\n";
    out += pad("category", 26) + pad("gold", 6) + (with_baseline ? pad("baseline", 10) : "") + pad("kappa", 10) +
           (with_baseline ? "delta" : "") + "\n";
    for (const auto& c : r.at("categories")) {
        out += pad(c.at("category").get<std::string>(), 26) +
               pad(std::to_string(c.at("gold_support").get<std::size_t>()), 6);
        if (with_baseline) out += pad(json_kappa_text(c.at("baseline_kappa")), 10);
        out += pad(json_kappa_text(c.at("kappa")), 10);
        if (with_baseline) out += opt_text(c.at("delta_kappa"), 4, true);
        out += "\n";
    }
    const auto& m = r.at("macro");
    out += "\nmacro mean kappa: " + opt_text(m.at("mean")) + " over " +
           std::to_string(m.at("defined_categories").get<std::size_t>()) + " categories";
    if (m.at("excluded_undefined").get<std::size_t>())
        out += " (" + std::to_string(m.at("excluded_undefined").get<std::size_t>()) + " undefined, excluded)";
    out += "\n";
    if (with_baseline) {
        out += "baseline macro mean: " + opt_text(r.at("baseline_macro").at("mean")) + "\n";
        out += "macro delta: " + opt_text(r.at("macro_delta"), 4, true) + "  relative: " +
               (r.at("relative_improvement_text").is_null() ? std::string("NA")
                                                             : r.at("relative_improvement_text").get<std::string>()) +
               "\n";
    }
    return out;
}

inline std::string render_aggregate_text(const AggregateSummary& a) {
    std::string out = "runs: " + std::to_string(a.runs.size()) + "\n";
    for (std::size_t i = 0; i < a.runs.size(); ++i)
        out += "  " + pad(a.runs[i], 40) + format_kappa(a.run_macro_means[i]) + "\n";
    out += "\n" + pad("category", 26) + "mean kappa\n";
    for (const auto& [cat, v] : a.category_means) out += pad(cat, 26) + format_kappa(v) + "\n";
    out += "\nmean of run macro means: " + format_kappa(a.mean_of_run_means) + "\n";
    out += "pooled mean over " + std::to_string(a.pooled_cells) + " cells: " + format_kappa(a.pooled_mean) + "\n";
    return out;
}

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::string config_path;
    std::string codebook_path;

    CliConfig config() const {
        if (config_path.empty()) throw ConfigError("--config is required");
        return load_config(config_path);
    }

    Codebook codebook() const {
        if (!codebook_path.empty()) {
            auto cb = load_codebook(codebook_path);
            if (auto report = validate_codebook(cb); !report.empty())
                throw ConfigError("codebook: " + report.front().message);
            return cb;
        }
        if (!config_path.empty()) return load_config(config_path).codebook;
        throw ConfigError("pass --codebook or --config");
    }
};

inline int execute_run(Context& ctx, const CliConfig& cfg, const OrchestrationSpec& spec,
                       const std::filesystem::path& corpus_path, std::optional<std::string> run_id,
                       std::optional<std::filesystem::path> run_dir, const std::string& resume_hint_args) {
    Corpus corpus = load_transcripts(corpus_path);
    BackendRegistry registry;
    for (const auto& b : cfg.backends) registry.add(make_backend(b, cfg.codebook));
    std::optional<AnnotationCache> cache;
    if (cfg.cache_dir) cache.emplace(cfg.codebook, *cfg.cache_dir);
    Orchestrator engine(corpus, cfg.codebook, cfg.templates, registry, cfg.run, cache ? &*cache : nullptr);
    RunManifest manifest = engine.prepare(spec, run_id);
    const auto dir = run_dir ? *run_dir : cfg.runs_dir / manifest.run_id;
    RunStore store(dir);
    RunResult result = store.execute(engine, manifest, cfg.codebook);
    const auto& c = result.counts;
    ctx.out << "run " << result.run_id << " [" << format_orchestration_spec(spec) << ", "
            << to_string(spec.condition()) << "]: " << to_string(result.status) << "\n"
            << "  directory: " << dir.string() << "\n"
            << "  utterances: " << result.records.size() << "/" << result.expected_records
            << "  unparseable: " << c.unparseable << "  revised: " << c.revised << "  flagged: " << c.flagged
            << "  reasks: " << c.reasks << "\n";
    if (result.status != RunStatus::Completed) {
        ctx.err << "run suspended: " << result.suspend_reason << "\n"
                << "resume with: orchestra resume --config " << cfg.file.string() << " --run-dir " << dir.string()
                << resume_hint_args << "\n";
        return kExitRunFailure;
    }
    return kExitOk;
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"Verification-oriented annotation of tutoring discourse", "orchestra"};
    app.require_subcommand(1);
    Context ctx{out, err, {}, {}};
    std::function<int()> action;

    auto add_config = [&](CLI::App* sub, bool required) {
        auto* o = sub->add_option("--config", ctx.config_path, "Configuration file (JSON)");
        if (required) o->required();
        return o;
    };
    auto add_codebook = [&](CLI::App* sub) {
        add_config(sub, false);
        sub->add_option("--codebook", ctx.codebook_path, "Codebook file (JSON); overrides the config's codebook");
    };

    // ingest
    std::string ingest_path, ingest_format = "auto", ingest_normalized;
    std::size_t chunk_target = 80, chunk_overlap = 2;
    auto* ingest = app.add_subcommand("ingest", "Validate a transcript corpus and report its shape");
    ingest->add_option("corpus", ingest_path, "Transcript file (.jsonl, .csv, .tsv)")->required();
    ingest->add_option("--format", ingest_format, "auto, jsonl, csv or tsv");
    ingest->add_option("--chunk-target", chunk_target, "Target chunk size in turns");
    ingest->add_option("--chunk-overlap", chunk_overlap, "Overlap between chunks in turns");
    ingest->add_option("--normalized-out", ingest_normalized, "Write the corpus back out as JSONL");
    ingest->callback([&] {
        action = [&] {
            auto fmt = parse_transcript_format(ingest_format);
            if (!fmt) throw ConfigError("unknown format '" + ingest_format + "'");
            Corpus corpus = load_transcripts(ingest_path, *fmt);
            ChunkingParams cp{chunk_target, chunk_overlap};
            validate_chunking(cp);
            std::size_t chunks = 0;
            for (const auto& t : corpus) chunks += chunk_session(t, cp).size();
            out << "sessions: " << corpus.size() << "\n"
                << "utterances: " << count_utterances(corpus) << "\n"
                << "tutor utterances: " << count_tutor_utterances(corpus) << "\n"
                << "chunks: " << chunks << "\n"
                << "corpus digest: " << corpus_digest(corpus) << "\n";
            if (!ingest_normalized.empty()) util::write_new_file(ingest_normalized, serialize_transcripts_jsonl(corpus));
            return kExitOk;
        };
    });

    // run / resume
    std::string run_spec, run_corpus, run_id, run_dir, runs_dir;
    std::size_t run_parallelism = 0;
    std::size_t commit_limit = 0;
    bool no_timestamps = false;
    auto* run = app.add_subcommand("run", "Execute an orchestration run, e.g. --spec \"GPT(Gemini)\"");
    add_config(run, true);
    run->add_option("--spec", run_spec, "verifier(annotator) or a single annotator id")->required();
    run->add_option("--corpus", run_corpus, "Transcript file; defaults to the config's corpus");
    run->add_option("--run-id", run_id, "Explicit run id (default: derived from the manifest)");
    run->add_option("--run-dir", run_dir, "Run directory (default: <runs_dir>/<run_id>)");
    run->add_option("--runs-dir", runs_dir, "Parent directory for run directories");
    run->add_option("--parallelism", run_parallelism, "Concurrent backend calls");
    run->add_option("--commit-limit", commit_limit, "Suspend after committing this many utterances");
    run->add_flag("--no-timestamps", no_timestamps, "Omit wall-clock timestamps from artifacts");

    auto apply_run_overrides = [&](CliConfig& cfg) {
        if (run_parallelism) cfg.run.parallelism = run_parallelism;
        if (commit_limit) cfg.run.commit_limit = commit_limit;
        if (no_timestamps) cfg.run.record_timestamps = false;
        if (!runs_dir.empty()) cfg.runs_dir = runs_dir;
    };
    auto corpus_for = [&](const CliConfig& cfg) -> std::filesystem::path {
        if (!run_corpus.empty()) return run_corpus;
        if (cfg.corpus) return *cfg.corpus;
        throw ConfigError("no corpus: pass --corpus or set \"corpus\" in the config");
    };
    auto hint_args = [&] {
        std::string s;
        if (!run_corpus.empty()) s += " --corpus " + run_corpus;
        if (no_timestamps) s += " --no-timestamps";
        return s;
    };

    run->callback([&] {
        action = [&] {
            auto spec = parse_orchestration_spec(run_spec);
            auto cfg = ctx.config();
            apply_run_overrides(cfg);
            return execute_run(ctx, cfg, spec, corpus_for(cfg),
                               run_id.empty() ? std::nullopt : std::optional<std::string>(run_id),
                               run_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(run_dir),
                               hint_args());
        };
    });

    auto* resume = app.add_subcommand("resume", "Continue a suspended run from its audit log");
    add_config(resume, true);
    resume->add_option("--run-dir", run_dir, "Run directory holding manifest.json")->required();
    resume->add_option("--corpus", run_corpus, "Transcript file; defaults to the config's corpus");
    resume->add_option("--parallelism", run_parallelism, "Concurrent backend calls");
    resume->add_option("--commit-limit", commit_limit, "Suspend after committing this many utterances");
    resume->add_flag("--no-timestamps", no_timestamps, "Omit wall-clock timestamps from artifacts");
    resume->callback([&] {
        action = [&] {
            RunStore store(run_dir);
            if (!store.exists()) throw ConfigError(run_dir + " holds no run manifest");
            auto manifest = store.load_manifest();
            auto cfg = ctx.config();
            apply_run_overrides(cfg);
            return execute_run(ctx, cfg, manifest.spec, corpus_for(cfg), manifest.run_id,
                               std::filesystem::path(run_dir), hint_args());
        };
    });

    // diff
    std::string diff_a, diff_b, diff_out;
    auto* diff = app.add_subcommand("diff", "List utterances where two label sources disagree");
    diff->add_option("a", diff_a, "Run directory or label file")->required();
    diff->add_option("b", diff_b, "Run directory or label file")->required();
    diff->add_option("--out", diff_out, "Write disagreements as TSV");
    add_codebook(diff);
    diff->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            std::vector<Disagreement> d;
            LabelSeries a = load_labels(diff_a, cb), b = load_labels(diff_b, cb);
            auto ra = load_run(diff_a, cb), rb = load_run(diff_b, cb);
            d = (ra && rb) ? diff_runs(*ra, *rb) : (require_same_refs(a, b, "diff"), diff_labels(a, b));
            std::string tsv = "session_id\tturn_index\t" + a.source() + "\t" + b.source() + "\n";
            for (const auto& x : d)
                tsv += x.ref.session_id + "\t" + std::to_string(x.ref.turn_index) + "\t" + x.label_a.name() + "\t" +
                       x.label_b.name() + "\n";
            out << "disagreements: " << d.size() << " of " << a.size() << " ("
                << util::format_percent(a.size() ? static_cast<double>(d.size()) / static_cast<double>(a.size()) : 0.0)
                << ")\n";
            if (!diff_out.empty()) util::write_new_file(diff_out, tsv);
            return kExitOk;
        };
    });

    // adjudicate
    auto* adj = app.add_subcommand("adjudicate", "Blinded adjudication of disagreements");
    adj->require_subcommand(1);
    std::string adj_a, adj_b, adj_corpus, adj_out_dir, packet_path, host = "127.0.0.1", static_dir, item_id,
                                                                    choice;
    std::uint64_t adj_seed = 0;
    std::size_t radius = 6;
    int port = 8765;
    bool override_existing = false;

    auto* prepare = adj->add_subcommand("prepare", "Extract disagreements and write a blinded packet");
    prepare->add_option("--a", adj_a, "First label source (run directory or label file)")->required();
    prepare->add_option("--b", adj_b, "Second label source")->required();
    prepare->add_option("--corpus", adj_corpus, "Transcript file for item context")->required();
    prepare->add_option("--seed", adj_seed, "Seed for rater assignment and item order")->required();
    prepare->add_option("--out-dir", adj_out_dir, "Directory for packet.json, sealed.json, agreements.jsonl")
        ->required();
    prepare->add_option("--context-radius", radius, "Turns of context on each side of the focal turn");
    add_codebook(prepare);
    prepare->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            auto a = load_labels(adj_a, cb), b = load_labels(adj_b, cb);
            auto corpus = load_transcripts(adj_corpus);
            auto set = extract_disagreements(a, b, corpus, radius);
            auto blinded = blind_and_randomize(set, adj_seed, cb);
            std::filesystem::path dir(adj_out_dir);
            std::filesystem::create_directories(dir);
            util::write_new_file(dir / "agreements.jsonl", serialize_label_series(set.agreements));
            util::write_new_file(dir / "packet.json", blinded.packet.to_json().dump(2) + "\n");
            if (std::filesystem::exists(dir / "sealed.json")) throw ConfigError("sealed.json already exists in " + adj_out_dir);
            save_sealed_map(dir / "sealed.json", blinded.sealed);
            const double rate = a.size() ? static_cast<double>(set.items.size()) / static_cast<double>(a.size()) : 0.0;
            out << "utterances: " << a.size() << "\n"
                << "agreements: " << set.agreements.size() << "\n"
                << "disagreement items: " << set.items.size() << " (" << util::format_percent(rate) << ")\n"
                << "packet: " << (dir / "packet.json").string() << "\n"
                << "sealed map: " << (dir / "sealed.json").string() << " (keep away from the reviewer)\n";
            return kExitOk;
        };
    });

    auto* serve = adj->add_subcommand("serve", "Serve a packet over HTTP for the reviewer");
    serve->add_option("--packet", packet_path, "Packet file; decisions are written back to it")->required();
    serve->add_option("--host", host, "Bind address (loopback by default)");
    serve->add_option("--port", port, "Port (0 picks a free one)");
    serve->add_option("--static", static_dir, "Directory of UI assets served at /");
    add_codebook(serve);
    serve->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            AdjudicationService svc(load_packet(packet_path, cb), packet_path,
                                    ServiceOptions{host, port, static_dir});
            out << "serving " << packet_path << " on http://" << host << ":" << port << "\n" << std::flush;
            svc.serve_blocking();
            return kExitOk;
        };
    });

    auto* decide = adj->add_subcommand("decide", "Record one decision without the HTTP service");
    decide->add_option("--packet", packet_path, "Packet file")->required();
    decide->add_option("--item", item_id, "Item id")->required();
    decide->add_option("--choice", choice, "RATER_1 or RATER_2")->required();
    decide->add_flag("--override", override_existing, "Replace an existing decision");
    add_codebook(decide);
    decide->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            auto r = parse_rater(choice);
            if (!r) throw ConfigError("choice must be RATER_1 or RATER_2");
            auto packet = load_packet(packet_path, cb);
            auto outcome = packet.record(item_id, *r, override_existing);
            if (outcome != AdjudicationPacket::RecordOutcome::Unchanged) save_packet(packet_path, packet);
            static constexpr const char* names[] = {"recorded", "unchanged", "overridden"};
            out << item_id << ": " << names[static_cast<int>(outcome)] << " (" << packet.decided() << "/"
                << packet.items.size() << " decided)\n";
            return kExitOk;
        };
    });

    auto* status = adj->add_subcommand("status", "Show adjudication progress");
    status->add_option("--packet", packet_path, "Packet file")->required();
    add_codebook(status);
    status->callback([&] {
        action = [&] {
            auto packet = load_packet(packet_path, ctx.codebook());
            out << "decided: " << packet.decided() << "/" << packet.items.size() << "\n"
                << "overrides: " << packet.override_log.size() << "\n";
            return kExitOk;
        };
    });

    // gold derive
    auto* gold = app.add_subcommand("gold", "Gold-label derivation");
    gold->require_subcommand(1);
    std::string sealed_path, agreements_path, gold_out, provenance_out;
    auto* derive = gold->add_subcommand("derive", "Unseal a completed packet and write gold labels");
    derive->add_option("--packet", packet_path, "Completed packet")->required();
    derive->add_option("--sealed", sealed_path, "Sealed assignment map")->required();
    derive->add_option("--agreements", agreements_path, "Agreement labels from adjudicate prepare")->required();
    derive->add_option("--out", gold_out, "Gold label file to write")->required();
    derive->add_option("--provenance-out", provenance_out, "Per-utterance AGREEMENT/ADJUDICATED file");
    add_codebook(derive);
    derive->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            auto d = derive_gold(load_label_series(agreements_path, cb, "agreement"), load_packet(packet_path, cb),
                                 load_sealed_map(sealed_path));
            util::write_new_file(gold_out, serialize_label_series(d.gold.labels));
            if (!provenance_out.empty()) {
                std::string text;
                for (const auto& [ref, p] : d.gold.provenance)
                    text += Json{{"session_id", ref.session_id},
                                 {"turn_index", ref.turn_index},
                                 {"provenance", to_string(p)}}.dump() + "\n";
                util::write_new_file(provenance_out, text);
            }
            out << "gold labels: " << d.gold.labels.size() << " (" << (d.gold.labels.size() - d.alignment.items)
                << " agreements + " << d.alignment.items << " adjudicated)\n"
                << d.alignment_text(true) << "\n"
                << d.alignment_text(false) << "\n";
            return kExitOk;
        };
    });

    // evaluate
    std::string eval_gold, eval_run, eval_baseline, eval_out_dir;
    auto* evaluate = app.add_subcommand("evaluate", "Agreement of a run with gold labels, with per-category delta kappa");
    evaluate->add_option("--gold", eval_gold, "Gold label file")->required();
    evaluate->add_option("--run", eval_run, "Run directory or label file to evaluate")->required();
    evaluate->add_option("--baseline", eval_baseline,
                         "Baseline run or label file (default for a verified run: its own initial labels)");
    evaluate->add_option("--out-dir", eval_out_dir, "Write report.json, report.tsv and confusion.tsv here");
    add_codebook(evaluate);
    evaluate->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            auto g = load_label_series(eval_gold, cb, "gold");
            auto pred = load_labels(eval_run, cb);
            std::optional<LabelSeries> base;
            if (!eval_baseline.empty()) {
                base = load_labels(eval_baseline, cb);
            } else if (auto r = load_run(eval_run, cb)) {
                bool verified = std::any_of(r->records.begin(), r->records.end(),
                                            [](const FinalLabelRecord& x) { return x.decision != Decision::None; });
                if (verified) base = r->initial_labels();
            }
            auto report = summarize(pred, g, cb, base ? &*base : nullptr);
            Json j = report_json(report);
            out << render_report_text(j);
            if (!eval_out_dir.empty()) {
                std::filesystem::path dir(eval_out_dir);
                std::filesystem::create_directories(dir);
                util::write_new_file(dir / "report.json", j.dump(2) + "\n");
                util::write_new_file(dir / "report.tsv", report_tsv(report));
                util::write_new_file(dir / "confusion.tsv", confusion_tsv(report.confusion));
            }
            return kExitOk;
        };
    });

    // report
    std::vector<std::string> report_files;
    auto* report = app.add_subcommand("report", "Render report.json files; several are aggregated");
    report->add_option("reports", report_files, "report.json files (or directories containing one)")->required();
    report->callback([&] {
        action = [&] {
            std::vector<std::pair<std::string, Json>> docs;
            for (const auto& f : report_files) {
                std::filesystem::path p(f);
                if (std::filesystem::is_directory(p)) p /= "report.json";
                Json j;
                try {
                    j = Json::parse(util::read_file(p));
                } catch (const nlohmann::json::parse_error& e) {
                    throw ParseError(p.string() + ": " + e.what());
                }
                docs.emplace_back(j.value("source", p.string()), std::move(j));
            }
            if (docs.size() == 1) {
                out << render_report_text(docs.front().second);
            } else {
                out << render_aggregate_text(aggregate_reports(docs));
            }
            return kExitOk;
        };
    });

    // synth
    std::string synth_corpus_out, synth_gold_out, synth_plant_out;
    std::size_t synth_sessions = 30, synth_total = 0, synth_tutor = 0, synth_plant = 0;
    std::uint64_t synth_seed = 0;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with gold labels");
    synth->add_option("--sessions", synth_sessions, "Number of sessions");
    auto* total_opt = synth->add_option("--total-utterances", synth_total, "Total utterances across sessions");
    auto* tutor_opt = synth->add_option("--tutor-utterances", synth_tutor, "Tutor utterances across sessions");
    total_opt->excludes(tutor_opt);
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--corpus-out", synth_corpus_out, "Transcript JSONL to write")->required();
    synth->add_option("--gold-out", synth_gold_out, "Gold label file to write")->required();
    synth->add_option("--plant", synth_plant, "Also write a copy of gold with this many labels changed");
    synth->add_option("--plant-out", synth_plant_out, "File for the planted copy");
    add_codebook(synth);
    synth->callback([&] {
        action = [&] {
            auto cb = ctx.codebook();
            SyntheticCorpusParams p;
            p.sessions = synth_sessions;
            p.seed = synth_seed;
            if (total_opt->count()) p.total_utterances = synth_total;
            else if (tutor_opt->count()) p.tutor_utterances = synth_tutor;
            else throw ConfigError("pass --total-utterances or --tutor-utterances");
            auto s = generate_synthetic_corpus(p, cb);
            util::write_new_file(synth_corpus_out, serialize_transcripts_jsonl(s.corpus));
            util::write_new_file(synth_gold_out, serialize_label_series(s.gold));
            out << "sessions: " << s.corpus.size() << "  utterances: " << count_utterances(s.corpus)
                << "  tutor utterances: " << s.gold.size() << "\n";
            if (synth_plant) {
                if (synth_plant_out.empty()) throw ConfigError("--plant needs --plant-out");
                auto planted = plant_disagreements(s.gold, synth_plant, cb, synth_seed, "planted");
                util::write_new_file(synth_plant_out, serialize_label_series(planted));
                out << "planted disagreements: " << synth_plant << "\n";
            }
            return kExitOk;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUserError;
    }
    if (!action) return kExitUserError;
    try {
        return action();
    } catch (const TransportError& e) {
        err << "error: " << e.what() << "\n";
        return kExitRunFailure;
    } catch (const BackendRejected& e) {
        err << "error: " << e.what() << "\n";
        return kExitRunFailure;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUserError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUserError;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUserError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRunFailure;
    }
}

}  // namespace orchestra
