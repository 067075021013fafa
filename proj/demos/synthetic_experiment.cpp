// Every orchestration configuration over three synthetic models, scored against the
// generator's gold labels. Usage: synthetic_experiment [tutor_utterances] [seed]

#include <cstdio>
#include <cstdlib>

#include "orchestra/orchestrator.hpp"
#include "orchestra/metrics.hpp"
#include "orchestra/synthetic_corpus.hpp"

using namespace orchestra;

namespace {

struct Model {
    const char* id;
    double accuracy;
    double correction;
    double corruption;
};

}  // namespace

int main(int argc, char** argv) {
    const std::size_t n = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 1000;
    const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;

    const Codebook cb = load_codebook(std::string(ORCHESTRA_DATA_DIR) + "/codebook/tutor_moves_v1.json");
    SyntheticCorpusParams p;
    p.sessions = 30;
    p.tutor_utterances = n;
    p.seed = seed;
    const SyntheticCorpus data = generate_synthetic_corpus(p, cb);
    auto gold = std::make_shared<const LabelSeries>(data.gold);

    const Model models[] = {{"gemini", 0.6, 0.8, 0.0}, {"gpt", 0.55, 0.5, 0.05}, {"claude", 0.5, 0.1, 0.3}};
    BackendRegistry reg;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& m = models[i];
        SyntheticParams sp{{SyntheticConfusion::uniform(cb, m.accuracy), seed * 100 + i},
                           SyntheticVerifierParams::create(m.correction, m.corruption, seed * 100 + 50 + i), 0.01, gold};
        reg.add(std::make_shared<SyntheticBackend>(m.id, std::move(sp), cb));
    }

    RunConfig cfg;
    cfg.record_timestamps = false;
    AnnotationCache cache(cb);
    Orchestrator engine(data.corpus, cb, PromptTemplates::defaults(), reg, cfg, &cache);

    auto macro = [&](const LabelSeries& s) { return summarize(s, data.gold, cb).macro.mean.value_or(0.0); };
    std::map<Condition, std::pair<double, int>> by_condition;

    std::printf("%zu tutor utterances, seed %llu\n\n%-18s %-14s %8s %8s %8s\n", n,
                static_cast<unsigned long long>(seed), "configuration", "condition", "kappa", "revised", "accuracy");
    for (const auto& annotator : models) {
        std::vector<OrchestrationSpec> specs{OrchestrationSpec::unverified(annotator.id)};
        for (const auto& verifier : models) specs.push_back(OrchestrationSpec::verified(verifier.id, annotator.id));
        for (const auto& spec : specs) {
            AuditLog log;
            auto r = engine.run(engine.prepare(spec), log);
            const double k = macro(r.final_labels());
            auto& slot = by_condition[spec.condition()];
            slot.first += k;
            ++slot.second;
            std::printf("%-18s %-14s %8s %8zu %8s\n", format_orchestration_spec(spec).c_str(),
                        std::string(to_string(spec.condition())).c_str(), format_kappa(k).c_str(), r.counts.revised,
                        util::format_percent(percent_agreement(r.final_labels(), data.gold)).c_str());
        }
    }

    std::printf("\n");
    const double base = by_condition[Condition::Unverified].first / by_condition[Condition::Unverified].second;
    for (const auto& [cond, s] : by_condition) {
        const double mean = s.first / s.second;
        std::printf("%-14s mean kappa %s  vs unverified %s\n", std::string(to_string(cond)).c_str(),
                    format_kappa(mean).c_str(),
                    cond == Condition::Unverified ? "-" : format_relative_improvement(mean, base).c_str());
    }
    return 0;
}
