#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <unistd.h>
#include <random>
#include <string>
#include <vector>

#include "orchestra/cli.hpp"

namespace testsupport {

using namespace orchestra;

inline Codebook small_codebook(std::size_t k = 3) {
    std::vector<Category> cats;
    for (std::size_t i = 0; i < k; ++i) {
        std::string name(1, static_cast<char>('A' + i));
        cats.push_back({name, "Definition of " + name + ".", {}, {}});
    }
    return Codebook(std::move(cats), "test/1");
}

inline Codebook table_codebook() { return load_codebook(std::string(ORCHESTRA_DATA_DIR) + "/codebook/tutor_moves_v1.json"); }

/// Session from a speaker pattern such as "TSTST".
inline Transcript session(const std::string& id, const std::string& pattern) {
    Transcript t{id, {}};
    for (std::size_t i = 0; i < pattern.size(); ++i)
        t.turns.push_back({id, static_cast<int>(i), pattern[i] == 'T' ? Speaker::Tutor : Speaker::Student,
                           std::string(pattern[i] == 'T' ? "tutor " : "student ") + std::to_string(i)});
    return t;
}

inline LabelSeries series(const Codebook& cb, const std::vector<std::string>& labels, const std::string& source = "s") {
    std::vector<LabeledRef> e;
    for (std::size_t i = 0; i < labels.size(); ++i)
        e.push_back({{"x", static_cast<int>(i)}, cb.require_or_sentinel(labels[i])});
    return LabelSeries::from_entries(std::move(e), source);
}

inline std::shared_ptr<SyntheticBackend> synthetic(const std::string& id, const Codebook& cb, const LabelSeries& gold,
                                                   double accuracy, double r, double c, std::uint64_t seed,
                                                   double unparseable = 0.0) {
    SyntheticParams p{{SyntheticConfusion::uniform(cb, accuracy), seed},
                      SyntheticVerifierParams::create(r, c, seed + 1),
                      unparseable,
                      std::make_shared<const LabelSeries>(gold)};
    return std::make_shared<SyntheticBackend>(id, std::move(p), cb);
}

/// Kappa straight from its definition, in floating point, for use as an oracle.
inline std::optional<double> definitional_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const double n = static_cast<double>(a.size());
    std::map<std::string, std::pair<double, double>> marg;
    double agree = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        marg[a[i]].first += 1.0;
        marg[b[i]].second += 1.0;
        if (a[i] == b[i]) agree += 1.0;
    }
    const double po = agree / n;
    double pe = 0.0;
    for (const auto& [_, m] : marg) pe += (m.first / n) * (m.second / n);
    if (std::abs(1.0 - pe) < 1e-15) return std::nullopt;
    return (po - pe) / (1.0 - pe);
}

inline std::vector<std::string> names_of(const LabelSeries& s) {
    std::vector<std::string> out;
    for (const auto& e : s.entries()) out.push_back(e.label.name());
    return out;
}

inline std::vector<std::string> one_vs_rest(const std::vector<std::string>& v, const std::string& category) {
    std::vector<std::string> out;
    for (const auto& x : v) out.push_back(x == category ? "yes" : "no");
    return out;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("orchestra-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

}  // namespace testsupport
