#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "orchestra/domain.hpp"
#include "orchestra/labels.hpp"

namespace orchestra {

/// Cohen's kappa with its ingredients. `value` is empty when chance agreement is 1.
struct Kappa {
    std::optional<double> value;
    double observed = 0.0;  // p_o
    double expected = 0.0;  // p_e
    std::size_t n = 0;

    bool undefined() const noexcept { return !value.has_value(); }
};

/// Kappa over integer-coded series, codes in [0, alphabet). Works in exact integer
/// arithmetic up to the final division: kappa = (n*agree - S) / (n^2 - S) with
/// S = sum_k count_a(k) * count_b(k).
inline Kappa kappa_from_codes(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                              std::size_t alphabet) {
    if (a.size() != b.size()) throw ContractError("kappa: series lengths differ");
    Kappa k;
    k.n = a.size();
    if (k.n == 0) return k;

    constexpr std::size_t kInline = 16;
    std::array<std::uint64_t, kInline> ca_small{}, cb_small{};
    std::vector<std::uint64_t> ca_big, cb_big;
    std::uint64_t* ca = ca_small.data();
    std::uint64_t* cb = cb_small.data();
    if (alphabet > kInline) {
        ca_big.assign(alphabet, 0);
        cb_big.assign(alphabet, 0);
        ca = ca_big.data();
        cb = cb_big.data();
    }
    std::uint64_t agree = 0;
    for (std::size_t i = 0; i < k.n; ++i) {
        if (a[i] >= alphabet || b[i] >= alphabet) throw ContractError("kappa: code out of range");
        ++ca[a[i]];
        ++cb[b[i]];
        agree += a[i] == b[i];
    }
    std::uint64_t chance = 0;
    for (std::size_t c = 0; c < alphabet; ++c) chance += ca[c] * cb[c];
    const std::uint64_t n = k.n;
    const std::uint64_t nn = n * n;
    k.observed = static_cast<double>(agree) / static_cast<double>(n);
    k.expected = static_cast<double>(chance) / static_cast<double>(nn);
    if (chance == nn) return k;
    const double num = static_cast<double>(n * agree) - static_cast<double>(chance);
    k.value = num / static_cast<double>(nn - chance);
    return k;
}

namespace detail {

/// Codes two aligned series over the union of their label names.
inline std::size_t encode_pair(const LabelSeries& a, const LabelSeries& b,
                               std::vector<std::uint32_t>& ca, std::vector<std::uint32_t>& cb) {
    std::map<std::string, std::uint32_t> dict;
    for (const auto* s : {&a, &b})
        for (const auto& e : s->entries()) dict.emplace(e.label.name(), 0);
    std::uint32_t next = 0;
    for (auto& [_, code] : dict) code = next++;
    ca.clear();
    cb.clear();
    for (const auto& e : a.entries()) ca.push_back(dict[e.label.name()]);
    for (const auto& e : b.entries()) cb.push_back(dict[e.label.name()]);
    return dict.size();
}

inline void binarize(const LabelSeries& s, const std::string& category, std::vector<std::uint32_t>& out) {
    out.clear();
    for (const auto& e : s.entries()) out.push_back(e.label.name() == category ? 1u : 0u);
}

inline const std::string& require_category(const Codebook& codebook, std::string_view category) {
    const Category* c = codebook.find(category);
    if (!c) throw ContractError("category '" + std::string(category) + "' is not in the codebook");
    return c->name;
}

}  // namespace detail

inline Kappa cohens_kappa(const LabelSeries& a, const LabelSeries& b) {
    require_same_refs(a, b, "cohens_kappa");
    std::vector<std::uint32_t> ca, cb;
    const std::size_t alphabet = detail::encode_pair(a, b, ca, cb);
    return kappa_from_codes(ca, cb, alphabet);
}

/// One-vs-rest kappa: each label becomes "is `category`" or "is not".
inline Kappa per_category_kappa(const LabelSeries& a, const LabelSeries& b, const Codebook& codebook,
                                std::string_view category) {
    require_same_refs(a, b, "per_category_kappa");
    const std::string& name = detail::require_category(codebook, category);
    std::vector<std::uint32_t> ca, cb;
    detail::binarize(a, name, ca);
    detail::binarize(b, name, cb);
    return kappa_from_codes(ca, cb, 2);
}

struct DeltaKappa {
    std::optional<double> value;  // empty when either kappa is undefined
    Kappa verified;
    Kappa baseline;
};

/// kappa(verified, gold | category) - kappa(baseline, gold | category).
inline DeltaKappa delta_kappa(const LabelSeries& verified, const LabelSeries& baseline,
                              const LabelSeries& gold, const Codebook& codebook,
                              std::string_view category) {
    DeltaKappa d{std::nullopt, per_category_kappa(verified, gold, codebook, category),
                 per_category_kappa(baseline, gold, codebook, category)};
    if (d.verified.value && d.baseline.value) d.value = *d.verified.value - *d.baseline.value;
    return d;
}

/// Fraction of utterances with identical labels; 1 for empty series.
inline double percent_agreement(const LabelSeries& a, const LabelSeries& b) {
    require_same_refs(a, b, "percent_agreement");
    if (a.empty()) return 1.0;
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a.entries()[i].label == b.entries()[i].label;
    return static_cast<double>(same) / static_cast<double>(a.size());
}

inline double disagreement_rate(const LabelSeries& a, const LabelSeries& b) {
    return 1.0 - percent_agreement(a, b);
}

/// Counts over codebook categories plus UNPARSEABLE. counts[g][p] = items with gold g,
/// predicted p.
struct ConfusionTable {
    std::vector<std::string> labels;
    std::vector<std::vector<std::size_t>> counts;

    std::size_t total() const {
        std::size_t t = 0;
        for (const auto& r : counts)
            for (auto c : r) t += c;
        return t;
    }
};

inline ConfusionTable confusion_matrix(const LabelSeries& pred, const LabelSeries& gold,
                                       const Codebook& codebook) {
    require_same_refs(pred, gold, "confusion_matrix");
    ConfusionTable t;
    t.labels = codebook.names();
    t.labels.emplace_back(kUnparseable);
    const std::size_t k = t.labels.size();
    t.counts.assign(k, std::vector<std::size_t>(k, 0));
    auto index = [&](const Label& l) {
        return l.is_unparseable() ? k - 1 : codebook.index_of(l);
    };
    for (std::size_t i = 0; i < pred.size(); ++i)
        ++t.counts[index(gold.entries()[i].label)][index(pred.entries()[i].label)];
    return t;
}

// ---------------------------------------------------------------------------
// Reports

struct MacroSummary {
    std::optional<double> mean;           // unweighted over defined categories
    std::optional<double> weighted_mean;  // weighted by gold support
    std::size_t defined = 0;
    std::size_t excluded = 0;  // categories with undefined kappa
};

struct CategoryRow {
    std::string category;
    std::size_t gold_support = 0;
    std::size_t predicted_support = 0;
    Kappa kappa;
    std::optional<Kappa> baseline_kappa;
    std::optional<double> delta;
};

struct AgreementReport {
    std::string source;
    std::string baseline_source;
    std::size_t n = 0;
    std::size_t unparseable = 0;
    Kappa overall;
    std::optional<Kappa> baseline_overall;
    double percent_agreement = 0.0;
    std::optional<double> baseline_percent_agreement;
    std::vector<CategoryRow> categories;
    MacroSummary macro;
    std::optional<MacroSummary> baseline_macro;
    /// Difference of unweighted macro means (verified - baseline).
    std::optional<double> macro_delta;
    /// (mean_verified - mean_baseline) / mean_baseline.
    std::optional<double> relative_improvement;
    ConfusionTable confusion;
};

inline MacroSummary macro_summary(const std::vector<CategoryRow>& rows, bool baseline) {
    MacroSummary m;
    double sum = 0.0, wsum = 0.0;
    std::size_t weight = 0;
    for (const auto& r : rows) {
        const Kappa& k = baseline ? *r.baseline_kappa : r.kappa;
        if (!k.value) {
            ++m.excluded;
            continue;
        }
        ++m.defined;
        sum += *k.value;
        wsum += *k.value * static_cast<double>(r.gold_support);
        weight += r.gold_support;
    }
    if (m.defined > 0) m.mean = sum / static_cast<double>(m.defined);
    if (weight > 0) m.weighted_mean = wsum / static_cast<double>(weight);
    return m;
}

inline std::optional<double> relative_change(double after, double before) {
    if (before == 0.0) return std::nullopt;
    return (after - before) / before;
}

/// Full agreement report of `pred` against `gold`; with a baseline it adds per-category
/// delta kappa. UNPARSEABLE predictions stay in every count.
inline AgreementReport summarize(const LabelSeries& pred, const LabelSeries& gold, const Codebook& codebook,
                                 const LabelSeries* baseline = nullptr) {
    require_same_refs(pred, gold, "summarize");
    if (baseline) require_same_refs(*baseline, gold, "summarize (baseline)");
    AgreementReport r;
    r.source = pred.source();
    r.n = pred.size();
    for (const auto& e : pred.entries()) r.unparseable += e.label.is_unparseable();
    r.overall = cohens_kappa(pred, gold);
    r.percent_agreement = percent_agreement(pred, gold);
    r.confusion = confusion_matrix(pred, gold, codebook);
    if (baseline) {
        r.baseline_source = baseline->source();
        r.baseline_overall = cohens_kappa(*baseline, gold);
        r.baseline_percent_agreement = percent_agreement(*baseline, gold);
    }
    const std::size_t k = codebook.size();
    for (std::size_t c = 0; c < k; ++c) {
        CategoryRow row;
        row.category = codebook.categories()[c].name;
        for (std::size_t p = 0; p < r.confusion.labels.size(); ++p) {
            row.gold_support += r.confusion.counts[c][p];
            row.predicted_support += r.confusion.counts[p][c];
        }
        row.kappa = per_category_kappa(pred, gold, codebook, row.category);
        if (baseline) {
            row.baseline_kappa = per_category_kappa(*baseline, gold, codebook, row.category);
            if (row.kappa.value && row.baseline_kappa->value)
                row.delta = *row.kappa.value - *row.baseline_kappa->value;
        }
        r.categories.push_back(std::move(row));
    }
    r.macro = macro_summary(r.categories, false);
    if (baseline) {
        r.baseline_macro = macro_summary(r.categories, true);
        if (r.macro.mean && r.baseline_macro->mean) {
            r.macro_delta = *r.macro.mean - *r.baseline_macro->mean;
            r.relative_improvement = relative_change(*r.macro.mean, *r.baseline_macro->mean);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Rendering

inline std::string format_kappa(const std::optional<double>& v, int decimals = 4) {
    return v ? util::format_fixed(*v, decimals) : "NA";
}

inline std::string format_kappa(const Kappa& k, int decimals = 4) { return format_kappa(k.value, decimals); }

/// "+59.38%" for (0.51 - 0.32) / 0.32.
inline std::string format_relative_improvement(double after, double before) {
    auto rel = relative_change(after, before);
    return rel ? util::format_signed(*rel * 100.0, 2) + "%" : "NA";
}

/// One row per category.
inline std::string report_tsv(const AgreementReport& r) {
    std::string out =
        "category\tkappa_baseline\tkappa_verified\tdelta_kappa\tgold_support\tpredicted_support\t"
        "baseline_undefined\tverified_undefined\n";
    for (const auto& row : r.categories) {
        out += row.category + "\t" +
               (row.baseline_kappa ? format_kappa(*row.baseline_kappa) : std::string("NA")) + "\t" +
               format_kappa(row.kappa) + "\t" + format_kappa(row.delta) + "\t" +
               std::to_string(row.gold_support) + "\t" + std::to_string(row.predicted_support) + "\t" +
               (row.baseline_kappa ? (row.baseline_kappa->undefined() ? "1" : "0") : "NA") + "\t" +
               (row.kappa.undefined() ? "1" : "0") + "\n";
    }
    return out;
}

inline std::string confusion_tsv(const ConfusionTable& t) {
    std::string out = "gold\\predicted";
    for (const auto& l : t.labels) out += "\t" + l;
    out += "\n";
    for (std::size_t g = 0; g < t.labels.size(); ++g) {
        out += t.labels[g];
        for (auto c : t.counts[g]) out += "\t" + std::to_string(c);
        out += "\n";
    }
    return out;
}

inline Json kappa_json(const Kappa& k) {
    return {{"kappa", k.value ? Json(*k.value) : Json(nullptr)},
            {"observed_agreement", k.observed},
            {"expected_agreement", k.expected},
            {"undefined", k.undefined()},
            {"n", k.n}};
}

inline Json macro_json(const MacroSummary& m) {
    return {{"mean", m.mean ? Json(*m.mean) : Json(nullptr)},
            {"weighted_mean", m.weighted_mean ? Json(*m.weighted_mean) : Json(nullptr)},
            {"defined_categories", m.defined},
            {"excluded_undefined", m.excluded}};
}

inline Json report_json(const AgreementReport& r) {
    Json j;
    j["source"] = r.source;
    j["baseline_source"] = r.baseline_source.empty() ? Json(nullptr) : Json(r.baseline_source);
    j["n"] = r.n;
    j["unparseable"] = r.unparseable;
    j["overall"] = kappa_json(r.overall);
    j["percent_agreement"] = r.percent_agreement;
    j["percent_agreement_text"] = util::format_percent(r.percent_agreement);
    j["macro"] = macro_json(r.macro);
    if (r.baseline_overall) {
        j["baseline_overall"] = kappa_json(*r.baseline_overall);
        j["baseline_percent_agreement"] = *r.baseline_percent_agreement;
        j["baseline_macro"] = macro_json(*r.baseline_macro);
        j["macro_delta"] = r.macro_delta ? Json(*r.macro_delta) : Json(nullptr);
        j["relative_improvement"] = r.relative_improvement ? Json(*r.relative_improvement) : Json(nullptr);
        j["relative_improvement_text"] =
            r.relative_improvement ? Json(util::format_signed(*r.relative_improvement * 100.0, 2) + "%")
                                   : Json(nullptr);
    }
    Json cats = Json::array();
    for (const auto& row : r.categories) {
        Json c{{"category", row.category},
               {"gold_support", row.gold_support},
               {"predicted_support", row.predicted_support},
               {"kappa", kappa_json(row.kappa)}};
        if (row.baseline_kappa) {
            c["baseline_kappa"] = kappa_json(*row.baseline_kappa);
            c["delta_kappa"] = row.delta ? Json(*row.delta) : Json(nullptr);
        }
        cats.push_back(std::move(c));
    }
    j["categories"] = std::move(cats);
    return j;
}

// ---------------------------------------------------------------------------
// Aggregation across runs

/// Three ways of averaging kappa over several evaluated configurations: per category
/// across runs, the mean of each run's macro mean, and the pooled mean of every defined
/// (run, category) cell.
struct AggregateSummary {
    std::vector<std::string> runs;
    std::vector<std::optional<double>> run_macro_means;
    std::map<std::string, std::optional<double>> category_means;
    std::optional<double> mean_of_run_means;
    std::optional<double> pooled_mean;
    std::size_t pooled_cells = 0;
};

inline AggregateSummary aggregate_reports(const std::vector<std::pair<std::string, Json>>& summaries) {
    AggregateSummary a;
    std::map<std::string, std::pair<double, std::size_t>> per_cat;
    double pooled = 0.0, run_sum = 0.0;
    std::size_t runs_defined = 0;
    for (const auto& [name, j] : summaries) {
        a.runs.push_back(name);
        const auto& mean = j.at("macro").at("mean");
        if (mean.is_null()) {
            a.run_macro_means.emplace_back(std::nullopt);
        } else {
            a.run_macro_means.emplace_back(mean.get<double>());
            run_sum += mean.get<double>();
            ++runs_defined;
        }
        for (const auto& c : j.at("categories")) {
            auto& slot = per_cat[c.at("category").get<std::string>()];
            const auto& k = c.at("kappa").at("kappa");
            if (k.is_null()) continue;
            slot.first += k.get<double>();
            ++slot.second;
            pooled += k.get<double>();
            ++a.pooled_cells;
        }
    }
    for (const auto& [cat, s] : per_cat)
        a.category_means[cat] = s.second ? std::optional<double>(s.first / static_cast<double>(s.second))
                                         : std::nullopt;
    if (runs_defined) a.mean_of_run_means = run_sum / static_cast<double>(runs_defined);
    if (a.pooled_cells) a.pooled_mean = pooled / static_cast<double>(a.pooled_cells);
    return a;
}

}  // namespace orchestra
