#include <gtest/gtest.h>

#include "support.hpp"

using namespace orchestra;
using namespace testsupport;

namespace {

std::vector<std::string> random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.emplace_back(1, static_cast<char>('A' + rng() % k));
    return v;
}

}  // namespace

TEST(Kappa, HandComputedCase) {
    auto cb = small_codebook(2);
    auto k = cohens_kappa(series(cb, {"A", "A", "A", "B"}), series(cb, {"A", "A", "B", "B"}));
    ASSERT_TRUE(k.value);
    EXPECT_DOUBLE_EQ(*k.value, 0.5);
    EXPECT_DOUBLE_EQ(k.observed, 0.75);
    EXPECT_DOUBLE_EQ(k.expected, 0.5);
    EXPECT_EQ(k.n, 4u);
}

TEST(Kappa, MatchesDefinitionOnRandomSeries) {
    auto cb = small_codebook(5);
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 3000; ++trial) {
        const std::size_t n = 1 + rng() % 60, k = 1 + rng() % 5;
        auto a = random_labels(rng, n, k), b = random_labels(rng, n, k);
        auto got = cohens_kappa(series(cb, a), series(cb, b));
        auto want = definitional_kappa(a, b);
        ASSERT_EQ(got.value.has_value(), want.has_value());
        if (want) {
            EXPECT_NEAR(*got.value, *want, 1e-12);
        }
    }
}

TEST(Kappa, UndefinedWhenChanceAgreementIsOne) {
    auto cb = small_codebook(2);
    auto k = cohens_kappa(series(cb, {"A", "A", "A"}), series(cb, {"A", "A", "A"}));
    EXPECT_TRUE(k.undefined());
    EXPECT_DOUBLE_EQ(k.expected, 1.0);
    EXPECT_EQ(format_kappa(k), "NA");
    EXPECT_TRUE(cohens_kappa(series(cb, {}), series(cb, {})).undefined());
    // Two constant but different raters: chance agreement is 0, kappa is defined.
    auto d = cohens_kappa(series(cb, {"A", "A"}), series(cb, {"B", "B"}));
    ASSERT_TRUE(d.value);
    EXPECT_DOUBLE_EQ(*d.value, 0.0);
}

TEST(Kappa, PropertiesSymmetryPermutationAndBounds) {
    auto cb = small_codebook(4);
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + rng() % 40;
        auto a = random_labels(rng, n, 4), b = random_labels(rng, n, 4);
        auto k = cohens_kappa(series(cb, a), series(cb, b));
        auto sym = cohens_kappa(series(cb, b), series(cb, a));
        EXPECT_EQ(k.value.has_value(), sym.value.has_value());
        if (k.value) {
            EXPECT_NEAR(*k.value, *sym.value, 1e-12);
            EXPECT_LE(*k.value, 1.0 + 1e-12);
            EXPECT_GE(*k.value, -1.0 - 1e-12);
        }
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::string> pa, pb;
        for (auto i : perm) {
            pa.push_back(a[i]);
            pb.push_back(b[i]);
        }
        auto permuted = cohens_kappa(series(cb, pa), series(cb, pb));
        EXPECT_EQ(k.value.has_value(), permuted.value.has_value());
        if (k.value) {
            EXPECT_NEAR(*k.value, *permuted.value, 1e-12);
        }
        auto self = cohens_kappa(series(cb, a), series(cb, a));
        if (self.value) {
            EXPECT_DOUBLE_EQ(*self.value, 1.0);
        }
    }
}

TEST(Kappa, MisalignedSeriesAreRejected) {
    auto cb = small_codebook(2);
    auto a = series(cb, {"A", "B"});
    auto b = LabelSeries::from_entries({{{"y", 0}, cb.require("A")}, {{"y", 1}, cb.require("B")}});
    EXPECT_THROW(cohens_kappa(a, b), ContractError);
    EXPECT_THROW(cohens_kappa(a, series(cb, {"A"})), ContractError);
}

TEST(PerCategoryKappa, IsOneVersusRestBinarization) {
    auto cb = small_codebook(3);
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng() % 40;
        auto a = random_labels(rng, n, 3), b = random_labels(rng, n, 3);
        for (const std::string cat : {"A", "B", "C"}) {
            auto got = per_category_kappa(series(cb, a), series(cb, b), cb, cat);
            auto want = definitional_kappa(one_vs_rest(a, cat), one_vs_rest(b, cat));
            ASSERT_EQ(got.value.has_value(), want.has_value());
            if (want) {
                EXPECT_NEAR(*got.value, *want, 1e-12);
            }
        }
    }
    EXPECT_THROW(per_category_kappa(series(cb, {"A"}), series(cb, {"A"}), cb, "Z"), ContractError);
}

TEST(DeltaKappa, TwoFlipsAgainstOracle) {
    auto cb = small_codebook(3);
    const std::vector<std::string> gold = {"A", "B", "C", "A", "B", "C", "A", "B", "C", "A"};
    const std::vector<std::string> base = {"A", "A", "C", "B", "B", "C", "C", "B", "C", "A"};
    auto verified = base;
    verified[1] = "B";  // corrected
    verified[8] = "A";  // corrupted
    for (const std::string cat : {"A", "B", "C"}) {
        auto d = delta_kappa(series(cb, verified), series(cb, base), series(cb, gold), cb, cat);
        auto want = *definitional_kappa(one_vs_rest(verified, cat), one_vs_rest(gold, cat)) -
                    *definitional_kappa(one_vs_rest(base, cat), one_vs_rest(gold, cat));
        ASSERT_TRUE(d.value) << cat;
        EXPECT_NEAR(*d.value, want, 1e-12) << cat;
    }
}

TEST(DeltaKappa, AntisymmetricAndZeroOnIdenticalRuns) {
    auto cb = small_codebook(4);
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 4 + rng() % 40;
        auto g = series(cb, random_labels(rng, n, 4));
        auto x = series(cb, random_labels(rng, n, 4));
        auto y = series(cb, random_labels(rng, n, 4));
        for (const std::string cat : {"A", "B", "C", "D"}) {
            auto xy = delta_kappa(x, y, g, cb, cat);
            auto yx = delta_kappa(y, x, g, cb, cat);
            auto xx = delta_kappa(x, x, g, cb, cat);
            ASSERT_EQ(xy.value.has_value(), yx.value.has_value());
            if (xy.value) {
                EXPECT_NEAR(*xy.value, -*yx.value, 1e-12);
            }
            if (xx.value) {
                EXPECT_EQ(*xx.value, 0.0);
            }
        }
    }
}

TEST(Disagreement, CorpusBookkeepingRendersExactly) {
    auto cb = small_codebook(2);
    std::vector<std::string> a(1881, "A"), b(1881, "A");
    for (std::size_t i = 0; i < 501; ++i) b[i] = "B";
    auto sa = series(cb, a), sb = series(cb, b);
    EXPECT_EQ(diff_labels(sa, sb).size(), 501u);
    EXPECT_EQ(util::format_percent(disagreement_rate(sa, sb)), "26.63%");
    EXPECT_EQ(sa.size() - diff_labels(sa, sb).size(), 1380u);
}

TEST(Disagreement, BoundaryValues) {
    auto cb = small_codebook(2);
    auto a = series(cb, {"A", "A", "B"});
    EXPECT_DOUBLE_EQ(disagreement_rate(a, a), 0.0);
    EXPECT_DOUBLE_EQ(disagreement_rate(a, series(cb, {"B", "B", "A"})), 1.0);
    EXPECT_EQ(util::format_percent(disagreement_rate(a, series(cb, {"B", "B", "A"}))), "100.00%");
    EXPECT_DOUBLE_EQ(percent_agreement(series(cb, {}), series(cb, {})), 1.0);
}

TEST(Confusion, HandTallyIncludesUnparseable) {
    auto cb = small_codebook(2);
    auto t = confusion_matrix(series(cb, {"A", "B", "UNPARSEABLE", "A"}), series(cb, {"A", "A", "B", "B"}), cb);
    ASSERT_EQ(t.labels, (std::vector<std::string>{"A", "B", "UNPARSEABLE"}));
    const std::vector<std::vector<std::size_t>> want = {{1, 1, 0}, {1, 0, 1}, {0, 0, 0}};
    EXPECT_EQ(t.counts, want);
    EXPECT_EQ(t.total(), 4u);
    EXPECT_EQ(confusion_tsv(t), "gold\\predicted\tA\tB\tUNPARSEABLE\nA\t1\t1\t0\nB\t1\t0\t1\nUNPARSEABLE\t0\t0\t0\n");
}

TEST(Formatting, RelativeImprovement) {
    EXPECT_EQ(format_relative_improvement(0.51, 0.32), "+59.38%");
    EXPECT_EQ(format_relative_improvement(0.32, 0.51), "-37.25%");
    EXPECT_EQ(format_relative_improvement(0.5, 0.0), "NA");
    EXPECT_EQ(format_kappa(std::optional<double>(0.123456)), "0.1235");
    EXPECT_EQ(format_kappa(std::optional<double>(-0.00001)), "0.0000");
}

TEST(Report, ShapeCoversEveryCategoryAndMacro) {
    auto cb = table_codebook();
    std::mt19937_64 rng(41);
    std::vector<std::string> g, p, b;
    for (int i = 0; i < 400; ++i) {
        g.push_back(cb.categories()[rng() % 11].name);
        p.push_back(rng() % 4 ? g.back() : cb.categories()[rng() % 11].name);
        b.push_back(rng() % 2 ? g.back() : cb.categories()[rng() % 11].name);
    }
    p[0] = "UNPARSEABLE";
    auto gold = series(cb, g, "gold"), pred = series(cb, p, "verified"), base = series(cb, b, "baseline");
    auto r = summarize(pred, gold, cb, &base);
    EXPECT_EQ(r.unparseable, 1u);
    ASSERT_EQ(r.categories.size(), 11u);
    double sum = 0.0;
    std::size_t defined = 0;
    for (const auto& row : r.categories) {
        auto want = definitional_kappa(one_vs_rest(p, row.category), one_vs_rest(g, row.category));
        ASSERT_TRUE(want);
        EXPECT_NEAR(*row.kappa.value, *want, 1e-12);
        sum += *want;
        ++defined;
        ASSERT_TRUE(row.delta);
    }
    EXPECT_NEAR(*r.macro.mean, sum / static_cast<double>(defined), 1e-12);
    EXPECT_EQ(r.macro.excluded, 0u);

    auto j = report_json(r);
    EXPECT_EQ(j["categories"].size(), 11u);
    EXPECT_TRUE(j.contains("macro"));
    EXPECT_TRUE(j.contains("relative_improvement_text"));
    EXPECT_EQ(j["n"], 400);
    auto tsv = report_tsv(r);
    EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 12);
}

TEST(Report, UndefinedCategoriesAreExcludedFromMacro) {
    auto cb = small_codebook(3);
    auto gold = series(cb, {"A", "B", "A", "B"});
    auto r = summarize(series(cb, {"A", "B", "B", "B"}), gold, cb);
    EXPECT_TRUE(r.categories[2].kappa.undefined());
    EXPECT_EQ(r.macro.defined, 2u);
    EXPECT_EQ(r.macro.excluded, 1u);
    EXPECT_NE(report_tsv(r).find("C\tNA\tNA\tNA\t0\t0\tNA\t1\n"), std::string::npos);
}

TEST(Aggregate, ThreeAveragesOverRuns) {
    Json r1 = {{"macro", {{"mean", 0.5}}},
               {"categories", {{{"category", "A"}, {"kappa", {{"kappa", 0.4}}}},
                               {{"category", "B"}, {"kappa", {{"kappa", 0.6}}}}}}};
    Json r2 = {{"macro", {{"mean", 0.2}}},
               {"categories", {{{"category", "A"}, {"kappa", {{"kappa", 0.2}}}},
                               {{"category", "B"}, {"kappa", {{"kappa", nullptr}}}}}}};
    auto a = aggregate_reports({{"one", r1}, {"two", r2}});
    EXPECT_NEAR(*a.category_means["A"], 0.3, 1e-12);
    EXPECT_NEAR(*a.category_means["B"], 0.6, 1e-12);
    EXPECT_NEAR(*a.mean_of_run_means, 0.35, 1e-12);
    EXPECT_NEAR(*a.pooled_mean, 0.4, 1e-12);
    EXPECT_EQ(a.pooled_cells, 3u);
}
