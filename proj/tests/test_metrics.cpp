#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "focalconv/metrics.hpp"

using namespace focalconv;

namespace {

ConfusionMatrix from_counts(const std::vector<std::vector<std::int64_t>>& counts) {
    ConfusionMatrix cm(static_cast<int>(counts.size()));
    for (std::size_t t = 0; t < counts.size(); ++t) {
        for (std::size_t p = 0; p < counts.size(); ++p) {
            for (std::int64_t i = 0; i < counts[t][p]; ++i) {
                cm.accumulate(static_cast<int>(t), static_cast<int>(p));
            }
        }
    }
    return cm;
}

ConfusionMatrix random_cm(int k, std::mt19937_64& rng, int max_count = 20) {
    ConfusionMatrix cm(k);
    for (int t = 0; t < k; ++t) {
        for (int p = 0; p < k; ++p) {
            const auto n = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(max_count));
            for (std::int64_t i = 0; i < n; ++i) cm.accumulate(t, p);
        }
    }
    if (cm.total() == 0) cm.accumulate(0, 0);
    return cm;
}

double binary_mcc_oracle(std::int64_t tp, std::int64_t fn, std::int64_t fp, std::int64_t tn) {
    const double num = static_cast<double>(tp) * static_cast<double>(tn) -
                       static_cast<double>(fp) * static_cast<double>(fn);
    const double d1 = static_cast<double>(tp + fp);
    const double d2 = static_cast<double>(tp + fn);
    const double d3 = static_cast<double>(tn + fp);
    const double d4 = static_cast<double>(tn + fn);
    const double denom = d1 * d2 * d3 * d4;
    if (denom == 0.0) return 0.0;
    return num / std::sqrt(denom);
}

}  // namespace

TEST_CASE("accumulate fills cells and rejects bad labels") {
    ConfusionMatrix cm(2);
    cm.accumulate(0, 0);
    CHECK(cm.count(0, 0) == 1);
    CHECK(cm.total() == 1);

    ConfusionMatrix off(2);
    off.accumulate(0, 1);
    off.accumulate(1, 0);
    CHECK(off.count(0, 1) == 1);
    CHECK(off.count(1, 0) == 1);
    CHECK(off.count(0, 0) == 0);

    CHECK_THROWS_AS(cm.accumulate(2, 0), DataError);
    CHECK_THROWS_AS(cm.accumulate(0, -1), DataError);
}

TEST_CASE("row sums tally per-class sample counts over random pairs") {
    std::mt19937_64 rng(17);
    const int k = 5;
    ConfusionMatrix cm(k);
    std::vector<std::int64_t> tally(k, 0);
    for (int i = 0; i < 1000; ++i) {
        const int t = static_cast<int>(rng() % k);
        const int p = static_cast<int>(rng() % k);
        cm.accumulate(t, p);
        ++tally[static_cast<std::size_t>(t)];
    }
    for (int c = 0; c < k; ++c) CHECK(cm.row_sum(c) == tally[static_cast<std::size_t>(c)]);
    CHECK(cm.total() == 1000);
}

TEST_CASE("per-class scores: perfect, degenerate, and hand-computed") {
    ConfusionMatrix perfect = from_counts({{4, 0}, {0, 6}});
    for (const auto& s : per_class_prf(perfect)) {
        CHECK(s.precision == 1.0);
        CHECK(s.recall == 1.0);
        CHECK(s.f1 == 1.0);
    }

    // class 1 never predicted: precision 0 by the 0/0 convention
    ConfusionMatrix degenerate = from_counts({{3, 0}, {2, 0}});
    const auto ds = per_class_prf(degenerate);
    CHECK(ds[1].precision == 0.0);
    CHECK(ds[1].recall == 0.0);
    CHECK(ds[1].f1 == 0.0);

    // [[5,1],[2,3]] by hand from the formulas
    ConfusionMatrix hand = from_counts({{5, 1}, {2, 3}});
    const auto hs = per_class_prf(hand);
    CHECK(hs[0].precision == doctest::Approx(5.0 / 7.0).epsilon(1e-12));
    CHECK(hs[0].recall == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    CHECK(hs[1].precision == doctest::Approx(3.0 / 4.0).epsilon(1e-12));
    CHECK(hs[1].recall == doctest::Approx(3.0 / 5.0).epsilon(1e-12));
    const double f1_0 = 2.0 * (5.0 / 7.0) * (5.0 / 6.0) / (5.0 / 7.0 + 5.0 / 6.0);
    CHECK(hs[0].f1 == doctest::Approx(f1_0).epsilon(1e-12));
}

TEST_CASE("macro equals weighted under equal support; weighted collapses to the only class") {
    ConfusionMatrix equal = from_counts({{3, 1}, {1, 3}});
    const Prf macro = averaged(equal, Average::Macro);
    const Prf weighted = averaged(equal, Average::Weighted);
    CHECK(macro.precision == doctest::Approx(weighted.precision).epsilon(1e-12));
    CHECK(macro.recall == doctest::Approx(weighted.recall).epsilon(1e-12));
    CHECK(macro.f1 == doctest::Approx(weighted.f1).epsilon(1e-12));

    ConfusionMatrix lone = from_counts({{7, 3}, {0, 0}});
    const auto scores = per_class_prf(lone);
    const Prf w = averaged(lone, Average::Weighted);
    CHECK(w.precision == doctest::Approx(scores[0].precision).epsilon(1e-12));
    CHECK(w.recall == doctest::Approx(scores[0].recall).epsilon(1e-12));
    CHECK(w.f1 == doctest::Approx(scores[0].f1).epsilon(1e-12));
}

TEST_CASE("averaged matches an independent per-class formula evaluation") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 6);
        ConfusionMatrix cm = random_cm(k, rng);
        double mp = 0.0;
        double mr = 0.0;
        double mf = 0.0;
        double wp = 0.0;
        double wr = 0.0;
        double wf = 0.0;
        for (int c = 0; c < k; ++c) {
            double tp = 0.0;
            double fp = 0.0;
            double fn = 0.0;
            for (int o = 0; o < k; ++o) {
                if (o == c) {
                    tp = static_cast<double>(cm.count(c, c));
                } else {
                    fp += static_cast<double>(cm.count(o, c));
                    fn += static_cast<double>(cm.count(c, o));
                }
            }
            const double prec = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
            const double rec = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
            const double f1 = (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
            const double support = tp + fn;
            mp += prec;
            mr += rec;
            mf += f1;
            wp += support * prec;
            wr += support * rec;
            wf += support * f1;
        }
        const double total = static_cast<double>(cm.total());
        const Prf macro = averaged(cm, Average::Macro);
        const Prf weighted = averaged(cm, Average::Weighted);
        CHECK(macro.precision == doctest::Approx(mp / k).epsilon(1e-12));
        CHECK(macro.recall == doctest::Approx(mr / k).epsilon(1e-12));
        CHECK(macro.f1 == doctest::Approx(mf / k).epsilon(1e-12));
        CHECK(weighted.precision == doctest::Approx(wp / total).epsilon(1e-12));
        CHECK(weighted.recall == doctest::Approx(wr / total).epsilon(1e-12));
        CHECK(weighted.f1 == doctest::Approx(wf / total).epsilon(1e-12));
    }
}

TEST_CASE("mcc fixed points") {
    CHECK(mcc(from_counts({{5, 0}, {0, 7}})) == doctest::Approx(1.0).epsilon(1e-12));
    // all mass in one predicted column degenerates the denominator
    CHECK(mcc(from_counts({{4, 0}, {6, 0}})) == 0.0);
    CHECK(mcc(from_counts({{1, 1}, {1, 1}})) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("multiclass mcc equals the binary Matthews formula on all small 2x2 matrices") {
    for (std::int64_t tp = 0; tp <= 10; ++tp)
        for (std::int64_t fn = 0; fn <= 10; ++fn)
            for (std::int64_t fp = 0; fp <= 10; ++fp)
                for (std::int64_t tn = 0; tn <= 10; ++tn) {
                    if (tp + fn + fp + tn == 0) continue;
                    ConfusionMatrix cm = from_counts({{tp, fn}, {fp, tn}});
                    const double expect = binary_mcc_oracle(tp, fn, fp, tn);
                    CHECK(mcc(cm) == doctest::Approx(expect).epsilon(1e-12));
                }
}

TEST_CASE("accuracy fixed points and empty-matrix error") {
    CHECK(accuracy(from_counts({{4, 0}, {0, 4}})) == 1.0);
    CHECK(accuracy(from_counts({{5, 1}, {2, 3}})) == doctest::Approx(8.0 / 11.0).epsilon(1e-12));
    ConfusionMatrix empty(3);
    CHECK_THROWS_AS(accuracy(empty), DataError);
}

TEST_CASE("relabeling by a permutation leaves accuracy, mcc, macro unchanged") {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 30; ++trial) {
        const int k = 3 + static_cast<int>(rng() % 4);
        ConfusionMatrix cm = random_cm(k, rng);
        std::vector<int> perm(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) perm[static_cast<std::size_t>(i)] = i;
        for (int i = k - 1; i > 0; --i) {
            std::swap(perm[static_cast<std::size_t>(i)],
                      perm[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(i + 1))]);
        }
        ConfusionMatrix relabeled(k);
        for (int t = 0; t < k; ++t)
            for (int p = 0; p < k; ++p)
                for (std::int64_t i = 0; i < cm.count(t, p); ++i)
                    relabeled.accumulate(perm[static_cast<std::size_t>(t)],
                                         perm[static_cast<std::size_t>(p)]);

        CHECK(accuracy(relabeled) == doctest::Approx(accuracy(cm)).epsilon(1e-12));
        CHECK(mcc(relabeled) == doctest::Approx(mcc(cm)).epsilon(1e-12));
        const Prf a = averaged(cm, Average::Macro);
        const Prf b = averaged(relabeled, Average::Macro);
        CHECK(a.precision == doctest::Approx(b.precision).epsilon(1e-12));
        CHECK(a.recall == doctest::Approx(b.recall).epsilon(1e-12));
        CHECK(a.f1 == doctest::Approx(b.f1).epsilon(1e-12));
    }
}

TEST_CASE("weighted recall equals accuracy on random matrices") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 7);
        ConfusionMatrix cm = random_cm(k, rng);
        CHECK(averaged(cm, Average::Weighted).recall ==
              doctest::Approx(accuracy(cm)).epsilon(1e-12));
    }
}

TEST_CASE("merge adds counts elementwise") {
    ConfusionMatrix a = from_counts({{1, 2}, {3, 4}});
    ConfusionMatrix b = from_counts({{5, 0}, {1, 1}});
    a.merge(b);
    CHECK(a.count(0, 0) == 6);
    CHECK(a.count(0, 1) == 2);
    CHECK(a.count(1, 0) == 4);
    CHECK(a.count(1, 1) == 5);
    CHECK(a.total() == 17);
}

TEST_CASE("reports render both formats") {
    ConfusionMatrix cm = from_counts({{5, 1}, {2, 3}});
    const std::string table = metrics_table(cm);
    CHECK(table.find("Macro Average") != std::string::npos);
    CHECK(table.find("Weighted Average") != std::string::npos);
    CHECK(table.find("Accuracy") != std::string::npos);
    CHECK(table.find("MCC") != std::string::npos);
    const std::string js = metrics_json(cm);
    CHECK(js.find("\"accuracy\"") != std::string::npos);
    CHECK(js.find("\"mcc\"") != std::string::npos);
    CHECK(js.find("\"weighted\"") != std::string::npos);
}
