#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kan/metrics.hpp"
#include "test_support.hpp"

using namespace kan;
using namespace kan::testing;

namespace {

ConfusionMatrix cm_2x2(Index a, Index b, Index c, Index d) {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = a;
    cm.at(0, 1) = b;
    cm.at(1, 0) = c;
    cm.at(1, 1) = d;
    return cm;
}

ConfusionMatrix random_cm(Xoshiro256ss& rng, int classes, Index max_cell = 200) {
    ConfusionMatrix cm(classes);
    for (int i = 0; i < classes; ++i)
        for (int j = 0; j < classes; ++j) cm.at(i, j) = static_cast<Index>(rng.below(max_cell + 1));
    if (cm.total() == 0) cm.at(0, 0) = 1;
    return cm;
}

// Direct per-class formula evaluation, independent of basic_metrics' loop.
struct OracleBasic {
    double accuracy;
    std::vector<double> precision, recall, f1;
};

OracleBasic oracle_basic(const ConfusionMatrix& cm) {
    OracleBasic o;
    const int C = cm.classes();
    double correct = 0;
    for (int c = 0; c < C; ++c) correct += static_cast<double>(cm.at(c, c));
    o.accuracy = correct / static_cast<double>(cm.total());
    for (int c = 0; c < C; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < C; ++j) {
                if (i == c && j == c) tp += static_cast<double>(cm.at(i, j));
                else if (j == c) fp += static_cast<double>(cm.at(i, j));
                else if (i == c) fn += static_cast<double>(cm.at(i, j));
            }
        const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        o.precision.push_back(p);
        o.recall.push_back(r);
        o.f1.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    }
    return o;
}

double oracle_auc_paircount(const std::vector<std::pair<double, int>>& scored) {
    double concordant = 0, ties = 0;
    Index pos = 0, neg = 0;
    for (const auto& [sp, yp] : scored) {
        if (yp) ++pos;
        else ++neg;
    }
    for (const auto& [sp, yp] : scored) {
        if (!yp) continue;
        for (const auto& [sn, yn] : scored) {
            if (yn) continue;
            if (sp > sn) concordant += 1;
            else if (sp == sn) ties += 1;
        }
    }
    return (concordant + 0.5 * ties) / (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace

TEST_CASE("basic metrics on the worked 2x2 example") {
    ConfusionMatrix cm = cm_2x2(50, 10, 5, 35);
    BasicMetrics m = basic_metrics(cm);
    CHECK(m.accuracy == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(m.precision[0] == doctest::Approx(50.0 / 55.0).epsilon(1e-12));
    CHECK(m.recall[0] == doctest::Approx(50.0 / 60.0).epsilon(1e-12));
    CHECK(m.f1[0] == doctest::Approx(2 * (50.0 / 55.0) * (50.0 / 60.0) /
                                     (50.0 / 55.0 + 50.0 / 60.0))
                         .epsilon(1e-12));
    CHECK(m.f1[0] == doctest::Approx(0.8696).epsilon(1e-4));
}

TEST_CASE("diagonal confusion matrix is a perfect classifier") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 5;
    cm.at(1, 1) = 9;
    cm.at(2, 2) = 2;
    BasicMetrics m = basic_metrics(cm);
    CHECK(m.accuracy == 1.0);
    CHECK(m.macro_precision == 1.0);
    CHECK(m.macro_recall == 1.0);
    CHECK(m.macro_f1 == 1.0);
    CHECK(kappa(cm).value == doctest::Approx(1.0));
    CHECK(mcc(cm).value == doctest::Approx(1.0));
    CHECK(error_rate(cm) == 0.0);
}

TEST_CASE("empty confusion matrix is a contract error") {
    ConfusionMatrix cm(2);
    CHECK_THROWS_AS(basic_metrics(cm), ContractError);
    CHECK_THROWS_AS(kappa(cm), ContractError);
    CHECK_THROWS_AS(mcc(cm), ContractError);
    CHECK_THROWS_AS(error_rate(cm), ContractError);
}

TEST_CASE("kappa worked example and degenerate cases") {
    ConfusionMatrix cm = cm_2x2(50, 10, 5, 35);
    KappaResult k = kappa(cm);
    CHECK_FALSE(k.degenerate);
    CHECK(k.value == doctest::Approx(0.34 / 0.49).epsilon(1e-12));

    // outer product of marginals: observed equals expected agreement
    ConfusionMatrix ind(2);
    // marginals (30, 70) x (40, 60), scaled by 10 to stay integral
    ind.at(0, 0) = 30 * 40;
    ind.at(0, 1) = 30 * 60;
    ind.at(1, 0) = 70 * 40;
    ind.at(1, 1) = 70 * 60;
    CHECK(std::abs(kappa(ind).value) < 1e-9);

    ConfusionMatrix single(2);
    single.at(0, 0) = 17;
    KappaResult deg = kappa(single);
    CHECK(deg.degenerate);
    CHECK(deg.value == 0.0);
}

TEST_CASE("kappa equals one exactly when the matrix is diagonal") {
    Xoshiro256ss rng(40);
    for (int t = 0; t < 200; ++t) {
        ConfusionMatrix cm = random_cm(rng, 2 + static_cast<int>(rng.below(4)));
        bool diagonal = true;
        for (int i = 0; i < cm.classes() && diagonal; ++i)
            for (int j = 0; j < cm.classes(); ++j)
                if (i != j && cm.at(i, j) > 0) {
                    diagonal = false;
                    break;
                }
        KappaResult k = kappa(cm);
        if (k.degenerate) continue;
        if (diagonal) CHECK(k.value == doctest::Approx(1.0).epsilon(1e-12));
        else CHECK(k.value < 1.0);
    }
}

TEST_CASE("mcc worked example and degenerate predictions") {
    ConfusionMatrix cm = cm_2x2(50, 10, 5, 35);
    MccResult m = mcc(cm);
    CHECK_FALSE(m.degenerate);
    CHECK(m.value == doctest::Approx(1700.0 / std::sqrt(5940000.0)).epsilon(1e-12));
    CHECK(m.value == doctest::Approx(0.6976).epsilon(1e-4));

    ConfusionMatrix onecol(2);
    onecol.at(0, 0) = 7;
    onecol.at(1, 0) = 3;
    MccResult deg = mcc(onecol);
    CHECK(deg.degenerate);
    CHECK(deg.value == 0.0);
}

TEST_CASE("multiclass mcc reduces to the binary formula at C=2") {
    Xoshiro256ss rng(41);
    for (int t = 0; t < 1000; ++t) {
        ConfusionMatrix cm = random_cm(rng, 2);
        const double tp = static_cast<double>(cm.at(0, 0));
        const double fn = static_cast<double>(cm.at(0, 1));
        const double fp = static_cast<double>(cm.at(1, 0));
        const double tn = static_cast<double>(cm.at(1, 1));
        const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
        MccResult m = mcc(cm);
        if (denom <= 0) {
            CHECK(m.degenerate);
            CHECK(m.value == 0.0);
        } else {
            const double binary = (tp * tn - fp * fn) / std::sqrt(denom);
            CHECK(std::abs(m.value - binary) < 1e-12);
        }
    }
}

TEST_CASE("error rate worked example and complement identity") {
    ConfusionMatrix cm = cm_2x2(50, 10, 5, 35);
    CHECK(error_rate(cm) == doctest::Approx(0.15).epsilon(1e-12));
    Xoshiro256ss rng(42);
    for (int t = 0; t < 100; ++t) {
        ConfusionMatrix r = random_cm(rng, 2 + static_cast<int>(rng.below(5)));
        CHECK(error_rate(r) + basic_metrics(r).accuracy == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("chi-square independence test basics") {
    // outer-product matrix: observed == expected everywhere
    ConfusionMatrix ind(2);
    ind.at(0, 0) = 30 * 40;
    ind.at(0, 1) = 30 * 60;
    ind.at(1, 0) = 70 * 40;
    ind.at(1, 1) = 70 * 60;
    ChiSquareResult r = chi_square_p(ind);
    CHECK(r.chi2 == doctest::Approx(0.0));
    CHECK(r.p == doctest::Approx(1.0));
    CHECK(r.dof == 1);

    // the classic critical value
    CHECK(regularized_gamma_q(0.5, 3.841 / 2.0) == doctest::Approx(0.05).epsilon(1e-2));
    CHECK(std::abs(regularized_gamma_q(0.5, 3.841 / 2.0) - 0.05) < 5e-4);

    ConfusionMatrix zero_col(2);
    zero_col.at(0, 0) = 5;
    zero_col.at(1, 0) = 5;
    CHECK_THROWS_WITH_AS(chi_square_p(zero_col), doctest::Contains("column 1"), Error);
}

TEST_CASE("chi-square p decreases as chi2 grows, strongly diagonal CM is significant") {
    double prev = 1.0;
    for (double chi2 : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
        const double p = regularized_gamma_q(0.5, chi2 / 2.0);
        CHECK(p < prev);
        prev = p;
    }
    ConfusionMatrix cm(4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) cm.at(i, j) = i == j ? 130 : 4;
    ChiSquareResult r = chi_square_p(cm);
    CHECK(r.dof == 9);
    CHECK(r.p < 0.05);
}

TEST_CASE("gamma Q matches known reference points to 1e-10") {
    // scipy.special.gammaincc reference values
    CHECK(std::abs(regularized_gamma_q(0.5, 1.0) - 0.15729920705028105) < 1e-10);
    CHECK(std::abs(regularized_gamma_q(2.0, 2.0) - 0.40600584970983794) < 1e-10);
    CHECK(std::abs(regularized_gamma_q(4.5, 1.5) - 0.9642949726850891) < 1e-10);
    CHECK(std::abs(regularized_gamma_q(8.0, 20.0) - 0.000778590082507362) < 1e-12);
    CHECK(regularized_gamma_q(3.0, 0.0) == 1.0);
}

TEST_CASE("roc auc point cases") {
    // perfectly separated scores
    Tensor<float> sep(Shape{4, 2}, {0.9f, 0.1f, 0.8f, 0.2f, 0.2f, 0.8f, 0.1f, 0.9f});
    RocResult r = roc_auc(sep, {0, 0, 1, 1});
    CHECK(r.per_class[0]->auc == doctest::Approx(1.0));
    CHECK(r.per_class[1]->auc == doctest::Approx(1.0));
    CHECK(r.micro->auc == doctest::Approx(1.0));

    // scores carry no information: tie rule gives one half
    Tensor<float> flat(Shape{4, 2}, 0.5f);
    RocResult rf = roc_auc(flat, {0, 1, 0, 1});
    CHECK(rf.per_class[0]->auc == doctest::Approx(0.5));
    CHECK(rf.micro->auc == doctest::Approx(0.5));

    // the 4-sample worked example: 3 wins of 4 pairs
    Tensor<float> ex(Shape{4, 2}, {0.1f, 0.9f, 0.2f, 0.8f, 0.7f, 0.3f, 0.8f, 0.2f});
    RocResult re = roc_auc(ex, {1, 0, 1, 0});
    CHECK(re.per_class[1]->auc == doctest::Approx(0.75));
}

TEST_CASE("roc auc reports absent for single-class columns") {
    Tensor<float> s(Shape{3, 2}, {0.9f, 0.1f, 0.8f, 0.2f, 0.7f, 0.3f});
    RocResult r = roc_auc(s, {0, 0, 0});
    CHECK_FALSE(r.per_class[0].has_value());
    CHECK_FALSE(r.per_class[1].has_value());
}

TEST_CASE("roc auc equals brute-force pair counting on random instances") {
    Xoshiro256ss rng(43);
    for (int t = 0; t < 60; ++t) {
        const Index n = 5 + static_cast<Index>(rng.below(196));
        const int C = 2 + static_cast<int>(rng.below(3));
        Tensor<float> scores(Shape{n, C});
        std::vector<int> labels;
        for (Index i = 0; i < n; ++i) {
            labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(C))));
            for (int c = 0; c < C; ++c)
                // coarse quantization forces plenty of ties
                scores[i * C + c] = static_cast<float>(rng.below(8)) / 8.0f;
        }
        RocResult r = roc_auc(scores, labels);
        for (int c = 0; c < C; ++c) {
            std::vector<std::pair<double, int>> scored;
            for (Index i = 0; i < n; ++i)
                scored.emplace_back(scores[i * C + c], labels[static_cast<std::size_t>(i)] == c ? 1 : 0);
            Index pos = 0;
            for (auto& [s, y] : scored) pos += y;
            if (pos == 0 || pos == n) {
                CHECK_FALSE(r.per_class[static_cast<std::size_t>(c)].has_value());
                continue;
            }
            CHECK(std::abs(r.per_class[static_cast<std::size_t>(c)]->auc - oracle_auc_paircount(scored)) < 1e-12);
        }
    }
}

TEST_CASE("metric oracle agreement on random matrices") {
    Xoshiro256ss rng(44);
    for (int t = 0; t < 1000; ++t) {
        ConfusionMatrix cm = random_cm(rng, 2 + static_cast<int>(rng.below(5)));
        BasicMetrics m = basic_metrics(cm);
        OracleBasic o = oracle_basic(cm);
        CHECK(std::abs(m.accuracy - o.accuracy) < 1e-12);
        double mp = 0, mr = 0, mf = 0;
        for (int c = 0; c < cm.classes(); ++c) {
            CHECK(std::abs(m.precision[c] - o.precision[static_cast<std::size_t>(c)]) < 1e-12);
            CHECK(std::abs(m.recall[c] - o.recall[static_cast<std::size_t>(c)]) < 1e-12);
            CHECK(std::abs(m.f1[c] - o.f1[static_cast<std::size_t>(c)]) < 1e-12);
            mp += o.precision[static_cast<std::size_t>(c)];
            mr += o.recall[static_cast<std::size_t>(c)];
            mf += o.f1[static_cast<std::size_t>(c)];
        }
        CHECK(std::abs(m.macro_precision - mp / cm.classes()) < 1e-12);
        CHECK(std::abs(m.macro_recall - mr / cm.classes()) < 1e-12);
        CHECK(std::abs(m.macro_f1 - mf / cm.classes()) < 1e-12);
    }
}

TEST_CASE("macro f1 is equivariant under label permutation") {
    Xoshiro256ss rng(45);
    for (int t = 0; t < 50; ++t) {
        const int C = 3 + static_cast<int>(rng.below(3));
        ConfusionMatrix cm = random_cm(rng, C);
        std::vector<int> perm(static_cast<std::size_t>(C));
        std::iota(perm.begin(), perm.end(), 0);
        fisher_yates(perm, rng);
        ConfusionMatrix pcm(C);
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < C; ++j)
                pcm.at(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]) = cm.at(i, j);
        if (cm.total() == 0) continue;
        CHECK(std::abs(basic_metrics(cm).macro_f1 - basic_metrics(pcm).macro_f1) < 1e-12);
    }
}

TEST_CASE("metrics report serializes the pinned CSV header") {
    ConfusionMatrix cm = cm_2x2(50, 10, 5, 35);
    MetricsReport r = compute_metrics_report(cm);
    const std::string csv = r.to_csv();
    CHECK(csv.substr(0, csv.find('\n')) ==
          "accuracy,precision,recall,f1,kappa,mcc,error_rate,chi2_p");
    CHECK(r.to_table().find("accuracy") != std::string::npos);
}
