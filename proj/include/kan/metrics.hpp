#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kan/common.hpp"
#include "kan/tensor.hpp"

namespace kan {

// Rows are true classes, columns are predictions.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes) : counts_(classes, classes) {
        require<ContractError>(classes >= 1, "ConfusionMatrix: need at least one class");
        counts_.setZero();
    }

    void add(int truth, int pred, Index count = 1) {
        require<IndexError>(truth >= 0 && truth < classes() && pred >= 0 && pred < classes(),
                            "ConfusionMatrix::add: (", truth, ",", pred, ") out of range for ",
                            classes(), " classes");
        require<ContractError>(count >= 0, "ConfusionMatrix::add: negative count");
        counts_(truth, pred) += count;
    }

    int classes() const { return static_cast<int>(counts_.rows()); }
    Index at(int i, int j) const { return counts_(i, j); }
    Index& at(int i, int j) { return counts_(i, j); }
    Index total() const { return counts_.sum(); }
    Index trace() const { return counts_.trace(); }
    Index row_sum(int i) const { return counts_.row(i).sum(); }
    Index col_sum(int j) const { return counts_.col(j).sum(); }

    bool operator==(const ConfusionMatrix& o) const { return counts_ == o.counts_; }

private:
    Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> counts_;
};

struct BasicMetrics {
    double accuracy = 0;
    std::vector<double> precision, recall, f1;
    std::vector<bool> no_predicted_positives;  // precision forced to 0 for these classes
    double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
    double micro_precision = 0, micro_recall = 0, micro_f1 = 0;
    double weighted_precision = 0, weighted_recall = 0, weighted_f1 = 0;
};

inline BasicMetrics basic_metrics(const ConfusionMatrix& cm) {
    require<ContractError>(cm.total() > 0, "basic_metrics: empty confusion matrix");
    const int C = cm.classes();
    BasicMetrics r;
    r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
    r.precision.resize(C);
    r.recall.resize(C);
    r.f1.resize(C);
    r.no_predicted_positives.resize(C, false);
    for (int c = 0; c < C; ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        const double pred = static_cast<double>(cm.col_sum(c));
        const double truth = static_cast<double>(cm.row_sum(c));
        if (pred == 0) {
            r.precision[c] = 0.0;
            r.no_predicted_positives[c] = true;
        } else {
            r.precision[c] = tp / pred;
        }
        r.recall[c] = truth == 0 ? 0.0 : tp / truth;
        const double pr = r.precision[c] + r.recall[c];
        r.f1[c] = pr == 0 ? 0.0 : 2.0 * r.precision[c] * r.recall[c] / pr;
        r.macro_precision += r.precision[c];
        r.macro_recall += r.recall[c];
        r.macro_f1 += r.f1[c];
        const double w = truth / static_cast<double>(cm.total());
        r.weighted_precision += w * r.precision[c];
        r.weighted_recall += w * r.recall[c];
        r.weighted_f1 += w * r.f1[c];
    }
    r.macro_precision /= C;
    r.macro_recall /= C;
    r.macro_f1 /= C;
    // One-vs-rest micro counts collapse to accuracy on a square matrix.
    r.micro_precision = r.micro_recall = r.micro_f1 = r.accuracy;
    return r;
}

struct KappaResult {
    double value = 0;
    bool degenerate = false;  // expected agreement 1, single occupied cell
};

inline KappaResult kappa(const ConfusionMatrix& cm) {
    require<ContractError>(cm.total() > 0, "kappa: empty confusion matrix");
    const double n = static_cast<double>(cm.total());
    const double po = static_cast<double>(cm.trace()) / n;
    double pe = 0;
    for (int c = 0; c < cm.classes(); ++c)
        pe += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c)) / (n * n);
    if (pe >= 1.0) return {0.0, true};
    return {(po - pe) / (1.0 - pe), false};
}

struct MccResult {
    double value = 0;
    bool degenerate = false;  // zero factor under the radical
};

// Multi-category Matthews correlation (covariance form); reduces to the
// binary TP/TN/FP/FN formula at C = 2.
inline MccResult mcc(const ConfusionMatrix& cm) {
    require<ContractError>(cm.total() > 0, "mcc: empty confusion matrix");
    const int C = cm.classes();
    const double n = static_cast<double>(cm.total());
    const double trace = static_cast<double>(cm.trace());
    double dot = 0, sum_p2 = 0, sum_t2 = 0;
    for (int c = 0; c < C; ++c) {
        const double p = static_cast<double>(cm.col_sum(c));
        const double t = static_cast<double>(cm.row_sum(c));
        dot += p * t;
        sum_p2 += p * p;
        sum_t2 += t * t;
    }
    const double cov = trace * n - dot;
    const double dp = n * n - sum_p2;
    const double dt = n * n - sum_t2;
    if (dp <= 0.0 || dt <= 0.0) return {0.0, true};
    return {cov / std::sqrt(dp * dt), false};
}

inline double error_rate(const ConfusionMatrix& cm) {
    require<ContractError>(cm.total() > 0, "error_rate: empty confusion matrix");
    return static_cast<double>(cm.total() - cm.trace()) / static_cast<double>(cm.total());
}

// Regularized upper incomplete gamma Q(a, x): series for x < a+1, modified
// Lentz continued fraction otherwise (Numerical Recipes 6.2 scheme).
inline double regularized_gamma_q(double a, double x) {
    require<ContractError>(a > 0 && x >= 0, "regularized_gamma_q: need a > 0, x >= 0");
    if (x == 0.0) return 1.0;
    const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
    if (x < a + 1.0) {
        double term = 1.0 / a;
        double sum = term;
        double denom = a;
        for (int i = 0; i < 10000; ++i) {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
        }
        return 1.0 - sum * std::exp(log_prefix);
    }
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    return std::exp(log_prefix) * h;
}

struct ChiSquareResult {
    double chi2 = 0;
    int dof = 0;
    double p = 1;
};

// Chi-square independence test on the square confusion matrix, dof = (C-1)^2.
inline ChiSquareResult chi_square_p(const ConfusionMatrix& cm) {
    require<ContractError>(cm.total() > 0, "chi_square_p: empty confusion matrix");
    const int C = cm.classes();
    const double n = static_cast<double>(cm.total());
    for (int c = 0; c < C; ++c) {
        require<Error>(cm.row_sum(c) > 0, "chi_square_p: zero marginal at row ", c);
        require<Error>(cm.col_sum(c) > 0, "chi_square_p: zero marginal at column ", c);
    }
    ChiSquareResult r;
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) {
            const double expected =
                static_cast<double>(cm.row_sum(i)) * static_cast<double>(cm.col_sum(j)) / n;
            const double diff = static_cast<double>(cm.at(i, j)) - expected;
            r.chi2 += diff * diff / expected;
        }
    r.dof = (C - 1) * (C - 1);
    r.p = regularized_gamma_q(r.dof / 2.0, r.chi2 / 2.0);
    return r;
}

struct RocCurve {
    std::vector<double> fpr, tpr, threshold;
    double auc = 0;
};

struct RocResult {
    std::vector<std::optional<RocCurve>> per_class;
    std::optional<RocCurve> micro;
};

namespace detail {

// One-vs-rest sweep over distinct score thresholds with trapezoidal
// integration; equal scores collapse into one step, which averages ties
// exactly like the rank formulation.
inline std::optional<RocCurve> binary_roc(const std::vector<std::pair<double, int>>& scored) {
    Index pos = 0, neg = 0;
    for (const auto& [s, y] : scored) (y ? pos : neg) += 1;
    if (pos == 0 || neg == 0) return std::nullopt;

    std::vector<std::size_t> order(scored.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&scored](std::size_t a, std::size_t b) {
        return scored[a].first > scored[b].first;
    });

    RocCurve curve;
    curve.fpr.push_back(0.0);
    curve.tpr.push_back(0.0);
    curve.threshold.push_back(std::numeric_limits<double>::infinity());
    Index tp = 0, fp = 0;
    double auc = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scored[order[i]].first;
        Index dtp = 0, dfp = 0;
        while (i < order.size() && scored[order[i]].first == s) {
            (scored[order[i]].second ? dtp : dfp) += 1;
            ++i;
        }
        const double fpr0 = static_cast<double>(fp) / neg;
        const double tpr0 = static_cast<double>(tp) / pos;
        tp += dtp;
        fp += dfp;
        const double fpr1 = static_cast<double>(fp) / neg;
        const double tpr1 = static_cast<double>(tp) / pos;
        auc += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0;
        curve.fpr.push_back(fpr1);
        curve.tpr.push_back(tpr1);
        curve.threshold.push_back(s);
    }
    curve.auc = auc;
    return curve;
}

}  // namespace detail

// scores: [N x C] class scores (any monotone score; softmax probabilities in
// practice). Per-class one-vs-rest AUC plus the micro-average over all
// (score, indicator) pairs pooled across classes.
template <typename Scalar>
RocResult roc_auc(const Tensor<Scalar>& scores, const std::vector<int>& labels) {
    require<ShapeError>(scores.rank() == 2, "roc_auc: scores must be NxC, got ",
                        shape_str(scores.shape()));
    const Index N = scores.dim(0), C = scores.dim(1);
    require<ContractError>(N >= 2, "roc_auc: need at least two samples, got ", N);
    require<ShapeError>(static_cast<Index>(labels.size()) == N, "roc_auc: ", labels.size(),
                        " labels for ", N, " rows");
    for (int y : labels)
        require<IndexError>(y >= 0 && y < C, "roc_auc: label ", y, " out of range [0,", C, ")");

    RocResult result;
    std::vector<std::pair<double, int>> pooled;
    pooled.reserve(static_cast<std::size_t>(N * C));
    for (Index c = 0; c < C; ++c) {
        std::vector<std::pair<double, int>> scored(static_cast<std::size_t>(N));
        for (Index i = 0; i < N; ++i) {
            scored[static_cast<std::size_t>(i)] = {static_cast<double>(scores[i * C + c]),
                                                   labels[static_cast<std::size_t>(i)] == c ? 1 : 0};
            pooled.push_back(scored[static_cast<std::size_t>(i)]);
        }
        result.per_class.push_back(detail::binary_roc(scored));
    }
    result.micro = detail::binary_roc(pooled);
    return result;
}

struct MetricsReport {
    BasicMetrics basic;
    KappaResult kappa;
    MccResult mcc;
    double error_rate = 0;
    ChiSquareResult chi2;
    bool chi2_valid = false;  // false when a marginal is zero (degenerate predictions)
    std::vector<std::optional<double>> per_class_auc;
    std::optional<double> micro_auc;

    // Flat CSV: one header line, one value line. Averaging rule selectable;
    // macro is what the summary tables report.
    std::string to_csv(bool weighted = false) const {
        const std::string header = "accuracy,precision,recall,f1,kappa,mcc,error_rate,chi2_p";
        const double p = weighted ? basic.weighted_precision : basic.macro_precision;
        const double rc = weighted ? basic.weighted_recall : basic.macro_recall;
        const double f = weighted ? basic.weighted_f1 : basic.macro_f1;
        const std::string values = fmt(basic.accuracy) + "," + fmt(p) + "," + fmt(rc) + "," +
                                   fmt(f) + "," + fmt(kappa.value) + "," + fmt(mcc.value) + "," +
                                   fmt(error_rate) + "," + (chi2_valid ? fmt(chi2.p) : "nan");
        return header + "\n" + values + "\n";
    }

    std::string to_table() const {
        std::ostringstream os;
        auto row = [&os](const std::string& k, const std::string& v) {
            os << "  " << k;
            for (std::size_t i = k.size(); i < 18; ++i) os << ' ';
            os << v << '\n';
        };
        row("accuracy", fmt(basic.accuracy));
        row("precision(macro)", fmt(basic.macro_precision));
        row("recall(macro)", fmt(basic.macro_recall));
        row("f1(macro)", fmt(basic.macro_f1));
        row("kappa", fmt(kappa.value) + (kappa.degenerate ? " (degenerate)" : ""));
        row("mcc", fmt(mcc.value) + (mcc.degenerate ? " (degenerate)" : ""));
        row("error_rate", fmt(error_rate));
        if (chi2_valid) {
            row("chi2", fmt(chi2.chi2));
            row("chi2_dof", std::to_string(chi2.dof));
            row("chi2_p", fmt(chi2.p));
        } else {
            row("chi2_p", "n/a (zero marginal)");
        }
        for (std::size_t c = 0; c < per_class_auc.size(); ++c)
            row("auc[" + std::to_string(c) + "]", per_class_auc[c] ? fmt(*per_class_auc[c]) : "n/a");
        if (micro_auc) row("auc(micro)", fmt(*micro_auc));
        return os.str();
    }

    static std::string fmt(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return buf;
    }
};

inline MetricsReport compute_metrics_report(const ConfusionMatrix& cm,
                                            const RocResult* roc = nullptr) {
    MetricsReport r;
    r.basic = basic_metrics(cm);
    r.kappa = kappa(cm);
    r.mcc = mcc(cm);
    r.error_rate = error_rate(cm);
    try {
        r.chi2 = chi_square_p(cm);
        r.chi2_valid = true;
    } catch (const Error&) {
        r.chi2_valid = false;
    }
    if (roc) {
        for (const auto& c : roc->per_class)
            r.per_class_auc.push_back(c ? std::optional<double>(c->auc) : std::nullopt);
        if (roc->micro) r.micro_auc = roc->micro->auc;
    }
    return r;
}

}  // namespace kan
