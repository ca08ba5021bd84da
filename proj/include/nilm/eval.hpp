#pragma once

// Multi-label metrics: per-sample F1 averaged over samples, pooled
// per-class F1 and per-k (active appliance count) stress reports.
//
// Degenerate convention: when a sample (or class) has no positives in
// either truth or prediction, its F1 is 1.0.

#include <cstdint>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "nilm/error.hpp"
#include "nilm/io.hpp"

namespace nilm {

using LabelRow = std::vector<std::uint8_t>;
using LabelMatrix = std::vector<LabelRow>;

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    std::uint64_t total() const { return tp + fp + tn + fn; }
    double f1() const {
        const auto denom = 2 * tp + fp + fn;
        return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts confusion(const LabelRow& pred, const LabelRow& truth) {
    if (pred.size() != truth.size())
        throw InvalidArgument("confusion: length mismatch (" + std::to_string(pred.size()) + " vs " +
                              std::to_string(truth.size()) + ")");
    ConfusionCounts c;
    for (std::size_t j = 0; j < pred.size(); ++j) {
        const bool p = pred[j] != 0, t = truth[j] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline double f1_sample(const LabelRow& pred, const LabelRow& truth) { return confusion(pred, truth).f1(); }

namespace detail {

inline void check_shapes(const LabelMatrix& preds, const LabelMatrix& truths) {
    if (preds.size() != truths.size())
        throw InvalidArgument("metrics: " + std::to_string(preds.size()) + " predictions vs " +
                              std::to_string(truths.size()) + " truths");
}

}  // namespace detail

inline double f1_mean(const LabelMatrix& preds, const LabelMatrix& truths) {
    detail::check_shapes(preds, truths);
    detail::require<InvalidArgument>(!preds.empty(), "f1_mean: no samples");
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) acc += f1_sample(preds[i], truths[i]);
    return acc / static_cast<double>(preds.size());
}

/// Column-wise counts pooled over samples.
inline std::vector<ConfusionCounts> per_class_counts(const LabelMatrix& preds, const LabelMatrix& truths) {
    detail::check_shapes(preds, truths);
    if (preds.empty()) return {};
    std::vector<ConfusionCounts> out(truths.front().size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].size() != out.size() || truths[i].size() != out.size())
            throw InvalidArgument("per_class: ragged label rows");
        for (std::size_t j = 0; j < out.size(); ++j)
            out[j] += confusion(LabelRow{preds[i][j]}, LabelRow{truths[i][j]});
    }
    return out;
}

inline std::vector<double> per_class_f1(const LabelMatrix& preds, const LabelMatrix& truths) {
    std::vector<double> out;
    for (const auto& c : per_class_counts(preds, truths)) out.push_back(c.f1());
    return out;
}

struct PerKReport {
    std::vector<int> k;                 // 1..n_max
    std::vector<std::size_t> n_samples; // 0 for groups with no samples
    std::vector<double> f1;             // mean sample F1 per group, 0 when empty
    std::vector<ConfusionCounts> counts;
};

/// Groups samples by k = row sum of the truth; `k_values` must agree.
inline PerKReport per_k_report(const LabelMatrix& preds, const LabelMatrix& truths, const std::vector<int>& k_values,
                               int n_max = 0) {
    detail::check_shapes(preds, truths);
    if (k_values.size() != truths.size()) throw InvalidArgument("per_k_report: k_values length mismatch");
    for (std::size_t i = 0; i < truths.size(); ++i) {
        int s = 0;
        for (auto v : truths[i]) s += v != 0;
        if (s != k_values[i])
            throw InvalidArgument("per_k_report: sample " + std::to_string(i) + " has k=" + std::to_string(k_values[i]) +
                                  " but " + std::to_string(s) + " active labels");
        n_max = std::max(n_max, s);
    }
    PerKReport r;
    for (int k = 1; k <= n_max; ++k) r.k.push_back(k);
    r.n_samples.assign(static_cast<std::size_t>(n_max), 0);
    r.f1.assign(static_cast<std::size_t>(n_max), 0.0);
    r.counts.assign(static_cast<std::size_t>(n_max), {});
    for (std::size_t i = 0; i < truths.size(); ++i) {
        if (k_values[i] < 1) continue;
        const auto g = static_cast<std::size_t>(k_values[i] - 1);
        const ConfusionCounts c = confusion(preds[i], truths[i]);
        r.n_samples[g] += 1;
        r.f1[g] += c.f1();
        r.counts[g] += c;
    }
    for (std::size_t g = 0; g < r.f1.size(); ++g)
        if (r.n_samples[g]) r.f1[g] /= static_cast<double>(r.n_samples[g]);
    return r;
}

struct MetricsReport {
    double f1_mean = 0.0;
    std::size_t n_samples = 0;
    std::vector<std::string> class_names;
    std::vector<double> f1_per_class;
    std::vector<ConfusionCounts> counts_per_class;
    PerKReport per_k;
};

inline MetricsReport make_report(const LabelMatrix& preds, const LabelMatrix& truths, const std::vector<int>& k_values,
                                 std::vector<std::string> class_names, int n_max = 0) {
    MetricsReport r;
    r.f1_mean = f1_mean(preds, truths);
    r.n_samples = preds.size();
    r.counts_per_class = per_class_counts(preds, truths);
    for (const auto& c : r.counts_per_class) r.f1_per_class.push_back(c.f1());
    r.class_names = std::move(class_names);
    r.class_names.resize(r.f1_per_class.size());
    r.per_k = per_k_report(preds, truths, k_values, n_max);
    return r;
}

/// `class,f1,tp,fp,fn`
inline void write_per_class_csv(std::ostream& out, const MetricsReport& r) {
    out << "class,f1,tp,fp,fn\n";
    for (std::size_t j = 0; j < r.f1_per_class.size(); ++j) {
        const auto& c = r.counts_per_class[j];
        out << r.class_names[j] << ',' << io::format_double(r.f1_per_class[j]) << ',' << c.tp << ',' << c.fp << ',' << c.fn << '\n';
    }
}

/// `k,n_samples,f1,tp,fp,tn,fn`
inline void write_per_k_csv(std::ostream& out, const MetricsReport& r) {
    out << "k,n_samples,f1,tp,fp,tn,fn\n";
    for (std::size_t g = 0; g < r.per_k.k.size(); ++g) {
        const auto& c = r.per_k.counts[g];
        out << r.per_k.k[g] << ',' << r.per_k.n_samples[g] << ',' << io::format_double(r.per_k.f1[g]) << ',' << c.tp << ',' << c.fp << ','
            << c.tn << ',' << c.fn << '\n';
    }
}

}  // namespace nilm
