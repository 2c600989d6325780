#pragma once

// Mean absolute error in diopters, stratified by prediction horizon and input
// length, with small-cell flagging and the 0.75 D acceptability rate.

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tlstm/error.hpp"
#include "tlstm/model.hpp"
#include "tlstm/preprocess.hpp"

namespace tlstm {

/// Cells with fewer samples than this are marked as unreliable.
inline constexpr std::size_t kSmallCellThreshold = 100;
/// Absolute error (diopters) regarded as a clinically acceptable prediction.
inline constexpr double kAcceptableErrorDiopters = 0.75;
inline constexpr int kTableDurations = 10;

inline double mae(std::span<const double> y, std::span<const double> y_hat) {
    if (y.size() != y_hat.size()) throw ShapeError("mae: length mismatch");
    if (y.empty()) throw DomainError("mae: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(y[i] - y_hat[i]);
    return acc / static_cast<double>(y.size());
}

struct CellStats {
    double mean = 0.0;
    double std = 0.0;  // population
    std::size_t count = 0;
    [[nodiscard]] bool small_sample() const { return count < kSmallCellThreshold; }
};

/// One evaluated prediction: horizon bucket, input length, absolute error.
struct ErrorPoint {
    int duration = 1;
    std::size_t length = 1;
    double abs_error = 0.0;
};

struct StratifiedMetrics {
    /// Keyed by (duration bucket, input length).
    std::map<std::pair<int, std::size_t>, CellStats> cells;
    CellStats overall;
    /// Fraction of predictions with absolute error <= 0.75 D.
    double within_acceptable = 0.0;

    [[nodiscard]] int max_duration() const {
        int m = kTableDurations;
        for (const auto& [key, cell] : cells) m = std::max(m, key.first);
        return m;
    }
};

inline CellStats summarize(std::span<const double> values) {
    CellStats c;
    c.count = values.size();
    if (values.empty()) return c;
    double sum = 0.0;
    for (double v : values) sum += v;
    c.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - c.mean) * (v - c.mean);
    c.std = std::sqrt(sq / static_cast<double>(values.size()));
    return c;
}

inline StratifiedMetrics aggregate(std::span<const ErrorPoint> points) {
    if (points.empty()) throw DomainError("evaluate: empty test set");
    StratifiedMetrics m;
    std::map<std::pair<int, std::size_t>, std::vector<double>> groups;
    std::vector<double> all;
    all.reserve(points.size());
    std::size_t ok = 0;
    for (const auto& p : points) {
        groups[{p.duration, p.length}].push_back(p.abs_error);
        all.push_back(p.abs_error);
        if (p.abs_error <= kAcceptableErrorDiopters) ++ok;
    }
    for (const auto& [key, values] : groups) m.cells[key] = summarize(values);
    m.overall = summarize(all);
    m.within_acceptable = static_cast<double>(ok) / static_cast<double>(points.size());
    return m;
}

/// Predictions in diopters for `samples`, batched by input length. Column
/// independence of the batched forward makes this identical to predicting
/// each sample on its own.
inline std::vector<double> predict_diopters(std::span<const Sample> samples, const TlstmParams& params,
                                            const Standardizer& standardizer, DecayKind kind,
                                            std::size_t batch_size = 256) {
    if (!standardizer.fitted()) throw StateError("evaluate: standardizer has not been fitted");
    std::vector<double> out(samples.size());
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < samples.size(); ++i) by_length[samples[i].length()].push_back(i);
    for (const auto& [len, idx] : by_length) {
        for (std::size_t start = 0; start < idx.size(); start += batch_size) {
            const auto end = std::min(idx.size(), start + batch_size);
            std::vector<const Sample*> members;
            for (auto k = start; k < end; ++k) members.push_back(&samples[idx[k]]);
            const auto pred = predict_batch(params, make_batch(members, standardizer), kind);
            for (auto k = start; k < end; ++k) out[idx[k]] = standardizer.inverse_standardize_se(pred[k - start]);
        }
    }
    return out;
}

inline std::vector<ErrorPoint> error_points(std::span<const Sample> samples, std::span<const double> predictions) {
    if (samples.size() != predictions.size()) throw ShapeError("error_points: length mismatch");
    std::vector<ErrorPoint> points;
    points.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        points.push_back({samples[i].horizon(), samples[i].length(), std::abs(samples[i].label_se - predictions[i])});
    return points;
}

inline StratifiedMetrics evaluate(std::span<const Sample> test, const TlstmParams& params,
                                  const Standardizer& standardizer, DecayKind kind) {
    if (test.empty()) throw DomainError("evaluate: empty test set");
    const auto pred = predict_diopters(test, params, standardizer, kind);
    return aggregate(error_points(test, pred));
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_cell(const CellStats& c) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s%.3f \xC2\xB1 %.3f (%zu)", c.small_sample() ? "*" : "", c.mean, c.std, c.count);
    return buf;
}

enum class TableFormat { csv, markdown };

/// Durations as rows, input lengths 1..4 as columns; empty cells stay blank.
inline std::string render_table(const StratifiedMetrics& m, TableFormat format) {
    std::ostringstream out;
    const bool md = format == TableFormat::markdown;
    if (md) out << "| Prediction duration | 1 | 2 | 3 | 4 |\n|---|---|---|---|---|\n";
    else out << "duration,1,2,3,4\n";
    for (int d = 1; d <= m.max_duration(); ++d) {
        out << (md ? "| " : "") << d;
        for (std::size_t L = 1; L <= kMaxTrainLength; ++L) {
            const auto it = m.cells.find({d, L});
            const std::string cell = it == m.cells.end() ? "" : format_cell(it->second);
            out << (md ? " | " : ",") << cell;
        }
        out << (md ? " |\n" : "\n");
    }
    if (md) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "\nOverall MAE: %.3f \xC2\xB1 %.3f (%zu); within %.2f D: %.1f%%. * marks cells with fewer than %zu "
                      "samples.\n",
                      m.overall.mean, m.overall.std, m.overall.count, kAcceptableErrorDiopters,
                      100.0 * m.within_acceptable, kSmallCellThreshold);
        out << buf;
    }
    return out.str();
}

/// Long-format metrics: one row per nonempty cell, then an overall row.
inline void write_metrics_csv(std::ostream& out, const StratifiedMetrics& m) {
    out << "duration,length,mean,std,count,flag\n";
    char buf[160];
    for (const auto& [key, c] : m.cells) {
        std::snprintf(buf, sizeof buf, "%d,%zu,%.6f,%.6f,%zu,%s\n", key.first, key.second, c.mean, c.std, c.count,
                      c.small_sample() ? "*" : "");
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "overall,all,%.6f,%.6f,%zu,%s\n", m.overall.mean, m.overall.std, m.overall.count,
                  m.overall.small_sample() ? "*" : "");
    out << buf;
}

} // namespace tlstm
