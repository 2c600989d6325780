#pragma once

// Turning eye histories into model-ready samples: one-hot encoding,
// standardization, subsequence augmentation and layered train/test split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlstm/error.hpp"
#include "tlstm/records.hpp"

namespace tlstm {

inline constexpr std::size_t kFeatureDim = 16;
inline constexpr std::size_t kSeFeature = 15;
/// Longest input sequence admitted to training and evaluation.
inline constexpr std::size_t kMaxTrainLength = 4;

inline constexpr std::array<const char*, kFeatureDim> kFeatureNames = {
    "school_age_group", "gender_male", "gender_female", "age",
    "correction_uncorrected", "correction_spectacles", "uva", "sphere",
    "cylinder", "axis", "k1", "k2", "axial_length", "myopia_flag",
    "myopia_degree", "se"};

using FeatureVector = std::array<double, kFeatureDim>;

inline FeatureVector encode(const VisionRecord& r) {
    const bool male = r.gender == Gender::male;
    const bool spectacles = r.correction_method == Correction::spectacles;
    return {static_cast<double>(r.school_age_group),
            male ? 1.0 : 0.0,
            male ? 0.0 : 1.0,
            static_cast<double>(r.age),
            spectacles ? 0.0 : 1.0,
            spectacles ? 1.0 : 0.0,
            r.uva,
            r.sphere,
            r.cylinder,
            r.axis,
            r.k1,
            r.k2,
            r.axial_length,
            static_cast<double>(r.myopia_flag),
            static_cast<double>(r.myopia_degree),
            r.se};
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-dimension affine rescaling x' = (x - mean) / std. Dimensions whose
/// training variance is zero are centred only and flagged.
class Standardizer {
public:
    Standardizer() = default;
    Standardizer(std::vector<double> mean, std::vector<double> stddev, std::vector<bool> zero_variance,
                 std::size_t se_index)
        : mean_(std::move(mean)), std_(std::move(stddev)), zero_variance_(std::move(zero_variance)),
          se_index_(se_index) {
        if (mean_.size() != std_.size() || mean_.size() != zero_variance_.size())
            throw SchemaError("standardizer: inconsistent dimension arrays");
        if (!mean_.empty() && se_index_ >= mean_.size()) throw SchemaError("standardizer: se index out of range");
        for (std::size_t j = 0; j < mean_.size(); ++j) {
            if (!std::isfinite(mean_[j]) || !std::isfinite(std_[j])) throw NumericError("standardizer: non-finite");
            if (zero_variance_[j]) std_[j] = 1.0;
            else if (!(std_[j] > 0.0)) throw DomainError("standardizer: non-positive std");
        }
    }

    [[nodiscard]] bool fitted() const { return !mean_.empty(); }
    [[nodiscard]] std::size_t dims() const { return mean_.size(); }
    [[nodiscard]] std::size_t se_index() const { return se_index_; }
    [[nodiscard]] const std::vector<double>& mean() const { return mean_; }
    /// Effective divisor per dimension (1 for flagged dimensions).
    [[nodiscard]] const std::vector<double>& stddev() const { return std_; }
    [[nodiscard]] const std::vector<bool>& zero_variance() const { return zero_variance_; }

    [[nodiscard]] std::vector<double> apply(std::span<const double> x) const {
        require_fitted();
        if (x.size() != dims())
            throw SchemaError("standardizer: expected dimension " + std::to_string(dims()) + ", got " +
                              std::to_string(x.size()));
        std::vector<double> out(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mean_[j]) / std_[j];
        return out;
    }

    [[nodiscard]] std::vector<double> inverse(std::span<const double> z) const {
        require_fitted();
        if (z.size() != dims()) throw SchemaError("standardizer: dimension mismatch in inverse");
        std::vector<double> out(z.size());
        for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] * std_[j] + mean_[j];
        return out;
    }

    [[nodiscard]] double standardize_se(double se) const {
        require_fitted();
        return (se - mean_[se_index_]) / std_[se_index_];
    }

    [[nodiscard]] double inverse_standardize_se(double value) const {
        require_fitted();
        return value * std_[se_index_] + mean_[se_index_];
    }

    void save(std::ostream& out) const {
        require_fitted();
        nlohmann::json j;
        j["format"] = "tlstm-standardizer";
        j["version"] = 1;
        j["se_index"] = se_index_;
        if (dims() == kFeatureDim) j["layout"] = kFeatureNames;
        j["mean"] = mean_;
        j["std"] = std_;
        j["zero_variance"] = zero_variance_;
        out << j.dump(1) << '\n';
    }

    static Standardizer load(std::istream& in) {
        nlohmann::json j;
        try {
            in >> j;
            if (j.at("format") != "tlstm-standardizer") throw SchemaError("not a standardizer file");
            if (j.at("version") != 1) throw SchemaError("unsupported standardizer version");
            return Standardizer(j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>(),
                                j.at("zero_variance").get<std::vector<bool>>(), j.at("se_index").get<std::size_t>());
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(std::string("standardizer file: ") + e.what());
        }
    }

private:
    void require_fitted() const {
        if (!fitted()) throw StateError("standardizer has not been fitted");
    }

    std::vector<double> mean_;
    std::vector<double> std_;
    std::vector<bool> zero_variance_;
    std::size_t se_index_ = 0;
};

/// Fits mean and population standard deviation per column of a row-major
/// matrix with `dims` columns. The SE statistics are taken from column `se_index`.
inline Standardizer fit_standardizer(std::span<const double> rows, std::size_t dims, std::size_t se_index) {
    if (dims == 0 || rows.empty() || rows.size() % dims != 0)
        throw DomainError("fit_standardizer: need a nonempty matrix");
    const std::size_t n = rows.size() / dims;
    std::vector<double> mean(dims, 0.0), sd(dims, 0.0);
    std::vector<bool> flat(dims, false);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims; ++j) mean[j] += rows[i * dims + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims; ++j) {
            const double d = rows[i * dims + j] - mean[j];
            sd[j] += d * d;
        }
    for (std::size_t j = 0; j < dims; ++j) {
        sd[j] = std::sqrt(sd[j] / static_cast<double>(n));
        if (!(sd[j] > 1e-12 * (1.0 + std::abs(mean[j])))) {
            flat[j] = true;
            sd[j] = 1.0;
        }
    }
    return Standardizer(std::move(mean), std::move(sd), std::move(flat), se_index);
}

inline Standardizer fit_standardizer(std::span<const FeatureVector> vectors) {
    if (vectors.empty()) throw DomainError("fit_standardizer: empty training set");
    return fit_standardizer(std::span<const double>(vectors.front().data(), vectors.size() * kFeatureDim),
                            kFeatureDim, kSeFeature);
}

// ---------------------------------------------------------------------------
// Augmentation

struct Provenance {
    std::string subject_id;
    Eye eye = Eye::right;
    /// Indices into the source history: input records first, label record last.
    std::vector<int> record_indices;
};

/// One augmented unit: encoded inputs (raw scale), the gap after each input in
/// quarters (the last one is the prediction horizon), and the raw SE label.
struct Sample {
    std::vector<FeatureVector> inputs;
    std::vector<int> intervals;
    double label_se = 0.0;
    Provenance provenance;

    [[nodiscard]] std::size_t length() const { return inputs.size(); }
    [[nodiscard]] int horizon() const { return intervals.back(); }
    [[nodiscard]] bool trainable() const { return length() >= 1 && length() <= kMaxTrainLength; }
};

/// Every label position paired with every nonempty order-preserving subset of
/// the earlier records: 2^r - r - 1 samples for r records, ordered by input
/// length, then lexicographically by chosen record positions.
inline std::vector<Sample> augment(const EyeHistory& history) {
    const auto& recs = history.records;
    const int r = static_cast<int>(recs.size());
    if (r < 2) throw DomainError("augment: history needs at least 2 records");
    if (r > 30) throw DomainError("augment: history too long to enumerate");
    for (int i = 1; i < r; ++i)
        if (!(recs[i - 1].check_date < recs[i].check_date))
            throw OrderingError("augment: history dates must be strictly increasing");

    std::vector<FeatureVector> encoded;
    encoded.reserve(recs.size());
    for (const auto& rec : recs) encoded.push_back(encode(rec));

    std::vector<Sample> out;
    out.reserve((std::size_t{1} << r) - r - 1);
    std::vector<int> pick;
    for (int size = 2; size <= r; ++size) {
        // lexicographic k-combinations of [0, r)
        pick.resize(size);
        for (int i = 0; i < size; ++i) pick[i] = i;
        for (;;) {
            Sample s;
            s.inputs.reserve(size - 1);
            s.intervals.reserve(size - 1);
            for (int i = 0; i + 1 < size; ++i) {
                s.inputs.push_back(encoded[pick[i]]);
                s.intervals.push_back(compute_interval(recs[pick[i]].check_date, recs[pick[i + 1]].check_date));
            }
            s.label_se = recs[pick.back()].se;
            s.provenance = Provenance{history.subject_id, history.eye, pick};
            out.push_back(std::move(s));

            int i = size - 1;
            while (i >= 0 && pick[i] == r - size + i) --i;
            if (i < 0) break;
            ++pick[i];
            for (int k = i + 1; k < size; ++k) pick[k] = pick[k - 1] + 1;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Split

enum class SplitMode { per_sample, per_subject };

inline SplitMode parse_split_mode(std::string_view s) {
    if (s == "per_sample") return SplitMode::per_sample;
    if (s == "per_subject") return SplitMode::per_subject;
    throw ConfigError("unknown split mode '" + std::string(s) + "' (expected per_sample or per_subject)");
}

inline const char* to_string(SplitMode m) { return m == SplitMode::per_sample ? "per_sample" : "per_subject"; }

struct SplitLayer {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

/// Samples layered by input length; layers[L-1] holds length L.
struct SplitDataset {
    std::array<SplitLayer, kMaxTrainLength> layers;
    /// Samples longer than kMaxTrainLength, kept out of both sides.
    std::vector<Sample> excluded;
    std::vector<std::string> warnings;

    [[nodiscard]] std::vector<Sample> all_train() const {
        std::vector<Sample> out;
        for (const auto& l : layers) out.insert(out.end(), l.train.begin(), l.train.end());
        return out;
    }
    [[nodiscard]] std::vector<Sample> all_test() const {
        std::vector<Sample> out;
        for (const auto& l : layers) out.insert(out.end(), l.test.begin(), l.test.end());
        return out;
    }
};

/// Seeded layered split. `ratio` is the training fraction.
inline SplitDataset split(std::vector<Sample> samples, double ratio, std::uint64_t seed, SplitMode mode) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1)");
    SplitDataset out;
    std::array<std::vector<Sample>, kMaxTrainLength> layered;
    for (auto& s : samples) {
        if (s.length() == 0 || s.intervals.size() != s.length()) throw SchemaError("split: malformed sample");
        if (s.trainable()) layered[s.length() - 1].push_back(std::move(s));
        else out.excluded.push_back(std::move(s));
    }

    if (mode == SplitMode::per_sample) {
        for (std::size_t L = 0; L < kMaxTrainLength; ++L) {
            auto& layer = layered[L];
            if (layer.empty()) {
                out.warnings.push_back("layer of length " + std::to_string(L + 1) + " is empty; skipped");
                continue;
            }
            std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * (L + 1)));
            std::vector<std::size_t> order(layer.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::shuffle(order.begin(), order.end(), rng);
            const auto n_test = static_cast<std::size_t>(std::llround((1.0 - ratio) * static_cast<double>(layer.size())));
            std::vector<bool> is_test(layer.size(), false);
            for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
            for (std::size_t i = 0; i < layer.size(); ++i)
                (is_test[i] ? out.layers[L].test : out.layers[L].train).push_back(std::move(layer[i]));
        }
        return out;
    }

    std::vector<std::string> subjects;
    std::map<std::string, bool> test_side;
    for (const auto& layer : layered)
        for (const auto& s : layer)
            if (test_side.try_emplace(s.provenance.subject_id, false).second) subjects.push_back(s.provenance.subject_id);
    std::mt19937_64 rng(seed);
    std::shuffle(subjects.begin(), subjects.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround((1.0 - ratio) * static_cast<double>(subjects.size())));
    for (std::size_t i = 0; i < n_test; ++i) test_side[subjects[i]] = true;
    for (std::size_t L = 0; L < kMaxTrainLength; ++L) {
        if (layered[L].empty()) {
            out.warnings.push_back("layer of length " + std::to_string(L + 1) + " is empty; skipped");
            continue;
        }
        for (auto& s : layered[L])
            (test_side[s.provenance.subject_id] ? out.layers[L].test : out.layers[L].train).push_back(std::move(s));
    }
    return out;
}

/// Fits the standardizer on every input vector of the training samples.
inline Standardizer fit_on_training(std::span<const Sample> train) {
    std::vector<FeatureVector> vectors;
    for (const auto& s : train) vectors.insert(vectors.end(), s.inputs.begin(), s.inputs.end());
    return fit_standardizer(vectors);
}

// ---------------------------------------------------------------------------
// Sample dump (JSON lines)

inline nlohmann::json sample_to_json(const Sample& s, std::string_view side) {
    nlohmann::json j;
    j["subject_id"] = s.provenance.subject_id;
    j["eye"] = s.provenance.eye == Eye::left ? "L" : "R";
    j["records"] = s.provenance.record_indices;
    j["split"] = side;
    j["inputs"] = s.inputs;
    j["intervals"] = s.intervals;
    j["label_se"] = s.label_se;
    return j;
}

struct TaggedSample {
    Sample sample;
    std::string split;
};

inline TaggedSample sample_from_json(const nlohmann::json& j) {
    try {
        TaggedSample t;
        auto& s = t.sample;
        s.provenance.subject_id = j.at("subject_id").get<std::string>();
        const auto eye = j.at("eye").get<std::string>();
        if (eye != "L" && eye != "R") throw SchemaError("sample eye must be L or R");
        s.provenance.eye = eye == "L" ? Eye::left : Eye::right;
        s.provenance.record_indices = j.at("records").get<std::vector<int>>();
        t.split = j.value("split", "");
        s.inputs = j.at("inputs").get<std::vector<FeatureVector>>();
        s.intervals = j.at("intervals").get<std::vector<int>>();
        s.label_se = j.at("label_se").get<double>();
        if (s.inputs.empty() || s.inputs.size() != s.intervals.size())
            throw SchemaError("sample inputs and intervals must be nonempty and of equal length");
        for (int d : s.intervals)
            if (d < 1) throw SchemaError("sample interval must be >= 1");
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("sample record: ") + e.what());
    }
}

inline void write_split_dataset(std::ostream& out, const SplitDataset& ds) {
    for (const auto& layer : ds.layers) {
        for (const auto& s : layer.train) out << sample_to_json(s, "train").dump() << '\n';
        for (const auto& s : layer.test) out << sample_to_json(s, "test").dump() << '\n';
    }
    for (const auto& s : ds.excluded) out << sample_to_json(s, "excluded").dump() << '\n';
}

inline SplitDataset read_split_dataset(std::istream& in) {
    SplitDataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("samples line " + std::to_string(line_no) + ": " + e.what());
        }
        auto t = sample_from_json(j);
        if (t.split == "excluded" || !t.sample.trainable()) {
            ds.excluded.push_back(std::move(t.sample));
            continue;
        }
        auto& layer = ds.layers[t.sample.length() - 1];
        if (t.split == "train") layer.train.push_back(std::move(t.sample));
        else if (t.split == "test") layer.test.push_back(std::move(t.sample));
        else throw SchemaError("samples line " + std::to_string(line_no) + ": unknown split '" + t.split + "'");
    }
    return ds;
}

} // namespace tlstm
