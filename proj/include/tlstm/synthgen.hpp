#pragma once

// Seeded synthetic screening cohorts with irregular visit schedules.
//
// Each subject contributes two eyes. True SE drifts myopically at an
// age-dependent quarterly rate scaled by a per-eye factor; observed SE adds
// Gaussian noise. Every other field is derived so that the record passes
// validation.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "tlstm/config.hpp"
#include "tlstm/error.hpp"
#include "tlstm/records.hpp"

namespace tlstm {

/// Eyes with 2, 3, 4, 5 and 6 records in the reference cohort.
inline constexpr std::array<std::size_t, 5> kReferenceEyeCounts = {27015, 18732, 25109, 4314, 2};
inline constexpr int kMinVisits = 2;

struct CohortSpec {
    std::size_t n_subjects = 1000;
    /// Probability of an eye having 2..6 records (used when eye_counts is all zero).
    std::array<double, 5> visit_probs = [] {
        std::array<double, 5> p{};
        const double total = std::accumulate(kReferenceEyeCounts.begin(), kReferenceEyeCounts.end(), 0.0);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(kReferenceEyeCounts[i]) / total;
        return p;
    }();
    /// Exact number of eyes with 2..6 records; overrides n_subjects when nonzero.
    std::array<std::size_t, 5> eye_counts{};

    int gap_min_days = 60;
    int gap_max_days = 400;
    /// Gaps are shrunk proportionally when a schedule exceeds this span (0: no cap).
    int max_span_days = 900;
    Date first_visit = Date{std::chrono::year{2019} / 10 / 1};
    int enrollment_window_days = 120;

    double age_min = 6.0;
    double age_max = 20.0;
    // baseline SE ~ Normal(intercept + slope * (age - 6), sd)
    double baseline_intercept = 0.5;
    double baseline_slope = -0.25;
    double baseline_sd = 1.0;
    // rate(age) = max(0, r0 * (rate_age_max - age) / rate_age_span) D/quarter, or r0 when not tapered
    double rate_r0 = 0.08;
    double rate_age_max = 16.0;
    double rate_age_span = 10.0;
    bool rate_taper = true;
    /// Spread of the per-eye multiplier on the rate, drawn as max(0, 1 + rate_sd * z).
    double rate_sd = 1.0;
    double noise_sd = 0.1;
    /// Diopters of SE change per millimetre of axial elongation.
    double al_coupling = 2.5;

    std::uint64_t seed = 1;

    [[nodiscard]] bool exact_counts() const {
        return std::any_of(eye_counts.begin(), eye_counts.end(), [](std::size_t c) { return c > 0; });
    }
    [[nodiscard]] std::size_t total_eyes() const {
        return exact_counts() ? std::accumulate(eye_counts.begin(), eye_counts.end(), std::size_t{0}) : 2 * n_subjects;
    }

    void validate() const {
        if (!exact_counts() && n_subjects == 0) throw ConfigError("cohort spec: zero subjects");
        double total = 0.0;
        for (double p : visit_probs) {
            if (!(p >= 0.0)) throw ConfigError("cohort spec: visit probabilities must be >= 0");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ConfigError("cohort spec: visit probabilities must sum to 1");
        if (gap_min_days < 1 || gap_max_days < gap_min_days) throw ConfigError("cohort spec: need 1 <= gap_min <= gap_max");
        if (max_span_days < 0) throw ConfigError("cohort spec: max_span_days must be >= 0");
        if (max_span_days > 0 && max_span_days < 5) throw ConfigError("cohort spec: max_span_days too small for 6 visits");
        if (enrollment_window_days < 0) throw ConfigError("cohort spec: enrollment window must be >= 0");
        if (!(age_min >= 6.0 && age_max <= 20.0 && age_min < age_max)) throw ConfigError("cohort spec: ages must lie in [6,20]");
        if (!(noise_sd >= 0.0) || !(baseline_sd >= 0.0) || !(rate_sd >= 0.0)) throw ConfigError("cohort spec: standard deviations must be >= 0");
        if (!(rate_age_span > 0.0)) throw ConfigError("cohort spec: rate_age_span must be > 0");
        if (!(al_coupling > 0.0)) throw ConfigError("cohort spec: al_coupling must be > 0");
    }
};

/// Reference visit-count composition scaled to n_scale of its size. Each class
/// keeps at least one eye.
inline CohortSpec paper_composition(double n_scale, std::uint64_t seed = 1) {
    if (!(n_scale > 0.0 && n_scale <= 1.0)) throw ConfigError("paper_composition: n_scale must lie in (0,1]");
    CohortSpec spec;
    spec.seed = seed;
    for (std::size_t i = 0; i < kReferenceEyeCounts.size(); ++i)
        spec.eye_counts[i] =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n_scale * static_cast<double>(kReferenceEyeCounts[i]))));
    return spec;
}

inline CohortSpec apply_cohort_config(CohortSpec spec, const KeyValues& kv) {
    ConfigReader r(kv);
    r.read("n_subjects", spec.n_subjects);
    for (int v = 2; v <= 6; ++v) {
        r.read("visit_prob_" + std::to_string(v), spec.visit_probs[v - 2]);
        r.read("eyes_with_" + std::to_string(v), spec.eye_counts[v - 2]);
    }
    r.read("gap_min_days", spec.gap_min_days);
    r.read("gap_max_days", spec.gap_max_days);
    r.read("max_span_days", spec.max_span_days);
    std::string first = format_date(spec.first_visit);
    r.read("first_visit", first);
    if (const auto d = parse_date(first)) spec.first_visit = *d;
    else throw ConfigError("cohort spec: first_visit must be YYYY-MM-DD");
    r.read("enrollment_window_days", spec.enrollment_window_days);
    r.read("age_min", spec.age_min);
    r.read("age_max", spec.age_max);
    r.read("baseline_intercept", spec.baseline_intercept);
    r.read("baseline_slope", spec.baseline_slope);
    r.read("baseline_sd", spec.baseline_sd);
    r.read("rate_r0", spec.rate_r0);
    r.read("rate_age_max", spec.rate_age_max);
    r.read("rate_age_span", spec.rate_age_span);
    r.read("rate_taper", spec.rate_taper);
    r.read("rate_sd", spec.rate_sd);
    r.read("noise_sd", spec.noise_sd);
    r.read("al_coupling", spec.al_coupling);
    r.read("seed", spec.seed);
    r.finish();
    return spec;
}

/// Quarterly myopic drift (diopters per quarter) at a given age.
inline double progression_rate(const CohortSpec& spec, double age) {
    if (!spec.rate_taper) return spec.rate_r0;
    return std::max(0.0, spec.rate_r0 * (spec.rate_age_max - age) / spec.rate_age_span);
}

namespace detail {

inline int school_group_for_age(int age) {
    if (age <= 12) return 1;
    if (age <= 15) return 2;
    return 3;
}

inline std::mt19937_64 subject_rng(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

} // namespace detail

/// Generates the cohort. Output order: subject, then right and left eye, then visit.
inline std::vector<VisionRecord> generate(const CohortSpec& spec) {
    spec.validate();

    // visits per eye, two eyes per subject
    std::vector<std::array<int, 2>> plan;
    if (spec.exact_counts()) {
        std::vector<int> counts;
        for (std::size_t i = 0; i < spec.eye_counts.size(); ++i)
            counts.insert(counts.end(), spec.eye_counts[i], static_cast<int>(i) + kMinVisits);
        std::mt19937_64 rng(spec.seed);
        std::shuffle(counts.begin(), counts.end(), rng);
        for (std::size_t i = 0; i < counts.size(); i += 2)
            plan.push_back({counts[i], i + 1 < counts.size() ? counts[i + 1] : 0});
    } else {
        plan.resize(spec.n_subjects);
        for (std::size_t s = 0; s < plan.size(); ++s) {
            auto rng = detail::subject_rng(spec.seed ^ 0x5eed5eedull, s);
            std::discrete_distribution<int> visits(spec.visit_probs.begin(), spec.visit_probs.end());
            plan[s] = {visits(rng) + kMinVisits, visits(rng) + kMinVisits};
        }
    }

    std::vector<VisionRecord> out;
    char id[32];
    for (std::size_t s = 0; s < plan.size(); ++s) {
        auto rng = detail::subject_rng(spec.seed, s);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_int_distribution<int> gap_dist(spec.gap_min_days, spec.gap_max_days);

        const int n_visits = std::max(plan[s][0], plan[s][1]);
        std::vector<int> gaps(static_cast<std::size_t>(n_visits - 1));
        for (auto& g : gaps) g = gap_dist(rng);
        const int span = std::accumulate(gaps.begin(), gaps.end(), 0);
        if (spec.max_span_days > 0 && span > spec.max_span_days)
            for (auto& g : gaps) g = std::max(1, static_cast<int>(static_cast<long long>(g) * spec.max_span_days / span));
        const int total_days = std::accumulate(gaps.begin(), gaps.end(), 0);

        std::vector<Date> dates;
        dates.push_back(spec.first_visit +
                        std::chrono::days{std::uniform_int_distribution<int>(0, spec.enrollment_window_days)(rng)});
        for (int g : gaps) dates.push_back(dates.back() + std::chrono::days{g});

        const double span_years = total_days / 365.25;
        const double age_hi = std::max(spec.age_min, std::min(spec.age_max, 20.999 - span_years));
        const double age0 = spec.age_min + (age_hi - spec.age_min) * unit(rng);
        const auto gender = unit(rng) < 0.5 ? Gender::female : Gender::male;
        const double subject_se = spec.baseline_intercept + spec.baseline_slope * (age0 - 6.0) + spec.baseline_sd * normal(rng);

        std::snprintf(id, sizeof id, "S%06zu", s + 1);
        for (int e = 0; e < 2; ++e) {
            const int count = plan[s][e];
            // per-eye constants are drawn even for absent eyes so the stream layout is fixed
            const double se0 = std::clamp(subject_se + 0.25 * normal(rng), -12.63, 8.25);
            const double cylinder = -0.25 * std::uniform_int_distribution<int>(0, 6)(rng);
            const double axis = std::uniform_int_distribution<int>(0, 180)(rng);
            const double k1 = std::clamp(42.54 + 1.36 * normal(rng), 37.05, 48.63);
            const double k2 = k1 + 0.3 + 1.7 * unit(rng);
            const double al0 = 23.99 - (se0 + 1.57) / spec.al_coupling + 0.3 * normal(rng);
            const double spectacle_draw = unit(rng);
            const double rate_factor = std::max(0.0, 1.0 + spec.rate_sd * normal(rng));
            if (count == 0) continue;

            double true_se = se0;
            double al = al0;
            for (int v = 0; v < count; ++v) {
                const double days = (dates[v] - dates[0]).count();
                const double age_real = age0 + days / 365.25;
                if (v > 0) {
                    const double prev_age = age0 + (dates[v - 1] - dates[0]).count() / 365.25;
                    const double quarters = static_cast<double>((dates[v] - dates[v - 1]).count()) / kDaysPerQuarter;
                    const double delta = -rate_factor * progression_rate(spec, prev_age) * quarters;
                    true_se += delta;
                    al -= delta / spec.al_coupling;
                }
                VisionRecord r;
                r.subject_id = id;
                r.eye = e == 0 ? Eye::right : Eye::left;
                r.check_date = dates[v];
                r.age = std::clamp(static_cast<int>(std::floor(age_real)), 6, 20);
                r.school_age_group = detail::school_group_for_age(r.age);
                r.gender = gender;
                r.se = true_se + spec.noise_sd * normal(rng);
                const auto degree = classify_myopia(r.se);
                r.myopia_degree = static_cast<int>(degree);
                r.myopia_flag = degree == MyopiaDegree::none ? 0 : 1;
                r.correction_method =
                    spectacle_draw < (r.myopia_flag ? 0.6 : 0.05) ? Correction::spectacles : Correction::uncorrected;
                r.cylinder = cylinder;
                r.sphere = r.se - cylinder / 2.0;
                r.axis = axis;
                r.k1 = k1;
                r.k2 = k2;
                r.axial_length = al;
                r.uva = std::clamp(std::round((5.0 + 0.2 * r.se + 0.05 * normal(rng)) * 10.0) / 10.0, 4.0, 5.3);
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

} // namespace tlstm
