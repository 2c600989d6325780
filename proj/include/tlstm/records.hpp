#pragma once

// Vision-screening records: CSV ingestion, validation, myopia grading, visit
// intervals and per-eye history assembly.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tlstm/error.hpp"

namespace tlstm {

using Date = std::chrono::sys_days;

enum class Eye { left, right };
enum class Gender { female = 0, male = 1 };
enum class Correction { uncorrected = 0, spectacles = 1 };
enum class MyopiaDegree { none = 0, low = 1, moderate = 2, high = 3 };

/// Days per quarter bucket.
inline constexpr int kDaysPerQuarter = 91;

/// One screening visit for one eye.
struct VisionRecord {
    std::string subject_id;
    Eye eye = Eye::right;
    Date check_date{};
    int school_age_group = 1;
    Gender gender = Gender::female;
    int age = 6;
    Correction correction_method = Correction::uncorrected;
    double uva = 5.0;
    double sphere = 0.0;
    double cylinder = 0.0;
    double axis = 0.0;
    double k1 = 42.5;
    double k2 = 43.9;
    double axial_length = 24.0;
    int myopia_flag = 0;
    int myopia_degree = 0;
    double se = 0.0;
    /// Line number in the source file; 0 when the record was built in memory.
    std::size_t source_row = 0;
};

/// Chronologically ordered records of one eye.
struct EyeHistory {
    std::string subject_id;
    Eye eye = Eye::right;
    std::vector<VisionRecord> records;
};

struct RowIssue {
    std::size_t row = 0;
    std::string reason;
};

struct ParseResult {
    std::vector<VisionRecord> records;
    std::vector<RowIssue> errors;
    std::vector<RowIssue> warnings;
};

struct GroupResult {
    std::vector<EyeHistory> histories;
    /// One entry per input record that did not make it into a history.
    std::vector<RowIssue> skipped;
    std::vector<RowIssue> warnings;
};

// ---------------------------------------------------------------------------
// Grading and derived quantities

inline MyopiaDegree classify_myopia(double se) {
    if (!std::isfinite(se)) throw DomainError("classify_myopia: non-finite SE");
    if (se <= -6.0) return MyopiaDegree::high;
    if (se <= -3.0) return MyopiaDegree::moderate;
    if (se <= -0.5) return MyopiaDegree::low;
    return MyopiaDegree::none;
}

inline double compute_se(double sphere, double cylinder) {
    if (!std::isfinite(sphere) || !std::isfinite(cylinder))
        throw DomainError("compute_se: non-finite lens power");
    return sphere + cylinder / 2.0;
}

/// Tolerance for the sphere + cylinder/2 cross-check against the SE column.
inline constexpr double kSeConsistencyTolerance = 0.13;

/// Elapsed time as a quarter bucket: bucket i covers [i-1, i) quarters.
inline int compute_interval(Date earlier, Date later) {
    const auto days = (later - earlier).count();
    if (days < 0) throw OrderingError("compute_interval: later date precedes earlier date");
    return static_cast<int>(days / kDaysPerQuarter) + 1;
}

// ---------------------------------------------------------------------------
// Dates

inline std::optional<Date> parse_date(std::string_view text) {
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
    int y = 0;
    unsigned m = 0, d = 0;
    auto field = [&](std::string_view s, auto& out) {
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        return ec == std::errc{} && p == s.data() + s.size();
    };
    if (!field(text.substr(0, 4), y) || !field(text.substr(5, 2), m) || !field(text.substr(8, 2), d))
        return std::nullopt;
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) return std::nullopt;
    return Date{ymd};
}

inline std::string format_date(Date date) {
    const std::chrono::year_month_day ymd{date};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

// ---------------------------------------------------------------------------
// CSV schema

inline constexpr std::array<std::string_view, 17> kRecordColumns = {
    "subject_id", "eye", "check_date", "school_age_group", "gender", "age",
    "correction_method", "uva", "sphere", "cylinder", "axis", "k1", "k2",
    "axial_length", "myopia", "degree", "se"};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(trim(line.substr(start)));
            return out;
        }
        out.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
}

inline std::optional<double> parse_double(std::string_view s) {
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

inline std::optional<int> parse_int(std::string_view s) {
    const auto v = parse_double(s);
    if (!v || *v != std::floor(*v) || std::abs(*v) > 1e9) return std::nullopt;
    return static_cast<int>(*v);
}

struct SoftBound {
    const char* name;
    double lo;
    double hi;
};

// Observed ranges of the reference cohort; violations only warn.
inline constexpr std::array<SoftBound, 7> kSoftBounds = {{
    {"uva", 4.0, 5.3},
    {"sphere", -11.25, 8.75},
    {"cylinder", -6.75, 0.0},
    {"k1", 37.05, 48.63},
    {"k2", 37.58, 50.00},
    {"axial_length", 18.59, 29.86},
    {"se", -12.63, 8.25},
}};

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

} // namespace detail

/// Validates hard bounds and grading consistency. Returns the first violation, if any.
inline std::optional<std::string> validate_record(const VisionRecord& r) {
    if (r.subject_id.empty()) return "empty subject_id";
    if (r.subject_id.find(',') != std::string::npos) return "subject_id contains a comma";
    if (r.age < 6 || r.age > 20) return "age out of [6,20]";
    if (r.school_age_group < 1 || r.school_age_group > 3) return "school_age_group out of {1,2,3}";
    if (!(r.cylinder <= 0.0)) return "cylinder must be <= 0";
    if (r.axis < 0.0 || r.axis > 180.0) return "axis out of [0,180]";
    if (r.myopia_flag != 0 && r.myopia_flag != 1) return "myopia out of {0,1}";
    if (r.myopia_degree < 0 || r.myopia_degree > 3) return "degree out of {0,1,2,3}";
    for (double v : {r.uva, r.sphere, r.cylinder, r.axis, r.k1, r.k2, r.axial_length, r.se})
        if (!std::isfinite(v)) return "non-finite value";
    const auto degree = static_cast<int>(classify_myopia(r.se));
    if (degree != r.myopia_degree) return "degree inconsistent with se";
    if (r.myopia_flag != (degree > 0 ? 1 : 0)) return "myopia flag inconsistent with se";
    return std::nullopt;
}

/// Soft-bound and cross-field warnings for an otherwise valid record.
inline std::vector<std::string> soft_warnings(const VisionRecord& r) {
    std::vector<std::string> out;
    const std::array<double, 7> values = {r.uva, r.sphere, r.cylinder, r.k1, r.k2, r.axial_length, r.se};
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& b = detail::kSoftBounds[i];
        if (values[i] < b.lo || values[i] > b.hi)
            out.push_back(std::string(b.name) + " " + detail::fmt_num(values[i]) + " outside observed range [" +
                          detail::fmt_num(b.lo) + "," + detail::fmt_num(b.hi) + "]");
    }
    if (std::abs(compute_se(r.sphere, r.cylinder) - r.se) > kSeConsistencyTolerance)
        out.push_back("se differs from sphere + cylinder/2 by more than 0.13");
    return out;
}

/// Parses the screening CSV. Malformed rows are collected in `errors`; the call
/// throws SchemaError on a bad header or when every data row is rejected.
inline ParseResult parse_records(std::istream& in) {
    ParseResult result;
    std::string line;
    std::size_t line_no = 0;

    std::array<std::size_t, kRecordColumns.size()> col{};
    std::size_t header_width = 0;
    for (;;) {
        if (!std::getline(in, line)) throw SchemaError("empty input: header row required");
        ++line_no;
        if (!detail::trim(line).empty()) break;
    }
    {
        std::string_view header = line;
        if (header.size() >= 3 && header.substr(0, 3) == "\xEF\xBB\xBF") header.remove_prefix(3);
        const auto names = detail::split_csv(header);
        header_width = names.size();
        for (std::size_t c = 0; c < kRecordColumns.size(); ++c) {
            const auto it = std::find(names.begin(), names.end(), kRecordColumns[c]);
            if (it == names.end())
                throw SchemaError("missing required column '" + std::string(kRecordColumns[c]) + "'");
            col[c] = static_cast<std::size_t>(it - names.begin());
        }
    }

    std::size_t data_rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        ++data_rows;
        const auto fields = detail::split_csv(line);
        auto fail = [&](std::string reason) { result.errors.push_back({line_no, std::move(reason)}); };
        if (fields.size() != header_width) {
            fail("expected " + std::to_string(header_width) + " fields, got " + std::to_string(fields.size()));
            continue;
        }
        auto get = [&](std::size_t c) { return fields[col[c]]; };

        VisionRecord r;
        r.source_row = line_no;
        std::string bad;
        auto num = [&](std::size_t c, double& out) {
            const auto v = detail::parse_double(get(c));
            if (!v) {
                if (bad.empty()) bad = "unparseable " + std::string(kRecordColumns[c]) + " '" + std::string(get(c)) + "'";
                return;
            }
            out = *v;
        };
        auto integer = [&](std::size_t c, int& out) {
            const auto v = detail::parse_int(get(c));
            if (!v) {
                if (bad.empty()) bad = "unparseable " + std::string(kRecordColumns[c]) + " '" + std::string(get(c)) + "'";
                return;
            }
            out = *v;
        };

        r.subject_id = std::string(get(0));
        const auto eye = get(1);
        if (eye == "L" || eye == "l") r.eye = Eye::left;
        else if (eye == "R" || eye == "r") r.eye = Eye::right;
        else bad = "eye must be L or R";
        if (const auto d = parse_date(get(2))) r.check_date = *d;
        else if (bad.empty()) bad = "check_date must be YYYY-MM-DD";
        integer(3, r.school_age_group);
        int gender = 0, correction = 0;
        integer(4, gender);
        integer(5, r.age);
        integer(6, correction);
        num(7, r.uva);
        num(8, r.sphere);
        num(9, r.cylinder);
        num(10, r.axis);
        num(11, r.k1);
        num(12, r.k2);
        num(13, r.axial_length);
        integer(14, r.myopia_flag);
        integer(15, r.myopia_degree);
        num(16, r.se);
        if (bad.empty() && gender != 0 && gender != 1) bad = "gender out of {0,1}";
        if (bad.empty() && correction != 0 && correction != 1) bad = "correction_method out of {0,1}";
        if (!bad.empty()) {
            fail(std::move(bad));
            continue;
        }
        r.gender = static_cast<Gender>(gender);
        r.correction_method = static_cast<Correction>(correction);
        if (auto err = validate_record(r)) {
            fail(std::move(*err));
            continue;
        }
        for (auto& w : soft_warnings(r)) result.warnings.push_back({line_no, std::move(w)});
        result.records.push_back(std::move(r));
    }
    if (data_rows > 0 && result.records.empty())
        throw SchemaError("all " + std::to_string(data_rows) + " data rows rejected; first: row " +
                          std::to_string(result.errors.front().row) + ": " + result.errors.front().reason);
    return result;
}

inline void write_records_csv(std::ostream& out, const std::vector<VisionRecord>& records) {
    for (std::size_t c = 0; c < kRecordColumns.size(); ++c) out << (c ? "," : "") << kRecordColumns[c];
    out << '\n';
    char buf[512];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, ",%s,%s,%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%.17g\n",
                      r.eye == Eye::left ? "L" : "R", format_date(r.check_date).c_str(), r.school_age_group,
                      static_cast<int>(r.gender), r.age, static_cast<int>(r.correction_method), r.uva, r.sphere,
                      r.cylinder, r.axis, r.k1, r.k2, r.axial_length, r.myopia_flag, r.myopia_degree, r.se);
        out << r.subject_id << buf;
    }
}

inline void write_issue_report(std::ostream& out, const std::vector<RowIssue>& issues) {
    out << "row,reason\n";
    for (const auto& i : issues) {
        std::string reason = i.reason;
        std::replace(reason.begin(), reason.end(), ',', ';');
        out << i.row << ',' << reason << '\n';
    }
}

/// Groups records by (subject, eye) in first-appearance order and sorts each
/// group by date. Same-day duplicates keep the first occurrence; groups with
/// fewer than two records go to the skip report.
inline GroupResult group_histories(const std::vector<VisionRecord>& records) {
    GroupResult result;
    std::map<std::pair<std::string, Eye>, std::size_t> index;
    std::vector<EyeHistory> groups;
    for (const auto& r : records) {
        const auto [it, inserted] = index.try_emplace({r.subject_id, r.eye}, groups.size());
        if (inserted) groups.push_back(EyeHistory{r.subject_id, r.eye, {}});
        groups[it->second].records.push_back(r);
    }
    for (auto& g : groups) {
        std::stable_sort(g.records.begin(), g.records.end(),
                         [](const VisionRecord& a, const VisionRecord& b) { return a.check_date < b.check_date; });
        std::vector<VisionRecord> kept;
        kept.reserve(g.records.size());
        for (auto& r : g.records) {
            if (!kept.empty() && kept.back().check_date == r.check_date) {
                const std::string why = "duplicate record for subject " + r.subject_id + " eye " +
                                        (r.eye == Eye::left ? "L" : "R") + " on " + format_date(r.check_date) +
                                        "; kept row " + std::to_string(kept.back().source_row);
                result.warnings.push_back({r.source_row, why});
                result.skipped.push_back({r.source_row, why});
                continue;
            }
            kept.push_back(std::move(r));
        }
        if (kept.size() < 2) {
            for (const auto& r : kept)
                result.skipped.push_back({r.source_row, "history of subject " + r.subject_id + " eye " +
                                                            (r.eye == Eye::left ? "L" : "R") +
                                                            " has fewer than 2 records"});
            continue;
        }
        g.records = std::move(kept);
        result.histories.push_back(std::move(g));
    }
    return result;
}

} // namespace tlstm
