#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "tlstm/eval.hpp"

using namespace tlstm;

TEST(Mae, HandValue) {
    const std::vector<double> y = {1, 2}, yhat = {0, 0};
    EXPECT_DOUBLE_EQ(mae(y, yhat), 1.5);
}

TEST(Mae, BoundedByRootMse) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> y(9), yhat(9);
        double sq = 0.0;
        for (std::size_t i = 0; i < 9; ++i) {
            y[i] = n(rng);
            yhat[i] = n(rng);
            sq += (y[i] - yhat[i]) * (y[i] - yhat[i]);
        }
        EXPECT_LE(mae(y, yhat), std::sqrt(sq / 9.0) + 1e-15);
    }
    EXPECT_THROW(mae(std::vector<double>{}, std::vector<double>{}), DomainError);
}

TEST(Aggregate, CellMeanAndPopulationStd) {
    const std::vector<ErrorPoint> pts = {{1, 1, 0.1}, {1, 1, 0.2}, {1, 1, 0.3}};
    const auto m = aggregate(pts);
    const auto& c = m.cells.at({1, 1});
    EXPECT_NEAR(c.mean, 0.2, 1e-15);
    EXPECT_NEAR(c.std, 0.0816497, 1e-7);
    EXPECT_EQ(c.count, 3u);
}

TEST(Aggregate, SmallCellThreshold) {
    EXPECT_TRUE((CellStats{0.0, 0.0, 99}.small_sample()));
    EXPECT_FALSE((CellStats{0.0, 0.0, 100}.small_sample()));
}

TEST(Aggregate, WithinAcceptableCountsBoundary) {
    const std::vector<ErrorPoint> pts = {{1, 1, 0.75}, {1, 1, 0.76}, {2, 1, 0.1}, {2, 2, 2.0}};
    EXPECT_DOUBLE_EQ(aggregate(pts).within_acceptable, 0.5);
}

TEST(Aggregate, CellsRecombineToOverall) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> dur(1, 12);
    std::uniform_int_distribution<std::size_t> len(1, 4);
    std::exponential_distribution<double> err(3.0);
    std::vector<ErrorPoint> pts(3000);
    for (auto& p : pts) p = {dur(rng), len(rng), err(rng)};
    const auto m = aggregate(pts);
    double weighted = 0.0;
    std::size_t n = 0;
    for (const auto& [key, c] : m.cells) {
        weighted += c.mean * static_cast<double>(c.count);
        n += c.count;
    }
    EXPECT_EQ(n, pts.size());
    EXPECT_NEAR(weighted / static_cast<double>(n), m.overall.mean, 1e-12);
    EXPECT_EQ(m.max_duration(), 12);
}

TEST(Render, BlankAndFlaggedCells) {
    std::vector<ErrorPoint> pts;
    for (int i = 0; i < 100; ++i) pts.push_back({1, 1, 0.5});
    pts.push_back({2, 3, 0.25});
    const auto m = aggregate(pts);
    const auto csv = render_table(m, TableFormat::csv);
    std::istringstream lines(csv);
    std::string header, row1, row2, row3;
    std::getline(lines, header);
    std::getline(lines, row1);
    std::getline(lines, row2);
    std::getline(lines, row3);
    EXPECT_EQ(header, "duration,1,2,3,4");
    EXPECT_EQ(row1, "1,0.500 \xC2\xB1 0.000 (100),,,");
    EXPECT_EQ(row2, "2,,,*0.250 \xC2\xB1 0.000 (1),");
    EXPECT_EQ(row3, "3,,,,");
    const auto md = render_table(m, TableFormat::markdown);
    EXPECT_NE(md.find("| 2 |  |  | *0.250"), std::string::npos);
    EXPECT_NE(md.find("Overall MAE"), std::string::npos);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
}

TEST(Render, MetricsCsvRows) {
    const std::vector<ErrorPoint> pts = {{3, 2, 0.1}, {1, 1, 0.3}};
    std::ostringstream out;
    write_metrics_csv(out, aggregate(pts));
    EXPECT_EQ(out.str(),
              "duration,length,mean,std,count,flag\n"
              "1,1,0.300000,0.000000,1,*\n"
              "3,2,0.100000,0.000000,1,*\n"
              "overall,all,0.200000,0.100000,2,*\n");
}

TEST(Evaluate, ErrorPointsUseHorizonAndLength) {
    Sample s;
    s.inputs.resize(2);
    s.intervals = {2, 5};
    s.label_se = -1.0;
    const std::vector<Sample> samples = {s};
    const std::vector<double> pred = {-1.25};
    const auto pts = error_points(samples, pred);
    EXPECT_EQ(pts[0].duration, 5);
    EXPECT_EQ(pts[0].length, 2u);
    EXPECT_DOUBLE_EQ(pts[0].abs_error, 0.25);
    EXPECT_THROW(evaluate({}, TlstmParams::zeros(kFeatureDim, 2), Standardizer{}, DecayKind::log_decay), DomainError);
}
