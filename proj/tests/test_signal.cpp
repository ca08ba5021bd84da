#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "nilm/signal.hpp"

using namespace nilm;

namespace {

WaveformRecord sine_record(double freq, double amplitude, double rate, std::size_t n, double phase = 0.0) {
    WaveformRecord r;
    r.sample_rate = rate;
    r.label = "sine";
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / rate;
        r.voltage.push_back(std::sin(2 * std::numbers::pi * freq * t + phase));
        r.current.push_back(amplitude * std::sin(2 * std::numbers::pi * freq * t + phase));
    }
    return r;
}

}  // namespace

TEST(Resample, LengthFollowsRateRatio) {
    const auto r = sine_record(60.0, 1.0, 30000.0, 30000);
    const auto out = resample(r, 3000.0);
    EXPECT_EQ(out.size(), 3000u);
    EXPECT_EQ(out.voltage.size(), 3000u);
    EXPECT_DOUBLE_EQ(out.sample_rate, 3000.0);
}

TEST(Resample, SameRateIsIdentity) {
    const auto r = sine_record(60.0, 2.0, 3000.0, 500);
    const auto out = resample(r, 3000.0);
    EXPECT_EQ(out.current, r.current);
    EXPECT_EQ(out.voltage, r.voltage);
}

TEST(Resample, SinePreservedAgainstAnalyticSamples) {
    const double amp = 5.0;
    const auto out = resample(sine_record(60.0, amp, 30000.0, 30000), 3000.0);
    // interior only: the kernel support at the edges is truncated
    double worst = 0.0;
    for (std::size_t j = 50; j + 50 < out.size(); ++j) {
        const double expected = amp * std::sin(2 * std::numbers::pi * 60.0 * static_cast<double>(j) / 3000.0);
        worst = std::max(worst, std::abs(out.current[j] - expected));
    }
    EXPECT_LT(worst, 0.01 * amp);
}

TEST(Resample, RejectsBadRates) {
    const auto r = sine_record(60.0, 1.0, 3000.0, 100);
    EXPECT_THROW(resample(r, 0.0), InvalidArgument);
    EXPECT_THROW(resample(r, -5.0), InvalidArgument);
    EXPECT_THROW(resample(r, 6000.0), Unsupported);
}

TEST(Resample, BandLimitedRmsChangeBelowOnePercent) {
    // sines well below a quarter of the target Nyquist frequency
    for (double f : {60.0, 180.0, 300.0}) {
        const auto r = sine_record(f, 3.0, 30000.0, 30000, 0.3);
        const auto out = resample(r, 3000.0);
        EXPECT_NEAR(rms(out.current) / rms(r.current), 1.0, 0.01) << f << " Hz";
    }
}

TEST(AbscissaCrossings, SineZerosAtPeriodStarts) {
    std::vector<double> v;
    for (int i = 0; i < 300; ++i) v.push_back(std::sin(2 * std::numbers::pi * i / 100.0));
    const auto c = abscissa_crossings(v);
    ASSERT_EQ(c.size(), 3u);
    EXPECT_NEAR(c[0], 0.0, 0.5);
    EXPECT_NEAR(c[1], 100.0, 0.5);
    EXPECT_NEAR(c[2], 200.0, 0.5);
}

TEST(AbscissaCrossings, AllPositiveHasNone) {
    EXPECT_TRUE(abscissa_crossings(std::vector<double>{1.0, 2.0, 0.5, 3.0}).empty());
}

TEST(AbscissaCrossings, LinearInterpolation) {
    const auto c = abscissa_crossings(std::vector<double>{-1.0, 1.0});
    ASSERT_EQ(c.size(), 1u);
    EXPECT_DOUBLE_EQ(c[0], 0.5);
    EXPECT_THROW(abscissa_crossings(std::vector<double>{1.0}), InvalidArgument);
}

TEST(AbscissaCrossings, StrictlyIncreasingWithPeriodGaps) {
    const auto r = sine_record(60.0, 1.0, 3000.0, 3000, 1.1);
    const auto c = abscissa_crossings(r.voltage);
    ASSERT_GT(c.size(), 10u);
    for (std::size_t i = 1; i < c.size(); ++i) {
        EXPECT_LT(c[i - 1], c[i]);
        EXPECT_NEAR(c[i] - c[i - 1], 50.0, 1.0);
    }
}

TEST(ExtractWindows, OneSecondOfMainsAtThreeKilohertz) {
    const auto r = sine_record(60.0, 1.0, 3000.0, 3000);
    const auto w = extract_windows(r, 1, 60.0);
    EXPECT_TRUE(w.size() == 59 || w.size() == 60) << w.size();
    for (const auto& x : w) EXPECT_EQ(x.size(), 50u);
}

TEST(ExtractWindows, TooShortGivesEmpty) {
    const auto r = sine_record(60.0, 1.0, 3000.0, 10);
    EXPECT_TRUE(extract_windows(r, 1, 60.0).empty());
}

TEST(ExtractWindows, TwoDistinctPeriodsReproduced) {
    WaveformRecord r;
    r.sample_rate = 3000.0;
    for (int i = 0; i <= 100; ++i) {
        r.voltage.push_back(std::sin(2 * std::numbers::pi * (i - 0.5) / 50.0));
        r.current.push_back(i <= 50 ? 1.0 + i : -1000.0 - i);
    }
    const auto w = extract_windows(r, 1, 60.0);
    ASSERT_EQ(w.size(), 2u);
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(w[0].current[static_cast<std::size_t>(i)], r.current[static_cast<std::size_t>(1 + i)]);
        EXPECT_EQ(w[1].current[static_cast<std::size_t>(i)], r.current[static_cast<std::size_t>(51 + i)]);
    }
}

TEST(ExtractWindows, SpansDisjointAndEqualLength) {
    const auto r = sine_record(59.7, 1.0, 3000.0, 6000, 2.0);
    const auto spans = window_spans(r.voltage, 500);
    ASSERT_GT(spans.size(), 5u);
    for (std::size_t i = 0; i < spans.size(); ++i) {
        EXPECT_EQ(spans[i].length, 500u);
        if (i) EXPECT_GE(spans[i].begin, spans[i - 1].begin + spans[i - 1].length);
    }
}

TEST(Rms, Examples) {
    EXPECT_DOUBLE_EQ(rms(std::vector<double>(7, -2.5)), 2.5);
    EXPECT_NEAR(rms(std::vector<double>{3.0, 4.0}), std::sqrt(12.5), 1e-15);
    std::vector<double> s;
    for (int i = 0; i < 400; ++i) s.push_back(3.0 * std::sin(2 * std::numbers::pi * i / 100.0));
    EXPECT_NEAR(rms(s), 3.0 / std::sqrt(2.0), 1e-6);
    EXPECT_THROW(rms(std::vector<double>{}), InvalidArgument);
}
