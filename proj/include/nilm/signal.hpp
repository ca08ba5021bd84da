#pragma once

// Waveform primitives: anti-aliased downsampling, abscissa (voltage
// zero) crossings, crossing-aligned windowing and RMS.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "nilm/error.hpp"

namespace nilm {

using Series = std::vector<double>;

/// One appliance measurement: paired voltage/current at a fixed rate.
struct WaveformRecord {
    Series voltage;
    Series current;
    double sample_rate = 0.0;
    std::string label;

    std::size_t size() const { return current.size(); }

    void validate() const {
        detail::require<InvalidArgument>(voltage.size() == current.size(),
                                         "WaveformRecord: voltage/current length mismatch");
        detail::require<InvalidArgument>(current.size() >= 2, "WaveformRecord: fewer than 2 samples");
        detail::require<InvalidArgument>(sample_rate > 0.0, "WaveformRecord: sample_rate must be > 0");
    }
};

inline double rms(std::span<const double> x) {
    detail::require<InvalidArgument>(!x.empty(), "rms: empty series");
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return std::sqrt(acc / static_cast<double>(x.size()));
}

namespace detail {

inline double sinc(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    const double px = std::numbers::pi * x;
    return std::sin(px) / px;
}

inline double blackman(double t) {  // t in [-1, 1]
    if (std::abs(t) >= 1.0) return 0.0;
    const double a = std::numbers::pi * (t + 1.0);
    return 0.42 - 0.5 * std::cos(a) + 0.08 * std::cos(2.0 * a);
}

// Windowed-sinc evaluation of `x` at fractional input position `pos`.
// Weights outside the series are dropped and the rest renormalised so DC
// gain stays 1 at the edges.
inline double sinc_interp(std::span<const double> x, double pos, double cutoff_norm, int half_width) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    const auto centre = static_cast<std::ptrdiff_t>(std::floor(pos));
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, centre - half_width + 1);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n - 1, centre + half_width);
    double acc = 0.0, wsum = 0.0;
    for (std::ptrdiff_t i = lo; i <= hi; ++i) {
        const double d = static_cast<double>(i) - pos;
        const double w = 2.0 * cutoff_norm * sinc(2.0 * cutoff_norm * d) * blackman(d / half_width);
        acc += w * x[static_cast<std::size_t>(i)];
        wsum += w;
    }
    return wsum != 0.0 ? acc / wsum : 0.0;
}

inline Series resample_series(std::span<const double> x, double from_rate, double to_rate) {
    const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(x.size()) * to_rate / from_rate));
    Series out(n_out);
    const double step = from_rate / to_rate;
    // cutoff at 0.45 * target rate, expressed in cycles per input sample
    const double cutoff_norm = 0.45 * to_rate / from_rate;
    const int half_width = static_cast<int>(std::ceil(16.0 / (2.0 * cutoff_norm)));
    for (std::size_t j = 0; j < n_out; ++j)
        out[j] = sinc_interp(x, static_cast<double>(j) * step, cutoff_norm, half_width);
    return out;
}

}  // namespace detail

/// Downsamples with a Blackman-windowed sinc low-pass (cutoff 0.45 x
/// target rate) evaluated directly at the output instants, so arbitrary
/// rational and irrational ratios are handled without a polyphase bank.
inline WaveformRecord resample(const WaveformRecord& record, double target_rate) {
    detail::require<InvalidArgument>(target_rate > 0.0, "resample: target_rate must be > 0");
    detail::require<InvalidArgument>(record.sample_rate > 0.0, "resample: record sample_rate must be > 0");
    if (target_rate > record.sample_rate)
        throw Unsupported("resample: upsampling is not supported (" + std::to_string(record.sample_rate) +
                          " Hz -> " + std::to_string(target_rate) + " Hz)");
    if (target_rate == record.sample_rate) return record;
    WaveformRecord out;
    out.voltage = detail::resample_series(record.voltage, record.sample_rate, target_rate);
    out.current = detail::resample_series(record.current, record.sample_rate, target_rate);
    out.sample_rate = target_rate;
    out.label = record.label;
    return out;
}

/// Negative-to-positive zero crossings at linearly interpolated fractional
/// positions. A crossing is counted between samples i and i+1 whenever
/// v[i] <= 0 < v[i+1]; the result is strictly increasing.
inline std::vector<double> abscissa_crossings(std::span<const double> v) {
    detail::require<InvalidArgument>(v.size() >= 2, "abscissa_crossings: need at least 2 samples");
    std::vector<double> out;
    for (std::size_t i = 0; i + 1 < v.size(); ++i) {
        if (v[i] <= 0.0 && v[i + 1] > 0.0) {
            const double frac = -v[i] / (v[i + 1] - v[i]);
            out.push_back(static_cast<double>(i) + frac);
        }
    }
    return out;
}

inline std::size_t window_length(double sample_rate, double mains_hz, int periods_per_window) {
    return static_cast<std::size_t>(std::llround(periods_per_window * sample_rate / mains_hz));
}

/// Index range [begin, begin+length) of a window in its source record.
struct WindowSpan {
    std::size_t begin = 0;
    std::size_t length = 0;
};

/// Start positions of non-overlapping windows, each starting at the first
/// sample at or after a voltage abscissa crossing.
inline std::vector<WindowSpan> window_spans(std::span<const double> voltage, std::size_t length) {
    std::vector<WindowSpan> spans;
    if (length == 0 || voltage.size() < std::max<std::size_t>(length, 2)) return spans;
    std::size_t next_free = 0;
    for (double c : abscissa_crossings(voltage)) {
        // crossings within rounding noise of a sample snap onto it
        const auto start = static_cast<std::size_t>(std::ceil(c - 1e-6));
        if (start < next_free) continue;
        if (start + length > voltage.size()) break;
        spans.push_back({start, length});
        next_free = start + length;
    }
    return spans;
}

/// Cuts a record into crossing-aligned windows of exactly
/// `periods_per_window` nominal mains periods. Records shorter than one
/// window yield an empty list.
inline std::vector<WaveformRecord> extract_windows(const WaveformRecord& record, int periods_per_window,
                                                   double mains_hz = 60.0) {
    detail::require<InvalidArgument>(periods_per_window > 0, "extract_windows: periods_per_window must be > 0");
    detail::require<InvalidArgument>(mains_hz > 0.0, "extract_windows: mains frequency must be > 0");
    const std::size_t len = window_length(record.sample_rate, mains_hz, periods_per_window);
    std::vector<WaveformRecord> out;
    for (const auto& s : window_spans(record.voltage, len)) {
        WaveformRecord w;
        w.voltage.assign(record.voltage.begin() + s.begin, record.voltage.begin() + s.begin + s.length);
        w.current.assign(record.current.begin() + s.begin, record.current.begin() + s.begin + s.length);
        w.sample_rate = record.sample_rate;
        w.label = record.label;
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace nilm
