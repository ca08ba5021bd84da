#pragma once

// Feature transforms used by the comparison baselines: Fryze's
// active/non-active current split and FIT-PS period matrices.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "nilm/error.hpp"
#include "nilm/signal.hpp"

namespace nilm {

struct FryzeComponents {
    Series active_current;      // i_a = p_a / v_rms^2 * v
    Series non_active_current;  // i_f = i - i_a
    double active_power = 0.0;  // mean(v * i)
    double v_rms = 0.0;
};

/// Expects an integer number of fundamental cycles; the whole series is
/// treated as the averaging interval.
inline FryzeComponents fryze_decompose(std::span<const double> voltage, std::span<const double> current) {
    detail::require<InvalidArgument>(voltage.size() == current.size(), "fryze_decompose: length mismatch");
    detail::require<InvalidArgument>(!voltage.empty(), "fryze_decompose: empty series");
    FryzeComponents out;
    out.v_rms = rms(voltage);
    detail::require<InvalidArgument>(out.v_rms > 0.0, "fryze_decompose: v_rms is zero");
    double p = 0.0;
    for (std::size_t t = 0; t < voltage.size(); ++t) p += voltage[t] * current[t];
    out.active_power = p / static_cast<double>(voltage.size());
    const double g = out.active_power / (out.v_rms * out.v_rms);
    out.active_current.resize(voltage.size());
    out.non_active_current.resize(voltage.size());
    for (std::size_t t = 0; t < voltage.size(); ++t) {
        out.active_current[t] = g * voltage[t];
        out.non_active_current[t] = current[t] - out.active_current[t];
    }
    return out;
}

/// n_l x n_k matrix, one row per voltage period.
struct FitPsMatrix {
    std::size_t n_l = 0;
    std::size_t n_k = 0;
    std::vector<double> values;  // row-major

    double operator()(std::size_t l, std::size_t k) const { return values[l * n_k + k]; }
};

namespace detail {

inline double lerp_at(std::span<const double> x, double pos) {
    const double last = static_cast<double>(x.size() - 1);
    if (pos <= 0.0) return x.front();
    if (pos >= last) return x.back();
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double f = pos - static_cast<double>(i);
    return x[i] + f * (x[i + 1] - x[i]);
}

}  // namespace detail

/// Splits the current at consecutive voltage abscissa crossings and
/// resamples every period onto n_k evenly spaced points by linear
/// interpolation, so row columns are phase-aligned regardless of drift.
inline FitPsMatrix fitps_transform(std::span<const double> voltage, std::span<const double> current, std::size_t n_k) {
    detail::require<InvalidArgument>(voltage.size() == current.size(), "fitps_transform: length mismatch");
    detail::require<InvalidArgument>(n_k >= 2, "fitps_transform: n_k must be >= 2");
    const auto crossings = abscissa_crossings(voltage);
    if (crossings.size() < 2) throw InvalidArgument("fitps_transform: fewer than two abscissa crossings");
    FitPsMatrix m;
    m.n_l = crossings.size() - 1;
    m.n_k = n_k;
    m.values.reserve(m.n_l * n_k);
    for (std::size_t l = 0; l + 1 < crossings.size(); ++l) {
        const double a = crossings[l];
        const double step = (crossings[l + 1] - a) / static_cast<double>(n_k);
        for (std::size_t k = 0; k < n_k; ++k) m.values.push_back(detail::lerp_at(current, a + step * static_cast<double>(k)));
    }
    return m;
}

}  // namespace nilm
