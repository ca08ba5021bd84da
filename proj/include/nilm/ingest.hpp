#pragma once

// Per-appliance data sources: PLAID-style CSV recordings described by a
// JSON manifest, and a seeded synthetic signature bank so the pipeline can
// run without external data.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nilm/error.hpp"
#include "nilm/io.hpp"
#include "nilm/rng.hpp"
#include "nilm/signal.hpp"

namespace nilm {

struct LabeledDataset {
    std::vector<WaveformRecord> records;
    std::vector<std::string> class_names;
    double sample_rate = 0.0;

    std::size_t class_index(const std::string& name) const {
        auto it = std::find(class_names.begin(), class_names.end(), name);
        if (it == class_names.end()) throw DataError("unknown class label '" + name + "'");
        return static_cast<std::size_t>(it - class_names.begin());
    }

    void validate() const {
        for (const auto& r : records) {
            r.validate();
            class_index(r.label);
            if (r.sample_rate != sample_rate)
                throw DataError("LabeledDataset: record rate " + std::to_string(r.sample_rate) +
                                " differs from dataset rate " + std::to_string(sample_rate));
        }
    }
};

struct Harmonic {
    int order = 1;
    double relative_amplitude = 1.0;
    double phase = 0.0;  // radians, relative to the shifted fundamental
};

/// Parametric appliance current signature.
struct SignatureSpec {
    std::string class_name;
    double fundamental_amplitude = 1.0;  // peak amperes
    std::vector<Harmonic> harmonic_profile{{1, 1.0, 0.0}};
    double power_factor_angle = 0.0;  // radians, current lags voltage when positive
    double noise_std = 0.0;           // amperes

    void validate() const {
        for (const auto& h : harmonic_profile) {
            detail::require<InvalidArgument>(h.order >= 1, "SignatureSpec '" + class_name + "': harmonic order < 1");
            detail::require<InvalidArgument>(h.relative_amplitude >= 0.0,
                                             "SignatureSpec '" + class_name + "': negative harmonic amplitude");
        }
    }
};

struct MainsConfig {
    double frequency_hz = 60.0;
    double v_rms = 120.0;
};

/// Renders one recording of `spec`: ideal mains voltage and
/// i(t) = A * sum_h rel_h * sin(h * (wt - phi) + phase_h) + noise.
inline WaveformRecord synth_signature(const SignatureSpec& spec, double duration, double sample_rate,
                                      std::uint64_t rng_seed, const MainsConfig& mains = {}) {
    spec.validate();
    detail::require<InvalidArgument>(duration > 0.0, "synth_signature: duration must be > 0");
    detail::require<InvalidArgument>(sample_rate > 0.0, "synth_signature: sample_rate must be > 0");
    const auto n = static_cast<std::size_t>(std::llround(duration * sample_rate));
    detail::require<InvalidArgument>(n >= 2, "synth_signature: fewer than 2 samples");

    WaveformRecord rec;
    rec.sample_rate = sample_rate;
    rec.label = spec.class_name;
    rec.voltage.resize(n);
    rec.current.resize(n);
    const double w = 2.0 * std::numbers::pi * mains.frequency_hz;
    const double v_peak = mains.v_rms * std::numbers::sqrt2;
    Rng rng(rng_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        rec.voltage[i] = v_peak * std::sin(w * t);
        double c = 0.0;
        for (const auto& h : spec.harmonic_profile)
            c += h.relative_amplitude * std::sin(h.order * (w * t - spec.power_factor_angle) + h.phase);
        rec.current[i] = spec.fundamental_amplitude * c;
        if (spec.noise_std > 0.0) rec.current[i] += spec.noise_std * noise(rng);
    }
    return rec;
}

/// Instance-to-instance variation applied when drawing several recordings
/// of one class (different brands/units of the same appliance type).
struct InstanceVariation {
    double amplitude_jitter = 0.15;  // relative, uniform +-
    double phase_jitter = 0.05;      // radians, uniform +-
    double harmonic_jitter = 0.15;   // relative, uniform +- per harmonic
};

inline SignatureSpec perturb(const SignatureSpec& base, const InstanceVariation& var, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    SignatureSpec s = base;
    s.fundamental_amplitude *= 1.0 + var.amplitude_jitter * u(rng);
    s.power_factor_angle += var.phase_jitter * u(rng);
    for (auto& h : s.harmonic_profile) {
        if (h.order == 1) continue;
        h.relative_amplitude *= 1.0 + var.harmonic_jitter * u(rng);
        h.phase += var.phase_jitter * u(rng);
    }
    return s;
}

/// The shipped signature bank. The first eight entries form the desk-scale
/// bank; all fifteen mirror the PLAID class count.
inline std::vector<SignatureSpec> default_signature_bank(std::size_t n_classes = 8) {
    detail::require<InvalidArgument>(n_classes >= 1 && n_classes <= 15,
                                     "default_signature_bank: n_classes must be in [1, 15]");
    using H = Harmonic;
    std::vector<SignatureSpec> bank = {
        {"heater", 6.0, {H{1, 1.0, 0.0}, H{3, 0.02, 0.0}}, 0.0, 0.01},
        {"fridge", 1.6, {H{1, 1.0, 0.0}, H{3, 0.12, 0.6}, H{5, 0.04, 1.2}}, 0.85, 0.01},
        {"laptop", 0.9, {H{1, 1.0, 0.0}, H{3, 0.85, 3.0}, H{5, 0.6, 0.2}, H{7, 0.35, 3.3}, H{9, 0.15, 0.4}}, -0.15, 0.01},
        {"fan", 0.5, {H{1, 1.0, 0.0}, H{3, 0.05, 1.8}}, 0.6, 0.01},
        {"microwave", 9.0, {H{1, 1.0, 0.0}, H{2, 0.08, 0.5}, H{3, 0.3, 2.2}, H{5, 0.1, 0.9}}, 0.25, 0.01},
        {"cfl", 0.25, {H{1, 1.0, 0.0}, H{3, 0.8, 2.6}, H{5, 0.55, 5.1}, H{7, 0.4, 1.4}, H{9, 0.3, 4.0}, H{11, 0.2, 0.6}}, -0.4, 0.01},
        {"vacuum", 5.0, {H{1, 1.0, 0.0}, H{3, 0.18, 4.1}, H{5, 0.07, 2.0}}, 0.35, 0.01},
        {"hairdryer", 4.0, {H{1, 1.0, 0.0}, H{2, 0.25, 1.1}, H{4, 0.06, 0.3}}, 0.05, 0.01},
        {"incandescent", 0.6, {H{1, 1.0, 0.0}}, 0.0, 0.01},
        {"air_conditioner", 8.0, {H{1, 1.0, 0.0}, H{3, 0.1, 0.2}, H{5, 0.03, 2.5}}, 0.65, 0.01},
        {"washing_machine", 2.5, {H{1, 1.0, 0.0}, H{3, 0.22, 1.6}, H{5, 0.12, 3.9}, H{7, 0.05, 0.7}}, 0.55, 0.01},
        {"soldering_iron", 0.35, {H{1, 1.0, 0.0}, H{2, 0.1, 0.4}}, 0.02, 0.01},
        {"coffee_maker", 7.0, {H{1, 1.0, 0.0}, H{3, 0.015, 1.0}}, 0.01, 0.01},
        {"water_kettle", 12.0, {H{1, 1.0, 0.0}}, 0.0, 0.01},
        {"blender", 3.0, {H{1, 1.0, 0.0}, H{2, 0.12, 2.8}, H{3, 0.25, 0.9}, H{5, 0.08, 4.4}}, 0.45, 0.01},
    };
    bank.resize(n_classes);
    return bank;
}

inline nlohmann::json bank_to_json(const std::vector<SignatureSpec>& bank) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& s : bank) {
        nlohmann::json hp = nlohmann::json::array();
        for (const auto& h : s.harmonic_profile) hp.push_back({h.order, h.relative_amplitude, h.phase});
        classes.push_back({{"class_name", s.class_name},
                           {"fundamental_amplitude", s.fundamental_amplitude},
                           {"harmonic_profile", hp},
                           {"power_factor_angle", s.power_factor_angle},
                           {"noise_std", s.noise_std}});
    }
    return {{"classes", classes}};
}

inline std::vector<SignatureSpec> bank_from_json(const nlohmann::json& j) {
    std::vector<SignatureSpec> bank;
    try {
        for (const auto& c : j.at("classes")) {
            SignatureSpec s;
            s.class_name = c.at("class_name").get<std::string>();
            s.fundamental_amplitude = c.at("fundamental_amplitude").get<double>();
            s.harmonic_profile.clear();
            for (const auto& h : c.at("harmonic_profile"))
                s.harmonic_profile.push_back({h.at(0).get<int>(), h.at(1).get<double>(), h.at(2).get<double>()});
            s.power_factor_angle = c.value("power_factor_angle", 0.0);
            s.noise_std = c.value("noise_std", 0.0);
            s.validate();
            bank.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("signature bank: ") + e.what());
    }
    return bank;
}

struct SyntheticSourceConfig {
    std::size_t records_per_class = 20;
    double duration_s = 1.0;
    double sample_rate = 30000.0;
    MainsConfig mains{};
    InstanceVariation variation{};
};

/// Draws `records_per_class` perturbed recordings per bank entry. Class
/// order in the result follows the bank.
inline LabeledDataset synth_dataset(const std::vector<SignatureSpec>& bank, const SyntheticSourceConfig& cfg,
                                    std::uint64_t seed) {
    LabeledDataset ds;
    ds.sample_rate = cfg.sample_rate;
    for (std::size_t c = 0; c < bank.size(); ++c) {
        ds.class_names.push_back(bank[c].class_name);
        for (std::size_t r = 0; r < cfg.records_per_class; ++r) {
            Rng rng(derive_seed(seed, {c, r, 1}));
            const SignatureSpec inst = perturb(bank[c], cfg.variation, rng);
            ds.records.push_back(
                synth_signature(inst, cfg.duration_s, cfg.sample_rate, derive_seed(seed, {c, r, 2}), cfg.mains));
        }
    }
    return ds;
}

namespace detail {

inline double parse_double(std::string_view s, const std::string& where) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
        throw DataError(where + ": non-numeric cell '" + std::string(s) + "'");
    return v;
}

}  // namespace detail

/// Reads one `current,voltage` CSV. The header line is optional.
inline void read_current_voltage_csv(const std::filesystem::path& path, WaveformRecord& rec) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line.find_first_of("abcdefghijklmnopqrstuvwxyz") != std::string::npos &&
            line.find("current") != std::string::npos)
            continue;
        const auto comma = line.find(',');
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (comma == std::string::npos) throw DataError(where + ": expected two columns");
        rec.current.push_back(detail::parse_double(std::string_view(line).substr(0, comma), where));
        rec.voltage.push_back(detail::parse_double(std::string_view(line).substr(comma + 1), where));
    }
}

/// Loads a directory described by a manifest: a JSON array (or an object
/// with a "records" array) of {file, label, sample_rate}. When `class_map`
/// is non-empty, manifest labels are translated through it and unmapped
/// labels are rejected. Class names come out sorted.
inline LabeledDataset load_plaid_csv(const std::filesystem::path& dir,
                                     const std::map<std::string, std::string>& class_map = {},
                                     std::filesystem::path manifest = {}) {
    if (manifest.empty()) manifest = dir / "manifest.json";
    std::ifstream mf(manifest);
    if (!mf) throw DataError("cannot open manifest " + manifest.string());
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + manifest.string() + ": " + e.what());
    }
    const nlohmann::json& entries = j.is_object() ? j.at("records") : j;

    LabeledDataset ds;
    bool first = true;
    for (const auto& e : entries) {
        WaveformRecord rec;
        std::string label = e.at("label").get<std::string>();
        if (!class_map.empty()) {
            auto it = class_map.find(label);
            if (it == class_map.end()) throw DataError("manifest: label '" + label + "' is not in the class map");
            label = it->second;
        }
        rec.label = label;
        rec.sample_rate = e.value("sample_rate", 30000.0);
        read_current_voltage_csv(dir / e.at("file").get<std::string>(), rec);
        try {
            rec.validate();
        } catch (const InvalidArgument& err) {
            throw DataError(e.at("file").get<std::string>() + ": " + err.what());
        }
        if (first) ds.sample_rate = rec.sample_rate;
        first = false;
        if (rec.sample_rate != ds.sample_rate) throw DataError("manifest: mixed sample rates are not supported");
        if (std::find(ds.class_names.begin(), ds.class_names.end(), label) == ds.class_names.end())
            ds.class_names.push_back(label);
        ds.records.push_back(std::move(rec));
    }
    std::sort(ds.class_names.begin(), ds.class_names.end());
    return ds;
}

/// Writes the dataset in the same layout load_plaid_csv reads.
inline void save_plaid_csv(const LabeledDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        char name[32];
        std::snprintf(name, sizeof name, "record_%05zu.csv", i);
        std::ofstream out(dir / name);
        out << "current,voltage\n";
        for (std::size_t t = 0; t < r.size(); ++t)
            out << io::format_double(r.current[t]) << ',' << io::format_double(r.voltage[t]) << '\n';
        manifest.push_back({{"file", name}, {"label", r.label}, {"sample_rate", r.sample_rate}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace nilm
