#pragma once

// End-to-end runs driven by one RunConfig: source recordings -> split ->
// windows -> aggregates (generate), feature transform + classifier (train),
// metrics (eval), and report regeneration from saved predictions (report).
//
// Every artifact carries the config hash, the seed and an artifact version.
// Nothing time-dependent is written, so identical configs give identical
// bytes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nilm/baseline.hpp"
#include "nilm/decomp.hpp"
#include "nilm/eval.hpp"
#include "nilm/ingest.hpp"
#include "nilm/io.hpp"
#include "nilm/mixer.hpp"
#include "nilm/model.hpp"
#include "nilm/signal.hpp"

namespace nilm {

inline constexpr int kArtifactVersion = 1;

// ---- configuration --------------------------------------------------------

struct RunConfig {
    std::uint64_t seed = 0;

    struct Data {
        std::string source = "synthetic";  // synthetic | plaid
        std::string bank;                  // signature bank JSON; empty: built-in bank
        int n_classes = 15;                // built-in bank size
        std::size_t records_per_class = 20;
        double duration_s = 1.0;
        double source_rate = 30000.0;
        std::string plaid_dir;
        std::string manifest;  // empty: <plaid_dir>/manifest.json
        std::map<std::string, std::string> class_map;
    } data;

    struct Signal {
        double resample_rate = 3000.0;
        int periods_per_window = 10;
        double mains_hz = 60.0;
    } signal;

    std::array<double, 3> split{0.7, 0.1, 0.2};

    struct Mix {
        int n_min = 1;
        int n_max = 15;
        int f_min = 1;
        int f_max = 10;
        std::size_t samples_per_k = 100;  // across all splits, divided by the split fractions
        double noise_std = 0.0;
    } mix;

    struct Features {
        std::string kind = "icpc";  // icpc | pca | ica | fryze | fitps-flat
        int k_pca = 0;
        int k_ica = 0;
        int r = 0;
        double explained_variance = 0.95;
        int max_components = 40;
        std::string nonlinearity = "logcosh";
        int max_iter = 400;
        double tol = 1e-5;
        int fitps_n_k = 0;  // 0: samples per nominal mains period
    } features;

    struct Model {
        int n_blocks = 18;
        int hidden_dim = 0;
        double dropout_p = 0.1;
        double threshold = 0.5;
        std::size_t target_params = 65000;
    } model;

    struct Train {
        int epochs = 150;
        int batch_size = 128;
        double lr = 1e-2;
    } train;

    std::string out = "run";  // not hashed: where a run is written does not change it

    nlohmann::json to_json() const {
        return {
            {"seed", seed},
            {"data",
             {{"source", data.source}, {"bank", data.bank}, {"n_classes", data.n_classes},
              {"records_per_class", data.records_per_class}, {"duration_s", data.duration_s},
              {"source_rate", data.source_rate}, {"plaid_dir", data.plaid_dir}, {"manifest", data.manifest},
              {"class_map", data.class_map}}},
            {"signal",
             {{"resample_rate", signal.resample_rate}, {"periods_per_window", signal.periods_per_window},
              {"mains_hz", signal.mains_hz}}},
            {"split", {{"train", split[0]}, {"val", split[1]}, {"test", split[2]}}},
            {"mix",
             {{"n_min", mix.n_min}, {"n_max", mix.n_max}, {"f_min", mix.f_min}, {"f_max", mix.f_max},
              {"samples_per_k", mix.samples_per_k}, {"noise_std", mix.noise_std}}},
            {"features",
             {{"kind", features.kind}, {"k_pca", features.k_pca}, {"k_ica", features.k_ica}, {"r", features.r},
              {"explained_variance", features.explained_variance}, {"max_components", features.max_components},
              {"nonlinearity", features.nonlinearity}, {"max_iter", features.max_iter}, {"tol", features.tol},
              {"fitps_n_k", features.fitps_n_k}}},
            {"model",
             {{"n_blocks", model.n_blocks}, {"hidden_dim", model.hidden_dim}, {"dropout_p", model.dropout_p},
              {"threshold", model.threshold}, {"target_params", model.target_params}}},
            {"train", {{"epochs", train.epochs}, {"batch_size", train.batch_size}, {"lr", train.lr}}},
            {"out", out},
        };
    }

    static RunConfig from_json(const nlohmann::json& j);

    void validate() const {
        auto need = [](bool ok, const std::string& msg) { detail::require<InvalidArgument>(ok, "config: " + msg); };
        need(data.source == "synthetic" || data.source == "plaid", "data.source must be 'synthetic' or 'plaid'");
        if (data.source == "plaid") need(!data.plaid_dir.empty(), "data.plaid_dir is required when data.source is 'plaid'");
        need(data.n_classes >= 1 && data.n_classes <= 15, "data.n_classes must be in [1, 15]");
        need(data.records_per_class >= 3, "data.records_per_class must be >= 3");
        need(data.duration_s > 0.0, "data.duration_s must be > 0");
        need(data.source_rate > 0.0, "data.source_rate must be > 0");
        need(signal.resample_rate > 0.0, "signal.resample_rate must be > 0");
        need(signal.periods_per_window >= 1, "signal.periods_per_window must be >= 1");
        need(signal.mains_hz > 0.0, "signal.mains_hz must be > 0");
        need(split[0] > 0.0 && split[1] > 0.0 && split[2] > 0.0 && std::abs(split[0] + split[1] + split[2] - 1.0) < 1e-9,
             "split fractions must be positive and sum to 1");
        need(mix.n_min >= 1, "mix.n_min must be >= 1");
        need(mix.n_min <= mix.n_max, "mix.n_min must be <= mix.n_max");
        need(mix.f_min >= 1, "mix.f_min must be >= 1");
        need(mix.f_min <= mix.f_max, "mix.f_min must be <= mix.f_max (got f_min=" + std::to_string(mix.f_min) +
                                         ", f_max=" + std::to_string(mix.f_max) + ")");
        need(mix.samples_per_k >= 1, "mix.samples_per_k must be >= 1");
        need(mix.noise_std >= 0.0, "mix.noise_std must be >= 0");
        static const std::set<std::string> kinds{"icpc", "pca", "ica", "fryze", "fitps-flat"};
        need(kinds.count(features.kind) == 1, "features.kind must be one of icpc|pca|ica|fryze|fitps-flat");
        need(features.k_pca >= 0 && features.k_ica >= 0 && features.r >= 0, "features.k_pca/k_ica/r must be >= 0");
        need(features.explained_variance > 0.0 && features.explained_variance <= 1.0,
             "features.explained_variance must be in (0, 1]");
        need(features.max_components >= 1, "features.max_components must be >= 1");
        need(features.nonlinearity == "logcosh" || features.nonlinearity == "cubic",
             "features.nonlinearity must be 'logcosh' or 'cubic'");
        need(features.max_iter >= 1, "features.max_iter must be >= 1");
        need(features.tol > 0.0, "features.tol must be > 0");
        need(features.fitps_n_k == 0 || features.fitps_n_k >= 2, "features.fitps_n_k must be 0 or >= 2");
        need(model.n_blocks >= 1, "model.n_blocks must be >= 1");
        need(model.hidden_dim >= 0, "model.hidden_dim must be >= 0");
        need(model.dropout_p >= 0.0 && model.dropout_p < 1.0, "model.dropout_p must be in [0, 1)");
        need(model.threshold > 0.0 && model.threshold < 1.0, "model.threshold must be in (0, 1)");
        need(train.epochs >= 1, "train.epochs must be >= 1");
        need(train.batch_size >= 1, "train.batch_size must be >= 1");
        need(train.lr >= 0.0, "train.lr must be >= 0");
    }

    /// Canonical serialisation: sorted keys, `out` dropped.
    nlohmann::json canonical() const {
        auto j = to_json();
        j.erase("out");
        return j;
    }

    /// Hash over everything that shapes a run.
    std::string config_hash() const { return io::hex64(io::fnv1a64(canonical().dump())); }

    /// Hash over the sections that shape the generated dataset only.
    std::string data_hash() const {
        const auto j = canonical();
        const nlohmann::json d{{"seed", j["seed"]}, {"data", j["data"]}, {"signal", j["signal"]}, {"split", j["split"]},
                               {"mix", j["mix"]}};
        return io::hex64(io::fnv1a64(d.dump()));
    }
};

namespace detail {

// Overlays `patch` onto `base`, rejecting keys the base does not have so
// typos in config files surface as errors.
inline void overlay(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
    if (!patch.is_object()) throw InvalidArgument("config: " + (path.empty() ? "root" : path) + " must be an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw InvalidArgument("config: unknown key '" + key + "'");
        auto& slot = base[it.key()];
        if (slot.is_object() && key != "data.class_map") {
            overlay(slot, it.value(), key);
        } else {
            const bool num_ok = slot.is_number() && it.value().is_number();
            if (!num_ok && slot.type() != it.value().type())
                throw InvalidArgument("config: '" + key + "' has the wrong type");
            slot = it.value();
        }
    }
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& patch) {
    nlohmann::json j = RunConfig{}.to_json();
    detail::overlay(j, patch, "");
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        const auto& d = j.at("data");
        c.data.source = d.at("source").get<std::string>();
        c.data.bank = d.at("bank").get<std::string>();
        c.data.n_classes = d.at("n_classes").get<int>();
        c.data.records_per_class = d.at("records_per_class").get<std::size_t>();
        c.data.duration_s = d.at("duration_s").get<double>();
        c.data.source_rate = d.at("source_rate").get<double>();
        c.data.plaid_dir = d.at("plaid_dir").get<std::string>();
        c.data.manifest = d.at("manifest").get<std::string>();
        c.data.class_map = d.at("class_map").get<std::map<std::string, std::string>>();
        const auto& s = j.at("signal");
        c.signal.resample_rate = s.at("resample_rate").get<double>();
        c.signal.periods_per_window = s.at("periods_per_window").get<int>();
        c.signal.mains_hz = s.at("mains_hz").get<double>();
        const auto& sp = j.at("split");
        c.split = {sp.at("train").get<double>(), sp.at("val").get<double>(), sp.at("test").get<double>()};
        const auto& m = j.at("mix");
        c.mix.n_min = m.at("n_min").get<int>();
        c.mix.n_max = m.at("n_max").get<int>();
        c.mix.f_min = m.at("f_min").get<int>();
        c.mix.f_max = m.at("f_max").get<int>();
        c.mix.samples_per_k = m.at("samples_per_k").get<std::size_t>();
        c.mix.noise_std = m.at("noise_std").get<double>();
        const auto& f = j.at("features");
        c.features.kind = f.at("kind").get<std::string>();
        c.features.k_pca = f.at("k_pca").get<int>();
        c.features.k_ica = f.at("k_ica").get<int>();
        c.features.r = f.at("r").get<int>();
        c.features.explained_variance = f.at("explained_variance").get<double>();
        c.features.max_components = f.at("max_components").get<int>();
        c.features.nonlinearity = f.at("nonlinearity").get<std::string>();
        c.features.max_iter = f.at("max_iter").get<int>();
        c.features.tol = f.at("tol").get<double>();
        c.features.fitps_n_k = f.at("fitps_n_k").get<int>();
        const auto& md = j.at("model");
        c.model.n_blocks = md.at("n_blocks").get<int>();
        c.model.hidden_dim = md.at("hidden_dim").get<int>();
        c.model.dropout_p = md.at("dropout_p").get<double>();
        c.model.threshold = md.at("threshold").get<double>();
        c.model.target_params = md.at("target_params").get<std::size_t>();
        const auto& t = j.at("train");
        c.train.epochs = t.at("epochs").get<int>();
        c.train.batch_size = t.at("batch_size").get<int>();
        c.train.lr = t.at("lr").get<double>();
        c.out = j.at("out").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("config: ") + e.what());
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidArgument("config " + path.string() + ": " + e.what());
    }
    return RunConfig::from_json(j);
}

/// Worker count for parallel stages: hardware threads, capped by the
/// NILM_FUSION_THREADS environment variable when set.
inline unsigned worker_count() {
    unsigned n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("NILM_FUSION_THREADS")) {
        try {
            const int cap = std::stoi(env);
            if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
        } catch (const std::exception&) {
            throw InvalidArgument(std::string("NILM_FUSION_THREADS must be a positive integer, got '") + env + "'");
        }
    }
    return n;
}

// Independent streams for each stage, all derived from the run seed.
enum class SeedStream : std::uint64_t { synth = 1, split = 2, mix = 3, ica = 4, init = 5, train = 6 };

inline std::uint64_t stage_seed(const RunConfig& c, SeedStream s, std::uint64_t extra = 0) {
    return derive_seed(c.seed, {static_cast<std::uint64_t>(s), extra});
}

inline nlohmann::json artifact_stamp(const RunConfig& c) {
    return {{"config_hash", c.config_hash()}, {"data_hash", c.data_hash()}, {"seed", c.seed}, {"version", kArtifactVersion}};
}

// ---- generate -------------------------------------------------------------

inline const std::array<std::string, 3> kSplitNames{"train", "val", "test"};

inline LabeledDataset load_source_recordings(const RunConfig& c) {
    if (c.data.source == "plaid") {
        std::filesystem::path manifest = c.data.manifest;
        return load_plaid_csv(c.data.plaid_dir, c.data.class_map, manifest);
    }
    const auto bank = c.data.bank.empty()
                          ? default_signature_bank(static_cast<std::size_t>(c.data.n_classes))
                          : bank_from_json(nlohmann::json::parse(io::read_text(c.data.bank)));
    SyntheticSourceConfig sc;
    sc.records_per_class = c.data.records_per_class;
    sc.duration_s = c.data.duration_s;
    sc.sample_rate = c.data.source_rate;
    sc.mains.frequency_hz = c.signal.mains_hz;
    return synth_dataset(bank, sc, stage_seed(c, SeedStream::synth));
}

/// Resamples every recording and cuts it into crossing-aligned windows;
/// each window becomes one mixable source record.
inline LabeledDataset to_windows(const LabeledDataset& recordings, const RunConfig& c) {
    LabeledDataset out;
    out.class_names = recordings.class_names;
    out.sample_rate = c.signal.resample_rate;
    for (const auto& rec : recordings.records) {
        const WaveformRecord r = resample(rec, c.signal.resample_rate);
        for (auto& w : extract_windows(r, c.signal.periods_per_window, c.signal.mains_hz)) out.records.push_back(std::move(w));
    }
    return out;
}

/// Aggregates per k for each split: the total is divided by the split
/// fractions, test taking the remainder.
inline std::array<std::size_t, 3> split_samples_per_k(const RunConfig& c) {
    const double n = static_cast<double>(c.mix.samples_per_k);
    std::array<std::size_t, 3> s{};
    s[0] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(c.split[0] * n)));
    s[1] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(c.split[1] * n)));
    s[2] = c.mix.samples_per_k > s[0] + s[1] ? c.mix.samples_per_k - s[0] - s[1] : 1;
    return s;
}

/// Writes <dir>/{train,val,test}.{bin,voltage.bin,json} and
/// <dir>/manifest.json; returns the manifest.
inline nlohmann::json run_generate(const RunConfig& c, const std::filesystem::path& dir, unsigned workers = 1) {
    c.validate();
    const LabeledDataset recordings = load_source_recordings(c);
    if (recordings.records.empty()) throw DataError("generate: the source has no recordings");
    recordings.validate();
    MixConfig probe;
    probe.n_min = c.mix.n_min;
    probe.n_max = c.mix.n_max;
    probe.f_min = c.mix.f_min;
    probe.f_max = c.mix.f_max;
    probe.noise_std = c.mix.noise_std;
    probe.validate(recordings.class_names.size());

    const auto parts = split_records(recordings, c.split, stage_seed(c, SeedStream::split));
    const auto per_k = split_samples_per_k(c);
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = artifact_stamp(c);
    manifest["format"] = "nilm-fusion-dataset";
    manifest["class_names"] = recordings.class_names;
    manifest["sample_rate"] = c.signal.resample_rate;
    manifest["config"] = c.canonical();
    std::size_t window_length = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        const LabeledDataset windows = to_windows(parts[s], c);
        const ClassIndex index = build_class_index(windows);
        for (std::size_t cl = 0; cl < index.size(); ++cl)
            if (index[cl].empty())
                throw DataError("generate: class '" + windows.class_names[cl] + "' has no complete window in the " +
                                kSplitNames[s] + " split");
        MixConfig mc = probe;
        mc.samples_per_k = per_k[s];
        mc.rng_seed = stage_seed(c, SeedStream::mix, s);
        const auto samples = generate_dataset(windows, mc, workers);
        window_length = samples.front().current.size();
        nlohmann::json stamp = artifact_stamp(c);
        stamp["split"] = kSplitNames[s];
        write_aggregates(dir / kSplitNames[s], samples, windows.class_names, windows.sample_rate, stamp);

        std::map<std::string, std::size_t> counts;
        for (const auto& a : samples) ++counts[std::to_string(a.k)];
        manifest["splits"][kSplitNames[s]] = {{"n_samples", samples.size()},
                                              {"per_k", counts},
                                              {"source_records", parts[s].records.size()},
                                              {"source_windows", windows.records.size()}};
    }
    manifest["window_length"] = window_length;
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    if (!std::filesystem::exists(path)) throw DataError("no dataset at " + dir.string() + " (missing manifest.json)");
    try {
        return nlohmann::json::parse(io::read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// ---- features -------------------------------------------------------------

/// A fitted map from aggregate windows to classifier inputs. The three
/// decomposition kinds hold a FusionTransform; the two baselines hold a
/// column standardisation (and, for FIT-PS, the fixed period grid).
/// Baseline columns that are constant over the training set are dropped:
/// phase-aligned windows make some samples identical everywhere.
struct FeatureTransform {
    std::string kind;
    FusionTransform fusion;
    std::size_t fitps_rows = 0;
    std::size_t fitps_n_k = 0;
    std::vector<Eigen::Index> columns;  // kept raw columns
    RowVector mean;
    RowVector std;

    bool is_fusion() const { return kind == "icpc" || kind == "pca" || kind == "ica"; }
    Eigen::Index output_dim() const { return is_fusion() ? fusion.output_dim() : mean.size(); }
};

inline Matrix current_matrix(const std::vector<AggregateSample>& samples) {
    detail::require<InvalidArgument>(!samples.empty(), "features: no samples");
    Matrix x(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(samples.front().current.size()));
    for (std::size_t i = 0; i < samples.size(); ++i)
        x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const RowVector>(samples[i].current.data(), x.cols());
    return x;
}

inline Matrix label_matrix(const std::vector<AggregateSample>& samples) {
    Matrix y(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(samples.front().labels.size()));
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t j = 0; j < samples[i].labels.size(); ++j)
            y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = samples[i].labels[j];
    return y;
}

namespace detail {

inline Matrix fryze_matrix(const std::vector<AggregateSample>& samples) {
    const auto n = static_cast<Eigen::Index>(samples.front().current.size());
    Matrix x(static_cast<Eigen::Index>(samples.size()), 2 * n);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto f = fryze_decompose(samples[i].voltage, samples[i].current);
        const auto r = static_cast<Eigen::Index>(i);
        x.row(r).head(n) = Eigen::Map<const RowVector>(f.active_current.data(), n);
        x.row(r).tail(n) = Eigen::Map<const RowVector>(f.non_active_current.data(), n);
    }
    return x;
}

// Rows beyond a window's own period count repeat its last period.
inline Matrix fitps_matrix(const std::vector<AggregateSample>& samples, std::size_t rows, std::size_t n_k) {
    Matrix x(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(rows * n_k));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto m = fitps_transform(samples[i].voltage, samples[i].current, n_k);
        for (std::size_t l = 0; l < rows; ++l)
            for (std::size_t k = 0; k < n_k; ++k)
                x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l * n_k + k)) = m(std::min(l, m.n_l - 1), k);
    }
    return x;
}

}  // namespace detail

inline FusionParams fusion_params(const RunConfig& c) {
    FusionParams p;
    p.mode = fusion_mode_from_string(c.features.kind);
    p.k_pca = c.features.k_pca;
    p.k_ica = c.features.k_ica;
    p.r = c.features.r;
    p.explained_variance = c.features.explained_variance;
    p.max_components = c.features.max_components;
    p.nonlinearity = nonlinearity_from_string(c.features.nonlinearity);
    p.max_iter = c.features.max_iter;
    p.tol = c.features.tol;
    p.seed = stage_seed(c, SeedStream::ica);
    return p;
}

/// Fits the configured transform on training aggregates and returns the
/// training features through `features`.
inline FeatureTransform fit_features(const RunConfig& c, const std::vector<AggregateSample>& train, Matrix& features) {
    FeatureTransform t;
    t.kind = c.features.kind;
    if (t.is_fusion()) {
        t.fusion = fit_fusion(current_matrix(train), fusion_params(c), &features);
        return t;
    }
    Matrix raw;
    if (t.kind == "fryze") {
        raw = detail::fryze_matrix(train);
    } else {
        t.fitps_n_k = c.features.fitps_n_k > 0
                          ? static_cast<std::size_t>(c.features.fitps_n_k)
                          : static_cast<std::size_t>(std::llround(c.signal.resample_rate / c.signal.mains_hz));
        t.fitps_rows = std::numeric_limits<std::size_t>::max();
        for (const auto& s : train)
            t.fitps_rows = std::min(t.fitps_rows, fitps_transform(s.voltage, s.current, t.fitps_n_k).n_l);
        raw = detail::fitps_matrix(train, t.fitps_rows, t.fitps_n_k);
    }
    const RowVector mu = raw.colwise().mean();
    const RowVector sd = ((raw.rowwise() - mu).colwise().squaredNorm() / static_cast<double>(raw.rows())).cwiseSqrt();
    for (Eigen::Index j = 0; j < raw.cols(); ++j)
        if (sd[j] > 1e-12 * std::max(1.0, std::abs(mu[j]))) t.columns.push_back(j);
    if (t.columns.empty()) throw InvalidArgument("features: every " + t.kind + " column is constant");
    Standardized st = standardize(raw(Eigen::all, t.columns));
    t.mean = st.mean;
    t.std = st.std;
    features = std::move(st.data);
    return t;
}

inline Matrix apply_features(const FeatureTransform& t, const std::vector<AggregateSample>& samples) {
    if (t.is_fusion()) return apply_fusion(t.fusion, current_matrix(samples));
    const Matrix raw = t.kind == "fryze" ? detail::fryze_matrix(samples) : detail::fitps_matrix(samples, t.fitps_rows, t.fitps_n_k);
    if (raw.cols() <= t.columns.back())
        throw InvalidArgument("features: expected at least " + std::to_string(t.columns.back() + 1) +
                              " raw columns, got " + std::to_string(raw.cols()));
    const Matrix kept = raw(Eigen::all, t.columns);
    return (kept.rowwise() - t.mean).array().rowwise() / t.std.array();
}

inline nlohmann::json features_to_json(const FeatureTransform& t, const nlohmann::json& stamp) {
    nlohmann::json j = stamp;
    j["format"] = "nilm-feature-transform";
    j["kind"] = t.kind;
    if (t.is_fusion()) {
        j["fusion"] = fusion_to_json(t.fusion);
    } else {
        j["columns"] = t.columns;
        j["mean"] = vector_to_json(t.mean);
        j["std"] = vector_to_json(t.std);
        j["fitps_rows"] = t.fitps_rows;
        j["fitps_n_k"] = t.fitps_n_k;
    }
    return j;
}

inline FeatureTransform features_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "nilm-feature-transform") throw DataError("not a feature transform file");
        FeatureTransform t;
        t.kind = j.at("kind").get<std::string>();
        auto row = [](const nlohmann::json& a) {
            const auto v = a.get<std::vector<double>>();
            return RowVector(Eigen::Map<const RowVector>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        if (t.is_fusion()) {
            t.fusion = fusion_from_json(j.at("fusion"));
        } else {
            t.columns = j.at("columns").get<std::vector<Eigen::Index>>();
            t.mean = row(j.at("mean"));
            t.std = row(j.at("std"));
            t.fitps_rows = j.at("fitps_rows").get<std::size_t>();
            t.fitps_n_k = j.at("fitps_n_k").get<std::size_t>();
        }
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("feature transform: ") + e.what());
    }
}

// ---- train ----------------------------------------------------------------

struct TrainControl {
    bool resume = false;
    int stop_after_epoch = 0;
    bool override_hash_check = false;
    std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

inline void check_hash(const std::string& what, const std::string& expected, const std::string& actual, bool override_check) {
    if (expected == actual || override_check) return;
    throw InvalidState(what + " hash mismatch: artifact has " + expected + ", current config gives " + actual +
                       " (pass --override-hash-check to proceed anyway)");
}

inline nlohmann::json history_to_json(const std::vector<EpochRecord>& h) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : h) a.push_back({r.epoch, r.train_bce, r.train_f1, r.val_bce, r.val_f1});
    return a;
}

inline std::vector<EpochRecord> history_from_json(const nlohmann::json& a) {
    std::vector<EpochRecord> h;
    for (const auto& r : a)
        h.push_back({r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>(),
                     r.at(4).get<double>()});
    return h;
}

inline std::string history_csv(const std::vector<EpochRecord>& h, const nlohmann::json& stamp) {
    std::ostringstream out;
    out << "# nilm-fusion v" << kArtifactVersion << " config_hash=" << stamp.at("config_hash").get<std::string>()
        << " seed=" << stamp.at("seed").get<std::uint64_t>() << '\n';
    out << "epoch,split,bce,f1\n";
    for (const auto& r : h) {
        out << r.epoch << ",train," << io::format_double(r.train_bce) << ',' << io::format_double(r.train_f1) << '\n';
        out << r.epoch << ",val," << io::format_double(r.val_bce) << ',' << io::format_double(r.val_f1) << '\n';
    }
    return out.str();
}

}  // namespace detail

inline ResFfnConfig model_config(const RunConfig& c, int input_dim, int n_classes) {
    ResFfnConfig m;
    m.input_dim = input_dim;
    m.n_classes = n_classes;
    m.n_blocks = c.model.n_blocks;
    m.hidden_dim = c.model.hidden_dim;
    m.dropout_p = c.model.dropout_p;
    m.threshold = c.model.threshold;
    m.target_params = c.model.target_params;
    return m;
}

struct TrainOutcome {
    TrainState state;
    FeatureTransform transform;
};

/// Fits features on the training split, trains the classifier and writes
/// checkpoint.bin, transform.json and history.csv into `model_dir`. With
/// `resume`, continues from the checkpoint already there.
inline TrainOutcome run_train(const RunConfig& c, const std::filesystem::path& dataset_dir,
                              const std::filesystem::path& model_dir, const TrainControl& ctl = {}) {
    c.validate();
    const auto manifest = read_manifest(dataset_dir);
    detail::check_hash("dataset", manifest.at("data_hash").get<std::string>(), c.data_hash(), ctl.override_hash_check);
    const AggregateSet train_set = read_aggregates(dataset_dir / "train");
    const AggregateSet val_set = read_aggregates(dataset_dir / "val");
    const nlohmann::json stamp = artifact_stamp(c);
    std::filesystem::create_directories(model_dir);

    TrainOutcome out;
    LabeledMatrix tr, va;
    tr.y = label_matrix(train_set.samples);
    va.y = label_matrix(val_set.samples);
    if (ctl.resume) {
        const auto ck = read_checkpoint(model_dir / "checkpoint.bin");
        detail::check_hash("checkpoint", ck.meta.at("config_hash").get<std::string>(), c.config_hash(),
                           ctl.override_hash_check);
        out.transform = features_from_json(nlohmann::json::parse(io::read_text(model_dir / "transform.json")));
        tr.x = apply_features(out.transform, train_set.samples);
        auto& s = out.state;
        s.params = ck.params;
        s.best = ck.best.value_or(ck.params);
        const auto& ts = ck.meta.at("train_state");
        s.best_val_f1 = ts.at("best_val_f1").get<double>();
        s.best_epoch = ts.at("best_epoch").get<int>();
        s.epochs_done = ts.at("epochs_done").get<int>();
        s.history = detail::history_from_json(ts.at("history"));
    } else {
        out.transform = fit_features(c, train_set.samples, tr.x);
        io::write_text(model_dir / "transform.json", features_to_json(out.transform, stamp).dump() + "\n");
        const auto mc = model_config(c, static_cast<int>(tr.x.cols()), static_cast<int>(train_set.class_names.size()));
        out.state = start_training(init_params(mc, stage_seed(c, SeedStream::init)));
    }
    va.x = apply_features(out.transform, val_set.samples);

    TrainOptions opt;
    opt.epochs = c.train.epochs;
    opt.batch_size = c.train.batch_size;
    opt.adam.lr = c.train.lr;
    opt.seed = stage_seed(c, SeedStream::train);
    opt.stop_after_epoch = ctl.stop_after_epoch;
    train(out.state, tr, va, opt, ctl.on_epoch);

    nlohmann::json meta = stamp;
    meta["run_config"] = c.canonical();
    meta["class_names"] = train_set.class_names;
    meta["features"] = c.features.kind;
    meta["train_state"] = {{"best_val_f1", out.state.best_val_f1},
                           {"best_epoch", out.state.best_epoch},
                           {"epochs_done", out.state.epochs_done},
                           {"history", detail::history_to_json(out.state.history)}};
    write_checkpoint(model_dir / "checkpoint.bin", out.state.params, &out.state.best, meta);
    io::write_text(model_dir / "history.csv", detail::history_csv(out.state.history, stamp));
    return out;
}

// ---- eval / report --------------------------------------------------------

struct Predictions {
    std::vector<std::string> class_names;
    LabelMatrix pred;
    LabelMatrix truth;
    std::vector<int> k;
    int n_max = 0;
    nlohmann::json stamp;
};

inline nlohmann::json predictions_to_json(const Predictions& p, const Matrix& probabilities) {
    nlohmann::json j = p.stamp;
    j["format"] = "nilm-predictions";
    j["class_names"] = p.class_names;
    j["n_max"] = p.n_max;
    j["k"] = p.k;
    j["pred"] = p.pred;
    j["truth"] = p.truth;
    nlohmann::json probs = nlohmann::json::array();
    for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < probabilities.cols(); ++c) row.push_back(probabilities(i, c));
        probs.push_back(std::move(row));
    }
    j["probabilities"] = std::move(probs);
    return j;
}

inline Predictions predictions_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "nilm-predictions") throw DataError("not a predictions file");
        Predictions p;
        p.class_names = j.at("class_names").get<std::vector<std::string>>();
        p.n_max = j.at("n_max").get<int>();
        p.k = j.at("k").get<std::vector<int>>();
        p.pred = j.at("pred").get<LabelMatrix>();
        p.truth = j.at("truth").get<LabelMatrix>();
        p.stamp = {{"config_hash", j.at("config_hash")}, {"data_hash", j.at("data_hash")}, {"seed", j.at("seed")},
                   {"version", j.at("version")}};
        if (j.contains("split")) p.stamp["split"] = j.at("split");
        if (j.contains("features")) p.stamp["features"] = j.at("features");
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("predictions: ") + e.what());
    }
}

/// per_class.csv, per_k.csv and summary.json from raw predictions.
inline MetricsReport write_reports(const Predictions& p, const std::filesystem::path& dir) {
    const MetricsReport r = make_report(p.pred, p.truth, p.k, p.class_names, p.n_max);
    std::filesystem::create_directories(dir);
    std::ostringstream head;
    head << "# nilm-fusion v" << kArtifactVersion << " config_hash=" << p.stamp.at("config_hash").get<std::string>()
         << " seed=" << p.stamp.at("seed").get<std::uint64_t>() << '\n';
    std::ostringstream pc, pk;
    pc << head.str();
    write_per_class_csv(pc, r);
    pk << head.str();
    write_per_k_csv(pk, r);
    io::write_text(dir / "per_class.csv", pc.str());
    io::write_text(dir / "per_k.csv", pk.str());
    nlohmann::json summary = p.stamp;
    summary["f1_mean"] = r.f1_mean;
    summary["n_samples"] = r.n_samples;
    io::write_text(dir / "summary.json", summary.dump(2) + "\n");
    return r;
}

/// Scores one split with the best-validation parameters and writes
/// predictions.json plus the report files into `out_dir`.
inline MetricsReport run_eval(const RunConfig& c, const std::filesystem::path& dataset_dir,
                              const std::filesystem::path& model_dir, const std::filesystem::path& out_dir,
                              const std::string& split = "test", bool override_hash_check = false) {
    detail::require<InvalidArgument>(std::find(kSplitNames.begin(), kSplitNames.end(), split) != kSplitNames.end(),
                                     "eval: split must be train, val or test");
    const auto ck = read_checkpoint(model_dir / "checkpoint.bin");
    detail::check_hash("checkpoint", ck.meta.at("config_hash").get<std::string>(), c.config_hash(), override_hash_check);
    const auto manifest = read_manifest(dataset_dir);
    detail::check_hash("dataset", manifest.at("data_hash").get<std::string>(),
                       ck.meta.at("data_hash").get<std::string>(), override_hash_check);
    const auto transform = features_from_json(nlohmann::json::parse(io::read_text(model_dir / "transform.json")));
    const AggregateSet set = read_aggregates(dataset_dir / split);
    const Matrix x = apply_features(transform, set.samples);
    const ClassifierParams& params = ck.best ? *ck.best : ck.params;
    const Prediction pr = predict(params, x);

    Predictions p;
    p.class_names = set.class_names;
    p.pred = pr.labels;
    for (const auto& s : set.samples) {
        p.truth.push_back(s.labels);
        p.k.push_back(s.k);
    }
    p.n_max = manifest.at("config").at("mix").at("n_max").get<int>();
    p.stamp = {{"config_hash", ck.meta.at("config_hash")}, {"data_hash", ck.meta.at("data_hash")},
               {"seed", ck.meta.at("seed")}, {"version", kArtifactVersion}, {"split", split},
               {"features", ck.meta.at("features")}};
    std::filesystem::create_directories(out_dir);
    io::write_text(out_dir / "predictions.json", predictions_to_json(p, pr.probabilities).dump() + "\n");
    return write_reports(p, out_dir);
}

inline MetricsReport run_report(const std::filesystem::path& predictions, const std::filesystem::path& out_dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(predictions));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(predictions.string() + ": " + e.what());
    }
    return write_reports(predictions_from_json(j), out_dir);
}

}  // namespace nilm
