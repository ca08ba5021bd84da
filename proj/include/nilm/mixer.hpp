#pragma once

// Random-mixture generation of aggregated samples: pick a class
// combination, draw 1..f_max recordings per chosen class and superpose
// their currents (Kirchhoff's current law).

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nilm/error.hpp"
#include "nilm/ingest.hpp"
#include "nilm/io.hpp"
#include "nilm/rng.hpp"
#include "nilm/signal.hpp"

namespace nilm {

struct AggregateSample {
    Series current;
    Series voltage;                   // reference: voltage of the first constituent
    std::vector<std::uint8_t> labels; // multi-hot over the dataset's classes
    int k = 0;                        // number of active classes
    std::vector<std::size_t> sources; // constituent record indices, in summation order

    void validate(std::size_t n_classes) const {
        detail::require<InvalidArgument>(labels.size() == n_classes, "AggregateSample: label width mismatch");
        const auto ones = std::count(labels.begin(), labels.end(), std::uint8_t{1});
        detail::require<InvalidArgument>(ones == k && k >= 1, "AggregateSample: k does not match labels");
        detail::require<InvalidArgument>(current.size() == voltage.size(), "AggregateSample: length mismatch");
    }
};

struct MixConfig {
    int n_min = 1;
    int n_max = 15;
    int f_min = 1;
    int f_max = 10;
    std::size_t samples_per_k = 100;
    std::uint64_t rng_seed = 0;
    double noise_std = 0.0;  // optional additive measurement noise, amperes

    void validate(std::size_t n_classes) const {
        const auto nc = static_cast<int>(n_classes);
        if (!(1 <= n_min)) throw InvalidArgument("MixConfig.n_min must be >= 1");
        if (!(n_min <= n_max)) throw InvalidArgument("MixConfig.n_min must be <= n_max");
        if (!(n_max <= nc))
            throw InvalidArgument("MixConfig.n_max (" + std::to_string(n_max) + ") exceeds class count " +
                                  std::to_string(nc));
        if (!(1 <= f_min)) throw InvalidArgument("MixConfig.f_min must be >= 1");
        if (!(f_min <= f_max)) throw InvalidArgument("MixConfig.f_min must be <= f_max");
        if (noise_std < 0.0) throw InvalidArgument("MixConfig.noise_std must be >= 0");
    }
};

/// Record indices per class position (same order as class_names).
using ClassIndex = std::vector<std::vector<std::size_t>>;

inline ClassIndex build_class_index(const LabeledDataset& ds) {
    detail::require<InvalidArgument>(!ds.records.empty(), "build_class_index: empty dataset");
    ClassIndex index(ds.class_names.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) index[ds.class_index(ds.records[i].label)].push_back(i);
    return index;
}

/// Uniform random subset of {0..n_classes-1} of size n_comb, returned sorted.
inline std::vector<std::size_t> sample_combination(std::size_t n_classes, std::size_t n_comb, Rng& rng) {
    if (n_comb > n_classes)
        throw InvalidArgument("sample_combination: n_comb " + std::to_string(n_comb) + " > " +
                              std::to_string(n_classes) + " classes");
    std::vector<std::size_t> pool(n_classes);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_comb; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n_classes - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(n_comb);
    std::sort(pool.begin(), pool.end());
    return pool;
}

/// Superposes f_i ~ U{f_min..f_max} recordings of each combination class.
/// Within a class, draws are without replacement while the bucket allows
/// it and with replacement once f_i exceeds the bucket size. Currents are
/// summed in ascending record index order.
inline AggregateSample mix(const LabeledDataset& ds, const ClassIndex& index,
                           const std::vector<std::size_t>& combination, int f_min, int f_max, Rng& rng,
                           double noise_std = 0.0) {
    detail::require<InvalidArgument>(!combination.empty(), "mix: empty combination");
    detail::require<InvalidArgument>(1 <= f_min && f_min <= f_max, "mix: need 1 <= f_min <= f_max");
    std::vector<std::size_t> picked;
    std::uniform_int_distribution<int> dup(f_min, f_max);
    for (std::size_t c : combination) {
        detail::require<InvalidArgument>(c < index.size() && !index[c].empty(),
                                         "mix: class " + std::to_string(c) + " has no records");
        const auto& bucket = index[c];
        const auto f = static_cast<std::size_t>(dup(rng));
        if (f <= bucket.size()) {
            std::vector<std::size_t> b = bucket;
            for (std::size_t i = 0; i < f; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, b.size() - 1);
                std::swap(b[i], b[pick(rng)]);
                picked.push_back(b[i]);
            }
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, bucket.size() - 1);
            for (std::size_t i = 0; i < f; ++i) picked.push_back(bucket[pick(rng)]);
        }
    }
    std::sort(picked.begin(), picked.end());

    AggregateSample out;
    const auto& first = ds.records[picked.front()];
    out.current.assign(first.size(), 0.0);
    out.voltage = first.voltage;
    out.labels.assign(ds.class_names.size(), 0);
    for (std::size_t idx : picked) {
        const auto& r = ds.records[idx];
        if (r.size() != out.current.size())
            throw InvalidArgument("mix: record " + std::to_string(idx) + " has length " + std::to_string(r.size()) +
                                  ", expected " + std::to_string(out.current.size()));
        for (std::size_t t = 0; t < r.size(); ++t) out.current[t] += r.current[t];
        out.labels[ds.class_index(r.label)] = 1;
    }
    if (noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, noise_std);
        for (double& x : out.current) x += noise(rng);
    }
    out.k = static_cast<int>(std::count(out.labels.begin(), out.labels.end(), std::uint8_t{1}));
    out.sources = std::move(picked);
    return out;
}

/// samples_per_k aggregates for each k in [n_min, n_max], ordered by k.
/// Each k draws from its own stream seeded by (rng_seed, k), so shards can
/// run on separate workers without changing the output.
inline std::vector<AggregateSample> generate_dataset(const LabeledDataset& ds, const MixConfig& cfg,
                                                     unsigned workers = 1) {
    cfg.validate(ds.class_names.size());
    const ClassIndex index = build_class_index(ds);
    const auto n_k = static_cast<std::size_t>(cfg.n_max - cfg.n_min + 1);
    std::vector<std::vector<AggregateSample>> shards(n_k);

    auto run_shard = [&](std::size_t s) {
        const auto k = static_cast<std::size_t>(cfg.n_min) + s;
        Rng rng(derive_seed(cfg.rng_seed, {k}));
        auto& shard = shards[s];
        shard.reserve(cfg.samples_per_k);
        for (std::size_t i = 0; i < cfg.samples_per_k; ++i) {
            const auto comb = sample_combination(ds.class_names.size(), k, rng);
            shard.push_back(mix(ds, index, comb, cfg.f_min, cfg.f_max, rng, cfg.noise_std));
        }
    };

    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n_k)));
    if (workers == 1) {
        for (std::size_t s = 0; s < n_k; ++s) run_shard(s);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t s = w; s < n_k; s += workers) run_shard(s);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    std::vector<AggregateSample> out;
    out.reserve(n_k * cfg.samples_per_k);
    for (auto& shard : shards)
        for (auto& s : shard) out.push_back(std::move(s));
    return out;
}

/// Stratified split of source records into train/val/test before any
/// mixing, so no source window is shared between splits. Every class gets
/// at least one record in each split.
inline std::array<LabeledDataset, 3> split_records(const LabeledDataset& ds, std::array<double, 3> fractions,
                                                   std::uint64_t seed) {
    std::array<LabeledDataset, 3> out;
    for (auto& part : out) {
        part.class_names = ds.class_names;
        part.sample_rate = ds.sample_rate;
    }
    const ClassIndex index = build_class_index(ds);
    for (std::size_t c = 0; c < index.size(); ++c) {
        std::vector<std::size_t> ids = index[c];
        if (ids.size() < 3)
            throw DataError("split: class '" + ds.class_names[c] + "' has " + std::to_string(ids.size()) +
                            " records, need at least 3");
        Rng rng(derive_seed(seed, {c, 0x5b117}));
        std::shuffle(ids.begin(), ids.end(), rng);
        const double n = static_cast<double>(ids.size());
        const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fractions[1] * n)));
        const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fractions[2] * n)));
        if (n_val + n_test >= ids.size())
            throw DataError("split: class '" + ds.class_names[c] + "' too small for the requested fractions");
        const std::size_t n_train = ids.size() - n_val - n_test;
        std::sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const std::size_t part = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
            out[part].records.push_back(ds.records[ids[i]]);
        }
    }
    return out;
}

/// Aggregates flattened for persistence: `<stem>.bin` holds currents
/// row-major as little-endian float64, `<stem>.voltage.bin` the reference
/// voltages, and `<stem>.json` labels, k, sources and metadata.
inline void write_aggregates(const std::filesystem::path& stem, const std::vector<AggregateSample>& samples,
                             const std::vector<std::string>& class_names, double sample_rate,
                             const nlohmann::json& meta = nlohmann::json::object()) {
    const std::size_t width = samples.empty() ? 0 : samples.front().current.size();
    std::ofstream cur(stem.string() + ".bin", std::ios::binary);
    std::ofstream vol(stem.string() + ".voltage.bin", std::ios::binary);
    if (!cur || !vol) throw DataError("cannot write " + stem.string() + ".bin");
    nlohmann::json labels = nlohmann::json::array(), ks = nlohmann::json::array(),
                   sources = nlohmann::json::array();
    for (const auto& s : samples) {
        if (s.current.size() != width) throw InvalidArgument("write_aggregates: ragged sample lengths");
        io::write_f64_le(cur, s.current);
        io::write_f64_le(vol, s.voltage);
        labels.push_back(s.labels);
        ks.push_back(s.k);
        sources.push_back(s.sources);
    }
    nlohmann::json side = meta;
    side["n_samples"] = samples.size();
    side["window_length"] = width;
    side["class_names"] = class_names;
    side["sample_rate"] = sample_rate;
    side["labels"] = labels;
    side["k"] = ks;
    side["sources"] = sources;
    io::write_text(stem.string() + ".json", side.dump() + "\n");
}

struct AggregateSet {
    std::vector<AggregateSample> samples;
    std::vector<std::string> class_names;
    double sample_rate = 0.0;
    nlohmann::json meta;
};

inline AggregateSet read_aggregates(const std::filesystem::path& stem) {
    AggregateSet set;
    try {
        set.meta = nlohmann::json::parse(io::read_text(stem.string() + ".json"));
        set.class_names = set.meta.at("class_names").get<std::vector<std::string>>();
        set.sample_rate = set.meta.at("sample_rate").get<double>();
        const auto n = set.meta.at("n_samples").get<std::size_t>();
        const auto width = set.meta.at("window_length").get<std::size_t>();
        std::ifstream cur(stem.string() + ".bin", std::ios::binary);
        std::ifstream vol(stem.string() + ".voltage.bin", std::ios::binary);
        if (!cur || !vol) throw DataError("cannot open " + stem.string() + ".bin");
        set.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = set.samples[i];
            s.current.resize(width);
            s.voltage.resize(width);
            io::read_f64_le(cur, s.current);
            io::read_f64_le(vol, s.voltage);
            s.labels = set.meta.at("labels").at(i).get<std::vector<std::uint8_t>>();
            s.k = set.meta.at("k").at(i).get<int>();
            s.sources = set.meta.at("sources").at(i).get<std::vector<std::size_t>>();
            s.validate(set.class_names.size());
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(stem.string() + ".json: " + e.what());
    } catch (const InvalidArgument& e) {
        throw DataError(stem.string() + ": " + e.what());
    }
    set.meta.erase("labels");
    set.meta.erase("k");
    set.meta.erase("sources");
    return set;
}

}  // namespace nilm
