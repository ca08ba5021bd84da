#include <filesystem>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "nilm/mixer.hpp"

using namespace nilm;

namespace {

// n_classes classes, `per_class` records each of length `len`; record i has
// current values derived from i so sums are easy to recompute.
LabeledDataset toy_dataset(std::size_t n_classes, std::size_t per_class, std::size_t len = 8) {
    LabeledDataset ds;
    ds.sample_rate = 3000.0;
    for (std::size_t c = 0; c < n_classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t r = 0; r < per_class; ++r) {
            WaveformRecord rec;
            rec.sample_rate = 3000.0;
            rec.label = ds.class_names[c];
            for (std::size_t t = 0; t < len; ++t) {
                rec.current.push_back(0.1 * static_cast<double>(c + 1) + 0.37 * static_cast<double>(r * len + t) / 7.0);
                rec.voltage.push_back(static_cast<double>(t) - 3.5);
            }
            ds.records.push_back(std::move(rec));
        }
    return ds;
}

}  // namespace

TEST(ClassIndex, BucketsByLabel) {
    LabeledDataset ds = toy_dataset(2, 0);
    for (const char* l : {"c0", "c1", "c0"}) {
        WaveformRecord r;
        r.current = r.voltage = {0.0, 1.0};
        r.sample_rate = 3000.0;
        r.label = l;
        ds.records.push_back(r);
    }
    const auto idx = build_class_index(ds);
    EXPECT_EQ(idx[0], (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(idx[1], (std::vector<std::size_t>{1}));
}

TEST(ClassIndex, SingleClassAndFifteenClasses) {
    EXPECT_EQ(build_class_index(toy_dataset(1, 4)).front().size(), 4u);
    LabeledDataset ds = toy_dataset(15, 0);
    std::size_t total = 0;
    for (std::size_t c = 0; c < 15; ++c)
        for (std::size_t r = 0; r < c % 4 + 1; ++r) {
            WaveformRecord rec;
            rec.current = rec.voltage = {0.0, 1.0};
            rec.sample_rate = 3000.0;
            rec.label = ds.class_names[(c * 7) % 15];
            ds.records.push_back(rec);
            ++total;
        }
    const auto idx = build_class_index(ds);
    ASSERT_EQ(idx.size(), 15u);
    std::size_t sum = 0;
    std::vector<std::size_t> recount(15, 0);
    for (const auto& r : ds.records) recount[ds.class_index(r.label)]++;
    for (std::size_t c = 0; c < 15; ++c) {
        EXPECT_EQ(idx[c].size(), recount[c]);
        sum += idx[c].size();
    }
    EXPECT_EQ(sum, total);
    EXPECT_THROW(build_class_index(toy_dataset(3, 0)), InvalidArgument);
}

TEST(SampleCombination, FullSetWhenForced) {
    Rng rng(1);
    EXPECT_EQ(sample_combination(5, 5, rng), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    EXPECT_THROW(sample_combination(5, 6, rng), InvalidArgument);
}

TEST(SampleCombination, SingletonFrequenciesUniform) {
    Rng rng(2024);
    std::vector<int> hits(5, 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) hits[sample_combination(5, 1, rng)[0]]++;
    for (int h : hits) EXPECT_NEAR(h / double(draws), 0.2, 0.01);
}

TEST(SampleCombination, ClassBalanceForLargerCombinations) {
    Rng rng(7);
    std::vector<int> hits(8, 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i)
        for (auto c : sample_combination(8, 3, rng)) hits[c]++;
    for (int h : hits) EXPECT_NEAR((h / double(draws)) / (3.0 / 8.0), 1.0, 0.02);
}

TEST(SampleCombination, Deterministic) {
    Rng a(42), b(42);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_combination(15, 6, a), sample_combination(15, 6, b));
}

TEST(Mix, SingleTermIsTheRecord) {
    const auto ds = toy_dataset(3, 1);
    const auto idx = build_class_index(ds);
    Rng rng(0);
    const auto s = mix(ds, idx, {0}, 1, 1, rng);
    EXPECT_EQ(s.current, ds.records[0].current);
    EXPECT_EQ(s.labels, (std::vector<std::uint8_t>{1, 0, 0}));
    EXPECT_EQ(s.k, 1);
}

TEST(Mix, TwoClassesSumElementwise) {
    const auto ds = toy_dataset(3, 1);
    const auto idx = build_class_index(ds);
    Rng rng(0);
    const auto s = mix(ds, idx, {0, 2}, 1, 1, rng);
    for (std::size_t t = 0; t < s.current.size(); ++t)
        EXPECT_EQ(s.current[t], ds.records[0].current[t] + ds.records[2].current[t]);
    EXPECT_EQ(s.labels, (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(Mix, DuplicationWithReplacementFromSmallBucket) {
    const auto ds = toy_dataset(2, 1);
    const auto idx = build_class_index(ds);
    Rng rng(0);
    const auto s = mix(ds, idx, {1}, 3, 3, rng);
    EXPECT_EQ(s.sources, (std::vector<std::size_t>{1, 1, 1}));
    for (std::size_t t = 0; t < s.current.size(); ++t) EXPECT_EQ(s.current[t], 3.0 * ds.records[1].current[t]);
}

TEST(Mix, WithoutReplacementWhenBucketSuffices) {
    const auto ds = toy_dataset(2, 6);
    const auto idx = build_class_index(ds);
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto s = mix(ds, idx, {0, 1}, 1, 5, rng);
        EXPECT_EQ(std::set<std::size_t>(s.sources.begin(), s.sources.end()).size(), s.sources.size());
    }
}

TEST(Mix, MismatchedLengthsRejected) {
    auto ds = toy_dataset(2, 1);
    ds.records[1].current.push_back(0.0);
    ds.records[1].voltage.push_back(0.0);
    const auto idx = build_class_index(ds);
    Rng rng(0);
    EXPECT_THROW(mix(ds, idx, {0, 1}, 1, 1, rng), InvalidArgument);
}

TEST(GenerateDataset, SingleApplianceOnly) {
    const auto ds = toy_dataset(5, 3);
    MixConfig cfg;
    cfg.n_min = cfg.n_max = 1;
    cfg.samples_per_k = 10;
    const auto out = generate_dataset(ds, cfg);
    ASSERT_EQ(out.size(), 10u);
    for (const auto& s : out) EXPECT_EQ(s.k, 1);
}

TEST(GenerateDataset, EqualCountsPerKAndFullCombinationAtTop) {
    const auto ds = toy_dataset(15, 2);
    MixConfig cfg;
    cfg.n_min = 1;
    cfg.n_max = 15;
    cfg.samples_per_k = 100;
    cfg.rng_seed = 11;
    const auto out = generate_dataset(ds, cfg);
    ASSERT_EQ(out.size(), 1500u);
    std::map<int, int> per_k;
    for (const auto& s : out) {
        per_k[s.k]++;
        s.validate(15);
        if (s.k == 15) EXPECT_EQ(s.labels, std::vector<std::uint8_t>(15, 1));
    }
    for (int k = 1; k <= 15; ++k) EXPECT_EQ(per_k[k], 100) << k;
}

TEST(GenerateDataset, KirchhoffExactnessAndLabelSoundness) {
    const auto ds = toy_dataset(6, 4);
    MixConfig cfg;
    cfg.n_max = 6;
    cfg.samples_per_k = 40;
    cfg.rng_seed = 5;
    for (const auto& s : generate_dataset(ds, cfg)) {
        ASSERT_TRUE(std::is_sorted(s.sources.begin(), s.sources.end()));
        Series expect(s.current.size(), 0.0);
        std::vector<std::uint8_t> labels(6, 0);
        for (auto i : s.sources) {
            for (std::size_t t = 0; t < expect.size(); ++t) expect[t] += ds.records[i].current[t];
            labels[ds.class_index(ds.records[i].label)] = 1;
        }
        EXPECT_EQ(s.current, expect);
        EXPECT_EQ(s.labels, labels);
        const auto n = s.sources.size();
        EXPECT_GE(n, static_cast<std::size_t>(s.k * cfg.f_min));
        EXPECT_LE(n, static_cast<std::size_t>(s.k * cfg.f_max));
    }
}

TEST(GenerateDataset, DeterministicAndWorkerIndependent) {
    const auto ds = toy_dataset(8, 3);
    MixConfig cfg;
    cfg.n_max = 8;
    cfg.samples_per_k = 25;
    cfg.rng_seed = 77;
    const auto a = generate_dataset(ds, cfg, 1);
    const auto b = generate_dataset(ds, cfg, 4);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].current, b[i].current);
        EXPECT_EQ(a[i].sources, b[i].sources);
    }
}

TEST(GenerateDataset, ConfigValidation) {
    const auto ds = toy_dataset(4, 2);
    MixConfig cfg;
    cfg.n_max = 4;
    cfg.f_min = 5;
    cfg.f_max = 2;
    EXPECT_THROW(generate_dataset(ds, cfg), InvalidArgument);
    cfg = MixConfig{};
    cfg.n_max = 5;
    EXPECT_THROW(generate_dataset(ds, cfg), InvalidArgument);
}

TEST(GenerateDataset, OptionalNoiseIsSeeded) {
    const auto ds = toy_dataset(3, 2);
    MixConfig cfg;
    cfg.n_max = 3;
    cfg.samples_per_k = 3;
    cfg.noise_std = 0.5;
    const auto a = generate_dataset(ds, cfg), b = generate_dataset(ds, cfg);
    EXPECT_EQ(a[0].current, b[0].current);
    Series clean(a[0].current.size(), 0.0);
    for (auto i : a[0].sources)
        for (std::size_t t = 0; t < clean.size(); ++t) clean[t] += ds.records[i].current[t];
    EXPECT_NE(a[0].current, clean);
}

TEST(SplitRecords, DisjointStratifiedSplit) {
    const auto ds = toy_dataset(4, 20);
    const auto parts = split_records(ds, {0.7, 0.1, 0.2}, 9);
    EXPECT_EQ(parts[0].records.size(), 56u);
    EXPECT_EQ(parts[1].records.size(), 8u);
    EXPECT_EQ(parts[2].records.size(), 16u);
    std::set<double> seen;
    for (const auto& p : parts) {
        EXPECT_EQ(build_class_index(p).size(), 4u);
        for (const auto& bucket : build_class_index(p)) EXPECT_FALSE(bucket.empty());
        for (const auto& r : p.records) EXPECT_TRUE(seen.insert(r.current[0]).second);
    }
    EXPECT_THROW(split_records(toy_dataset(2, 2), {0.7, 0.1, 0.2}, 0), DataError);
}

TEST(AggregateFiles, RoundTripIsExact) {
    const auto ds = toy_dataset(3, 2);
    MixConfig cfg;
    cfg.n_max = 3;
    cfg.samples_per_k = 4;
    const auto samples = generate_dataset(ds, cfg);
    const auto stem = std::filesystem::temp_directory_path() / "nilm_mixer_roundtrip";
    write_aggregates(stem, samples, ds.class_names, ds.sample_rate, {{"seed", 3}});
    const auto back = read_aggregates(stem);
    ASSERT_EQ(back.samples.size(), samples.size());
    EXPECT_EQ(back.class_names, ds.class_names);
    EXPECT_EQ(back.meta.at("seed"), 3);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].current, samples[i].current);
        EXPECT_EQ(back.samples[i].voltage, samples[i].voltage);
        EXPECT_EQ(back.samples[i].labels, samples[i].labels);
        EXPECT_EQ(back.samples[i].sources, samples[i].sources);
    }
}
