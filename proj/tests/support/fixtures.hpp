#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "repcmp/feature_catalog.hpp"
#include "repcmp/rng.hpp"
#include "repcmp/semantic_control.hpp"
#include "repcmp/tensor_store.hpp"
#include "repcmp/trial_factory.hpp"

namespace fixture {

namespace fs = std::filesystem;
using namespace repcmp;

/// Fresh empty directory under the system temp dir; removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        Rng rng(std::random_device{}());
        path_ = fs::temp_directory_path() / ("repcmp_" + tag + "_" + std::to_string(rng.next_u64() % 1000000007));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string image_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%05zu", i);
    return buf;
}

inline DatasetManifest make_manifest(std::size_t n, std::size_t num_labels, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < n; ++i)
        entries.push_back({image_id(i), static_cast<std::int64_t>(rng.uniform_index(num_labels)),
                           "images/" + image_id(i) + ".svg", "val"});
    return DatasetManifest(std::move(entries));
}

inline std::string layer_for_depth(int depth) { return "layer" + std::to_string(depth) + ".0"; }

/// Local pool from random activations, no dictionary involved.
inline CatalogFeature random_feature(const DatasetManifest& manifest, const PoolSizes& sizes, const FeatureSpec& spec,
                                     std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> acts(manifest.size());
    for (auto& a : acts) a = rng.uniform01();
    CatalogFeature f;
    f.spec = spec;
    f.depth = layer_depth(spec.layer);
    f.pool = build_pool(acts, manifest, sizes.top, sizes.bottom);
    f.fit_ids.assign(f.pool.top_ids.begin(), f.pool.top_ids.begin() + static_cast<std::ptrdiff_t>(sizes.fit_count));
    for (std::size_t i = 0; i < kFeaturevizPerPanel; ++i) {
        f.featureviz_left.push_back("featureviz/" + spec.feature_key() + "_min" + std::to_string(i) + ".svg");
        f.featureviz_right.push_back("featureviz/" + spec.feature_key() + "_max" + std::to_string(i) + ".svg");
    }
    return f;
}

/// `units` experimental units (local + distributed each) spread over the four
/// depth blocks, plus catch units on neurons no experimental unit uses.
inline FeatureCatalog mock_catalog(const DatasetManifest& manifest, const PoolSizes& sizes, std::size_t units,
                                   std::size_t catch_units, std::uint64_t seed) {
    FeatureCatalog c;
    c.sizes = sizes;
    c.config_hash = "mock";
    for (std::size_t u = 0; u < units; ++u) {
        const auto layer = layer_for_depth(static_cast<int>(u % 4) + 1);
        const std::size_t neuron = u / 4;
        FeatureSpec local{layer, Condition::Local, neuron, std::nullopt, {}};
        FeatureSpec dist{layer, Condition::Distributed, neuron, std::size_t{u % 3}, "factorizations/x.json"};
        c.features.push_back(random_feature(manifest, sizes, local, derive_seed(seed, 2 * u)));
        c.features.push_back(random_feature(manifest, sizes, dist, derive_seed(seed, 2 * u + 1)));
    }
    for (std::size_t u = 0; u < catch_units; ++u) {
        FeatureSpec spec{"layer4.0", Condition::Local, 10000 + u, std::nullopt, {}};
        c.catch_features.push_back(random_feature(manifest, sizes, spec, derive_seed(seed, "catch" + std::to_string(u))));
    }
    return c;
}

/// Nine curated practice features and a distractor pool, disjoint from the
/// experimental image ids.
inline PracticeConfig practice_config() {
    PracticeConfig p;
    for (int f = 0; f < 9; ++f) {
        PracticeFeature feat{"pattern" + std::to_string(f), {}};
        for (int i = 0; i < 12; ++i) feat.image_ids.push_back("practice/p" + std::to_string(f) + "_" + std::to_string(i));
        p.features.push_back(std::move(feat));
    }
    for (int i = 0; i < 30; ++i) p.distractor_pool.push_back("practice/d" + std::to_string(i));
    return p;
}

inline PoolSizes small_sizes() {
    PoolSizes s;
    s.top = 200;
    s.bottom = 80;
    s.fit_count = 60;
    s.ref_pool = 40;
    s.min_pool = 20;
    s.trials_per_feature = 10;
    s.k = 5;
    return s;
}

}  // namespace fixture
