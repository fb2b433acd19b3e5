#include <doctest.h>

#include <algorithm>
#include <set>

#include "repcmp/errors.hpp"
#include "repcmp/feature_catalog.hpp"
#include "repcmp/rng.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace repcmp;

namespace {

Matrix random_codes(Rng& rng, std::size_t n, std::size_t k, bool quantised) {
    Matrix m(n, k);
    for (std::size_t i = 0; i < m.size(); ++i)
        m.data()[i] = quantised ? static_cast<double>(rng.uniform_index(4)) : rng.uniform01();
    return m;
}

}  // namespace

TEST_CASE("build_pool orders by activation then id and keeps pools disjoint") {
    std::vector<std::string> ids = {"e", "d", "c", "b", "a", "f"};
    std::vector<double> acts = {1.0, 3.0, 3.0, 0.5, 0.5, 2.0};
    const auto pool = build_pool(acts, ids, 3, 2);
    CHECK(pool.top_ids == std::vector<std::string>{"c", "d", "f"});
    CHECK(pool.top_activations == std::vector<double>{3.0, 3.0, 2.0});
    // Ascending tail of the descending order: a/b tie resolves so "b" is last.
    CHECK(pool.bottom_ids == std::vector<std::string>{"b", "a"});
    CHECK(pool.bottom_activations == std::vector<double>{0.5, 0.5});
    CHECK_THROWS_AS(build_pool(acts, ids, 4, 3), ValidationError);
}

TEST_CASE("build_pool property: disjoint, sorted, extreme") {
    Rng rng(2);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 10 + rng.uniform_index(100);
        std::vector<std::string> ids;
        std::vector<double> acts;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(fixture::image_id(i));
            acts.push_back(static_cast<double>(rng.uniform_index(8)));
        }
        const std::size_t top = 1 + rng.uniform_index(n / 2), bottom = 1 + rng.uniform_index(n - top);
        const auto pool = build_pool(acts, ids, top, bottom);
        REQUIRE(pool.top_ids.size() == top);
        REQUIRE(pool.bottom_ids.size() == bottom);
        std::set<std::string> seen(pool.top_ids.begin(), pool.top_ids.end());
        for (const auto& b : pool.bottom_ids) CHECK(seen.insert(b).second);
        CHECK(std::is_sorted(pool.top_activations.rbegin(), pool.top_activations.rend()));
        CHECK(std::is_sorted(pool.bottom_activations.begin(), pool.bottom_activations.end()));
        CHECK(pool.bottom_activations.front() <= pool.top_activations.back());
    }
}

TEST_CASE("select_direction matches modal argmax counting") {
    Rng rng(31);
    for (int rep = 0; rep < 300; ++rep) {
        const auto codes = random_codes(rng, 1 + rng.uniform_index(60), 1 + rng.uniform_index(10), rep % 2 == 0);
        CHECK(select_direction(codes) == oracle::modal_argmax(codes));
    }
    CHECK_THROWS_AS(select_direction(Matrix()), ValidationError);
}

TEST_CASE("rank_by_direction matches a stable descending sort") {
    Rng rng(32);
    for (int rep = 0; rep < 300; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(60), k = 1 + rng.uniform_index(8);
        const auto codes = random_codes(rng, n, k, rep % 2 == 0);
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < n; ++i) ids.push_back(fixture::image_id((i * 7919) % 1000));
        const auto c = rng.uniform_index(k);
        CHECK(rank_by_direction(codes, c, ids) == oracle::rank_rows(codes, c, ids));
    }
    CHECK_THROWS_AS(rank_by_direction(Matrix(2, 2), 2), ValidationError);
}

TEST_CASE("direction and ranking are invariant under positive rescaling") {
    Rng rng(33);
    for (int rep = 0; rep < 100; ++rep) {
        const auto codes = random_codes(rng, 20, 5, false);
        auto scaled = codes;
        const double s = 0.01 + rng.uniform01() * 100.0;
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled.data()[i] *= s;
        CHECK(select_direction(scaled) == select_direction(codes));
        CHECK(rank_by_direction(scaled, 2) == rank_by_direction(codes, 2));
    }
}

TEST_CASE("layer_depth maps block names and rejects others") {
    CHECK(layer_depth("layer1.0") == 1);
    CHECK(layer_depth("layer3.1.bn2") == 3);
    CHECK(layer_depth("layer4") == 4);
    CHECK_THROWS_AS(layer_depth("conv1"), ValidationError);
    CHECK_THROWS_AS(layer_depth("layer5.0"), ValidationError);
}

TEST_CASE("build_unit produces consistent local and distributed features") {
    Rng rng(40);
    const auto manifest = fixture::make_manifest(400, 5, 1);
    Matrix acts(400, 12);
    for (std::size_t i = 0; i < acts.size(); ++i) acts.data()[i] = rng.uniform01();
    const auto sizes = fixture::small_sizes();
    NmfOptions nmf;
    nmf.seed = 5;
    for (auto variant : {DirectionVariant::Top300, DirectionVariant::Full}) {
        const auto b = build_unit(acts, manifest, {"layer2.0", 3}, sizes, nmf, variant);
        CHECK(b.local.spec.condition == Condition::Local);
        CHECK(b.local.depth == 2);
        CHECK(b.local.pool.top_ids.size() == sizes.top);
        CHECK(b.local.fit_ids.size() == sizes.fit_count);
        REQUIRE(b.distributed.spec.direction_index);
        const auto c = *b.distributed.spec.direction_index;
        CHECK(c < sizes.k);
        if (variant == DirectionVariant::Top300) CHECK(c == oracle::modal_argmax(b.factorization.codes));
        CHECK(b.distributed.direction.size() == acts.cols());
        CHECK(b.distributed.top_codes.size() == sizes.fit_count);
        CHECK(std::is_sorted(b.distributed.top_codes.rbegin(), b.distributed.top_codes.rend()));
        CHECK(b.distributed.spec.unit_key() == b.local.spec.unit_key());
        CHECK(b.distributed.spec.feature_key() != b.local.spec.feature_key());
        // Local top images are the strongest activations of the neuron.
        const double weakest_top = b.local.pool.top_activations.back();
        std::size_t above = 0;
        for (std::size_t i = 0; i < acts.rows(); ++i) above += acts(i, 3) > weakest_top;
        CHECK(above < sizes.top);
    }
}

TEST_CASE("build_unit rejects a factorization of the wrong shape") {
    const auto manifest = fixture::make_manifest(400, 5, 1);
    Matrix acts(400, 12, 0.5);
    Factorization f;
    f.dictionary = Matrix(12, 3);
    f.codes = Matrix(60, 3);
    CHECK_THROWS_AS(build_unit(acts, manifest, {"layer1.0", 0}, fixture::small_sizes(), f, DirectionVariant::Top300),
                    DimensionError);
}

TEST_CASE("catalog JSON round-trips and validation catches overlaps") {
    const auto manifest = fixture::make_manifest(400, 5, 2);
    auto catalog = fixture::mock_catalog(manifest, fixture::small_sizes(), 4, 2, 9);
    CHECK_NOTHROW(catalog.validate());
    const auto back = catalog_from_json(to_json(catalog));
    CHECK(to_json(back) == to_json(catalog));
    CHECK(back.by_condition(Condition::Distributed).size() == 4);

    auto dup = catalog;
    dup.features.push_back(dup.features.front());
    CHECK_THROWS_AS(dup.validate(), ValidationError);

    auto overlap = catalog;
    overlap.catch_features.push_back(overlap.features.front());
    CHECK_THROWS_AS(overlap.validate(), ValidationError);

    auto bad = catalog;
    bad.features[1].spec.direction_index.reset();
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}
