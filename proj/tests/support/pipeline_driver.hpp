#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "repcmp/pipeline.hpp"
#include "toy_backend.hpp"

namespace fixture {

/// Toy model, its HTTP backend and a written dataset fixture.
struct ToyWorld {
    toy::ToyModel model = toy::ToyModel::random();
    TempDir dir{"world"};
    toy::FixturePaths paths;
    std::unique_ptr<toy::ToyBackendServer> server;

    explicit ToyWorld(std::size_t images) {
        paths = toy::write_fixture(dir / "data", model, images, 3);
        server = std::make_unique<toy::ToyBackendServer>(model, dir / "backend");
        server->start();
    }

    PipelineConfig config(const std::string& out) const {
        PipelineConfig c;
        c.manifest = paths.manifest;
        c.taxonomy = paths.taxonomy;
        c.practice = paths.practice;
        c.out_dir = dir / out;
        c.backend_url = server->url();
        c.seed = 7;
        c.quiet = true;
        return c;
    }
};

/// Sizes for a 1,000-image fixture.
inline void desk_scale(PipelineConfig& c) {
    c.sizes.top = 250;
    c.sizes.bottom = 100;
    c.sizes.fit_count = 100;
    c.sizes.ref_pool = 50;
    c.sizes.min_pool = 20;
    c.sizes.k = 10;
    c.unit_count = 16;
    c.importance_top = 100;
}

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace fixture
