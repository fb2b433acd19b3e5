#include <iostream>

#include <CLI11.hpp>

#include "repcmp/errors.hpp"
#include "toy_backend.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Toy model backend and desk-scale fixture generator"};
    app.require_subcommand(1);

    std::uint64_t seed = 1;
    app.add_option("--model-seed", seed, "Toy model seed")->capture_default_str();

    auto* backend = app.add_subcommand("backend", "serve the backend protocol");
    int port = 8000;
    std::string assets = "toy_assets";
    backend->add_option("--port", port)->capture_default_str();
    backend->add_option("--assets", assets, "Directory for generated assets")->capture_default_str();

    auto* fixture = app.add_subcommand("fixture", "write manifest, stimuli, taxonomy and practice set");
    std::string dir = "fixture";
    std::size_t images = 1000;
    fixture->add_option("--dir", dir)->capture_default_str();
    fixture->add_option("--images", images)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        const auto model = repcmp::toy::ToyModel::random({.seed = seed});
        if (*backend) {
            repcmp::toy::ToyBackendServer server(model, assets);
            std::cerr << "toy backend on http://127.0.0.1:" << port << '\n';
            return server.run(port) ? 0 : 1;
        }
        const auto paths = repcmp::toy::write_fixture(dir, model, images, seed);
        std::cout << paths.manifest.string() << '\n' << paths.taxonomy.string() << '\n' << paths.practice.string() << '\n';
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
