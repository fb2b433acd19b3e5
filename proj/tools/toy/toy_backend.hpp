#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "repcmp/backend_client.hpp"
#include "repcmp/matrix.hpp"

// Deterministic stand-in for the model backend: a two-layer linear network
// per probed layer. Every image_id maps to a non-negative latent h; layer
// activations are a = E h (E >= 0) and logits are y = R a. No biases, so
// ablation effects have closed forms.
namespace repcmp::toy {

struct ToyLayer {
    std::string name;
    /// p x m, non-negative.
    Matrix encoder;
    /// classes x p.
    Matrix readout;
};

struct ToyModelOptions {
    std::vector<std::pair<std::string, std::size_t>> layers = {
        {"layer1.0", 16}, {"layer2.0", 24}, {"layer3.0", 32}, {"layer4.0", 48}};
    std::size_t latent_dim = 12;
    std::size_t num_classes = 20;
    std::uint64_t seed = 1;
};

class ToyModel {
public:
    ToyModel(std::vector<ToyLayer> layers, Matrix prototypes, std::uint64_t seed);
    static ToyModel random(const ToyModelOptions& opts = {});

    BackendDescriptor describe() const;
    std::size_t num_classes() const { return prototypes_.rows(); }
    std::int64_t label_of(const std::string& image_id) const;
    std::vector<double> latent(const std::string& image_id) const;
    const ToyLayer& layer(const std::string& name) const;
    std::vector<double> activations(const std::string& layer, const std::string& image_id) const;
    std::vector<double> logits(const std::string& layer, std::span<const double> a) const;
    /// Predicted class: argmax of the unablated logits, lowest index on ties.
    std::size_t predicted_class(const std::string& layer, const std::string& image_id) const;
    /// Throws ValidationError on unknown layers or dimension mismatches.
    std::vector<AblationOutcome> ablate(const AblationRequest& request) const;

private:
    std::vector<ToyLayer> layers_;
    /// classes x m, non-negative class prototypes.
    Matrix prototypes_;
    std::uint64_t seed_;
};

/// HTTP server speaking the backend protocol for a ToyModel on 127.0.0.1.
class ToyBackendServer {
public:
    /// `asset_dir` receives feature-visualization and file-transport outputs.
    ToyBackendServer(const ToyModel& model, std::filesystem::path asset_dir);
    ~ToyBackendServer();

    /// Binds `port` (0 = ephemeral) and serves on a background thread.
    int start(int port = 0);
    /// Blocks serving on the calling thread.
    bool run(int port);
    void stop();
    std::string url() const;

    /// The next n /ablate calls fail with HTTP 503.
    void fail_next_ablations(int n) { fail_ablations_ = n; }
    std::size_t ablate_calls() const { return ablate_calls_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::atomic<int> fail_ablations_{0};
    std::atomic<std::size_t> ablate_calls_{0};
};

struct FixturePaths {
    std::filesystem::path manifest;
    std::filesystem::path taxonomy;
    std::filesystem::path practice;
};

/// Desk-scale dataset for `model`: n images with manifest, SVG stimuli, a
/// synthetic taxonomy over the model's classes and a 9-feature practice set
/// disjoint from the experimental images.
FixturePaths write_fixture(const std::filesystem::path& dir, const ToyModel& model, std::size_t n_images,
                           std::uint64_t seed);

}  // namespace repcmp::toy
