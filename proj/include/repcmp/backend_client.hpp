#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/tensor_store.hpp"

// Client side of the model-backend wire protocol (HTTP + JSON):
//
//   GET  /describe    -> {"model", "layers": [{"name", "channels"}], "num_classes"}
//   POST /activations {"layer", "image_ids", "pooling": "mean", "transport": "base64"|"file"}
//                     -> {"transport", "tensor": <base64 CLTS> | "path": <shared file>, "warning"?}
//   POST /ablate      {"layer", "image_ids", "mode": "neuron"|"direction", "logit": "predicted"|"label",
//                      "index"?, "direction"?: [p], "codes"?: [n]}
//                     -> {"results": [{"image_id", "y", "y_prime"}]}
//   POST /featureviz  {"layer", "direction": [p], "objective": "max"|"min", "steps", "seed"}
//                     -> {"image_path", "mask_path", "converged"}
//
// Errors come back as {"code", "message"} with a non-2xx status.
namespace repcmp {

struct BackendLayer {
    std::string name;
    std::size_t channels = 0;
};

struct BackendDescriptor {
    std::string model;
    std::vector<BackendLayer> layers;
    std::size_t num_classes = 0;
};

enum class AblationMode { Neuron, Direction };
enum class LogitTarget { Predicted, Label };

struct AblationRequest {
    std::string layer;
    std::vector<std::string> image_ids;
    AblationMode mode = AblationMode::Neuron;
    LogitTarget logit = LogitTarget::Predicted;
    /// Neuron mode: channel to zero.
    std::size_t index = 0;
    /// Direction mode: dictionary atom d_c (length p) and per-image z_c.
    std::vector<double> direction;
    std::vector<double> codes;
};

struct AblationOutcome {
    std::string image_id;
    double y = 0.0;
    double y_prime = 0.0;
};

struct FeaturevizRequest {
    std::string layer;
    std::vector<double> direction;
    bool maximize = true;
    std::size_t steps = 256;
    std::uint64_t seed = 0;
};

struct FeaturevizAsset {
    std::string image_path;
    std::string mask_path;
    bool converged = true;
};

struct ActivationBatch {
    TensorFile tensor;
    std::optional<std::string> warning;
};

nlohmann::json to_json(const AblationRequest& r);
AblationRequest ablation_request_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackendDescriptor& d);
BackendDescriptor descriptor_from_json(const nlohmann::json& j);

class BackendClient {
public:
    virtual ~BackendClient() = default;

    virtual BackendDescriptor describe() = 0;
    virtual ActivationBatch activations(const std::string& layer, const std::vector<std::string>& image_ids) = 0;
    virtual std::vector<AblationOutcome> ablate(const AblationRequest& request) = 0;
    virtual FeaturevizAsset featureviz(const FeaturevizRequest& request) = 0;
    /// Human-readable location, used in error messages.
    virtual std::string endpoint() const = 0;
};

/// BackendClient over HTTP. Not thread-safe; create one per worker.
class HttpBackendClient : public BackendClient {
public:
    explicit HttpBackendClient(std::string base_url,
                               std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));
    ~HttpBackendClient() override;

    BackendDescriptor describe() override;
    ActivationBatch activations(const std::string& layer, const std::vector<std::string>& image_ids) override;
    std::vector<AblationOutcome> ablate(const AblationRequest& request) override;
    FeaturevizAsset featureviz(const FeaturevizRequest& request) override;
    std::string endpoint() const override { return base_url_; }

private:
    nlohmann::json get(const std::string& path);
    nlohmann::json post(const std::string& path, const nlohmann::json& body);

    std::string base_url_;
    std::chrono::milliseconds timeout_;
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace repcmp
