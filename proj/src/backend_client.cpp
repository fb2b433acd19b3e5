#include "repcmp/backend_client.hpp"

#include <httplib.h>

#include "repcmp/base64.hpp"
#include "repcmp/errors.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "model-backend";

}  // namespace

struct HttpBackendClient::Impl {
    explicit Impl(const std::string& url) : client(url) {}
    httplib::Client client;
};

HttpBackendClient::HttpBackendClient(std::string base_url, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)), timeout_(timeout) {
    // httplib accepts bare host names; the protocol requires an explicit http:// endpoint.
    constexpr std::string_view scheme = "http://";
    if (!base_url_.starts_with(scheme) || base_url_.size() == scheme.size() ||
        base_url_.find(' ') != std::string::npos)
        throw BackendError(kModule, "invalid backend URL '" + base_url_ + "': expected http://host[:port]");
    try {
        impl_ = std::make_unique<Impl>(base_url_);
    } catch (const std::exception& e) {
        throw BackendError(kModule, "invalid backend URL '" + base_url_ + "': " + e.what());
    }
    if (!impl_->client.is_valid()) throw BackendError(kModule, "invalid backend URL '" + base_url_ + "'");
    impl_->client.set_connection_timeout(timeout_);
    impl_->client.set_read_timeout(timeout_);
    impl_->client.set_write_timeout(timeout_);
}

HttpBackendClient::~HttpBackendClient() = default;

namespace {

nlohmann::json parse_reply(const httplib::Result& res, const std::string& url, const std::string& path) {
    if (!res)
        throw BackendError(kModule, "backend at " + url + " unreachable (" + httplib::to_string(res.error()) +
                                        ") for " + path);
    nlohmann::json body;
    try {
        body = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error&) {
        throw BackendError(kModule, "backend at " + url + " returned non-JSON for " + path);
    }
    if (res->status < 200 || res->status >= 300)
        throw BackendError(kModule, "backend at " + url + path + " failed with HTTP " + std::to_string(res->status) +
                                        ": " + body.value("message", std::string{"(no message)"}));
    return body;
}

}  // namespace

nlohmann::json HttpBackendClient::get(const std::string& path) {
    return parse_reply(impl_->client.Get(path), base_url_, path);
}

nlohmann::json HttpBackendClient::post(const std::string& path, const nlohmann::json& body) {
    return parse_reply(impl_->client.Post(path, body.dump(), "application/json"), base_url_, path);
}

BackendDescriptor HttpBackendClient::describe() { return descriptor_from_json(get("/describe")); }

ActivationBatch HttpBackendClient::activations(const std::string& layer, const std::vector<std::string>& image_ids) {
    const auto reply = post("/activations",
                            {{"layer", layer}, {"image_ids", image_ids}, {"pooling", "mean"}, {"transport", "base64"}});
    ActivationBatch batch;
    const auto transport = reply.value("transport", std::string{"base64"});
    try {
        if (transport == "base64") {
            batch.tensor = decode_tensor(base64_decode(reply.at("tensor").get<std::string>()));
        } else if (transport == "file") {
            batch.tensor = read_tensor(reply.at("path").get<std::string>());
        } else {
            throw BackendError(kModule, "unknown transport '" + transport + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(kModule, std::string("malformed activations reply: ") + e.what());
    } catch (const FormatError& e) {
        throw BackendError(kModule, std::string("undecodable activations tensor: ") + e.what());
    } catch (const CorruptionError& e) {
        throw BackendError(kModule, std::string("undecodable activations tensor: ") + e.what());
    } catch (const IoError& e) {
        throw BackendError(kModule, std::string("unreadable activations file: ") + e.what());
    }
    if (reply.contains("warning")) batch.warning = reply["warning"].get<std::string>();
    if (batch.tensor.shape.size() != 2 || batch.tensor.shape[0] != image_ids.size())
        throw BackendError(kModule, "activations reply has the wrong shape for " + std::to_string(image_ids.size()) +
                                        " images");
    return batch;
}

std::vector<AblationOutcome> HttpBackendClient::ablate(const AblationRequest& request) {
    const auto reply = post("/ablate", to_json(request));
    std::vector<AblationOutcome> out;
    try {
        for (const auto& r : reply.at("results"))
            out.push_back({r.at("image_id").get<std::string>(), r.at("y").get<double>(), r.at("y_prime").get<double>()});
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(kModule, std::string("malformed ablation reply: ") + e.what());
    }
    return out;
}

FeaturevizAsset HttpBackendClient::featureviz(const FeaturevizRequest& request) {
    const auto reply = post("/featureviz", {{"layer", request.layer},
                                            {"direction", request.direction},
                                            {"objective", request.maximize ? "max" : "min"},
                                            {"steps", request.steps},
                                            {"seed", request.seed}});
    try {
        return {reply.at("image_path").get<std::string>(), reply.value("mask_path", std::string{}),
                reply.value("converged", true)};
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(kModule, std::string("malformed featureviz reply: ") + e.what());
    }
}

}  // namespace repcmp
