#include "repcmp/backend_client.hpp"
#include "repcmp/errors.hpp"

namespace repcmp {

nlohmann::json to_json(const AblationRequest& r) {
    nlohmann::json j = {{"layer", r.layer},
                        {"image_ids", r.image_ids},
                        {"mode", r.mode == AblationMode::Neuron ? "neuron" : "direction"},
                        {"logit", r.logit == LogitTarget::Predicted ? "predicted" : "label"}};
    if (r.mode == AblationMode::Neuron) {
        j["index"] = r.index;
    } else {
        j["direction"] = r.direction;
        j["codes"] = r.codes;
    }
    return j;
}

AblationRequest ablation_request_from_json(const nlohmann::json& j) {
    AblationRequest r;
    try {
        r.layer = j.at("layer").get<std::string>();
        r.image_ids = j.at("image_ids").get<std::vector<std::string>>();
        const auto mode = j.at("mode").get<std::string>();
        if (mode == "neuron") {
            r.mode = AblationMode::Neuron;
            r.index = j.at("index").get<std::size_t>();
        } else if (mode == "direction") {
            r.mode = AblationMode::Direction;
            r.direction = j.at("direction").get<std::vector<double>>();
            r.codes = j.at("codes").get<std::vector<double>>();
        } else {
            throw ValidationError("model-backend", "unknown ablation mode '" + mode + "'");
        }
        const auto logit = j.value("logit", std::string{"predicted"});
        if (logit == "predicted") {
            r.logit = LogitTarget::Predicted;
        } else if (logit == "label") {
            r.logit = LogitTarget::Label;
        } else {
            throw ValidationError("model-backend", "unknown logit target '" + logit + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("model-backend", std::string("malformed ablation request: ") + e.what());
    }
    return r;
}

nlohmann::json to_json(const BackendDescriptor& d) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : d.layers) layers.push_back({{"name", l.name}, {"channels", l.channels}});
    return {{"model", d.model}, {"layers", layers}, {"num_classes", d.num_classes}};
}

BackendDescriptor descriptor_from_json(const nlohmann::json& j) {
    BackendDescriptor d;
    try {
        d.model = j.at("model").get<std::string>();
        for (const auto& l : j.at("layers"))
            d.layers.push_back({l.at("name").get<std::string>(), l.at("channels").get<std::size_t>()});
        d.num_classes = j.value("num_classes", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw BackendError("model-backend", std::string("malformed descriptor: ") + e.what());
    }
    return d;
}

}  // namespace repcmp
