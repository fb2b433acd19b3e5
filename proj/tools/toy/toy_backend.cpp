#include "toy_backend.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "repcmp/base64.hpp"
#include "repcmp/errors.hpp"
#include "repcmp/rng.hpp"
#include "repcmp/semantic_control.hpp"
#include "repcmp/tensor_store.hpp"
#include "repcmp/trial_factory.hpp"

namespace repcmp::toy {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModule = "toy-backend";

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi, double density = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.uniform01() < density ? rng.uniform(lo, hi) : 0.0;
    return m;
}

std::string svg(const std::string& fill, const std::string& text) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"64\" height=\"64\"><rect width=\"64\" height=\"64\" fill=\"" +
           fill + "\"/><text x=\"4\" y=\"36\" font-size=\"9\">" + text + "</text></svg>\n";
}

std::string color_of(std::uint64_t h) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%06llx", static_cast<unsigned long long>(h & 0xffffff));
    return buf;
}

void write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw IoError(kModule, "cannot write " + p.string());
}

}  // namespace

ToyModel::ToyModel(std::vector<ToyLayer> layers, Matrix prototypes, std::uint64_t seed)
    : layers_(std::move(layers)), prototypes_(std::move(prototypes)), seed_(seed) {
    for (const auto& l : layers_) {
        if (l.encoder.cols() != prototypes_.cols() || l.readout.cols() != l.encoder.rows() ||
            l.readout.rows() != prototypes_.rows())
            throw DimensionError(kModule, "layer " + l.name + " does not fit the latent/class sizes");
        if (std::any_of(l.encoder.values().begin(), l.encoder.values().end(), [](double v) { return v < 0; }))
            throw DomainError(kModule, "layer " + l.name + " encoder must be non-negative");
    }
}

ToyModel ToyModel::random(const ToyModelOptions& opts) {
    Rng rng(derive_seed(opts.seed, "toy-model"));
    Matrix prototypes = random_matrix(opts.num_classes, opts.latent_dim, rng, 0.2, 1.0, 0.35);
    std::vector<ToyLayer> layers;
    for (const auto& [name, width] : opts.layers) {
        ToyLayer l;
        l.name = name;
        l.encoder = random_matrix(width, opts.latent_dim, rng, 0.0, 1.0, 0.4);
        l.readout = random_matrix(opts.num_classes, width, rng, -0.5, 1.0);
        layers.push_back(std::move(l));
    }
    return ToyModel(std::move(layers), std::move(prototypes), opts.seed);
}

BackendDescriptor ToyModel::describe() const {
    BackendDescriptor d;
    d.model = "toy-linear";
    for (const auto& l : layers_) d.layers.push_back({l.name, l.encoder.rows()});
    d.num_classes = num_classes();
    return d;
}

std::int64_t ToyModel::label_of(const std::string& image_id) const {
    return static_cast<std::int64_t>(derive_seed(seed_, "label/" + image_id) % num_classes());
}

std::vector<double> ToyModel::latent(const std::string& image_id) const {
    Rng rng(derive_seed(seed_, "latent/" + image_id));
    const auto proto = prototypes_.row(static_cast<std::size_t>(label_of(image_id)));
    const double strength = rng.uniform(0.5, 1.5);
    std::vector<double> h(proto.size());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = strength * proto[i] + rng.uniform(0.0, 0.3);
    return h;
}

const ToyLayer& ToyModel::layer(const std::string& name) const {
    for (const auto& l : layers_)
        if (l.name == name) return l;
    throw ValidationError(kModule, "unknown layer '" + name + "'");
}

std::vector<double> ToyModel::activations(const std::string& name, const std::string& image_id) const {
    const auto& l = layer(name);
    const auto h = latent(image_id);
    std::vector<double> a(l.encoder.rows(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < h.size(); ++j) a[i] += l.encoder(i, j) * h[j];
    return a;
}

std::vector<double> ToyModel::logits(const std::string& name, std::span<const double> a) const {
    const auto& l = layer(name);
    if (a.size() != l.readout.cols()) throw DimensionError(kModule, "activation width mismatch for " + name);
    std::vector<double> y(l.readout.rows(), 0.0);
    for (std::size_t c = 0; c < y.size(); ++c)
        for (std::size_t i = 0; i < a.size(); ++i) y[c] += l.readout(c, i) * a[i];
    return y;
}

std::size_t ToyModel::predicted_class(const std::string& name, const std::string& image_id) const {
    const auto y = logits(name, activations(name, image_id));
    return static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
}

std::vector<AblationOutcome> ToyModel::ablate(const AblationRequest& req) const {
    const auto& l = layer(req.layer);
    const std::size_t p = l.encoder.rows();
    if (req.mode == AblationMode::Neuron && req.index >= p)
        throw ValidationError(kModule, "channel " + std::to_string(req.index) + " out of range");
    if (req.mode == AblationMode::Direction && (req.direction.size() != p || req.codes.size() != req.image_ids.size()))
        throw ValidationError(kModule, "direction must have " + std::to_string(p) + " entries and one code per image");

    std::vector<AblationOutcome> out;
    for (std::size_t n = 0; n < req.image_ids.size(); ++n) {
        const auto& id = req.image_ids[n];
        const auto a = activations(req.layer, id);
        auto ablated = a;
        if (req.mode == AblationMode::Neuron) {
            ablated[req.index] = 0.0;
        } else {
            for (std::size_t i = 0; i < p; ++i) ablated[i] = std::max(0.0, a[i] - req.codes[n] * req.direction[i]);
        }
        const auto y = logits(req.layer, a);
        const std::size_t c = req.logit == LogitTarget::Label
                                  ? static_cast<std::size_t>(label_of(id))
                                  : static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
        out.push_back({id, y[c], logits(req.layer, ablated)[c]});
    }
    return out;
}

struct ToyBackendServer::Impl {
    const ToyModel& model;
    fs::path asset_dir;
    httplib::Server server;
    std::thread thread;
    int port = -1;

    Impl(const ToyModel& m, fs::path dir) : model(m), asset_dir(std::move(dir)) {}
};

ToyBackendServer::ToyBackendServer(const ToyModel& model, fs::path asset_dir)
    : impl_(std::make_unique<Impl>(model, std::move(asset_dir))) {
    auto& srv = impl_->server;
    auto* impl = impl_.get();

    auto fail = [](httplib::Response& res, int status, const std::string& code, const std::string& message) {
        res.status = status;
        res.set_content(json{{"code", code}, {"message", message}}.dump(), "application/json");
    };
    auto guarded = [fail](auto handler) {
        return [handler, fail](const httplib::Request& req, httplib::Response& res) {
            try {
                handler(req, res);
            } catch (const ValidationError& e) {
                fail(res, 400, "invalid_request", e.what());
            } catch (const DimensionError& e) {
                fail(res, 400, "dimension_mismatch", e.what());
            } catch (const json::exception& e) {
                fail(res, 400, "invalid_request", e.what());
            } catch (const std::exception& e) {
                fail(res, 500, "internal", e.what());
            }
        };
    };

    srv.Get("/describe", guarded([impl](const httplib::Request&, httplib::Response& res) {
        res.set_content(to_json(impl->model.describe()).dump(), "application/json");
    }));

    srv.Post("/activations", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        const auto body = json::parse(req.body);
        const auto layer = body.at("layer").get<std::string>();
        const auto ids = body.at("image_ids").get<std::vector<std::string>>();
        if (body.value("pooling", std::string{"mean"}) != "mean")
            throw ValidationError(kModule, "only mean pooling is supported");
        const std::size_t p = impl->model.layer(layer).encoder.rows();
        Matrix m(ids.size(), p);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const auto a = impl->model.activations(layer, ids[r]);
            std::copy(a.begin(), a.end(), m.row(r).begin());
        }
        const auto tensor = tensor_from_matrix(m);
        json reply;
        if (body.value("transport", std::string{"base64"}) == "file") {
            const auto path = impl->asset_dir / ("activations_" + layer + "_" +
                                                 std::to_string(derive_seed(0, req.body)) + ".clts");
            fs::create_directories(impl->asset_dir);
            write_tensor(path, tensor);
            reply = {{"transport", "file"}, {"path", path.string()}};
        } else {
            reply = {{"transport", "base64"}, {"tensor", base64_encode(encode_tensor(tensor))}};
        }
        res.set_content(reply.dump(), "application/json");
    }));

    srv.Post("/ablate", guarded([this, impl, fail](const httplib::Request& req, httplib::Response& res) {
        ++ablate_calls_;
        if (fail_ablations_ > 0) {
            --fail_ablations_;
            fail(res, 503, "unavailable", "injected failure");
            return;
        }
        const auto outcomes = impl->model.ablate(ablation_request_from_json(json::parse(req.body)));
        json results = json::array();
        for (const auto& o : outcomes) results.push_back({{"image_id", o.image_id}, {"y", o.y}, {"y_prime", o.y_prime}});
        res.set_content(json{{"results", results}}.dump(), "application/json");
    }));

    srv.Post("/featureviz", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        const auto body = json::parse(req.body);
        const auto layer = body.at("layer").get<std::string>();
        const auto direction = body.at("direction").get<std::vector<double>>();
        if (direction.size() != impl->model.layer(layer).encoder.rows())
            throw DimensionError(kModule, "direction width mismatch for " + layer);
        const auto tag = derive_seed(body.at("seed").get<std::uint64_t>(), req.body);
        const auto stem = "fv_" + color_of(tag).substr(1) + "_" + std::to_string(tag % 1000000);
        const auto image = impl->asset_dir / (stem + ".svg");
        const auto mask = impl->asset_dir / (stem + "_mask.svg");
        write_file(image, svg(color_of(tag), body.at("objective").get<std::string>()));
        write_file(mask, svg("#ffffff", "mask"));
        res.set_content(json{{"image_path", image.string()}, {"mask_path", mask.string()}, {"converged", true}}.dump(),
                        "application/json");
    }));
}

ToyBackendServer::~ToyBackendServer() { stop(); }

int ToyBackendServer::start(int port) {
    auto& srv = impl_->server;
    impl_->port = port == 0 ? srv.bind_to_any_port("127.0.0.1") : (srv.bind_to_port("127.0.0.1", port) ? port : -1);
    if (impl_->port < 0) throw IoError(kModule, "cannot bind port " + std::to_string(port));
    impl_->thread = std::thread([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    return impl_->port;
}

bool ToyBackendServer::run(int port) {
    impl_->port = port;
    return impl_->server.listen("127.0.0.1", port);
}

void ToyBackendServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

std::string ToyBackendServer::url() const { return "http://127.0.0.1:" + std::to_string(impl_->port); }

FixturePaths write_fixture(const fs::path& dir, const ToyModel& model, std::size_t n_images, std::uint64_t seed) {
    fs::create_directories(dir / "images");
    FixturePaths paths{dir / "manifest.json", dir / "taxonomy.json", dir / "practice.json"};

    json manifest = json::array();
    for (std::size_t i = 0; i < n_images; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "img_%05zu", i);
        const auto label = model.label_of(id);
        const auto rel = std::string("images/") + id + ".svg";
        write_file(dir / rel, svg(color_of(mix64(static_cast<std::uint64_t>(label) + 1)), id));
        manifest.push_back({{"image_id", id}, {"label_id", label}, {"source_path", rel}, {"split", "val"}});
    }
    write_file(paths.manifest, manifest.dump(1) + "\n");

    const auto taxonomy = synthetic_taxonomy(model.num_classes(), 3, derive_seed(seed, "taxonomy"));
    write_file(paths.taxonomy, taxonomy.to_json().dump(1) + "\n");

    json features = json::array();
    for (std::size_t f = 0; f < kPracticeTrials; ++f) {
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < 12; ++i) {
            const auto rel = "practice/p" + std::to_string(f) + "_" + std::to_string(i) + ".svg";
            write_file(dir / rel, svg(color_of(mix64(f + 100)), "practice"));
            ids.push_back(rel);
        }
        features.push_back({{"name", "practice-" + std::to_string(f)}, {"image_ids", ids}});
    }
    std::vector<std::string> distractors;
    for (std::size_t i = 0; i < 30; ++i) {
        const auto rel = "practice/d" + std::to_string(i) + ".svg";
        write_file(dir / rel, svg(color_of(mix64(i + 1000)), "noise"));
        distractors.push_back(rel);
    }
    write_file(paths.practice, json{{"features", features}, {"distractor_pool", distractors}}.dump(1) + "\n");
    return paths;
}

}  // namespace repcmp::toy
