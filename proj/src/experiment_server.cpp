#include <fstream>
#include <sstream>

#include <httplib.h>

#include "repcmp/errors.hpp"
#include "repcmp/experiment_service.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "experiment-service";

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"code", code}, {"message", message}}.dump(), "application/json");
}

template <class Handler>
httplib::Server::Handler guarded(Handler handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
        try {
            handler(req, res);
        } catch (const NotFoundError& e) {
            send_error(res, 404, "not_found", e.what());
        } catch (const StateError& e) {
            send_error(res, 409, "conflict", e.what());
        } catch (const ValidationError& e) {
            send_error(res, 400, "invalid_request", e.what());
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, "invalid_request", std::string("malformed JSON body: ") + e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        }
    };
}

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

bool flag(const httplib::Request& req, const char* name) {
    if (!req.has_param(name)) return false;
    const auto v = req.get_param_value(name);
    return v.empty() || v == "1" || v == "true";
}

std::string content_type_for(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".webp") return "image/webp";
    if (ext == ".gif") return "image/gif";
    if (ext == ".svg") return "image/svg+xml";
    return "application/octet-stream";
}

/// True when `p` stays inside `root` after normalisation.
bool contained(const std::filesystem::path& root, const std::filesystem::path& p) {
    const auto r = std::filesystem::weakly_canonical(root);
    const auto c = std::filesystem::weakly_canonical(p);
    auto mismatch = std::mismatch(r.begin(), r.end(), c.begin(), c.end());
    return mismatch.first == r.end();
}

}  // namespace

std::optional<std::filesystem::path> AssetResolver::resolve(const std::string& ref) const {
    if (manifest && manifest->contains(ref)) {
        std::filesystem::path p = manifest->at(ref).source_path;
        if (p.is_relative()) p = image_root / p;
        if (std::filesystem::is_regular_file(p)) return p;
        return std::nullopt;
    }
    const std::filesystem::path rel(ref);
    if (rel.empty() || rel.is_absolute()) return std::nullopt;
    for (const auto& root : search_roots) {
        const auto p = root / rel;
        if (contained(root, p) && std::filesystem::is_regular_file(p)) return p;
    }
    return std::nullopt;
}

struct ExperimentServer::Impl {
    Impl(SessionManager& m, AssetResolver a, ServerOptions o)
        : manager(m), assets(std::move(a)), opts(std::move(o)) {}

    SessionManager& manager;
    AssetResolver assets;
    ServerOptions opts;
    httplib::Server server;
};

ExperimentServer::ExperimentServer(SessionManager& manager, AssetResolver assets, ServerOptions opts)
    : impl_(std::make_unique<Impl>(manager, std::move(assets), std::move(opts))) {
    auto& srv = impl_->server;
    auto* impl = impl_.get();

    srv.Get("/healthz", guarded([](const httplib::Request&, httplib::Response& res) {
        send_json(res, {{"status", "ok"}});
    }));

    srv.Post("/sessions", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body);
        if (!body.contains("experiment") || !body["experiment"].is_string())
            throw ValidationError(kModule, "body must carry an 'experiment' string");
        const auto s = impl->manager.create_session(experiment_from_string(body["experiment"].get<std::string>()));
        send_json(res, {{"session_id", s.session_id}, {"state", to_string(s.state)}}, 201);
    }));

    srv.Get("/sessions/:id/trial", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        send_json(res, to_json(impl->manager.next_trial(req.path_params.at("id"))));
    }));

    srv.Post("/sessions/:id/response", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body);
        const auto result =
            impl->manager.submit_response(req.path_params.at("id"), body.at("trial_id").get<std::string>(),
                                          body.at("choice").get<int>(), body.at("latency_ms").get<double>());
        nlohmann::json out = {{"status", to_string(result.state)}};
        if (result.feedback_correct) out["feedback"] = {{"correct", *result.feedback_correct}};
        send_json(res, out);
    }));

    srv.Get("/export", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        ExportFilter filter;
        filter.main_only = flag(req, "main_only");
        filter.passing_only = flag(req, "passing_only");
        if (req.has_param("experiment")) filter.experiment = experiment_from_string(req.get_param_value("experiment"));
        nlohmann::json out = nlohmann::json::array();
        for (const auto& r : impl->manager.export_responses(filter)) out.push_back(to_json(r));
        send_json(res, out);
    }));

    srv.Get(R"(/assets/(.+))", guarded([impl](const httplib::Request& req, httplib::Response& res) {
        const std::string ref = req.matches[1];
        const auto path = impl->assets.resolve(ref);
        if (!path) throw NotFoundError(kModule, "no asset '" + ref + "'");
        std::ifstream in(*path, std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        res.set_content(buf.str(), content_type_for(*path));
    }));

    if (impl_->opts.static_dir && !srv.set_mount_point("/", impl_->opts.static_dir->string()))
        throw IoError(kModule, "static directory " + impl_->opts.static_dir->string() + " is not readable");
}

ExperimentServer::~ExperimentServer() { stop(); }

int ExperimentServer::bind() {
    auto& srv = impl_->server;
    const auto& o = impl_->opts;
    if (o.port == 0) return srv.bind_to_any_port(o.host);
    return srv.bind_to_port(o.host, o.port) ? o.port : -1;
}

bool ExperimentServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void ExperimentServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void ExperimentServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace repcmp
