#include <doctest.h>

#include <thread>

#include <httplib.h>

#include "repcmp/backend_client.hpp"
#include "repcmp/base64.hpp"
#include "repcmp/errors.hpp"
#include "support/fixtures.hpp"
#include "toy_backend.hpp"

using namespace repcmp;
using nlohmann::json;

namespace {

/// Scripted HTTP peer: records request bodies and answers with a fixed reply.
class StubBackend {
public:
    StubBackend() {
        auto handler = [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mutex_);
            last_path = req.path;
            last_body = req.body.empty() ? json() : json::parse(req.body);
            res.status = status;
            res.set_content(reply, "application/json");
        };
        server_.Get(".*", handler);
        server_.Post(".*", handler);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubBackend() {
        server_.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

    int status = 200;
    std::string reply = "{}";
    std::string last_path;
    json last_body;

private:
    httplib::Server server_;
    std::thread thread_;
    std::mutex mutex_;
    int port_ = 0;
};

TensorFile small_tensor(std::size_t rows) {
    TensorFile t{DType::Float32, {rows, 2}, {}};
    for (std::size_t i = 0; i < rows * 2; ++i) t.payload.push_back(static_cast<float>(i) * 0.5f);
    return t;
}

}  // namespace

TEST_CASE("base64 matches RFC 4648 test vectors") {
    const std::vector<std::pair<std::string, std::string>> vectors = {
        {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
        {"foobar", "Zm9vYmFy"}};
    for (const auto& [plain, encoded] : vectors) {
        const std::vector<std::uint8_t> bytes(plain.begin(), plain.end());
        CHECK(base64_encode(bytes) == encoded);
        CHECK(base64_decode(encoded) == bytes);
    }
    CHECK_THROWS_AS(base64_decode("Zm9"), FormatError);
    CHECK_THROWS_AS(base64_decode("Zm9*"), FormatError);
    CHECK_THROWS_AS(base64_decode("Z==="), FormatError);
    CHECK_THROWS_AS(base64_decode("Zg==Zg=="), FormatError);
}

TEST_CASE("ablation request JSON matches the wire format") {
    AblationRequest neuron;
    neuron.layer = "layer3.0";
    neuron.image_ids = {"a", "b"};
    neuron.index = 7;
    CHECK(to_json(neuron) == json::parse(R"({"layer":"layer3.0","image_ids":["a","b"],"mode":"neuron",
                                             "logit":"predicted","index":7})"));

    AblationRequest dir;
    dir.layer = "layer1.0";
    dir.image_ids = {"x"};
    dir.mode = AblationMode::Direction;
    dir.logit = LogitTarget::Label;
    dir.direction = {0.6, 0.8};
    dir.codes = {2.5};
    const auto golden = json::parse(R"({"layer":"layer1.0","image_ids":["x"],"mode":"direction","logit":"label",
                                        "direction":[0.6,0.8],"codes":[2.5]})");
    CHECK(to_json(dir) == golden);
    const auto back = ablation_request_from_json(golden);
    CHECK(back.mode == AblationMode::Direction);
    CHECK(back.codes == dir.codes);
    CHECK(to_json(back) == golden);

    CHECK_THROWS_AS(ablation_request_from_json(json::parse(R"({"layer":"l","image_ids":[],"mode":"zap"})")),
                    ValidationError);
    CHECK_THROWS_AS(ablation_request_from_json(json::parse(R"({"layer":"l","image_ids":[],"mode":"neuron"})")),
                    ValidationError);
}

TEST_CASE("descriptor JSON round-trips") {
    const auto golden = json::parse(R"({"model":"m","layers":[{"name":"layer1.0","channels":64}],"num_classes":1000})");
    const auto d = descriptor_from_json(golden);
    CHECK(d.layers.at(0).channels == 64);
    CHECK(to_json(d) == golden);
    CHECK_THROWS_AS(descriptor_from_json(json::parse(R"({"layers":[]})")), BackendError);
}

TEST_CASE("HTTP client sends protocol requests and decodes both transports") {
    StubBackend stub;
    HttpBackendClient client(stub.url(), std::chrono::milliseconds(5000));

    stub.reply = json{{"transport", "base64"}, {"tensor", base64_encode(encode_tensor(small_tensor(2)))}}.dump();
    auto batch = client.activations("layer2.0", {"a", "b"});
    CHECK(stub.last_path == "/activations");
    CHECK(stub.last_body == json{{"layer", "layer2.0"}, {"image_ids", {"a", "b"}}, {"pooling", "mean"},
                                 {"transport", "base64"}});
    CHECK(batch.tensor == small_tensor(2));
    CHECK_FALSE(batch.warning);

    fixture::TempDir dir("transport");
    write_tensor(dir / "t.clts", small_tensor(3));
    stub.reply = json{{"transport", "file"}, {"path", (dir / "t.clts").string()}, {"warning", "cpu"}}.dump();
    batch = client.activations("layer2.0", {"a", "b", "c"});
    CHECK(batch.tensor == small_tensor(3));
    CHECK(batch.warning == "cpu");

    SUBCASE("wrong row count") { CHECK_THROWS_AS(client.activations("layer2.0", {"a"}), BackendError); }
    SUBCASE("unknown transport") {
        stub.reply = R"({"transport":"pigeon"})";
        CHECK_THROWS_AS(client.activations("l", {"a"}), BackendError);
    }
    SUBCASE("undecodable tensor") {
        stub.reply = R"({"transport":"base64","tensor":"AAAA"})";
        CHECK_THROWS_AS(client.activations("l", {"a"}), BackendError);
    }
    SUBCASE("missing file") {
        stub.reply = json{{"transport", "file"}, {"path", (dir / "gone.clts").string()}}.dump();
        CHECK_THROWS_AS(client.activations("l", {"a"}), BackendError);
    }
}

TEST_CASE("HTTP client surfaces error replies with the backend URL") {
    StubBackend stub;
    HttpBackendClient client(stub.url());
    stub.status = 422;
    stub.reply = R"({"code":"dimension_mismatch","message":"direction has 3 entries"})";
    AblationRequest req;
    req.layer = "layer1.0";
    req.image_ids = {"a"};
    try {
        client.ablate(req);
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        const std::string what = e.what();
        CHECK(what.find(stub.url()) != std::string::npos);
        CHECK(what.find("422") != std::string::npos);
        CHECK(what.find("direction has 3 entries") != std::string::npos);
    }
    stub.status = 200;
    stub.reply = "not json";
    CHECK_THROWS_AS(client.describe(), BackendError);
    stub.reply = R"({"results":[{"image_id":"a"}]})";
    CHECK_THROWS_AS(client.ablate(req), BackendError);

    stub.reply = R"({"image_path":"/tmp/x.png","mask_path":"/tmp/m.png","converged":false})";
    const auto fv = client.featureviz({"layer1.0", {1.0, 0.0}, false, 64, 3});
    CHECK(stub.last_body == json::parse(R"({"layer":"layer1.0","direction":[1.0,0.0],"objective":"min",
                                            "steps":64,"seed":3})"));
    CHECK(fv.image_path == "/tmp/x.png");
    CHECK_FALSE(fv.converged);
}

TEST_CASE("unreachable backends fail fast naming the URL") {
    HttpBackendClient client("http://127.0.0.1:1", std::chrono::milliseconds(500));
    try {
        client.describe();
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("http://127.0.0.1:1") != std::string::npos);
    }
    CHECK_THROWS_AS(HttpBackendClient("not a url"), BackendError);
}

TEST_CASE("toy backend speaks the protocol end to end") {
    const auto model = toy::ToyModel::random();
    fixture::TempDir dir("toy");
    toy::ToyBackendServer server(model, dir.path());
    server.start();
    HttpBackendClient client(server.url());
    const auto desc = client.describe();
    CHECK(desc.layers.size() == 4);
    CHECK(desc.num_classes == model.num_classes());

    const std::vector<std::string> ids = {"img_00001", "img_00002"};
    const auto batch = client.activations("layer1.0", ids);
    const auto m = matrix_from_tensor(batch.tensor);
    const auto expected = model.activations("layer1.0", ids[1]);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(m(1, i) == doctest::Approx(expected[i]).epsilon(1e-6));

    AblationRequest req;
    req.layer = "layer1.0";
    req.image_ids = ids;
    req.index = 3;
    const auto out = client.ablate(req);
    const auto direct = model.ablate(req);
    REQUIRE(out.size() == 2);
    CHECK(out[0].y == direct[0].y);
    CHECK(out[1].y_prime == direct[1].y_prime);

    req.index = 999;
    CHECK_THROWS_AS(client.ablate(req), BackendError);
    server.fail_next_ablations(1);
    req.index = 0;
    CHECK_THROWS_AS(client.ablate(req), BackendError);
    CHECK_NOTHROW(client.ablate(req));

    const auto fv = client.featureviz({"layer1.0", std::vector<double>(16, 0.25), true, 8, 1});
    CHECK(std::filesystem::exists(fv.image_path));
    CHECK_THROWS_AS(client.featureviz({"layer1.0", {1.0}, true, 8, 1}), BackendError);
}
