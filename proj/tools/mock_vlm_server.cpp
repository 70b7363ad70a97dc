// Offline stand-in for the VLM endpoint: answers /v1/generate from a
// generated dataset the same way PseudoVlmClient does, so the HTTP path can
// be exercised end-to-end without external services.

#include <atomic>
#include <cstdio>
#include <memory>
#include <string>

#include "cortex/dataset_io.hpp"
#include "cortex/vlm_client.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

int main(int argc, char** argv) {
    CLI::App app{"mock VLM endpoint serving pseudo reasoning sentences"};
    std::string dataset_path;
    int port = 8911;
    int resolution = 40;
    int fail_first = 0;
    std::string model = "mock-vlm";
    app.add_option("--dataset", dataset_path, "scene pair JSONL")->required();
    app.add_option("--port", port, "listen port (0 picks a free one)");
    app.add_option("--resolution", resolution, "raster size the client uses");
    app.add_option("--fail-first", fail_first,
                   "return HTTP 503 for the first N requests");
    app.add_option("--model", model, "model id to report");
    CLI11_PARSE(app, argc, argv);

    try {
        auto pairs = cortex::read_pairs_jsonl(dataset_path);
        cortex::PseudoVlmClient oracle(pairs, resolution, model);

        auto server = std::make_shared<httplib::Server>();
        std::atomic<int> failures_left{fail_first};

        server->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
            res.set_content("ok", "text/plain");
        });
        server->Post("/v1/generate", [&](const httplib::Request& req,
                                         httplib::Response& res) {
            if (failures_left.fetch_sub(1) > 0) {
                res.status = 503;
                res.set_content("{\"error\":\"synthetic outage\"}",
                                "application/json");
                return;
            }
            failures_left.store(0);
            nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
            if (body.is_discarded() || !body.contains("prompt") ||
                !body.contains("images")) {
                res.status = 400;
                res.set_content("{\"error\":\"bad request\"}", "application/json");
                return;
            }
            cortex::VlmRequest vreq;
            vreq.prompt = body.at("prompt").get<std::string>();
            vreq.images_b64 =
                body.at("images").get<std::vector<std::string>>();
            try {
                cortex::VlmResponse vres = oracle.complete(vreq);
                nlohmann::json out{{"text", vres.text}, {"model", vres.model_id}};
                res.set_content(out.dump(), "application/json");
            } catch (const std::exception& e) {
                res.status = 422;
                nlohmann::json out{{"error", e.what()}};
                res.set_content(out.dump(), "application/json");
            }
        });

        int bound_port = port;
        if (port == 0) {
            bound_port = server->bind_to_any_port("0.0.0.0");
            if (bound_port < 0) throw cortex::IoError("cannot bind a port");
        } else if (!server->bind_to_port("0.0.0.0", port)) {
            throw cortex::IoError("cannot bind port " + std::to_string(port));
        }
        std::printf("mock-vlm listening on port %d (%zu pairs)\n", bound_port,
                    pairs.size());
        std::fflush(stdout);
        server->listen_after_bind();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mock-vlm: %s\n", e.what());
        return 1;
    }
    return 0;
}
