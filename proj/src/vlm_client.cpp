#include "cortex/vlm_client.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cortex/image.hpp"

namespace cortex {

std::uint64_t digest_of_b64_image(const std::string& b64) {
    return decode_ppm(base64_decode(b64)).digest();
}

HttpVlmClient::HttpVlmClient(Options opts) : opts_(std::move(opts)) {
    if (opts_.base_url.empty())
        throw ConfigError("HttpVlmClient: base_url is required");
    if (opts_.max_attempts < 1)
        throw ConfigError("HttpVlmClient: max_attempts must be >= 1");
    id_ = opts_.model_hint.empty() ? "http" : opts_.model_hint;
}

VlmResponse HttpVlmClient::complete(const VlmRequest& request) {
    nlohmann::json body{{"prompt", request.prompt},
                        {"images", request.images_b64},
                        {"temperature", request.temperature},
                        {"max_tokens", request.max_tokens}};
    if (!opts_.model_hint.empty()) body["model"] = opts_.model_hint;
    const std::string payload = body.dump();

    httplib::Client cli(opts_.base_url);
    cli.set_connection_timeout(opts_.timeout_sec, 0);
    cli.set_read_timeout(opts_.timeout_sec, 0);
    if (const char* key = std::getenv("VLM_API_KEY"))
        cli.set_bearer_token_auth(key);

    std::string last_error = "no attempt made";
    for (int attempt = 1; attempt <= opts_.max_attempts; ++attempt) {
        auto t0 = std::chrono::steady_clock::now();
        ++calls_;
        httplib::Result res =
            cli.Post("/v1/generate", payload, "application/json");
        if (res && res->status == 200) {
            nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
            if (!j.is_discarded() && j.contains("text")) {
                VlmResponse out;
                out.text = j.at("text").get<std::string>();
                out.model_id = j.value("model", opts_.model_hint);
                if (out.model_id.empty()) out.model_id = "http";
                out.latency_ms =
                    std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
                return out;
            }
            last_error = "malformed response body";
        } else if (res) {
            last_error = "http status " + std::to_string(res->status);
        } else {
            last_error = "transport error " + httplib::to_string(res.error());
        }
        if (attempt < opts_.max_attempts) {
            int delay = opts_.backoff_start_ms << (attempt - 1);
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
    }
    throw ExtractionError("vlm endpoint " + opts_.base_url + " failed after " +
                          std::to_string(opts_.max_attempts) +
                          " attempts: " + last_error);
}

PseudoVlmClient::PseudoVlmClient(const std::vector<ScenePair>& dataset,
                                 int resolution, std::string model)
    : model_(std::move(model)) {
    auto numbered = [](const std::vector<std::string>& sentences) {
        std::string out;
        for (std::size_t i = 0; i < sentences.size(); ++i) {
            out += std::to_string(i + 1) + ". " + sentences[i];
            out += '\n';
        }
        return out;
    };
    for (const ScenePair& p : dataset) {
        const std::uint64_t bef = rasterize(p.before, resolution).digest();
        const std::uint64_t aft = rasterize(p.after, resolution).digest();
        single_.emplace(bef, numbered(render_pseudo_rte(p.before)));
        single_.emplace(aft, numbered(render_pseudo_rte(p.after)));
        paired_.emplace(std::make_pair(bef, aft),
                        p.change.kind == ChangeKind::no_change
                            ? "there are no differences"
                            : p.gt_captions.front());
    }
}

VlmResponse PseudoVlmClient::complete(const VlmRequest& request) {
    std::lock_guard<std::mutex> lock(mu_);
    ++calls_;
    if (request.images_b64.size() == 1) {
        auto it = single_.find(digest_of_b64_image(request.images_b64[0]));
        if (it == single_.end())
            throw ExtractionError("pseudo vlm: unknown image");
        return {it->second, model_, 0.0};
    }
    if (request.images_b64.size() == 2) {
        auto key = std::make_pair(digest_of_b64_image(request.images_b64[0]),
                                  digest_of_b64_image(request.images_b64[1]));
        auto it = paired_.find(key);
        if (it == paired_.end())
            throw ExtractionError("pseudo vlm: unknown image pair");
        return {it->second, model_, 0.0};
    }
    throw InputError("pseudo vlm: expected 1 or 2 images");
}

}  // namespace cortex
