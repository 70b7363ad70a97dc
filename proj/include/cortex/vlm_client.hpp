#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "cortex/common.hpp"
#include "cortex/toy_scene.hpp"

namespace cortex {

struct VlmRequest {
    std::vector<std::string> images_b64;  // one image; two for direct_pair
    std::string prompt;
    double temperature = 0.0;
    int max_tokens = 512;
};

struct VlmResponse {
    std::string text;
    std::string model_id;
    double latency_ms = 0.0;
};

class VlmClient {
  public:
    virtual ~VlmClient() = default;
    virtual VlmResponse complete(const VlmRequest& request) = 0;
    virtual std::string model_id() const = 0;
};

// JSON-over-HTTP transport: POST <base_url>/v1/generate with
// {prompt, images, temperature, max_tokens}; expects {text, model}.
// Sends Authorization: Bearer $VLM_API_KEY when the variable is set.
class HttpVlmClient : public VlmClient {
  public:
    struct Options {
        std::string base_url;      // e.g. http://127.0.0.1:8911
        int max_attempts = 3;
        int backoff_start_ms = 1000;  // doubles per retry
        int timeout_sec = 30;
        std::string model_hint;    // forwarded so the server can report it
    };
    explicit HttpVlmClient(Options opts);
    VlmResponse complete(const VlmRequest& request) override;
    // Stable per-endpoint identity (model_hint or "http"). Cache keys and
    // record provenance use this; the server-reported name travels in
    // VlmResponse::model_id instead.
    std::string model_id() const override { return id_; }
    int network_calls() const { return calls_.load(); }

  private:
    Options opts_;
    std::string id_;
    std::atomic<int> calls_{0};
};

// Replays a fixed response sequence; wraps around when exhausted.
class ScriptedVlmClient : public VlmClient {
  public:
    ScriptedVlmClient(std::vector<std::string> responses,
                      std::string model = "scripted")
        : responses_(std::move(responses)), model_(std::move(model)) {
        if (responses_.empty())
            throw ConfigError("ScriptedVlmClient: needs at least one response");
    }
    VlmResponse complete(const VlmRequest& request) override {
        std::lock_guard<std::mutex> lock(mu_);
        if (fail_budget_ > 0) {
            --fail_budget_;
            throw ExtractionError("scripted transport failure");
        }
        ++calls_;
        return {responses_[(calls_ - 1) % responses_.size()], model_, 0.0};
    }
    std::string model_id() const override { return model_; }
    int calls() const { return calls_; }
    // Fails the first n attempts with a transport error; exercises retries.
    void fail_next(int n) { fail_budget_ = n; }

  protected:
    std::mutex mu_;
    std::vector<std::string> responses_;
    std::string model_;
    int calls_ = 0;
    int fail_budget_ = 0;
};

// Offline stand-in that answers from the generated dataset: single-image
// prompts get the scene's relational sentences (as a numbered list, so the
// parser has markers to strip); paired-image prompts get a caption in the
// ground-truth style.
class PseudoVlmClient : public VlmClient {
  public:
    PseudoVlmClient(const std::vector<ScenePair>& dataset, int resolution,
                    std::string model = "pseudo-rte");
    VlmResponse complete(const VlmRequest& request) override;
    std::string model_id() const override { return model_; }
    int calls() const { return calls_; }

  private:
    std::map<std::uint64_t, std::string> single_;           // image digest
    std::map<std::pair<std::uint64_t, std::uint64_t>, std::string> paired_;
    std::string model_;
    std::mutex mu_;
    int calls_ = 0;
};

std::uint64_t digest_of_b64_image(const std::string& b64);

}  // namespace cortex
