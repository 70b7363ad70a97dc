#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cortex/toy_scene.hpp"
#include "cortex/vlm_client.hpp"

namespace cortex {

enum class PromptMode { compositional, generic, direct_pair };
enum class SceneSide { before, after };

const std::string& to_string(PromptMode m);
const std::string& to_string(SceneSide s);
PromptMode prompt_mode_from_string(const std::string& s);
SceneSide scene_side_from_string(const std::string& s);

struct RtePrompt {
    PromptMode mode = PromptMode::compositional;
    std::string template_text;
    std::uint64_t prompt_hash = 0;
};

// The fixed prompt text per mode; hash is a content digest of the template.
RtePrompt build_prompt(PromptMode mode);

struct RteRecord {
    std::string pair_id;
    SceneSide scene = SceneSide::before;
    std::vector<std::string> sentences;
    int n_sentences = 0;
    std::string source_model;
    std::uint64_t prompt_hash = 0;
};

// Enforces 1 <= n_sentences <= cap, count consistency, >= 3 words per
// sentence, and absence of leading list markers.
void validate_record(const RteRecord& record, int cap);

// Newline-split, marker-stripped, length-filtered, order-preserving,
// idempotent normalization of raw VLM output.
std::vector<std::string> parse_sentences(const std::string& raw);

// Filesystem cache keyed by (image digest, prompt hash, model id). Writes
// are atomic (tmp + rename) and serialized, so parallel workers can share it.
class RteCache {
  public:
    explicit RteCache(std::string dir);
    std::optional<std::string> lookup(std::uint64_t image_digest,
                                      std::uint64_t prompt_hash,
                                      const std::string& model) const;
    void store(std::uint64_t image_digest, std::uint64_t prompt_hash,
               const std::string& model, const std::string& raw_text);

  private:
    std::string path_for(std::uint64_t image_digest, std::uint64_t prompt_hash,
                         const std::string& model) const;
    std::string dir_;
    mutable std::mutex mu_;
};

struct ExtractOptions {
    int cap = 15;             // sentences kept per record
    int parallelism = 4;      // bounded in-flight requests
    int resolution = 40;      // rasterization size fed to the VLM
    std::string cache_dir;    // empty disables caching
};

// Queries the VLM for one image (through the cache when configured) and
// parses the result. Throws ExtractionError tagged with pair_id on transport
// failure or degenerate (empty) parses.
RteRecord extract_scene(const Image& image, const std::string& pair_id,
                        SceneSide side, const RtePrompt& prompt,
                        VlmClient& client, const ExtractOptions& opts,
                        RteCache* cache);

struct ExtractionSummary {
    int n_records = 0;
    int n_failures = 0;
    double mean_sentences = 0.0;
    int max_sentences = 0;
    std::vector<std::string> failures;  // "pair_id/side: reason"
};

// One record per (pair, side); failures are collected, not fatal, and the
// caller decides the exit status. Appends records to out_path as JSONL.
ExtractionSummary run_extraction(const std::vector<ScenePair>& dataset,
                                 VlmClient& client, PromptMode mode,
                                 const ExtractOptions& opts,
                                 const std::string& out_path);

struct DirectPairResult {
    std::string caption;
    bool protocol_violation = false;  // multi-sentence output
};

// Feeds both images at once and returns the trimmed single-sentence caption.
DirectPairResult direct_pair_caption(const Image& before, const Image& after,
                                     VlmClient& client,
                                     const ExtractOptions& opts,
                                     RteCache* cache);

void to_json(nlohmann::json& j, const RteRecord& r);
void from_json(const nlohmann::json& j, RteRecord& r);
void write_rte_jsonl(const std::string& path, const std::vector<RteRecord>& records);
std::vector<RteRecord> read_rte_jsonl(const std::string& path, int cap);

}  // namespace cortex
