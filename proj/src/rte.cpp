#include "cortex/rte.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "cortex/dataset_io.hpp"

namespace cortex {

namespace {

const std::string kCompositionalPrompt =
    "Analyze the image thoroughly. For each distinct object in the scene, "
    "generate at least one sentence that describes that object in detail and "
    "includes its relationship to at least one other object. Each sentence "
    "should mention the object's color, shape, size, and relevant spatial "
    "relationships (such as distance, proximity, or grouping).";

const std::string kGenericPrompt =
    "Analyze the image and list sentences that describe the scene.";

const std::string kDirectPairPrompt =
    "EXAMPLES:\n"
    "1. there are people on the stairs now\n"
    "2. there is a person walking now\n"
    "3. the person is not there anymore\n"
    "4. the person walking is no longer there\n"
    "5. person sitting at table far left moved slightly\n"
    "6. there is a group of people in between the two buildings\n"
    "7. the people in the previous picture are gone\n"
    "8. there is not a person near the red car\n"
    "9. there are 2 people in the last one that were not in the first one\n"
    "10. the white car is not there anymore\n"
    "11. the grey car in the back is not there anymore\n"
    "12. there white car by the truck is not there anymore\n"
    "13. there is a car in the middle now\n"
    "14. there is a black car behind the red car in the middle\n"
    "15. there is a black car in the middle row missing that was next to a "
    "silver car\n"
    "16. black car is parked in after image and still driving in before image\n"
    "17. there is less tables\n"
    "18. shadow on umbrella at bottom left has changed a little bit\n"
    "19. the before picture has a lady in front of the blue awning\n"
    "20. the after picture contains two people walking towards the left\n"
    "\n"
    "REQUIREMENTS:\n"
    "1. Generate the caption describing the difference between the two images "
    "in ONE SINGLE SENTENCE ONLY.\n"
    "2. DO NOT include any numbering, such as \"1.\", \"2.\", etc., or any "
    "bullet points.\n"
    "3. DO NOT generate multiple sentences or paragraphs. The output MUST be "
    "one concise sentence.\n"
    "4. If there are no changes, output must be \"there are no differences\" "
    "or \"no change\".\n"
    "5. Recheck the output to confirm that it is ONLY ONE SENTENCE and follows "
    "the style of the EXAMPLES above.";

const std::array<std::string, 3> kModeNames = {"compositional", "generic",
                                               "direct_pair"};
const std::array<std::string, 2> kSideNames = {"before", "after"};

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

// Removes one leading enumeration marker ("1.", "12)", "-", "*", bullet).
// Returns true if anything was stripped.
bool strip_one_marker(std::string& s) {
    static const std::array<std::string, 2> kBullets = {"\xe2\x80\xa2",   // •
                                                        "\xc2\xb7"};      // ·
    std::string t = trim(s);
    if (t.empty()) {
        bool changed = t != s;
        s = t;
        return changed;
    }
    for (const std::string& b : kBullets) {
        if (t.compare(0, b.size(), b) == 0) {
            s = trim(t.substr(b.size()));
            return true;
        }
    }
    if (t[0] == '-' || t[0] == '*') {
        s = trim(t.substr(1));
        return true;
    }
    std::size_t i = 0;
    while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
    if (i > 0 && i < t.size() && (t[i] == '.' || t[i] == ')')) {
        s = trim(t.substr(i + 1));
        return true;
    }
    bool changed = t != s;
    s = t;
    return changed;
}

int word_count(const std::string& s) {
    std::istringstream is(s);
    std::string w;
    int n = 0;
    while (is >> w) ++n;
    return n;
}

std::string failure_tag(const std::string& pair_id, SceneSide side) {
    return pair_id + "/" + to_string(side);
}

}  // namespace

const std::string& to_string(PromptMode m) {
    return kModeNames[static_cast<int>(m)];
}
const std::string& to_string(SceneSide s) {
    return kSideNames[static_cast<int>(s)];
}

PromptMode prompt_mode_from_string(const std::string& s) {
    for (std::size_t i = 0; i < kModeNames.size(); ++i)
        if (kModeNames[i] == s) return static_cast<PromptMode>(i);
    throw InputError("unknown prompt mode '" + s + "'");
}

SceneSide scene_side_from_string(const std::string& s) {
    for (std::size_t i = 0; i < kSideNames.size(); ++i)
        if (kSideNames[i] == s) return static_cast<SceneSide>(i);
    throw InputError("unknown scene side '" + s + "'");
}

RtePrompt build_prompt(PromptMode mode) {
    RtePrompt p;
    p.mode = mode;
    switch (mode) {
        case PromptMode::compositional:
            p.template_text = kCompositionalPrompt;
            break;
        case PromptMode::generic:
            p.template_text = kGenericPrompt;
            break;
        case PromptMode::direct_pair:
            p.template_text = kDirectPairPrompt;
            break;
    }
    p.prompt_hash = fnv1a64(p.template_text);
    return p;
}

std::vector<std::string> parse_sentences(const std::string& raw) {
    std::vector<std::string> out;
    std::istringstream is(raw);
    std::string line;
    while (std::getline(is, line)) {
        while (strip_one_marker(line)) {
        }
        if (line.empty()) continue;
        if (word_count(line) < 3) continue;
        out.push_back(line);
    }
    return out;
}

void validate_record(const RteRecord& record, int cap) {
    if (record.pair_id.empty()) throw InputError("rte record: empty pair_id");
    if (record.n_sentences != static_cast<int>(record.sentences.size()))
        throw InputError("rte record " + record.pair_id +
                         ": n_sentences does not match sentence list");
    if (record.n_sentences < 1)
        throw InputError("rte record " + record.pair_id + ": no sentences");
    if (record.n_sentences > cap)
        throw InputError("rte record " + record.pair_id + ": exceeds cap " +
                         std::to_string(cap));
    for (const std::string& s : record.sentences) {
        if (word_count(s) < 3)
            throw InputError("rte record " + record.pair_id +
                             ": sentence under 3 words: '" + s + "'");
        std::string copy = s;
        if (strip_one_marker(copy))
            throw InputError("rte record " + record.pair_id +
                             ": sentence keeps a list marker: '" + s + "'");
    }
}

RteCache::RteCache(std::string dir) : dir_(std::move(dir)) {
    if (dir_.empty()) throw ConfigError("RteCache: empty directory");
    std::filesystem::create_directories(dir_);
}

std::string RteCache::path_for(std::uint64_t image_digest,
                               std::uint64_t prompt_hash,
                               const std::string& model) const {
    std::uint64_t key = image_digest;
    key = fnv1a64(&prompt_hash, sizeof(prompt_hash), key);
    key = fnv1a64(model.data(), model.size(), key);
    return dir_ + "/rte-" + hex64(key) + ".json";
}

std::optional<std::string> RteCache::lookup(std::uint64_t image_digest,
                                            std::uint64_t prompt_hash,
                                            const std::string& model) const {
    std::lock_guard<std::mutex> lock(mu_);
    std::string path = path_for(image_digest, prompt_hash, model);
    std::ifstream f(path, std::ios::binary);
    if (!f) return std::nullopt;
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded() || !j.contains("raw")) return std::nullopt;
    return j.at("raw").get<std::string>();
}

void RteCache::store(std::uint64_t image_digest, std::uint64_t prompt_hash,
                     const std::string& model, const std::string& raw_text) {
    std::lock_guard<std::mutex> lock(mu_);
    std::string path = path_for(image_digest, prompt_hash, model);
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("RteCache: cannot write " + tmp);
        f << nlohmann::json{{"raw", raw_text}, {"model", model}}.dump() << "\n";
    }
    std::filesystem::rename(tmp, path);
}

RteRecord extract_scene(const Image& image, const std::string& pair_id,
                        SceneSide side, const RtePrompt& prompt,
                        VlmClient& client, const ExtractOptions& opts,
                        RteCache* cache) {
    const std::uint64_t digest = image.digest();
    const std::string model = client.model_id();
    std::string raw;
    bool have = false;
    if (cache) {
        if (auto hit = cache->lookup(digest, prompt.prompt_hash, model)) {
            raw = *hit;
            have = true;
        }
    }
    if (!have) {
        VlmRequest req;
        req.images_b64.push_back(base64_encode(encode_ppm(image)));
        req.prompt = prompt.template_text;
        try {
            raw = client.complete(req).text;
        } catch (const std::exception& e) {
            throw ExtractionError(failure_tag(pair_id, side) +
                                  ": transport: " + e.what());
        }
        if (cache) cache->store(digest, prompt.prompt_hash, model, raw);
    }
    std::vector<std::string> sentences = parse_sentences(raw);
    if (sentences.empty())
        throw ExtractionError(failure_tag(pair_id, side) +
                              ": degenerate output (no parsable sentences)");
    if (static_cast<int>(sentences.size()) > opts.cap)
        sentences.resize(static_cast<std::size_t>(opts.cap));
    RteRecord rec;
    rec.pair_id = pair_id;
    rec.scene = side;
    rec.sentences = std::move(sentences);
    rec.n_sentences = static_cast<int>(rec.sentences.size());
    rec.source_model = client.model_id();
    rec.prompt_hash = prompt.prompt_hash;
    validate_record(rec, opts.cap);
    return rec;
}

ExtractionSummary run_extraction(const std::vector<ScenePair>& dataset,
                                 VlmClient& client, PromptMode mode,
                                 const ExtractOptions& opts,
                                 const std::string& out_path) {
    if (dataset.empty()) throw InputError("run_extraction: empty dataset");
    if (mode == PromptMode::direct_pair)
        throw ConfigError("run_extraction: direct_pair is a paired-image mode");
    if (opts.parallelism < 1)
        throw ConfigError("run_extraction: parallelism must be >= 1");
    const RtePrompt prompt = build_prompt(mode);

    struct Job {
        const ScenePair* pair;
        SceneSide side;
    };
    std::vector<Job> jobs;
    jobs.reserve(dataset.size() * 2);
    for (const ScenePair& p : dataset) {
        jobs.push_back({&p, SceneSide::before});
        jobs.push_back({&p, SceneSide::after});
    }

    std::unique_ptr<RteCache> cache;
    if (!opts.cache_dir.empty()) cache = std::make_unique<RteCache>(opts.cache_dir);

    std::vector<std::optional<RteRecord>> results(jobs.size());
    std::vector<std::string> failures(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const Job& job = jobs[i];
            const SceneSpec& scene = job.side == SceneSide::before
                                         ? job.pair->before
                                         : job.pair->after;
            try {
                Image img = rasterize(scene, opts.resolution);
                results[i] = extract_scene(img, job.pair->pair_id, job.side,
                                           prompt, client, opts, cache.get());
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    std::size_t n_workers =
        std::min<std::size_t>(static_cast<std::size_t>(opts.parallelism), jobs.size());
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_workers; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();

    std::vector<RteRecord> records;
    ExtractionSummary summary;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (results[i]) {
            records.push_back(*results[i]);
            summary.mean_sentences += results[i]->n_sentences;
            summary.max_sentences =
                std::max(summary.max_sentences, results[i]->n_sentences);
        } else {
            summary.failures.push_back(failures[i]);
        }
    }
    summary.n_records = static_cast<int>(records.size());
    summary.n_failures = static_cast<int>(summary.failures.size());
    if (summary.n_records > 0) summary.mean_sentences /= summary.n_records;
    write_rte_jsonl(out_path, records);
    return summary;
}

DirectPairResult direct_pair_caption(const Image& before, const Image& after,
                                     VlmClient& client,
                                     const ExtractOptions& opts,
                                     RteCache* cache) {
    const RtePrompt prompt = build_prompt(PromptMode::direct_pair);
    std::array<std::uint64_t, 2> digests = {before.digest(), after.digest()};
    const std::uint64_t pair_digest = fnv1a64(digests.data(), sizeof(digests));
    const std::string model = client.model_id();
    std::string raw;
    bool have = false;
    if (cache) {
        if (auto hit = cache->lookup(pair_digest, prompt.prompt_hash, model)) {
            raw = *hit;
            have = true;
        }
    }
    if (!have) {
        VlmRequest req;
        req.images_b64.push_back(base64_encode(encode_ppm(before)));
        req.images_b64.push_back(base64_encode(encode_ppm(after)));
        req.prompt = prompt.template_text;
        raw = client.complete(req).text;
        if (cache) cache->store(pair_digest, prompt.prompt_hash, model, raw);
    }
    DirectPairResult out;
    out.caption = trim(raw);
    int nonempty_lines = 0;
    {
        std::istringstream is(out.caption);
        std::string line;
        while (std::getline(is, line))
            if (!trim(line).empty()) ++nonempty_lines;
    }
    bool internal_terminator = false;
    for (std::size_t i = 0; i + 1 < out.caption.size(); ++i) {
        char c = out.caption[i];
        if ((c == '.' || c == '!' || c == '?') &&
            std::isspace(static_cast<unsigned char>(out.caption[i + 1])))
            internal_terminator = true;
    }
    out.protocol_violation = nonempty_lines > 1 || internal_terminator;
    return out;
}

void to_json(nlohmann::json& j, const RteRecord& r) {
    j = nlohmann::json{{"pair_id", r.pair_id},
                       {"scene", to_string(r.scene)},
                       {"sentences", r.sentences},
                       {"n_sentences", r.n_sentences},
                       {"source_model", r.source_model},
                       {"prompt_hash", hex64(r.prompt_hash)}};
}

void from_json(const nlohmann::json& j, RteRecord& r) {
    r.pair_id = j.at("pair_id").get<std::string>();
    r.scene = scene_side_from_string(j.at("scene").get<std::string>());
    r.sentences = j.at("sentences").get<std::vector<std::string>>();
    r.n_sentences = j.at("n_sentences").get<int>();
    r.source_model = j.at("source_model").get<std::string>();
    r.prompt_hash =
        std::stoull(j.at("prompt_hash").get<std::string>(), nullptr, 16);
}

void write_rte_jsonl(const std::string& path,
                     const std::vector<RteRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_rte_jsonl: cannot open " + path);
    for (const RteRecord& r : records) f << nlohmann::json(r).dump() << '\n';
    if (!f) throw IoError("write_rte_jsonl: short write to " + path);
}

std::vector<RteRecord> read_rte_jsonl(const std::string& path, int cap) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_rte_jsonl: cannot open " + path);
    std::vector<RteRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            RteRecord r = nlohmann::json::parse(line).get<RteRecord>();
            validate_record(r, cap);
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("read_rte_jsonl: " + path + ":" +
                             std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace cortex
