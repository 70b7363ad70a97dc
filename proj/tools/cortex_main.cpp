// cortex: one binary wiring the whole pipeline — dataset generation, VLM
// sentence extraction, training (single run or lambda sweep), ablation,
// evaluation, and single-pair captioning.

#include <cstdio>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cortex/pipeline.hpp"

#include <CLI11.hpp>

using namespace cortex;

namespace {

namespace fs = std::filesystem;

// Content digests of the named artifacts (paths relative to out_dir), plus
// whatever the command wants recorded, in out_dir/manifest.json.
void write_manifest(const std::string& out_dir, const std::string& command,
                    const std::vector<std::string>& artifacts,
                    const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json m;
    m["command"] = command;
    for (const auto& [k, v] : extra.items()) m[k] = v;
    nlohmann::json files = nlohmann::json::object();
    for (const std::string& rel : artifacts)
        files[rel] = hex64(fnv1a64(read_text_file(out_dir + "/" + rel)));
    m["artifacts"] = files;
    write_text_file(out_dir + "/manifest.json", m.dump(2) + "\n");
}

std::unique_ptr<VlmClient> make_client(const std::string& endpoint,
                                       const std::string& data_path,
                                       int resolution) {
    if (endpoint.rfind("pseudo://", 0) == 0) {
        if (data_path.empty())
            throw InputError("the pseudo:// endpoint answers from a dataset; pass --data");
        return std::make_unique<PseudoVlmClient>(read_pairs_jsonl(data_path),
                                                 resolution);
    }
    HttpVlmClient::Options o;
    o.base_url = endpoint;
    return std::make_unique<HttpVlmClient>(o);
}

std::vector<std::string> read_sentence_file(const std::string& path) {
    std::vector<std::string> out = parse_sentences(read_text_file(path));
    if (out.empty()) throw InputError("no usable sentences in " + path);
    return out;
}

// Flags shared by train / ablate; every option records whether it was given
// so the override chain stays flags > config file > defaults.
struct RunFlags {
    std::string data, rte, out, config;
    int channels = 0, resolution = 0, patch_stride = 0;
    int decoder_layers = 0, decoder_heads = 0, max_len = 0, detector_heads = 0;
    double dropout = 0.0;
    std::uint64_t encoder_seed = 0;
    double lambda = 0.0, lr = 0.0;
    int batch = 0, max_iters = 0, val_every = 0;
    std::uint64_t seed = 0;
    bool use_rte = true, use_itda = true, use_l_sa = true, use_l_da = true;
    std::vector<double> sweep_values;
    int parallelism = 0;
    std::map<std::string, CLI::Option*> given;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--data", f.data, "scene pair JSONL")->required();
    cmd->add_option("--out", f.out, "artifact directory")->required();
    f.given["rte"] = cmd->add_option(
        "--rte", f.rte, "extracted sentence JSONL; omit to derive deterministic "
                        "sentences from the scene specs");
    f.given["config"] = cmd->add_option("--config", f.config,
                                        "flat key = value config file");
    f.given["channels"] = cmd->add_option("--channels", f.channels,
                                          "shared width of every feature row");
    f.given["resolution"] = cmd->add_option("--resolution", f.resolution,
                                            "raster size in pixels");
    f.given["patch_stride"] =
        cmd->add_option("--patch-stride", f.patch_stride, "patch embed stride");
    f.given["decoder_layers"] =
        cmd->add_option("--decoder-layers", f.decoder_layers, "decoder depth");
    f.given["decoder_heads"] =
        cmd->add_option("--decoder-heads", f.decoder_heads, "decoder heads");
    f.given["max_len"] = cmd->add_option("--max-len", f.max_len,
                                         "generated caption token budget");
    f.given["dropout"] = cmd->add_option("--dropout", f.dropout, "decoder dropout");
    f.given["detector_heads"] = cmd->add_option("--detector-heads", f.detector_heads,
                                                "change detector heads");
    f.given["encoder_seed"] = cmd->add_option("--encoder-seed", f.encoder_seed,
                                              "sentence encoder hash seed");
    f.given["lambda"] = cmd->add_option("--lambda", f.lambda,
                                        "alignment loss weight");
    f.given["lr"] = cmd->add_option("--lr", f.lr, "Adam learning rate");
    f.given["batch"] = cmd->add_option("--batch", f.batch, "pairs per iteration");
    f.given["max_iters"] = cmd->add_option("--max-iters", f.max_iters,
                                           "optimization steps");
    f.given["seed"] = cmd->add_option("--seed", f.seed, "training RNG seed");
    f.given["val_every"] = cmd->add_option("--val-every", f.val_every,
                                           "validation cadence (0 disables)");
    f.given["use_rte"] = cmd->add_option("--use-rte", f.use_rte,
                                         "route sentence features (true/false)");
    f.given["use_itda"] = cmd->add_option("--use-itda", f.use_itda,
                                          "route alignment features (true/false)");
    f.given["use_l_sa"] = cmd->add_option("--use-l-sa", f.use_l_sa,
                                          "apply the static alignment loss");
    f.given["use_l_da"] = cmd->add_option("--use-l-da", f.use_l_da,
                                          "apply the dynamic alignment loss");
    f.given["lambda_sweep"] = cmd->add_option("--lambda-sweep", f.sweep_values,
                                              "sweep values (comma separated)")
                                  ->delimiter(',');
    cmd->add_option("--parallelism", f.parallelism,
                    "concurrent training runs (0 = hardware)");
}

RunConfig resolve_config(const RunFlags& f) {
    RunConfig rc;
    if (f.given.at("config")->count()) rc = load_run_config(f.config);
    auto on = [&](const char* k) { return f.given.at(k)->count() > 0; };
    if (on("channels")) {
        rc.model.backbone.channels = f.channels;
        rc.model.decoder.channels = f.channels;
        rc.model.encoder.c = f.channels;
    }
    if (on("resolution")) rc.model.backbone.resolution = f.resolution;
    if (on("patch_stride")) rc.model.backbone.patch_stride = f.patch_stride;
    if (on("decoder_layers")) rc.model.decoder.layers = f.decoder_layers;
    if (on("decoder_heads")) rc.model.decoder.heads = f.decoder_heads;
    if (on("max_len")) rc.model.decoder.max_len = f.max_len;
    if (on("dropout")) rc.model.decoder.dropout = f.dropout;
    if (on("detector_heads")) rc.model.detector_heads = f.detector_heads;
    if (on("encoder_seed")) rc.model.encoder.seed = f.encoder_seed;
    if (on("lambda")) rc.train.lambda = f.lambda;
    if (on("lr")) rc.train.lr = f.lr;
    if (on("batch")) rc.train.batch = f.batch;
    if (on("max_iters")) rc.train.max_iters = f.max_iters;
    if (on("seed")) rc.train.seed = f.seed;
    if (on("val_every")) rc.train.val_every = f.val_every;
    if (on("use_rte")) rc.train.use_rte = f.use_rte;
    if (on("use_itda")) rc.train.use_itda = f.use_itda;
    if (on("use_l_sa")) rc.train.use_l_sa = f.use_l_sa;
    if (on("use_l_da")) rc.train.use_l_da = f.use_l_da;
    if (on("lambda_sweep")) rc.train.lambda_sweep = f.sweep_values;
    rc.model.validate();
    rc.train.validate();
    return rc;
}

PreparedDataset load_prepared(const RunFlags& f, const ModelConfig& model,
                              int rte_cap = 16) {
    std::vector<ScenePair> pairs = read_pairs_jsonl(f.data);
    if (f.given.at("rte")->count()) {
        std::vector<RteRecord> records = read_rte_jsonl(f.rte, rte_cap);
        return prepare_dataset(pairs, &records, model);
    }
    return prepare_dataset(pairs, nullptr, model);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"compositional change captioning at desk scale"};
    app.require_subcommand(1);
    int rc = 0;

    // ---- dataset-gen -----------------------------------------------------
    auto* gen = app.add_subcommand("dataset-gen",
                                   "generate a scene pair dataset with images");
    struct {
        int n = 0;
        std::uint64_t seed = 0;
        std::string out;
        int grid = 5, min_objects = 2, max_objects = 6, resolution = 40;
        bool no_images = false;
    } g;
    gen->add_option("--n", g.n, "number of pairs")->required();
    gen->add_option("--seed", g.seed, "generator seed");
    gen->add_option("--out", g.out, "output directory")->required();
    gen->add_option("--grid-size", g.grid, "cells per side");
    gen->add_option("--min-objects", g.min_objects, "objects per scene, lower bound");
    gen->add_option("--max-objects", g.max_objects, "objects per scene, upper bound");
    gen->add_option("--resolution", g.resolution, "rendered image size in pixels");
    gen->add_flag("--no-images", g.no_images, "write only the JSONL spec");
    gen->callback([&]() {
        GenConfig gc;
        gc.n_pairs = g.n;
        gc.seed = g.seed;
        gc.grid_size = g.grid;
        gc.min_objects = g.min_objects;
        gc.max_objects = g.max_objects;
        std::vector<ScenePair> pairs = generate_dataset(gc);
        fs::create_directories(g.out);
        write_pairs_jsonl(g.out + "/pairs.jsonl", pairs);
        std::vector<std::string> artifacts{"pairs.jsonl"};
        if (!g.no_images) {
            fs::create_directories(g.out + "/images");
            for (const ScenePair& p : pairs) {
                const std::string bef = "images/" + p.pair_id + "_before.ppm";
                const std::string aft = "images/" + p.pair_id + "_after.ppm";
                write_ppm(g.out + "/" + bef, rasterize(p.before, g.resolution));
                write_ppm(g.out + "/" + aft, rasterize(p.after, g.resolution));
                artifacts.push_back(bef);
                artifacts.push_back(aft);
            }
        }
        write_manifest(g.out, "dataset-gen", artifacts,
                       {{"n_pairs", g.n}, {"seed", g.seed}, {"grid_size", g.grid},
                        {"resolution", g.resolution}});
        std::printf("wrote %zu pairs to %s\n", pairs.size(), g.out.c_str());
    });

    // ---- extract-rte -----------------------------------------------------
    auto* ext = app.add_subcommand("extract-rte",
                                   "extract reasoning sentences per scene via a VLM");
    struct {
        std::string data, endpoint, out, mode = "compositional", cache;
        int cap = 15, parallelism = 4, resolution = 40;
    } x;
    ext->add_option("--data", x.data, "scene pair JSONL")->required();
    ext->add_option("--endpoint", x.endpoint,
                    "VLM base URL, or pseudo:// for the offline stand-in")
        ->required();
    ext->add_option("--out", x.out, "output directory")->required();
    ext->add_option("--mode", x.mode, "compositional | generic");
    ext->add_option("--cap", x.cap, "max sentences kept per record");
    ext->add_option("--parallelism", x.parallelism, "concurrent requests");
    ext->add_option("--resolution", x.resolution, "raster size sent to the VLM");
    ext->add_option("--cache", x.cache,
                    "response cache directory (default <out>/cache)");
    ext->callback([&]() {
        fs::create_directories(x.out);
        ExtractOptions opts;
        opts.cap = x.cap;
        opts.parallelism = x.parallelism;
        opts.resolution = x.resolution;
        opts.cache_dir = x.cache.empty() ? x.out + "/cache" : x.cache;
        std::unique_ptr<VlmClient> client =
            make_client(x.endpoint, x.data, x.resolution);
        std::vector<ScenePair> pairs = read_pairs_jsonl(x.data);
        ExtractionSummary sum = run_extraction(
            pairs, *client, prompt_mode_from_string(x.mode), opts,
            x.out + "/rte.jsonl");
        write_manifest(x.out, "extract-rte", {"rte.jsonl"},
                       {{"mode", x.mode},
                        {"cap", x.cap},
                        {"n_records", sum.n_records},
                        {"n_failures", sum.n_failures}});
        std::printf("%d records, %d failures, %.2f sentences/record (max %d)\n",
                    sum.n_records, sum.n_failures, sum.mean_sentences,
                    sum.max_sentences);
        for (const std::string& fail : sum.failures)
            std::fprintf(stderr, "failed: %s\n", fail.c_str());
        if (sum.n_failures > 0) rc = 1;
    });

    // ---- train -----------------------------------------------------------
    auto* tr = app.add_subcommand("train", "optimize a model (or a lambda sweep)");
    RunFlags tf;
    add_run_flags(tr, tf);
    bool do_sweep = false;
    tr->add_flag("--sweep", do_sweep,
                 "train one run per lambda_sweep value instead of a single run");
    tr->callback([&]() {
        RunConfig cfg = resolve_config(tf);
        PreparedDataset data = load_prepared(tf, cfg.model);
        fs::create_directories(tf.out);
        write_text_file(tf.out + "/config.txt", canonical_config(cfg));
        if (do_sweep) {
            std::vector<SweepRow> rows = lambda_sweep(data, cfg.model, cfg.train,
                                                      tf.out, tf.parallelism);
            std::vector<std::string> artifacts{"config.txt"};
            std::printf("%-14s %10s %10s %10s\n", "run", "BLEU-4", "CIDEr",
                        "final l_cap");
            for (const SweepRow& r : rows) {
                std::printf("%-14s %10.4f %10.4f %10.4f\n", r.label.c_str(),
                            r.report.total.bleu4, r.report.total.cider,
                            r.final_l_cap);
                artifacts.push_back("lambda-" +
                                    r.label.substr(r.label.find('=') + 1) +
                                    "/report.json");
            }
            write_manifest(tf.out, "train --sweep", artifacts,
                           {{"config_digest", config_digest(cfg)},
                            {"seed", cfg.train.seed}});
        } else {
            TrainRun run = train(data, cfg.model, cfg.train, tf.out);
            write_manifest(tf.out, "train",
                           {"config.txt", "checkpoint.bin", "metrics.jsonl",
                            "vocab.txt"},
                           {{"config_digest", config_digest(cfg)},
                            {"seed", cfg.train.seed},
                            {"iterations", run.iterations},
                            {"final_l_cap", run.final_l_cap},
                            {"final_l_total", run.final_l_total}});
            std::printf("trained %d iterations: l_cap=%.4f l_total=%.4f\n%s\n",
                        run.iterations, run.final_l_cap, run.final_l_total,
                        run.checkpoint_path.c_str());
        }
    });

    // ---- ablate ----------------------------------------------------------
    auto* ab = app.add_subcommand("ablate",
                                  "module and loss-flag grids on one dataset");
    RunFlags af;
    add_run_flags(ab, af);
    ab->callback([&]() {
        RunConfig cfg = resolve_config(af);
        PreparedDataset data = load_prepared(af, cfg.model);
        fs::create_directories(af.out);
        AblationOutcome out = ablate(data, cfg.model, cfg.train, af.out,
                                     af.parallelism);
        std::fputs(format_ablation(out).c_str(), stdout);
        write_manifest(af.out, "ablate", {"ablation.json"},
                       {{"config_digest", config_digest(cfg)},
                        {"seed", cfg.train.seed}});
    });

    // ---- eval ------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "score a checkpoint on one split");
    struct {
        std::string checkpoint, data, rte, split = "test", strategy = "greedy", out;
        int beam_width = 3;
    } e;
    ev->add_option("--checkpoint", e.checkpoint, "trained model")->required();
    ev->add_option("--data", e.data, "scene pair JSONL")->required();
    CLI::Option* ev_rte = ev->add_option("--rte", e.rte, "extracted sentence JSONL");
    ev->add_option("--split", e.split, "train | val | test");
    ev->add_option("--strategy", e.strategy, "greedy | beam");
    ev->add_option("--beam-width", e.beam_width, "beam size");
    ev->add_option("--out", e.out, "write report.json and captions.jsonl here");
    ev->callback([&]() {
        LoadedModel lm = load_model(e.checkpoint);
        std::vector<ScenePair> pairs = read_pairs_jsonl(e.data);
        PreparedDataset data;
        if (ev_rte->count()) {
            std::vector<RteRecord> records = read_rte_jsonl(e.rte, 16);
            data = prepare_dataset(pairs, &records, lm.model);
        } else {
            data = prepare_dataset(pairs, nullptr, lm.model);
        }
        const DecodeStrategy strat = e.strategy == "beam" ? DecodeStrategy::beam
                                                          : DecodeStrategy::greedy;
        if (e.strategy != "beam" && e.strategy != "greedy")
            throw InputError("unknown strategy: " + e.strategy);
        EvalOutcome out =
            evaluate_split(lm, data, split_from_string(e.split), strat, e.beam_width);
        std::fputs(format_report(out.report).c_str(), stdout);
        if (!e.out.empty()) {
            fs::create_directories(e.out);
            write_text_file(e.out + "/report.json",
                            report_json(out.report).dump(2) + "\n");
            std::ostringstream caps;
            for (std::size_t i = 0; i < out.records.size(); ++i) {
                nlohmann::json line{{"pair_id", out.records[i].pair_id},
                                    {"caption", out.captions[i]}};
                caps << line.dump() << "\n";
            }
            write_text_file(e.out + "/captions.jsonl", caps.str());
            write_manifest(e.out, "eval", {"report.json", "captions.jsonl"},
                           {{"split", e.split}, {"strategy", e.strategy}});
        }
    });

    // ---- caption ---------------------------------------------------------
    auto* cap = app.add_subcommand("caption", "describe the change in one pair");
    struct {
        std::string checkpoint, before, after, sent_before, sent_after, endpoint;
        std::string mode = "compositional", strategy = "greedy";
        int beam_width = 3, cap = 15;
    } c;
    cap->add_option("--checkpoint", c.checkpoint, "trained model")->required();
    cap->add_option("--before", c.before, "before image (ppm, model resolution)")
        ->required();
    cap->add_option("--after", c.after, "after image (ppm, model resolution)")
        ->required();
    cap->add_option("--sent-before", c.sent_before,
                    "text file with extracted sentences for the before scene");
    cap->add_option("--sent-after", c.sent_after,
                    "text file with extracted sentences for the after scene");
    cap->add_option("--endpoint", c.endpoint,
                    "VLM base URL to extract sentences on the fly");
    cap->add_option("--mode", c.mode, "prompt mode for --endpoint extraction");
    cap->add_option("--cap", c.cap, "max sentences per scene");
    cap->add_option("--strategy", c.strategy, "greedy | beam");
    cap->add_option("--beam-width", c.beam_width, "beam size");
    cap->callback([&]() {
        LoadedModel lm = load_model(c.checkpoint);
        Image before = read_ppm(c.before);
        Image after = read_ppm(c.after);
        std::vector<std::string> sb, sa;
        if (lm.use_rte) {
            if (!c.sent_before.empty() && !c.sent_after.empty()) {
                sb = read_sentence_file(c.sent_before);
                sa = read_sentence_file(c.sent_after);
            } else if (!c.endpoint.empty()) {
                ExtractOptions opts;
                opts.cap = c.cap;
                opts.resolution = lm.model.backbone.resolution;
                std::unique_ptr<VlmClient> client = make_client(c.endpoint, "", 0);
                RtePrompt prompt = build_prompt(prompt_mode_from_string(c.mode));
                sb = extract_scene(before, "cli", SceneSide::before, prompt,
                                   *client, opts, nullptr)
                         .sentences;
                sa = extract_scene(after, "cli", SceneSide::after, prompt, *client,
                                   opts, nullptr)
                         .sentences;
            } else {
                throw InputError(
                    "this model consumes extracted sentences; pass --sent-before "
                    "and --sent-after, or --endpoint");
            }
        }
        const DecodeStrategy strat = c.strategy == "beam" ? DecodeStrategy::beam
                                                          : DecodeStrategy::greedy;
        GenResult gen = caption_pair(lm, before, after, sb, sa, strat, c.beam_width);
        std::printf("%s\n", gen.caption.c_str());
    });

    // ---- direct-vlm ------------------------------------------------------
    auto* dv = app.add_subcommand(
        "direct-vlm", "ask the VLM itself to describe the change (no model)");
    struct {
        std::string before, after, endpoint, data;
        int resolution = 40;
    } d;
    dv->add_option("--before", d.before, "before image (ppm)")->required();
    dv->add_option("--after", d.after, "after image (ppm)")->required();
    dv->add_option("--endpoint", d.endpoint,
                   "VLM base URL, or pseudo:// with --data")
        ->required();
    dv->add_option("--data", d.data, "dataset for the pseudo:// endpoint");
    dv->add_option("--resolution", d.resolution,
                   "raster size for the pseudo:// endpoint");
    dv->callback([&]() {
        std::unique_ptr<VlmClient> client =
            make_client(d.endpoint, d.data, d.resolution);
        ExtractOptions opts;
        opts.resolution = d.resolution;
        DirectPairResult res =
            direct_pair_caption(read_ppm(d.before), read_ppm(d.after), *client,
                                opts, nullptr);
        if (res.protocol_violation)
            std::fprintf(stderr,
                         "note: response ran past one sentence; kept the first\n");
        std::printf("%s\n", res.caption.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        if (err.get_exit_code() == 0) return app.exit(err);  // --help
        app.exit(err);
        return 2;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 1;
    }
    return rc;
}
