#include "cortex/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace cortex {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for '" + key + "': " + v);
    }
    if (used != v.size())
        throw ConfigError("config: bad number for '" + key + "': " + v);
    return out;
}

long long parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long out;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for '" + key + "': " + v);
    }
    if (used != v.size())
        throw ConfigError("config: bad integer for '" + key + "': " + v);
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean for '" + key + "': " + v);
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty())
            throw ConfigError("config: empty entry in list for '" + key + "'");
        out.push_back(parse_double(key, item));
    }
    if (out.empty()) throw ConfigError("config: empty list for '" + key + "'");
    return out;
}

std::mt19937_64 seeded_stream(std::uint64_t seed, std::uint64_t salt) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(salt)));
}

nlohmann::json flags_json(const TrainConfig& cfg) {
    return {{"use_rte", cfg.use_rte},
            {"use_itda", cfg.use_itda},
            {"use_l_sa", cfg.use_l_sa},
            {"use_l_da", cfg.use_l_da}};
}

}  // namespace

// ---- configuration -----------------------------------------------------------

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value");

        if (key == "resolution")
            cfg.model.backbone.resolution = static_cast<int>(parse_int(key, val));
        else if (key == "patch_stride")
            cfg.model.backbone.patch_stride = static_cast<int>(parse_int(key, val));
        else if (key == "channels") {
            const int c = static_cast<int>(parse_int(key, val));
            cfg.model.backbone.channels = c;
            cfg.model.decoder.channels = c;
            cfg.model.encoder.c = c;
        } else if (key == "decoder_layers")
            cfg.model.decoder.layers = static_cast<int>(parse_int(key, val));
        else if (key == "decoder_heads")
            cfg.model.decoder.heads = static_cast<int>(parse_int(key, val));
        else if (key == "max_len")
            cfg.model.decoder.max_len = static_cast<int>(parse_int(key, val));
        else if (key == "dropout")
            cfg.model.decoder.dropout = parse_double(key, val);
        else if (key == "detector_heads")
            cfg.model.detector_heads = static_cast<int>(parse_int(key, val));
        else if (key == "encoder_seed")
            cfg.model.encoder.seed = static_cast<std::uint64_t>(parse_int(key, val));
        else if (key == "lambda")
            cfg.train.lambda = parse_double(key, val);
        else if (key == "lr")
            cfg.train.lr = parse_double(key, val);
        else if (key == "batch")
            cfg.train.batch = static_cast<int>(parse_int(key, val));
        else if (key == "max_iters")
            cfg.train.max_iters = static_cast<int>(parse_int(key, val));
        else if (key == "seed")
            cfg.train.seed = static_cast<std::uint64_t>(parse_int(key, val));
        else if (key == "use_rte")
            cfg.train.use_rte = parse_bool(key, val);
        else if (key == "use_itda")
            cfg.train.use_itda = parse_bool(key, val);
        else if (key == "use_l_sa")
            cfg.train.use_l_sa = parse_bool(key, val);
        else if (key == "use_l_da")
            cfg.train.use_l_da = parse_bool(key, val);
        else if (key == "lambda_sweep")
            cfg.train.lambda_sweep = parse_double_list(key, val);
        else if (key == "val_every")
            cfg.train.val_every = static_cast<int>(parse_int(key, val));
        else
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": unknown key '" + key + "'");
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(read_text_file(path));
}

std::string canonical_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "batch = " << cfg.train.batch << "\n";
    os << "channels = " << cfg.model.backbone.channels << "\n";
    os << "decoder_heads = " << cfg.model.decoder.heads << "\n";
    os << "decoder_layers = " << cfg.model.decoder.layers << "\n";
    os << "detector_heads = " << cfg.model.detector_heads << "\n";
    os << "dropout = " << fmt_double(cfg.model.decoder.dropout) << "\n";
    os << "encoder_seed = " << cfg.model.encoder.seed << "\n";
    os << "lambda = " << fmt_double(cfg.train.lambda) << "\n";
    os << "lambda_sweep = ";
    for (std::size_t i = 0; i < cfg.train.lambda_sweep.size(); ++i)
        os << (i ? "," : "") << fmt_double(cfg.train.lambda_sweep[i]);
    os << "\n";
    os << "lr = " << fmt_double(cfg.train.lr) << "\n";
    os << "max_iters = " << cfg.train.max_iters << "\n";
    os << "max_len = " << cfg.model.decoder.max_len << "\n";
    os << "patch_stride = " << cfg.model.backbone.patch_stride << "\n";
    os << "resolution = " << cfg.model.backbone.resolution << "\n";
    os << "seed = " << cfg.train.seed << "\n";
    os << "use_itda = " << (cfg.train.use_itda ? "true" : "false") << "\n";
    os << "use_l_da = " << (cfg.train.use_l_da ? "true" : "false") << "\n";
    os << "use_l_sa = " << (cfg.train.use_l_sa ? "true" : "false") << "\n";
    os << "use_rte = " << (cfg.train.use_rte ? "true" : "false") << "\n";
    os << "val_every = " << cfg.train.val_every << "\n";
    return os.str();
}

std::string config_digest(const RunConfig& cfg) {
    return hex64(fnv1a64(canonical_config(cfg)));
}

nlohmann::json model_to_json(const ModelConfig& model) {
    return {{"resolution", model.backbone.resolution},
            {"patch_stride", model.backbone.patch_stride},
            {"channels", model.backbone.channels},
            {"decoder_layers", model.decoder.layers},
            {"decoder_heads", model.decoder.heads},
            {"max_len", model.decoder.max_len},
            {"dropout", model.decoder.dropout},
            {"detector_heads", model.detector_heads},
            {"encoder_kind", to_string(model.encoder.kind)},
            {"encoder_seed", model.encoder.seed},
            {"adapter_endpoint", model.encoder.adapter_endpoint},
            {"adapter_model", model.encoder.adapter_model}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.backbone.resolution = j.at("resolution").get<int>();
    m.backbone.patch_stride = j.at("patch_stride").get<int>();
    m.backbone.channels = j.at("channels").get<int>();
    m.decoder.channels = m.backbone.channels;
    m.decoder.layers = j.at("decoder_layers").get<int>();
    m.decoder.heads = j.at("decoder_heads").get<int>();
    m.decoder.max_len = j.at("max_len").get<int>();
    m.decoder.dropout = j.at("dropout").get<double>();
    m.detector_heads = j.at("detector_heads").get<int>();
    m.encoder.kind = encoder_kind_from_string(j.at("encoder_kind").get<std::string>());
    m.encoder.c = m.backbone.channels;
    m.encoder.seed = j.at("encoder_seed").get<std::uint64_t>();
    m.encoder.adapter_endpoint = j.value("adapter_endpoint", "");
    m.encoder.adapter_model = j.value("adapter_model", "");
    m.validate();
    return m;
}

double total_loss(double l_cap, double l_sa, double l_da, const TrainConfig& cfg) {
    if (cfg.lambda < 0.0)
        throw ConfigError("total_loss: lambda must be non-negative");
    if (cfg.use_itda && !cfg.use_rte)
        throw ConfigError("total_loss: use_itda requires use_rte");
    if (cfg.lambda == 0.0 || !cfg.use_itda) return l_cap;
    double align = 0.0;
    if (cfg.use_l_sa) align += l_sa;
    if (cfg.use_l_da) align += l_da;
    if (align == 0.0) return l_cap;
    return l_cap + cfg.lambda * align;
}

// ---- dataset preparation -------------------------------------------------------

PreparedDataset prepare_dataset(const std::vector<ScenePair>& pairs,
                                const std::vector<RteRecord>* rte,
                                const ModelConfig& model,
                                const PrepareOptions& opts) {
    model.validate();
    if (pairs.empty()) throw InputError("prepare_dataset: empty pair list");

    std::map<std::pair<std::string, int>, const std::vector<std::string>*> by_key;
    if (rte)
        for (const RteRecord& r : *rte)
            by_key[{r.pair_id, static_cast<int>(r.scene)}] = &r.sentences;

    std::vector<Split> routed(pairs.size());
    std::vector<std::string> train_captions;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].gt_captions.empty())
            throw InputError("prepare_dataset: pair '" + pairs[i].pair_id +
                             "' has no caption");
        routed[i] = opts.single_split_train ? Split::train : split_of(pairs[i].pair_id);
        if (routed[i] == Split::train)
            train_captions.push_back(pairs[i].gt_captions.front());
    }
    if (train_captions.empty())
        throw InputError("prepare_dataset: no pairs landed in the train split");

    PreparedDataset out;
    out.vocab = Vocab::build(train_captions);

    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const ScenePair& p = pairs[i];
        TrainPair tp;
        tp.pair_id = p.pair_id;
        tp.before = rasterize(p.before, model.backbone.resolution);
        tp.after = rasterize(p.after, model.backbone.resolution);
        if (rte) {
            auto itb = by_key.find({p.pair_id, static_cast<int>(SceneSide::before)});
            auto ita = by_key.find({p.pair_id, static_cast<int>(SceneSide::after)});
            if (itb == by_key.end() || ita == by_key.end())
                throw InputError("prepare_dataset: no extracted sentences for pair '" +
                                 p.pair_id + "'");
            tp.sent_bef = *itb->second;
            tp.sent_aft = *ita->second;
        } else {
            tp.sent_bef = render_pseudo_rte(p.before);
            tp.sent_aft = render_pseudo_rte(p.after);
        }
        tp.sent_feat_bef =
            encode_sentences<double>(tp.sent_bef, model.encoder, SceneSide::before)
                .features;
        tp.sent_feat_aft =
            encode_sentences<double>(tp.sent_aft, model.encoder, SceneSide::after)
                .features;
        tp.gt_caption = p.gt_captions.front();
        tp.gt_references = p.gt_captions;
        tp.gt_ids = tokenize(tp.gt_caption, out.vocab);
        if (static_cast<int>(tp.gt_ids.size()) > model.decoder.max_len + 2)
            throw InputError("prepare_dataset: caption for pair '" + p.pair_id +
                             "' exceeds the decoder length budget");
        tp.is_semantic_change = p.change.kind != ChangeKind::no_change;
        switch (routed[i]) {
            case Split::train: out.train.push_back(std::move(tp)); break;
            case Split::val: out.val.push_back(std::move(tp)); break;
            case Split::test: out.test.push_back(std::move(tp)); break;
        }
    }
    return out;
}

// ---- training ------------------------------------------------------------------

namespace {

double validation_l_cap(ParamStore<float>& store, const PreparedDataset& data,
                        const ModelConfig& model, const TrainConfig& cfg) {
    const std::size_t n = std::min<std::size_t>(64, data.val.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ad::Graph<float> g;
        PairGraphOut<float> pg = build_pair_graph(g, store, data.val[i], model,
                                                  cfg.use_rte, cfg.use_itda);
        DecodeTrainOut<float> dec =
            decode_train(g, store, pg.memory, data.val[i].gt_ids, model.decoder);
        sum += static_cast<double>(dec.l_cap.scalar());
    }
    return sum / static_cast<double>(n);
}

}  // namespace

TrainRun train(const PreparedDataset& data, const ModelConfig& model,
               const TrainConfig& cfg, const std::string& out_dir) {
    model.validate();
    cfg.validate();
    if (data.train.empty()) throw InputError("train: empty training split");
    if (data.vocab.size() < 5)
        throw ConfigError("train: vocabulary holds nothing beyond the specials");

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainRun run;
    std::mt19937_64 init_rng = seeded_stream(cfg.seed, 1);
    std::mt19937_64 sample_rng = seeded_stream(cfg.seed, 2);
    std::mt19937_64 dropout_rng = seeded_stream(cfg.seed, 3);
    init_model_params(run.store, model, data.vocab.size(), init_rng);

    const int n_train = static_cast<int>(data.train.size());
    for (int t = 1; t <= cfg.max_iters; ++t) {
        std::vector<int> batch;
        if (cfg.batch >= n_train) {
            batch.resize(static_cast<std::size_t>(n_train));
            std::iota(batch.begin(), batch.end(), 0);
        } else {
            batch.reserve(static_cast<std::size_t>(cfg.batch));
            for (int i = 0; i < cfg.batch; ++i)
                batch.push_back(static_cast<int>(
                    uniform_index(sample_rng, static_cast<std::uint64_t>(n_train))));
        }

        ad::Graph<float> g;
        std::optional<ad::Tensor<float>> total;
        double cap_sum = 0.0, sa_sum = 0.0, da_sum = 0.0;
        for (int idx : batch) {
            PairLossOut<float> pl = pair_training_loss(
                g, run.store, data.train[static_cast<std::size_t>(idx)], model, cfg,
                &dropout_rng);
            cap_sum += static_cast<double>(pl.l_cap.scalar());
            if (pl.has_align) {
                sa_sum += static_cast<double>(pl.align.l_sa.scalar());
                da_sum += static_cast<double>(pl.align.l_da.scalar());
            }
            total = total ? ad::add(*total, pl.total) : pl.total;
        }
        const float inv_b = 1.0f / static_cast<float>(batch.size());
        ad::Tensor<float> batch_loss = ad::scale(*total, inv_b);
        const double l_total = static_cast<double>(batch_loss.scalar());
        const double l_cap = cap_sum / static_cast<double>(batch.size());
        const double l_sa = sa_sum / static_cast<double>(batch.size());
        const double l_da = da_sum / static_cast<double>(batch.size());

        if (!std::isfinite(l_total)) {
            nlohmann::json dump;
            dump["iter"] = t;
            nlohmann::json ids = nlohmann::json::array();
            for (int idx : batch)
                ids.push_back(data.train[static_cast<std::size_t>(idx)].pair_id);
            dump["pair_ids"] = ids;
            dump["l_cap"] = fmt_double(l_cap);
            dump["l_sa"] = fmt_double(l_sa);
            dump["l_da"] = fmt_double(l_da);
            dump["l_total"] = fmt_double(l_total);
            std::string where;
            if (!out_dir.empty()) {
                where = out_dir + "/nan_dump.json";
                write_text_file(where, dump.dump(2) + "\n");
            }
            throw TrainingError("training aborted: non-finite loss at iteration " +
                                std::to_string(t) + " (batch " + ids.dump() +
                                (where.empty() ? ")" : "), dump at " + where));
        }

        run.store.zero_grads();
        g.backward(batch_loss);
        clip_gradients(run.store, 5.0);
        adam_step(run.store, cfg.lr, t);

        run.log.push_back({{"iter", t},
                           {"l_cap", l_cap},
                           {"l_sa", l_sa},
                           {"l_da", l_da},
                           {"l_total", l_total}});
        run.final_l_cap = l_cap;
        run.final_l_total = l_total;

        if (cfg.val_every > 0 && !data.val.empty() &&
            (t % cfg.val_every == 0 || t == cfg.max_iters))
            run.log.push_back({{"iter", t},
                               {"split", "val"},
                               {"l_cap", validation_l_cap(run.store, data, model, cfg)}});
    }
    run.iterations = cfg.max_iters;

    if (!out_dir.empty()) {
        run.metrics_path = out_dir + "/metrics.jsonl";
        std::ofstream os(run.metrics_path, std::ios::trunc);
        if (!os) throw IoError("cannot write metrics log: " + run.metrics_path);
        for (const nlohmann::json& line : run.log) os << line.dump() << "\n";
        if (!os.flush()) throw IoError("short write on metrics log: " + run.metrics_path);

        data.vocab.save(out_dir + "/vocab.txt");

        nlohmann::json meta;
        meta["model"] = model_to_json(model);
        meta["flags"] = flags_json(cfg);
        meta["lambda"] = cfg.lambda;
        meta["lr"] = cfg.lr;
        meta["batch"] = cfg.batch;
        meta["max_iters"] = cfg.max_iters;
        meta["seed"] = cfg.seed;
        meta["config_digest"] = config_digest({model, cfg});
        meta["vocab"] = data.vocab.id_to_token;
        run.checkpoint_path = out_dir + "/checkpoint.bin";
        save_checkpoint(run.checkpoint_path, run.store, cfg.max_iters, meta, true);
    }
    return run;
}

// ---- evaluation ------------------------------------------------------------------

LoadedModel load_model(const std::string& checkpoint_path) {
    LoadedCheckpoint<float> lc = load_checkpoint<float>(checkpoint_path);
    if (!lc.meta.contains("model") || !lc.meta.contains("vocab"))
        throw InputError("checkpoint lacks the model description: " + checkpoint_path);
    LoadedModel lm;
    lm.store = std::move(lc.store);
    lm.meta = lc.meta;
    lm.iteration = lc.iteration;
    lm.model = model_from_json(lc.meta.at("model"));
    const nlohmann::json flags = lc.meta.value("flags", nlohmann::json::object());
    lm.use_rte = flags.value("use_rte", true);
    lm.use_itda = flags.value("use_itda", true);
    lm.vocab.id_to_token = lc.meta.at("vocab").get<std::vector<std::string>>();
    if (lm.vocab.size() < 4 || lm.vocab.id_to_token[0] != "<pad>" ||
        lm.vocab.id_to_token[1] != "<bos>" || lm.vocab.id_to_token[2] != "<eos>" ||
        lm.vocab.id_to_token[3] != "<unk>")
        throw InputError("checkpoint vocabulary lacks the special tokens: " +
                         checkpoint_path);
    for (int i = 0; i < lm.vocab.size(); ++i)
        lm.vocab.token_to_id[lm.vocab.id_to_token[static_cast<std::size_t>(i)]] = i;
    return lm;
}

EvalOutcome evaluate_split(LoadedModel& lm, const PreparedDataset& data, Split split,
                           DecodeStrategy strategy, int beam_width) {
    const std::vector<TrainPair>& pairs = data.split(split);
    if (pairs.empty())
        throw InputError("evaluate: split '" + to_string(split) + "' is empty");
    EvalOutcome out;
    out.records.reserve(pairs.size());
    for (const TrainPair& p : pairs) {
        auto [mem, segs] =
            pair_memory_matrix(lm.store, p, lm.model, lm.use_rte, lm.use_itda);
        GenResult gen = decode_generate(lm.store, mem, segs, lm.model.decoder,
                                        lm.vocab, strategy, beam_width);
        EvalRecord rec;
        rec.pair_id = p.pair_id;
        rec.hypothesis = tokenize_caption(gen.caption);
        for (const std::string& ref : p.gt_references)
            rec.references.push_back(tokenize_caption(ref));
        rec.is_semantic_change = p.is_semantic_change;
        out.records.push_back(std::move(rec));
        out.captions.push_back(gen.caption);
    }
    out.report = score_corpus(out.records);
    return out;
}

GenResult caption_pair(LoadedModel& lm, const Image& before, const Image& after,
                       const std::vector<std::string>& sent_bef,
                       const std::vector<std::string>& sent_aft,
                       DecodeStrategy strategy, int beam_width) {
    TrainPair tp;
    tp.pair_id = "adhoc";
    tp.before = before;
    tp.after = after;
    if (lm.use_rte) {
        if (sent_bef.empty() || sent_aft.empty())
            throw InputError("caption: this model consumes extracted sentences for "
                             "both scenes; provide them");
        tp.sent_bef = sent_bef;
        tp.sent_aft = sent_aft;
        tp.sent_feat_bef =
            encode_sentences<double>(sent_bef, lm.model.encoder, SceneSide::before)
                .features;
        tp.sent_feat_aft =
            encode_sentences<double>(sent_aft, lm.model.encoder, SceneSide::after)
                .features;
    }
    auto [mem, segs] =
        pair_memory_matrix(lm.store, tp, lm.model, lm.use_rte, lm.use_itda);
    return decode_generate(lm.store, mem, segs, lm.model.decoder, lm.vocab, strategy,
                           beam_width);
}

// ---- ablation and sweep ------------------------------------------------------------

namespace {

struct RowSpec {
    std::string label;  // table row name
    std::string dir;    // filesystem-safe run directory
    bool rte, itda, sa, da;
};

struct RowResult {
    MetricReport report;
    double final_l_cap = 0.0;
    std::string checkpoint_path;
};

// Trains one flag combination and scores it on the test split, entirely in
// memory; artifacts go under out_dir/<dir> when out_dir is set.
RowResult run_row(const PreparedDataset& data, const ModelConfig& model,
                  const TrainConfig& base, const RowSpec& spec,
                  const std::string& out_dir) {
    TrainConfig cfg = base;
    cfg.use_rte = spec.rte;
    cfg.use_itda = spec.itda;
    cfg.use_l_sa = spec.sa;
    cfg.use_l_da = spec.da;
    cfg.validate();
    const std::string dir = out_dir.empty() ? "" : out_dir + "/" + spec.dir;
    TrainRun run = train(data, model, cfg, dir);

    LoadedModel lm;
    lm.store = std::move(run.store);
    lm.model = model;
    lm.use_rte = cfg.use_rte;
    lm.use_itda = cfg.use_itda;
    lm.vocab = data.vocab;
    EvalOutcome eo = evaluate_split(lm, data, Split::test);

    if (!dir.empty()) {
        nlohmann::json rep;
        rep["label"] = spec.label;
        rep["flags"] = flags_json(cfg);
        rep["final_l_cap"] = run.final_l_cap;
        rep["metrics"] = report_json(eo.report);
        write_text_file(dir + "/report.json", rep.dump(2) + "\n");
    }
    return {eo.report, run.final_l_cap, run.checkpoint_path};
}

// Work-queue execution of independent rows; the first exception wins and is
// rethrown on the caller thread after every worker drains.
template <typename Job>
void run_jobs(const std::vector<Job>& jobs, int parallelism) {
    int workers = parallelism > 0
                      ? parallelism
                      : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
    if (workers == 1) {
        for (const Job& j : jobs) j();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            {
                std::lock_guard<std::mutex> lock(err_mu);
                if (first_error) return;
            }
            try {
                jobs[i]();
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

AblationRow make_row(const RowSpec& spec, const RowResult& res) {
    AblationRow row;
    row.label = spec.label;
    row.use_rte = spec.rte;
    row.use_itda = spec.itda;
    row.use_l_sa = spec.sa;
    row.use_l_da = spec.da;
    row.report = res.report;
    row.final_l_cap = res.final_l_cap;
    return row;
}

}  // namespace

AblationOutcome ablate(const PreparedDataset& data, const ModelConfig& model,
                       const TrainConfig& base, const std::string& out_dir,
                       int parallelism) {
    base.validate();
    // The full configuration appears in both grids; train it once.
    const std::vector<RowSpec> uniq = {
        {"baseline", "baseline", false, false, base.use_l_sa, base.use_l_da},
        {"+rte", "rte", true, false, base.use_l_sa, base.use_l_da},
        {"+rte+itda", "full", true, true, true, true},
        {"sa off, da off", "loss-none", true, true, false, false},
        {"sa on, da off", "loss-sa", true, true, true, false},
        {"sa off, da on", "loss-da", true, true, false, true},
    };
    std::vector<RowResult> results(uniq.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < uniq.size(); ++i)
        jobs.push_back([&, i]() {
            results[i] = run_row(data, model, base, uniq[i], out_dir);
        });
    run_jobs(jobs, parallelism);

    AblationOutcome out;
    out.module_grid = {make_row(uniq[0], results[0]), make_row(uniq[1], results[1]),
                       make_row(uniq[2], results[2])};
    RowSpec full_as_loss = uniq[2];
    full_as_loss.label = "sa on, da on";
    out.loss_grid = {make_row(uniq[3], results[3]), make_row(uniq[4], results[4]),
                     make_row(uniq[5], results[5]),
                     make_row(full_as_loss, results[2])};
    if (!out_dir.empty())
        write_text_file(out_dir + "/ablation.json", ablation_json(out).dump(2) + "\n");
    return out;
}

namespace {

void format_grid(std::ostream& os, const char* title,
                 const std::vector<AblationRow>& rows) {
    os << title << "\n";
    os << std::left << std::setw(18) << "configuration" << std::setw(5) << "rte"
       << std::setw(6) << "itda" << std::setw(5) << "sa" << std::setw(5) << "da"
       << std::right << std::setw(9) << "BLEU-4" << std::setw(9) << "ROUGE-L"
       << std::setw(9) << "CIDEr" << "\n";
    for (const AblationRow& r : rows) {
        os << std::left << std::setw(18) << r.label << std::setw(5)
           << (r.use_rte ? "on" : "off") << std::setw(6) << (r.use_itda ? "on" : "off")
           << std::setw(5) << (r.use_l_sa ? "on" : "off") << std::setw(5)
           << (r.use_l_da ? "on" : "off") << std::right << std::fixed
           << std::setprecision(4) << std::setw(9) << r.report.total.bleu4
           << std::setw(9) << r.report.total.rouge_l << std::setw(9)
           << r.report.total.cider << "\n";
        os.unsetf(std::ios::fixed);
    }
}

nlohmann::json row_json(const AblationRow& r) {
    return {{"label", r.label},
            {"use_rte", r.use_rte},
            {"use_itda", r.use_itda},
            {"use_l_sa", r.use_l_sa},
            {"use_l_da", r.use_l_da},
            {"final_l_cap", r.final_l_cap},
            {"metrics", report_json(r.report)}};
}

}  // namespace

std::string format_ablation(const AblationOutcome& out) {
    std::ostringstream os;
    format_grid(os, "module ablation (test split)", out.module_grid);
    os << "\n";
    format_grid(os, "alignment loss ablation (test split)", out.loss_grid);
    return os.str();
}

nlohmann::json ablation_json(const AblationOutcome& out) {
    nlohmann::json j;
    j["module_grid"] = nlohmann::json::array();
    for (const AblationRow& r : out.module_grid) j["module_grid"].push_back(row_json(r));
    j["loss_grid"] = nlohmann::json::array();
    for (const AblationRow& r : out.loss_grid) j["loss_grid"].push_back(row_json(r));
    return j;
}

std::vector<SweepRow> lambda_sweep(const PreparedDataset& data,
                                   const ModelConfig& model,
                                   const TrainConfig& base,
                                   const std::string& out_dir, int parallelism) {
    base.validate();
    if (base.lambda_sweep.empty())
        throw ConfigError("lambda_sweep: empty sweep list");

    std::vector<RowSpec> specs;
    for (double l : base.lambda_sweep) {
        RowSpec s;
        s.label = "lambda=" + fmt_short(l);
        s.dir = "lambda-" + fmt_short(l);
        s.rte = true;
        s.itda = true;
        s.sa = true;
        s.da = true;
        specs.push_back(std::move(s));
    }
    std::vector<RowResult> results(specs.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < specs.size(); ++i)
        jobs.push_back([&, i]() {
            TrainConfig cfg = base;
            cfg.lambda = base.lambda_sweep[i];
            results[i] = run_row(data, model, cfg, specs[i], out_dir);
        });
    run_jobs(jobs, parallelism);

    std::vector<SweepRow> out;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        SweepRow row;
        row.lambda = base.lambda_sweep[i];
        row.label = specs[i].label;
        row.checkpoint_path = results[i].checkpoint_path;
        row.report = results[i].report;
        row.final_l_cap = results[i].final_l_cap;
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace cortex
