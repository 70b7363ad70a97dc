#pragma once

// End-to-end wiring: dataset preparation, the per-pair forward graph, the
// Adam training loop, checkpoint-backed evaluation, and the ablation / lambda
// sweep surfaces the CLI exposes.
//
// Graph assembly is templated on the scalar so the exact training forward can
// be gradient-checked in double while production runs in float. The training
// loop itself is float-only and lives in pipeline.cpp.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cortex/backbone.hpp"
#include "cortex/dataset_io.hpp"
#include "cortex/decoder.hpp"
#include "cortex/itda.hpp"
#include "cortex/metrics.hpp"
#include "cortex/params.hpp"
#include "cortex/rte.hpp"
#include "cortex/text_encoding.hpp"
#include "cortex/toy_scene.hpp"

namespace cortex {

// ---- configuration ----------------------------------------------------------

struct ModelConfig {
    BackboneConfig backbone;
    DecoderConfig decoder;
    EncoderSpec encoder;
    int detector_heads = 8;

    void validate() const {
        backbone.grid_side();
        decoder.validate();
        if (decoder.channels != backbone.channels ||
            encoder.c != backbone.channels)
            throw ConfigError("model: visual, text, and decoder channel counts must agree");
        if (detector_heads < 1 || backbone.channels % detector_heads != 0)
            throw ConfigError("model: detector head count must divide the channel count");
    }
};

struct TrainConfig {
    double lambda = 1e-4;
    double lr = 1e-4;
    int batch = 8;
    int max_iters = 1000;
    std::uint64_t seed = 0;
    bool use_rte = true;
    bool use_itda = true;
    bool use_l_sa = true;
    bool use_l_da = true;
    std::vector<double> lambda_sweep = {1e-1, 1e-2, 1e-3, 1e-4};
    int val_every = 100;  // 0 disables periodic validation

    void validate() const {
        if (lambda < 0.0) throw ConfigError("train: lambda must be non-negative");
        if (lr <= 0.0) throw ConfigError("train: learning rate must be positive");
        if (batch < 1) throw ConfigError("train: batch size must be positive");
        if (max_iters < 1) throw ConfigError("train: max_iters must be positive");
        if (val_every < 0) throw ConfigError("train: val_every must be non-negative");
        if (use_itda && !use_rte)
            throw ConfigError("train: the alignment module needs the extracted sentences (use_itda requires use_rte)");
        for (double l : lambda_sweep)
            if (l < 0.0) throw ConfigError("train: sweep lambdas must be non-negative");
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// Flat `key = value` text, '#' comments, unknown keys rejected. The canonical
// form is a fixed key order so its digest identifies a configuration.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string canonical_config(const RunConfig& cfg);
std::string config_digest(const RunConfig& cfg);

nlohmann::json model_to_json(const ModelConfig& model);
ModelConfig model_from_json(const nlohmann::json& j);

// Scalar form of the training objective, honoring the ablation flags: a
// disabled loss term contributes exactly zero, and lambda 0 returns l_cap
// untouched.
double total_loss(double l_cap, double l_sa, double l_da, const TrainConfig& cfg);

// ---- dataset preparation ----------------------------------------------------

// One pair, fully materialized for the training loop: rasterized images,
// sentence features from the frozen encoder, and the tokenized caption.
struct TrainPair {
    std::string pair_id;
    Image before, after;
    std::vector<std::string> sent_bef, sent_aft;
    Eigen::MatrixXd sent_feat_bef, sent_feat_aft;  // N x c, empty without sentences
    std::string gt_caption;                        // training target
    std::vector<std::string> gt_references;        // all references, for scoring
    std::vector<int> gt_ids;                       // <bos> ... <eos>
    bool is_semantic_change = false;
};

struct PreparedDataset {
    std::vector<TrainPair> train, val, test;
    Vocab vocab;  // built from training captions only

    const std::vector<TrainPair>& split(Split s) const {
        switch (s) {
            case Split::train: return train;
            case Split::val: return val;
            case Split::test: return test;
        }
        throw ContractError("split: bad enum value");
    }
};

struct PrepareOptions {
    // Folds every pair into the train split (and the vocab); used by the
    // overfit harness and single-pair tooling.
    bool single_split_train = false;
};

// rte == nullptr falls back to the deterministic relational sentences derived
// from the scene specs; a provided record set must cover every (pair, side).
PreparedDataset prepare_dataset(const std::vector<ScenePair>& pairs,
                                const std::vector<RteRecord>* rte,
                                const ModelConfig& model,
                                const PrepareOptions& opts = {});

// ---- per-pair graph assembly --------------------------------------------------

template <typename S>
void init_model_params(ParamStore<S>& store, const ModelConfig& model,
                       int vocab_size, std::mt19937_64& rng) {
    model.validate();
    init_backbone_params(store, model.backbone, rng);
    init_detector_params(store, model.backbone.channels, rng);
    init_decoder_params(store, model.decoder, vocab_size, rng);
}

template <typename S>
struct PairGraphOut {
    MemoryBundle<S> memory;
    bool has_align = false;
    AlignmentLosses<S> align;  // valid only when has_align
};

// Backbone on both images, change detection, and (per flags) sentence
// features with dual alignment, assembled into the decoder memory. Memory
// rows are [change | alignment | sentences] with matching segment ids.
template <typename S>
PairGraphOut<S> build_pair_graph(ad::Graph<S>& g, ParamStore<S>& store,
                                 const TrainPair& pair, const ModelConfig& model,
                                 bool use_rte, bool use_itda) {
    if (use_itda && !use_rte)
        throw ConfigError("pipeline: alignment requires sentence features");
    VisualFeatureGrid<S> f_bef =
        extract_features(g, store, pair.before, model.backbone, SceneSide::before);
    VisualFeatureGrid<S> f_aft =
        extract_features(g, store, pair.after, model.backbone, SceneSide::after);
    ChangeFeature<S> icd = detect_change(g, store, f_bef, f_aft, model.detector_heads);

    std::vector<ad::Tensor<S>> rows{icd.tokens};
    std::vector<int> segments(static_cast<std::size_t>(icd.tokens.rows()),
                              static_cast<int>(MemorySegment::icd));
    PairGraphOut<S> out;
    if (use_rte) {
        if (pair.sent_feat_bef.rows() < 1 || pair.sent_feat_aft.rows() < 1)
            throw ContractError("pipeline: pair '" + pair.pair_id +
                                "' has no extracted sentences for the text path");
        TextFeatures<S> t_bef{g.input(pair.sent_feat_bef.template cast<S>()),
                              SceneSide::before};
        TextFeatures<S> t_aft{g.input(pair.sent_feat_aft.template cast<S>()),
                              SceneSide::after};
        if (use_itda) {
            auto [aligned, losses] = itda_forward(f_bef, f_aft, t_bef, t_aft);
            rows.push_back(aligned.f_itda);
            segments.insert(segments.end(), 4, static_cast<int>(MemorySegment::itda));
            out.align = losses;
            out.has_align = true;
        }
        rows.push_back(t_bef.rows);
        rows.push_back(t_aft.rows);
        segments.insert(segments.end(),
                        static_cast<std::size_t>(t_bef.rows.rows() + t_aft.rows.rows()),
                        static_cast<int>(MemorySegment::rte));
    }
    out.memory.tokens = rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
    out.memory.segments = std::move(segments);
    return out;
}

template <typename S>
struct PairLossOut {
    ad::Tensor<S> total, l_cap;
    bool has_align = false;
    AlignmentLosses<S> align;
};

// The full training objective for one pair as tape nodes. Disabled loss
// terms are omitted from the graph, so they contribute exactly zero and
// lambda 0 leaves l_cap untouched.
template <typename S>
PairLossOut<S> pair_training_loss(ad::Graph<S>& g, ParamStore<S>& store,
                                  const TrainPair& pair, const ModelConfig& model,
                                  const TrainConfig& cfg,
                                  std::mt19937_64* dropout_rng = nullptr) {
    PairGraphOut<S> pg =
        build_pair_graph(g, store, pair, model, cfg.use_rte, cfg.use_itda);
    DecodeTrainOut<S> dec =
        decode_train(g, store, pg.memory, pair.gt_ids, model.decoder, dropout_rng);
    PairLossOut<S> out;
    out.l_cap = dec.l_cap;
    out.total = dec.l_cap;
    out.has_align = pg.has_align;
    if (pg.has_align) out.align = pg.align;
    if (pg.has_align && cfg.lambda > 0.0 && (cfg.use_l_sa || cfg.use_l_da)) {
        std::optional<ad::Tensor<S>> a;
        if (cfg.use_l_sa) a = pg.align.l_sa;
        if (cfg.use_l_da) a = a ? ad::add(*a, pg.align.l_da) : pg.align.l_da;
        out.total = ad::add(out.total, ad::scale(*a, static_cast<S>(cfg.lambda)));
    }
    return out;
}

// Memory matrix + segment ids for generation, materialized off a throwaway
// graph.
template <typename S>
std::pair<ad::Mat<S>, std::vector<int>> pair_memory_matrix(
    ParamStore<S>& store, const TrainPair& pair, const ModelConfig& model,
    bool use_rte, bool use_itda) {
    ad::Graph<S> g;
    PairGraphOut<S> pg = build_pair_graph(g, store, pair, model, use_rte, use_itda);
    ad::Mat<S> mem = pg.memory.tokens.value();
    return {std::move(mem), std::move(pg.memory.segments)};
}

// ---- optimizer ---------------------------------------------------------------

template <typename S>
double global_grad_norm(const ParamStore<S>& store) {
    double sq = 0.0;
    for (const std::string& name : store.names()) {
        const ParamEntry<S>& e = store.at(name);
        if (e.grad.size() == 0) continue;
        sq += e.grad.template cast<double>().squaredNorm();
    }
    return std::sqrt(sq);
}

// Returns the pre-clip norm; gradients are rescaled in place only when the
// norm exceeds max_norm.
template <typename S>
double clip_gradients(ParamStore<S>& store, double max_norm) {
    const double norm = global_grad_norm(store);
    if (norm > max_norm && norm > 0.0) {
        const S k = static_cast<S>(max_norm / norm);
        for (const std::string& name : store.names()) {
            ParamEntry<S>& e = store.at(name);
            if (e.grad.size() != 0) e.grad *= k;
        }
    }
    return norm;
}

// One Adam update with bias correction; t counts steps from 1. Parameters
// whose gradient was never touched this step are left alone.
template <typename S>
void adam_step(ParamStore<S>& store, double lr, std::int64_t t,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (t < 1) throw ContractError("adam_step: step count starts at 1");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (const std::string& name : store.names()) {
        ParamEntry<S>& e = store.at(name);
        if (e.grad.size() == 0) continue;
        if (e.m.size() == 0) e.m = ad::Mat<S>::Zero(e.value.rows(), e.value.cols());
        if (e.v.size() == 0) e.v = ad::Mat<S>::Zero(e.value.rows(), e.value.cols());
        e.m = static_cast<S>(beta1) * e.m + static_cast<S>(1.0 - beta1) * e.grad;
        e.v = static_cast<S>(beta2) * e.v +
              static_cast<S>(1.0 - beta2) * e.grad.cwiseProduct(e.grad);
        for (Eigen::Index r = 0; r < e.value.rows(); ++r)
            for (Eigen::Index c = 0; c < e.value.cols(); ++c) {
                const double mhat = static_cast<double>(e.m(r, c)) / bc1;
                const double vhat = static_cast<double>(e.v(r, c)) / bc2;
                e.value(r, c) -=
                    static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps));
            }
    }
}

// ---- training ----------------------------------------------------------------

struct TrainRun {
    ParamStore<float> store;
    std::vector<nlohmann::json> log;  // one object per iteration (+ val entries)
    int iterations = 0;
    double final_l_cap = 0.0;
    double final_l_total = 0.0;
    std::string checkpoint_path;  // empty when out_dir was empty
    std::string metrics_path;
};

// Full optimization loop. out_dir receives checkpoint.bin, vocab.txt and
// metrics.jsonl; pass "" to keep everything in memory. A non-finite loss
// aborts with TrainingError after writing nan_dump.json (when out_dir is
// set) describing the offending batch.
TrainRun train(const PreparedDataset& data, const ModelConfig& model,
               const TrainConfig& cfg, const std::string& out_dir);

// ---- evaluation --------------------------------------------------------------

struct LoadedModel {
    ParamStore<float> store;
    ModelConfig model;
    bool use_rte = true;
    bool use_itda = true;
    Vocab vocab;
    std::int64_t iteration = 0;
    nlohmann::json meta;
};

LoadedModel load_model(const std::string& checkpoint_path);

struct EvalOutcome {
    MetricReport report;
    std::vector<EvalRecord> records;
    std::vector<std::string> captions;  // generated, aligned with records
};

// Greedy (or beam) generation over a split followed by corpus scoring. The
// dataset must have been prepared under the same encoder spec the model was
// trained with. An empty split is an input error.
EvalOutcome evaluate_split(LoadedModel& lm, const PreparedDataset& data,
                           Split split,
                           DecodeStrategy strategy = DecodeStrategy::greedy,
                           int beam_width = 3);

// Single-pair captioning for the CLI.
GenResult caption_pair(LoadedModel& lm, const Image& before, const Image& after,
                       const std::vector<std::string>& sent_bef,
                       const std::vector<std::string>& sent_aft,
                       DecodeStrategy strategy = DecodeStrategy::greedy,
                       int beam_width = 3);

// ---- ablation and sweep surfaces ----------------------------------------------

struct AblationRow {
    std::string label;
    bool use_rte = false, use_itda = false, use_l_sa = false, use_l_da = false;
    MetricReport report;
    double final_l_cap = 0.0;
};

struct AblationOutcome {
    std::vector<AblationRow> module_grid;  // baseline, +rte, +rte+itda
    std::vector<AblationRow> loss_grid;    // 4 static/dynamic loss combinations
};

// Trains one run per unique configuration (the full row is shared between
// the two grids) and scores each on the test split. parallelism bounds the
// number of concurrently training rows.
AblationOutcome ablate(const PreparedDataset& data, const ModelConfig& model,
                       const TrainConfig& base, const std::string& out_dir,
                       int parallelism = 0);

std::string format_ablation(const AblationOutcome& out);
nlohmann::json ablation_json(const AblationOutcome& out);

struct SweepRow {
    double lambda = 0.0;
    std::string label;
    std::string checkpoint_path;
    MetricReport report;
    double final_l_cap = 0.0;
};

// One training run per sweep value, each tagged with its lambda; reports are
// written under out_dir/<label>/report.json when out_dir is set.
std::vector<SweepRow> lambda_sweep(const PreparedDataset& data,
                                   const ModelConfig& model,
                                   const TrainConfig& base,
                                   const std::string& out_dir,
                                   int parallelism = 0);

}  // namespace cortex
