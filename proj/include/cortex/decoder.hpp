#pragma once

// Caption decoder: a small pre-norm transformer that attends over the fused
// memory rows (change-detector tokens, alignment vectors, sentence features,
// each tagged with a segment id) and is trained with teacher forcing.
// Generation is greedy by default with an optional length-normalized beam.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "cortex/attention.hpp"
#include "cortex/metrics.hpp"
#include "cortex/params.hpp"

namespace cortex {

struct Vocab {
    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int eos = 2;
    static constexpr int unk = 3;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    int size() const { return static_cast<int>(id_to_token.size()); }

    int id_of(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? unk : it->second;
    }

    static Vocab build(const std::vector<std::string>& captions) {
        Vocab v;
        v.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
        std::vector<std::string> words;
        for (const std::string& cap : captions)
            for (const std::string& tok : tokenize_caption(cap)) words.push_back(tok);
        std::sort(words.begin(), words.end());
        words.erase(std::unique(words.begin(), words.end()), words.end());
        for (const std::string& w : words) v.id_to_token.push_back(w);
        for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw IoError("cannot write vocab: " + path);
        for (const std::string& t : id_to_token) os << t << "\n";
        if (!os.flush()) throw IoError("short write on vocab: " + path);
    }

    static Vocab load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot read vocab: " + path);
        Vocab v;
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) v.id_to_token.push_back(line);
        if (v.size() < 4 || v.id_to_token[0] != "<pad>" || v.id_to_token[1] != "<bos>" ||
            v.id_to_token[2] != "<eos>" || v.id_to_token[3] != "<unk>")
            throw InputError("vocab file lacks the four special tokens: " + path);
        for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
        return v;
    }
};

// <bos> + lowercase whitespace tokens (<unk> for out-of-vocab) + <eos>.
inline std::vector<int> tokenize(const std::string& caption, const Vocab& v) {
    std::vector<int> ids{Vocab::bos};
    for (const std::string& tok : tokenize_caption(caption)) ids.push_back(v.id_of(tok));
    ids.push_back(Vocab::eos);
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocab& v) {
    std::string out;
    for (int id : ids) {
        if (id == Vocab::pad || id == Vocab::bos || id == Vocab::eos) continue;
        if (id < 0 || id >= v.size()) throw InputError("detokenize: id out of range");
        if (!out.empty()) out += ' ';
        out += v.id_to_token[static_cast<std::size_t>(id)];
    }
    return out;
}

struct DecoderConfig {
    int layers = 2;
    int heads = 8;
    int channels = 64;
    int max_len = 20;  // generated tokens, excluding <bos>/<eos>
    double dropout = 0.1;

    void validate() const {
        if (layers < 1 || heads < 1 || channels < 1 || max_len < 1)
            throw ConfigError("decoder: layers, heads, channels, max_len must be positive");
        if (channels % heads != 0)
            throw ConfigError("decoder: channels must be divisible by heads");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("decoder: dropout must lie in [0, 1)");
    }
};

// Memory row provenance for the learned segment embedding.
enum class MemorySegment { icd = 0, itda = 1, rte = 2 };

template <typename S>
struct MemoryBundle {
    ad::Tensor<S> tokens;       // R x c
    std::vector<int> segments;  // R entries, values in {0, 1, 2}
};

namespace detail {
inline void check_segments(Eigen::Index rows, const std::vector<int>& segments) {
    if (static_cast<Eigen::Index>(segments.size()) != rows)
        throw ShapeError("memory: one segment id per row required");
    for (int s : segments)
        if (s < 0 || s > 2) throw ShapeError("memory: segment ids must be 0, 1, or 2");
}
}  // namespace detail

template <typename S>
void init_decoder_params(ParamStore<S>& store, const DecoderConfig& cfg,
                         int vocab_size, std::mt19937_64& rng) {
    cfg.validate();
    if (vocab_size < 5) throw ConfigError("decoder: vocabulary is degenerate");
    if (store.has("decoder.tok_emb")) return;
    const int c = cfg.channels;
    fill_normal(store.declare("decoder.tok_emb", vocab_size, c), rng, 0.02);
    fill_normal(store.declare("decoder.pos_emb", cfg.max_len + 2, c), rng, 0.02);
    fill_normal(store.declare("decoder.seg_emb", 3, c), rng, 0.02);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "decoder.l" + std::to_string(l) + ".";
        for (const char* blk : {"sa", "ca"}) {
            for (const char* w : {"wq", "wk", "wv", "wo"})
                fill_normal(store.declare(p + blk + "_" + w, c, c), rng, 0.02);
            for (const char* b : {"bq", "bk", "bv", "bo"})
                store.declare(p + blk + "_" + b, 1, c);
        }
        for (const char* ln : {"ln1", "ln2", "ln3"}) {
            store.declare(p + ln + "_g", 1, c).setOnes();
            store.declare(p + ln + "_b", 1, c);
        }
        fill_normal(store.declare(p + "ff1_w", c, 4 * c), rng, 0.02);
        store.declare(p + "ff1_b", 1, 4 * c);
        fill_normal(store.declare(p + "ff2_w", 4 * c, c), rng, 0.02);
        store.declare(p + "ff2_b", 1, c);
    }
    store.declare("decoder.lnf_g", 1, c).setOnes();
    store.declare("decoder.lnf_b", 1, c);
    fill_normal(store.declare("decoder.out_w", c, vocab_size), rng, 0.02);
    store.declare("decoder.out_b", 1, vocab_size);
}

namespace detail {
template <typename S>
MhaParams<S> mha_params(ad::Graph<S>& g, ParamStore<S>& store, const std::string& prefix) {
    return {bind_param(g, store, prefix + "_wq"), bind_param(g, store, prefix + "_wk"),
            bind_param(g, store, prefix + "_wv"), bind_param(g, store, prefix + "_wo"),
            bind_param(g, store, prefix + "_bq"), bind_param(g, store, prefix + "_bk"),
            bind_param(g, store, prefix + "_bv"), bind_param(g, store, prefix + "_bo")};
}

template <typename S>
ad::Tensor<S> maybe_dropout(ad::Tensor<S> x, double p, std::mt19937_64* rng) {
    if (!rng || p <= 0.0) return x;
    return ad::dropout(x, static_cast<S>(p), *rng);
}
}  // namespace detail

// Logits (T x |vocab|) for the next token after each of the T input ids.
// dropout_rng enables training-mode dropout; pass nullptr for evaluation.
template <typename S>
ad::Tensor<S> decoder_logits(ad::Graph<S>& g, ParamStore<S>& store,
                             const MemoryBundle<S>& memory,
                             const std::vector<int>& input_ids,
                             const DecoderConfig& cfg,
                             std::mt19937_64* dropout_rng = nullptr) {
    cfg.validate();
    detail::check_segments(memory.tokens.rows(), memory.segments);
    if (memory.tokens.cols() != cfg.channels)
        throw ShapeError("decoder: memory channel count differs from the configured width");
    const int T = static_cast<int>(input_ids.size());
    if (T < 1) throw InputError("decoder: empty input sequence");
    if (T > cfg.max_len + 2) throw InputError("decoder: sequence exceeds the maximum length");

    ad::Tensor<S> seg = ad::gather_rows(bind_param(g, store, "decoder.seg_emb"),
                                        memory.segments);
    ad::Tensor<S> mem = ad::add(memory.tokens, seg);

    std::vector<int> pos_idx(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) pos_idx[static_cast<std::size_t>(t)] = t;
    ad::Tensor<S> x = ad::add(
        ad::gather_rows(bind_param(g, store, "decoder.tok_emb"), input_ids),
        ad::gather_rows(bind_param(g, store, "decoder.pos_emb"), pos_idx));

    ad::Mat<S> causal = ad::Mat<S>::Zero(T, T);
    for (int i = 0; i < T; ++i)
        for (int j = i + 1; j < T; ++j) causal(i, j) = S(-1e30);

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "decoder.l" + std::to_string(l) + ".";
        ad::Tensor<S> n1 = ad::layer_norm(x, bind_param(g, store, p + "ln1_g"),
                                          bind_param(g, store, p + "ln1_b"));
        ad::Tensor<S> sa = multi_head_attention(
            detail::mha_params(g, store, p + "sa"), n1, n1, n1, cfg.heads, &causal);
        x = ad::add(x, detail::maybe_dropout(sa, cfg.dropout, dropout_rng));

        ad::Tensor<S> n2 = ad::layer_norm(x, bind_param(g, store, p + "ln2_g"),
                                          bind_param(g, store, p + "ln2_b"));
        ad::Tensor<S> ca = multi_head_attention(
            detail::mha_params(g, store, p + "ca"), n2, mem, mem, cfg.heads);
        x = ad::add(x, detail::maybe_dropout(ca, cfg.dropout, dropout_rng));

        ad::Tensor<S> n3 = ad::layer_norm(x, bind_param(g, store, p + "ln3_g"),
                                          bind_param(g, store, p + "ln3_b"));
        ad::Tensor<S> ff = ad::add_rowvec(
            ad::matmul(ad::relu(ad::add_rowvec(
                           ad::matmul(n3, bind_param(g, store, p + "ff1_w")),
                           bind_param(g, store, p + "ff1_b"))),
                       bind_param(g, store, p + "ff2_w")),
            bind_param(g, store, p + "ff2_b"));
        x = ad::add(x, detail::maybe_dropout(ff, cfg.dropout, dropout_rng));
    }
    x = ad::layer_norm(x, bind_param(g, store, "decoder.lnf_g"),
                       bind_param(g, store, "decoder.lnf_b"));
    return ad::add_rowvec(ad::matmul(x, bind_param(g, store, "decoder.out_w")),
                          bind_param(g, store, "decoder.out_b"));
}

template <typename S>
struct DecodeTrainOut {
    ad::Tensor<S> logits;  // (len(gt_ids) - 1) x |vocab|
    ad::Tensor<S> l_cap;   // 1 x 1
};

// Teacher forcing: inputs are gt_ids[0..n-1), targets gt_ids[1..n). The loss
// is the mean cross-entropy over non-pad targets.
template <typename S>
DecodeTrainOut<S> decode_train(ad::Graph<S>& g, ParamStore<S>& store,
                               const MemoryBundle<S>& memory,
                               const std::vector<int>& gt_ids,
                               const DecoderConfig& cfg,
                               std::mt19937_64* dropout_rng = nullptr) {
    if (gt_ids.size() < 2)
        throw InputError("decode_train: need at least <bos> and one target");
    if (static_cast<int>(gt_ids.size()) > cfg.max_len + 2)
        throw InputError("decode_train: ground-truth sequence exceeds the maximum length");
    std::vector<int> inputs(gt_ids.begin(), gt_ids.end() - 1);
    std::vector<int> targets(gt_ids.begin() + 1, gt_ids.end());
    std::vector<S> weights(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i)
        weights[i] = targets[i] == Vocab::pad ? S(0) : S(1);

    ad::Tensor<S> logits = decoder_logits(g, store, memory, inputs, cfg, dropout_rng);
    ad::Tensor<S> l_cap = ad::cross_entropy_rows(logits, targets, weights);
    return {logits, l_cap};
}

enum class DecodeStrategy { greedy, beam };

struct GenResult {
    std::string caption;
    std::vector<int> ids;  // generated ids including the closing <eos>
    double score = 0.0;    // length-normalized log-probability
};

namespace detail {
inline std::vector<double> log_softmax_row(const Eigen::RowVectorXd& z) {
    const double m = z.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) sum += std::exp(z(i) - m);
    const double lse = m + std::log(sum);
    std::vector<double> out(static_cast<std::size_t>(z.size()));
    for (Eigen::Index i = 0; i < z.size(); ++i)
        out[static_cast<std::size_t>(i)] = z(i) - lse;
    return out;
}
}  // namespace detail

// Deterministic generation from a plain memory matrix. Greedy picks the
// argmax each step (lowest id on exact ties); beam keeps beam_width
// hypotheses ranked by mean per-token log-probability, breaking ties toward
// the lexicographically smaller id sequence.
template <typename S>
GenResult decode_generate(ParamStore<S>& store, const ad::Mat<S>& memory,
                          const std::vector<int>& segments, const DecoderConfig& cfg,
                          const Vocab& vocab, DecodeStrategy strategy,
                          int beam_width = 3) {
    cfg.validate();
    if (strategy == DecodeStrategy::beam && beam_width < 1)
        throw ConfigError("decode_generate: beam width must be positive");
    if (strategy == DecodeStrategy::greedy) beam_width = 1;

    struct Beam {
        std::vector<int> ids{Vocab::bos};
        double sum_logp = 0.0;
        bool done = false;
        int gen_len() const { return static_cast<int>(ids.size()) - 1; }
        double score() const { return sum_logp / std::max(1, gen_len()); }
    };
    auto better = [](const Beam& a, const Beam& b) {
        if (a.score() != b.score()) return a.score() > b.score();
        return a.ids < b.ids;
    };

    std::vector<Beam> live{Beam{}};
    std::vector<Beam> finished;
    for (int step = 0; step < cfg.max_len + 1 && !live.empty(); ++step) {
        std::vector<Beam> candidates;
        for (const Beam& b : live) {
            ad::Graph<S> g;
            MemoryBundle<S> bundle{g.input(memory), segments};
            ad::Tensor<S> logits = decoder_logits(g, store, bundle, b.ids, cfg);
            Eigen::RowVectorXd last =
                logits.value().row(logits.rows() - 1).template cast<double>();
            std::vector<double> logp = detail::log_softmax_row(last);
            for (int tok = 0; tok < static_cast<int>(logp.size()); ++tok) {
                if (tok == Vocab::pad || tok == Vocab::bos) continue;
                Beam nb = b;
                nb.ids.push_back(tok);
                nb.sum_logp += logp[static_cast<std::size_t>(tok)];
                nb.done = tok == Vocab::eos;
                candidates.push_back(std::move(nb));
            }
        }
        std::sort(candidates.begin(), candidates.end(), better);
        if (static_cast<int>(candidates.size()) > beam_width)
            candidates.resize(static_cast<std::size_t>(beam_width));
        live.clear();
        for (Beam& c : candidates) {
            if (c.done)
                finished.push_back(std::move(c));
            else
                live.push_back(std::move(c));
        }
    }
    // Hypotheses that never emitted <eos> within the budget still compete.
    for (Beam& b : live) finished.push_back(std::move(b));
    std::sort(finished.begin(), finished.end(), better);
    const Beam& best = finished.front();

    GenResult out;
    out.ids.assign(best.ids.begin() + 1, best.ids.end());
    out.caption = detokenize(out.ids, vocab);
    out.score = best.score();
    return out;
}

}  // namespace cortex
