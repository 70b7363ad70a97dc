#pragma once

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include "cortex/common.hpp"
#include "cortex/metrics.hpp"
#include "cortex/rte.hpp"

namespace cortex {

enum class EncoderKind { toy_hash, pretrained_adapter };

const std::string& to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(const std::string& s);

struct EncoderSpec {
    EncoderKind kind = EncoderKind::toy_hash;
    int c = 64;                     // channel count, matches the visual side
    std::uint64_t seed = 0;         // toy_hash only
    std::string adapter_endpoint;   // pretrained_adapter only
    std::string adapter_model;
    int adapter_timeout_sec = 30;
};

template <typename S>
struct SentenceFeatureSet {
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> features;  // N x c
    std::vector<std::string> sentences;
    SceneSide scene = SceneSide::before;
};

// One deterministic pseudo-random unit-variance vector per distinct token.
// Exposed so tests can probe the token map directly.
Eigen::VectorXd toy_token_vector(const std::string& token, std::uint64_t seed,
                                 int c);

// Mean of token vectors, L2-normalized, in double precision.
Eigen::MatrixXd toy_hash_encode(const std::vector<std::string>& sentences,
                                std::uint64_t seed, int c);

// {texts: [...]} -> {vectors: [[...]]} over HTTP, then a frozen
// identity-initialized linear projection onto c channels.
Eigen::MatrixXd adapter_encode(const std::vector<std::string>& sentences,
                               const EncoderSpec& spec);

template <typename S>
SentenceFeatureSet<S> encode_sentences(const std::vector<std::string>& sentences,
                                       const EncoderSpec& spec,
                                       SceneSide scene = SceneSide::before) {
    if (spec.c < 1) throw ConfigError("encode_sentences: c must be positive");
    if (sentences.empty())
        throw InputError("encode_sentences: empty sentence list");
    for (const std::string& s : sentences)
        if (tokenize_caption(s).empty())
            throw InputError("encode_sentences: sentence with no tokens");
    Eigen::MatrixXd feats;
    switch (spec.kind) {
        case EncoderKind::toy_hash:
            feats = toy_hash_encode(sentences, spec.seed, spec.c);
            break;
        case EncoderKind::pretrained_adapter:
            feats = adapter_encode(sentences, spec);
            break;
    }
    if (!feats.allFinite())
        throw EncoderError("encode_sentences: non-finite feature row");
    SentenceFeatureSet<S> out;
    out.features = feats.cast<S>();
    out.sentences = sentences;
    out.scene = scene;
    return out;
}

// Row-wise concatenation, before rows first.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> concat_rte(
    const SentenceFeatureSet<S>& before, const SentenceFeatureSet<S>& after) {
    if (before.features.rows() < 1 || after.features.rows() < 1)
        throw ShapeError("concat_rte: each side needs at least one sentence");
    if (before.features.cols() != after.features.cols())
        throw ShapeError("concat_rte: channel counts differ");
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> out(
        before.features.rows() + after.features.rows(), before.features.cols());
    out.topRows(before.features.rows()) = before.features;
    out.bottomRows(after.features.rows()) = after.features;
    return out;
}

}  // namespace cortex
