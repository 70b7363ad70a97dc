#include "cortex/text_encoding.hpp"

#include <array>

#include <httplib.h>

namespace cortex {

namespace {
const std::array<std::string, 2> kKindNames = {"toy_hash", "pretrained_adapter"};
}

const std::string& to_string(EncoderKind k) {
    return kKindNames[static_cast<int>(k)];
}

EncoderKind encoder_kind_from_string(const std::string& s) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i)
        if (kKindNames[i] == s) return static_cast<EncoderKind>(i);
    throw InputError("unknown encoder kind '" + s + "'");
}

Eigen::VectorXd toy_token_vector(const std::string& token, std::uint64_t seed,
                                 int c) {
    std::mt19937_64 rng(splitmix64(fnv1a64(token) ^ seed));
    Eigen::VectorXd v(c);
    for (int i = 0; i < c; ++i) v(i) = normal01(rng);
    return v;
}

Eigen::MatrixXd toy_hash_encode(const std::vector<std::string>& sentences,
                                std::uint64_t seed, int c) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(sentences.size()), c);
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        std::vector<std::string> tokens = tokenize_caption(sentences[i]);
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(c);
        for (const std::string& tok : tokens)
            mean += toy_token_vector(tok, seed, c);
        mean /= static_cast<double>(tokens.size());
        double norm = mean.norm();
        if (norm < 1e-12)
            throw EncoderError("toy_hash_encode: degenerate zero embedding");
        out.row(static_cast<Eigen::Index>(i)) = (mean / norm).transpose();
    }
    return out;
}

Eigen::MatrixXd adapter_encode(const std::vector<std::string>& sentences,
                               const EncoderSpec& spec) {
    if (spec.adapter_endpoint.empty())
        throw ConfigError("adapter_encode: adapter_endpoint is required");
    httplib::Client cli(spec.adapter_endpoint);
    cli.set_connection_timeout(spec.adapter_timeout_sec, 0);
    cli.set_read_timeout(spec.adapter_timeout_sec, 0);
    nlohmann::json body{{"texts", sentences}};
    if (!spec.adapter_model.empty()) body["model"] = spec.adapter_model;
    httplib::Result res = cli.Post("/v1/embed", body.dump(), "application/json");
    if (!res || res->status != 200)
        throw EncoderError("adapter_encode: endpoint " + spec.adapter_endpoint +
                           (res ? " returned status " + std::to_string(res->status)
                                : " unreachable"));
    nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.contains("vectors"))
        throw EncoderError("adapter_encode: malformed embedding response");
    auto vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
    if (vectors.size() != sentences.size())
        throw EncoderError("adapter_encode: row count mismatch");
    if (vectors.empty() || vectors[0].empty())
        throw EncoderError("adapter_encode: empty embedding");
    const int d = static_cast<int>(vectors[0].size());
    Eigen::MatrixXd raw(static_cast<Eigen::Index>(vectors.size()), d);
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (static_cast<int>(vectors[i].size()) != d)
            throw EncoderError("adapter_encode: ragged embedding rows");
        for (int k = 0; k < d; ++k)
            raw(static_cast<Eigen::Index>(i), k) = vectors[i][k];
    }
    // Frozen identity-initialized projection onto c channels: passthrough on
    // the shared prefix, zero elsewhere.
    Eigen::MatrixXd proj = Eigen::MatrixXd::Zero(d, spec.c);
    for (int k = 0; k < std::min(d, spec.c); ++k) proj(k, k) = 1.0;
    return raw * proj;
}

}  // namespace cortex
