#pragma once

// Named trainable parameters shared by the backbone, detector, and decoder.
//
// A ParamStore owns the master copies of every weight matrix together with
// its gradient accumulator and Adam moments. Model code binds a parameter
// into a Graph with bind(); after Graph::backward() the gradient lands in
// the store. Checkpoints are a small JSON manifest followed by raw scalar
// bytes, so save -> load -> forward is bit-identical at the same precision.

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cortex/autodiff.hpp"
#include "cortex/common.hpp"

namespace cortex {

template <typename S>
struct ParamEntry {
    ad::Mat<S> value;
    ad::Mat<S> grad;  // zero-sized until first backward
    ad::Mat<S> m, v;  // Adam moments, zero-sized until first step
};

template <typename S>
class ParamStore {
public:
    // Creates the entry if absent; re-declaring with a different shape is an
    // error, re-declaring with the same shape returns the existing matrix.
    ad::Mat<S>& declare(const std::string& name, Eigen::Index rows,
                        Eigen::Index cols) {
        auto it = entries_.find(name);
        if (it != entries_.end()) {
            if (it->second.value.rows() != rows || it->second.value.cols() != cols)
                throw ConfigError("parameter '" + name + "' re-declared with a different shape");
            return it->second.value;
        }
        ParamEntry<S>& e = entries_[name];
        e.value = ad::Mat<S>::Zero(rows, cols);
        order_.push_back(name);
        return e.value;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    ParamEntry<S>& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    const ParamEntry<S>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }

    // Declaration order; stable across runs because model code declares in a
    // fixed sequence.
    const std::vector<std::string>& names() const { return order_; }

    void zero_grads() {
        for (auto& [name, e] : entries_)
            if (e.grad.size() != 0) e.grad.setZero();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_)
            n += static_cast<std::size_t>(e.value.size());
        return n;
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, ParamEntry<S>> entries_;
};

// Tape leaf whose gradient accumulates into the store entry.
template <typename S>
ad::Tensor<S> bind_param(ad::Graph<S>& g, ParamStore<S>& store, const std::string& name) {
    ParamEntry<S>& e = store.at(name);
    return g.param(e.value, &e.grad);
}

template <typename S>
void fill_normal(ad::Mat<S>& m, std::mt19937_64& rng, double stddev) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            m(r, c) = static_cast<S>(stddev * normal01(rng));
}

// ---- checkpoint io ---------------------------------------------------------

namespace detail {
constexpr char kCheckpointMagic[8] = {'C', 'O', 'R', 'T', 'E', 'X', 'P', '1'};

template <typename S>
const char* dtype_name() {
    if constexpr (sizeof(S) == 4) return "f32";
    else return "f64";
}

template <typename S>
void write_mat(std::ostream& os, const ad::Mat<S>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            S x = m(r, c);
            os.write(reinterpret_cast<const char*>(&x), sizeof(S));
        }
}

template <typename S>
void read_mat(std::istream& is, ad::Mat<S>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            S x;
            is.read(reinterpret_cast<char*>(&x), sizeof(S));
            m(r, c) = x;
        }
}
}  // namespace detail

// Saves every parameter (and, when with_moments, the Adam state) plus an
// arbitrary JSON meta block. iteration is the optimizer step count.
template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& store,
                     std::int64_t iteration, const nlohmann::json& meta,
                     bool with_moments = true) {
    nlohmann::json manifest;
    manifest["dtype"] = detail::dtype_name<S>();
    manifest["iteration"] = iteration;
    manifest["moments"] = with_moments;
    manifest["meta"] = meta;
    nlohmann::json tensors = nlohmann::json::array();
    for (const std::string& name : store.names()) {
        const ParamEntry<S>& e = store.at(name);
        tensors.push_back({{"name", name},
                           {"rows", e.value.rows()},
                           {"cols", e.value.cols()}});
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mtext = manifest.dump();

    const std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + tmp);
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    std::uint32_t mlen = static_cast<std::uint32_t>(mtext.size());
    os.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    os.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const std::string& name : store.names()) {
        const ParamEntry<S>& e = store.at(name);
        detail::write_mat(os, e.value);
        if (with_moments) {
            ad::Mat<S> m = e.m.size() ? e.m : ad::Mat<S>::Zero(e.value.rows(), e.value.cols());
            ad::Mat<S> v = e.v.size() ? e.v : ad::Mat<S>::Zero(e.value.rows(), e.value.cols());
            detail::write_mat(os, m);
            detail::write_mat(os, v);
        }
    }
    os.flush();
    if (!os) throw IoError("short write on checkpoint: " + tmp);
    os.close();
    std::remove(path.c_str());
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot move checkpoint into place: " + path);
}

template <typename S>
struct LoadedCheckpoint {
    ParamStore<S> store;
    std::int64_t iteration = 0;
    nlohmann::json meta;
    bool has_moments = false;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
        throw InputError("not a checkpoint file: " + path);
    std::uint32_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (!is) throw InputError("truncated checkpoint manifest: " + path);
    std::string mtext(mlen, '\0');
    is.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw InputError("truncated checkpoint manifest: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("bad checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("dtype", "") != detail::dtype_name<S>())
        throw ConfigError("checkpoint dtype is " + manifest.value("dtype", "?") +
                          ", expected " + detail::dtype_name<S>());

    LoadedCheckpoint<S> out;
    out.iteration = manifest.value("iteration", std::int64_t(0));
    out.has_moments = manifest.value("moments", false);
    out.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const Eigen::Index rows = t.at("rows").get<Eigen::Index>();
        const Eigen::Index cols = t.at("cols").get<Eigen::Index>();
        out.store.declare(name, rows, cols);
        ParamEntry<S>& e = out.store.at(name);
        detail::read_mat(is, e.value);
        if (out.has_moments) {
            e.m = ad::Mat<S>::Zero(rows, cols);
            e.v = ad::Mat<S>::Zero(rows, cols);
            detail::read_mat(is, e.m);
            detail::read_mat(is, e.v);
        }
        if (!is) throw InputError("truncated checkpoint data: " + path);
    }
    return out;
}

}  // namespace cortex
