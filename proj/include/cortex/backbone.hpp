#pragma once

// Visual side of the model: a small trainable backbone that turns an image
// into an LxC token grid, and the image-level change detector that fuses a
// before/after pair into f_icd.
//
// Backbone: non-overlapping patch embedding (stride 8 by default), a learned
// positional embedding, then two residual 3x3 convolution blocks realized as
// unfold + matmul with post-block layer norm. Detector: a learned projection
// of the channel concatenation [f_bef ; f_aft ; f_bef - f_aft] followed by
// multi-head self-attention.

#include <random>
#include <string>

#include "cortex/attention.hpp"
#include "cortex/image.hpp"
#include "cortex/params.hpp"
#include "cortex/rte.hpp"

namespace cortex {

struct BackboneConfig {
    int resolution = 40;
    int patch_stride = 8;
    int channels = 64;

    int grid_side() const {
        if (patch_stride < 1 || resolution < patch_stride ||
            resolution % patch_stride != 0)
            throw ConfigError("backbone: resolution must be a positive multiple of the patch stride");
        return resolution / patch_stride;
    }
    int tokens() const { return grid_side() * grid_side(); }
    int patch_dim() const { return 3 * patch_stride * patch_stride; }
};

template <typename S>
struct VisualFeatureGrid {
    ad::Tensor<S> tokens;  // L x c
    int grid_h = 0, grid_w = 0;
    SceneSide side = SceneSide::before;
};

template <typename S>
struct ChangeFeature {
    ad::Tensor<S> tokens;  // L x c
};

// Declares and randomly initializes the backbone parameters; a no-op when
// they already exist so stores can be rebuilt from checkpoints.
template <typename S>
void init_backbone_params(ParamStore<S>& store, const BackboneConfig& cfg,
                          std::mt19937_64& rng) {
    if (store.has("backbone.patch_w")) return;
    const int c = cfg.channels;
    if (c < 1) throw ConfigError("backbone: channels must be positive");
    fill_normal(store.declare("backbone.patch_w", cfg.patch_dim(), c), rng, 0.02);
    store.declare("backbone.patch_b", 1, c);
    fill_normal(store.declare("backbone.pos", cfg.tokens(), c), rng, 0.02);
    for (int blk = 1; blk <= 2; ++blk) {
        const std::string p = "backbone.conv" + std::to_string(blk);
        fill_normal(store.declare(p + "_w", 9 * c, c), rng, 0.02);
        store.declare(p + "_b", 1, c);
        store.declare("backbone.ln" + std::to_string(blk) + "_g", 1, c).setOnes();
        store.declare("backbone.ln" + std::to_string(blk) + "_b", 1, c);
    }
}

template <typename S>
void init_detector_params(ParamStore<S>& store, int channels,
                          std::mt19937_64& rng) {
    if (store.has("detector.proj_w")) return;
    const int c = channels;
    if (c < 1) throw ConfigError("detector: channels must be positive");
    fill_normal(store.declare("detector.proj_w", 3 * c, c), rng, 0.02);
    store.declare("detector.proj_b", 1, c);
    for (const char* w : {"wq", "wk", "wv", "wo"})
        fill_normal(store.declare(std::string("detector.") + w, c, c), rng, 0.02);
    for (const char* b : {"bq", "bk", "bv", "bo"})
        store.declare(std::string("detector.") + b, 1, c);
}

template <typename S>
VisualFeatureGrid<S> extract_features(ad::Graph<S>& g, ParamStore<S>& store,
                                      const Image& img, const BackboneConfig& cfg,
                                      SceneSide side) {
    ad::Mat<S> patches = image_patches<S>(img, cfg.patch_stride);
    const int gh = img.height / cfg.patch_stride;
    const int gw = img.width / cfg.patch_stride;
    if (gh != cfg.grid_side() || gw != cfg.grid_side())
        throw ShapeError("extract_features: image grid does not match the configured positional embedding");
    ad::Tensor<S> x = g.input(std::move(patches));
    x = ad::add_rowvec(ad::matmul(x, bind_param(g, store, "backbone.patch_w")),
                       bind_param(g, store, "backbone.patch_b"));
    x = ad::add(x, bind_param(g, store, "backbone.pos"));
    for (int blk = 1; blk <= 2; ++blk) {
        const std::string p = "backbone.conv" + std::to_string(blk);
        ad::Tensor<S> h = ad::relu(ad::add_rowvec(
            ad::matmul(ad::unfold3x3(x, gh, gw), bind_param(g, store, p + "_w")),
            bind_param(g, store, p + "_b")));
        x = ad::layer_norm(ad::add(x, h),
                           bind_param(g, store, "backbone.ln" + std::to_string(blk) + "_g"),
                           bind_param(g, store, "backbone.ln" + std::to_string(blk) + "_b"));
    }
    return {x, gh, gw, side};
}

// The detector's raw input: channel concatenation of both grids and their
// difference. Exposed so the difference block can be inspected directly.
template <typename S>
ad::Tensor<S> change_concat(const VisualFeatureGrid<S>& f_bef,
                            const VisualFeatureGrid<S>& f_aft) {
    if (f_bef.tokens.rows() != f_aft.tokens.rows() ||
        f_bef.tokens.cols() != f_aft.tokens.cols())
        throw ShapeError("change_concat: grid shapes differ");
    return ad::concat_cols<S>(
        {f_bef.tokens, f_aft.tokens, ad::sub(f_bef.tokens, f_aft.tokens)});
}

template <typename S>
ChangeFeature<S> detect_change(ad::Graph<S>& g, ParamStore<S>& store,
                               const VisualFeatureGrid<S>& f_bef,
                               const VisualFeatureGrid<S>& f_aft,
                               int heads = 8) {
    ad::Tensor<S> cat = change_concat(f_bef, f_aft);
    ad::Tensor<S> z = ad::add_rowvec(
        ad::matmul(cat, bind_param(g, store, "detector.proj_w")),
        bind_param(g, store, "detector.proj_b"));
    MhaParams<S> p{bind_param(g, store, "detector.wq"), bind_param(g, store, "detector.wk"),
                   bind_param(g, store, "detector.wv"), bind_param(g, store, "detector.wo"),
                   bind_param(g, store, "detector.bq"), bind_param(g, store, "detector.bk"),
                   bind_param(g, store, "detector.bv"), bind_param(g, store, "detector.bo")};
    return {multi_head_attention(p, z, z, z, heads)};
}

}  // namespace cortex
