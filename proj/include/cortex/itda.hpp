#pragma once

// Image-text dual alignment. Static alignment attends each scene's sentence
// features over that scene's visual grid; dynamic alignment swaps the scenes
// (before-grid keys with after-scene sentences and vice versa). Both losses
// compare the text-augmented vector against the mean-pooled self- or
// cross-attended grid. All attention here is the bare projection-free
// primitive; nothing in this module is learned.

#include <utility>

#include "cortex/attention.hpp"
#include "cortex/backbone.hpp"
#include "cortex/text_encoding.hpp"

namespace cortex {

// Sentence features placed on a tape, keeping their scene tag. Leaves are
// non-differentiable by default (the text encoder is frozen).
template <typename S>
struct TextFeatures {
    ad::Tensor<S> rows;  // N x c
    SceneSide scene = SceneSide::before;
};

template <typename S>
TextFeatures<S> text_on_graph(ad::Graph<S>& g, const SentenceFeatureSet<S>& set,
                              bool requires_grad = false) {
    if (set.features.rows() < 1) throw ShapeError("text_on_graph: no sentence rows");
    return {g.input(set.features, requires_grad), set.scene};
}

template <typename S>
struct AlignedFeatures {
    ad::Tensor<S> static_bef, static_aft, dynamic_bef, dynamic_aft;  // 1 x c
    ad::Tensor<S> f_itda;                                             // 4 x c
};

template <typename S>
struct AlignmentLosses {
    ad::Tensor<S> l_sa, l_da, l_align;  // 1 x 1 scalars
};

namespace detail {
template <typename S>
void check_text_over_grid(const VisualFeatureGrid<S>& f, const TextFeatures<S>& t) {
    if (t.rows.cols() != f.tokens.cols())
        throw ShapeError("alignment: sentence and grid channel counts differ");
    if (t.rows.rows() < 1) throw ShapeError("alignment: no sentences");
}
}  // namespace detail

// Mean over sentences of Attn(sentence, grid, grid). Rows of a softmax are
// independent, so one batched attention call equals the per-sentence loop.
template <typename S>
ad::Tensor<S> static_align(const VisualFeatureGrid<S>& f, const TextFeatures<S>& t) {
    detail::check_text_over_grid(f, t);
    if (t.scene != f.side)
        throw ContractError("static_align: sentence features belong to the other scene");
    return ad::mean_rows(attn(t.rows, f.tokens, f.tokens));
}

template <typename S>
ad::Tensor<S> static_self(const VisualFeatureGrid<S>& f) {
    return attn(f.tokens, f.tokens, f.tokens);
}

// L_sa: half the summed squared distances between the text-augmented vectors
// and the mean-pooled self-attended grids.
template <typename S>
ad::Tensor<S> static_loss(ad::Tensor<S> s_bef_ti, ad::Tensor<S> s_aft_ti,
                          ad::Tensor<S> s_bef_ii, ad::Tensor<S> s_aft_ii) {
    if (s_bef_ti.rows() != 1 || s_aft_ti.rows() != 1)
        throw ShapeError("static_loss: text-augmented terms must be 1xC");
    if (s_bef_ti.cols() != s_bef_ii.cols() || s_aft_ti.cols() != s_aft_ii.cols() ||
        s_bef_ti.cols() != s_aft_ti.cols())
        throw ShapeError("static_loss: channel counts differ");
    ad::Tensor<S> d_bef = ad::sub(s_bef_ti, ad::mean_rows(s_bef_ii));
    ad::Tensor<S> d_aft = ad::sub(s_aft_ti, ad::mean_rows(s_aft_ii));
    return ad::scale(ad::add(ad::squared_norm(d_bef), ad::squared_norm(d_aft)),
                     S(0.5));
}

// Same attention form as static_align but the sentences come from the
// opposite scene.
template <typename S>
ad::Tensor<S> dynamic_align(const VisualFeatureGrid<S>& f,
                            const TextFeatures<S>& t_other) {
    detail::check_text_over_grid(f, t_other);
    if (t_other.scene == f.side)
        throw ContractError("dynamic_align: sentence features must come from the opposite scene");
    return ad::mean_rows(attn(t_other.rows, f.tokens, f.tokens));
}

// Cross-scene grid attention; the query is the OTHER scene's grid.
template <typename S>
ad::Tensor<S> dynamic_cross(const VisualFeatureGrid<S>& f_self,
                            const VisualFeatureGrid<S>& f_other) {
    if (f_self.tokens.rows() != f_other.tokens.rows() ||
        f_self.tokens.cols() != f_other.tokens.cols())
        throw ShapeError("dynamic_cross: grid shapes differ");
    return attn(f_other.tokens, f_self.tokens, f_self.tokens);
}

template <typename S>
ad::Tensor<S> dynamic_loss(ad::Tensor<S> d_bef_ti, ad::Tensor<S> d_aft_ti,
                           ad::Tensor<S> d_bef_ii, ad::Tensor<S> d_aft_ii) {
    return static_loss(d_bef_ti, d_aft_ti, d_bef_ii, d_aft_ii);
}

template <typename S>
std::pair<AlignedFeatures<S>, AlignmentLosses<S>> itda_forward(
    const VisualFeatureGrid<S>& f_bef, const VisualFeatureGrid<S>& f_aft,
    const TextFeatures<S>& t_bef, const TextFeatures<S>& t_aft) {
    if (f_bef.side != SceneSide::before || f_aft.side != SceneSide::after ||
        t_bef.scene != SceneSide::before || t_aft.scene != SceneSide::after)
        throw ContractError("itda_forward: inputs must be tagged before/after in order");

    AlignedFeatures<S> feats;
    feats.static_bef = static_align(f_bef, t_bef);
    feats.static_aft = static_align(f_aft, t_aft);
    feats.dynamic_bef = dynamic_align(f_bef, t_aft);
    feats.dynamic_aft = dynamic_align(f_aft, t_bef);
    feats.f_itda = ad::concat_rows<S>(
        {feats.static_bef, feats.static_aft, feats.dynamic_bef, feats.dynamic_aft});

    AlignmentLosses<S> losses;
    losses.l_sa = static_loss(feats.static_bef, feats.static_aft,
                              static_self(f_bef), static_self(f_aft));
    losses.l_da = dynamic_loss(feats.dynamic_bef, feats.dynamic_aft,
                               dynamic_cross(f_bef, f_aft),
                               dynamic_cross(f_aft, f_bef));
    losses.l_align = ad::add(losses.l_sa, losses.l_da);
    return {std::move(feats), std::move(losses)};
}

}  // namespace cortex
