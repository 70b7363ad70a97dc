#pragma once

// Attention primitives.
//
// attn() is the bare scaled dot-product form Softmax(Q K^T / sqrt(c)) V with
// no learned projections; the alignment module uses it verbatim. The learned
// multi-head wrapper below (projections + head split + output projection) is
// what the change detector and the caption decoder use.

#include <cmath>
#include <vector>

#include "cortex/autodiff.hpp"

namespace cortex {

// Softmax(Q K^T / sqrt(c)) V. Q: qxc, K: kxc, V: kxc -> qxc. The optional
// additive mask (qxk) is applied to the score matrix before the softmax.
template <typename S>
ad::Tensor<S> attn(ad::Tensor<S> q, ad::Tensor<S> k, ad::Tensor<S> v,
                   const ad::Mat<S>* mask = nullptr) {
    if (q.cols() != k.cols()) throw ShapeError("attn: Q/K channel mismatch");
    if (k.rows() != v.rows()) throw ShapeError("attn: K/V row mismatch");
    if (k.rows() < 1) throw ShapeError("attn: need at least one key");
    const S inv_sqrt_c = S(1) / std::sqrt(static_cast<S>(q.cols()));
    ad::Tensor<S> scores = ad::scale(ad::matmul_bt(q, k), inv_sqrt_c);
    ad::Tensor<S> weights = ad::softmax_rows(scores, mask);
    return ad::matmul(weights, v);
}

// Parameter bundle for one learned multi-head attention block.
template <typename S>
struct MhaParams {
    ad::Tensor<S> wq, wk, wv, wo;  // each c x c
    ad::Tensor<S> bq, bk, bv, bo;  // each 1 x c
};

template <typename S>
ad::Tensor<S> multi_head_attention(const MhaParams<S>& p, ad::Tensor<S> q_in,
                                   ad::Tensor<S> k_in, ad::Tensor<S> v_in,
                                   int heads, const ad::Mat<S>* mask = nullptr) {
    const Eigen::Index c = q_in.cols();
    if (c % heads != 0) throw ConfigError("multi_head_attention: c not divisible by heads");
    const Eigen::Index dh = c / heads;
    ad::Tensor<S> q = ad::add_rowvec(ad::matmul(q_in, p.wq), p.bq);
    ad::Tensor<S> k = ad::add_rowvec(ad::matmul(k_in, p.wk), p.bk);
    ad::Tensor<S> v = ad::add_rowvec(ad::matmul(v_in, p.wv), p.bv);
    std::vector<ad::Tensor<S>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        ad::Tensor<S> qh = ad::slice_cols(q, h * dh, dh);
        ad::Tensor<S> kh = ad::slice_cols(k, h * dh, dh);
        ad::Tensor<S> vh = ad::slice_cols(v, h * dh, dh);
        head_outs.push_back(attn(qh, kh, vh, mask));
    }
    ad::Tensor<S> merged = ad::concat_cols(head_outs);
    return ad::add_rowvec(ad::matmul(merged, p.wo), p.bo);
}

}  // namespace cortex
