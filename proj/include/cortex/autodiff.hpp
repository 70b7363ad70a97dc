#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Graph is a tape of nodes created in topological order; backward() walks
// the tape in reverse. Every value is a 2-D matrix: scalars are 1x1, row
// vectors are 1xC. Templated on the scalar so the same model code runs in
// float for training and in double for finite-difference checks.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cortex/common.hpp"

namespace cortex::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
class Graph;

// Lightweight handle into a Graph's tape.
template <typename S>
class Tensor {
public:
    Tensor() : graph_(nullptr), id_(-1) {}
    Tensor(Graph<S>* g, int id) : graph_(g), id_(id) {}

    const Mat<S>& value() const { return graph_->node(id_).value; }
    const Mat<S>& grad() const { return graph_->node(id_).grad; }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    S scalar() const {
        if (value().size() != 1) throw ShapeError("scalar() on non-1x1 tensor");
        return value()(0, 0);
    }
    Graph<S>* graph() const { return graph_; }
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph<S>* graph_;
    int id_;
};

template <typename S>
class Graph {
public:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        std::function<void(Graph&, Node&)> backward;  // empty for leaves
        bool requires_grad = false;
        Mat<S>* grad_sink = nullptr;  // external accumulator (parameters)
    };

    // Leaf holding a constant or differentiable input.
    Tensor<S> input(Mat<S> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad, nullptr, {});
    }

    // Leaf tied to an external parameter matrix; after backward() the node's
    // gradient is accumulated into *grad_sink.
    Tensor<S> param(const Mat<S>& value, Mat<S>* grad_sink) {
        Tensor<S> t = push(value, true, nullptr, {});
        node(t.id()).grad_sink = grad_sink;
        param_ids_.push_back(t.id());
        return t;
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    Tensor<S> make(Mat<S> v, std::vector<int> parents,
                   std::function<void(Graph&, Node&)> backward) {
        bool rg = false;
        for (int p : parents) rg = rg || node(p).requires_grad;
        return push(std::move(v), rg, rg ? std::move(backward) : nullptr,
                    std::move(parents));
    }

    // Runs reverse accumulation from a 1x1 output. seed is the incoming
    // gradient (1/B when averaging sample losses outside the graph).
    void backward(const Tensor<S>& out, S seed = S(1)) {
        Node& root = node(out.id());
        if (root.value.size() != 1) throw ShapeError("backward() needs a scalar output");
        for (auto& n : nodes_) {
            if (n.requires_grad && n.grad.size() == 0)
                n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
        }
        if (!root.requires_grad) return;
        root.grad(0, 0) += seed;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward && it->requires_grad) it->backward(*this, *it);
        }
        for (int id : param_ids_) {
            Node& n = node(id);
            if (n.grad_sink) {
                if (n.grad_sink->size() == 0)
                    *n.grad_sink = Mat<S>::Zero(n.value.rows(), n.value.cols());
                *n.grad_sink += n.grad;
            }
        }
    }

    void accumulate(int id, const Mat<S>& g) {
        Node& n = node(id);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
        n.grad += g;
    }

private:
    Tensor<S> push(Mat<S> v, bool rg, std::function<void(Graph&, Node&)> bw,
                   std::vector<int> /*parents kept via closures*/) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = rg;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Tensor<S>(this, static_cast<int>(nodes_.size()) - 1);
    }

    std::vector<Node> nodes_;
    std::vector<int> param_ids_;
};

namespace detail {
template <typename S>
void check_same_graph(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.graph() != b.graph()) throw ContractError("tensors belong to different graphs");
}
}  // namespace detail

// ---- elementwise and linear ops ------------------------------------------

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    detail::check_same_graph(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("add: shape mismatch");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ib = b.id();
    return g.make(a.value() + b.value(), {ia, ib},
                  [ia, ib](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad);
                      gr.accumulate(ib, n.grad);
                  });
}

template <typename S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    detail::check_same_graph(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("sub: shape mismatch");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ib = b.id();
    return g.make(a.value() - b.value(), {ia, ib},
                  [ia, ib](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad);
                      gr.accumulate(ib, -n.grad);
                  });
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {  // elementwise
    detail::check_same_graph(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("mul: shape mismatch");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ib = b.id();
    return g.make(a.value().cwiseProduct(b.value()), {ia, ib},
                  [ia, ib](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad.cwiseProduct(gr.node(ib).value));
                      gr.accumulate(ib, n.grad.cwiseProduct(gr.node(ia).value));
                  });
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S k) {
    Graph<S>& g = *a.graph();
    int ia = a.id();
    return g.make(a.value() * k, {ia},
                  [ia, k](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad * k);
                  });
}

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    detail::check_same_graph(a, b);
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ib = b.id();
    return g.make(a.value() * b.value(), {ia, ib},
                  [ia, ib](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad * gr.node(ib).value.transpose());
                      gr.accumulate(ib, gr.node(ia).value.transpose() * n.grad);
                  });
}

// A * B^T without materializing a transposed node.
template <typename S>
Tensor<S> matmul_bt(Tensor<S> a, Tensor<S> b) {
    detail::check_same_graph(a, b);
    if (a.cols() != b.cols()) throw ShapeError("matmul_bt: column counts differ");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ib = b.id();
    return g.make(a.value() * b.value().transpose(), {ia, ib},
                  [ia, ib](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad * gr.node(ib).value);
                      gr.accumulate(ib, n.grad.transpose() * gr.node(ia).value);
                  });
}

// Adds a 1xC row to every row of a TxC matrix (bias / broadcast embedding).
template <typename S>
Tensor<S> add_rowvec(Tensor<S> a, Tensor<S> row) {
    detail::check_same_graph(a, row);
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ShapeError("add_rowvec: need 1xC row matching a's columns");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ir = row.id();
    Mat<S> v = a.value();
    v.rowwise() += Eigen::RowVector<S, Eigen::Dynamic>(row.value().row(0));
    return g.make(std::move(v), {ia, ir},
                  [ia, ir](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad);
                      gr.accumulate(ir, n.grad.colwise().sum());
                  });
}

template <typename S>
Tensor<S> relu(Tensor<S> a) {
    Graph<S>& g = *a.graph();
    int ia = a.id();
    return g.make(a.value().cwiseMax(S(0)), {ia},
                  [ia](Graph<S>& gr, typename Graph<S>::Node& n) {
                      const Mat<S>& x = gr.node(ia).value;
                      gr.accumulate(ia, (x.array() > S(0)).template cast<S>().matrix().cwiseProduct(n.grad));
                  });
}

// ---- reductions -----------------------------------------------------------

// Mean over rows: TxC -> 1xC.
template <typename S>
Tensor<S> mean_rows(Tensor<S> a) {
    Graph<S>& g = *a.graph();
    int ia = a.id();
    const S inv = S(1) / static_cast<S>(a.rows());
    Mat<S> v = a.value().colwise().mean();
    return g.make(std::move(v), {ia},
                  [ia, inv](Graph<S>& gr, typename Graph<S>::Node& n) {
                      Mat<S> gx = n.grad.replicate(gr.node(ia).value.rows(), 1) * inv;
                      gr.accumulate(ia, gx);
                  });
}

// Sum of squared entries: any shape -> 1x1.
template <typename S>
Tensor<S> squared_norm(Tensor<S> a) {
    Graph<S>& g = *a.graph();
    int ia = a.id();
    Mat<S> v(1, 1);
    v(0, 0) = a.value().squaredNorm();
    return g.make(std::move(v), {ia},
                  [ia](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, S(2) * n.grad(0, 0) * gr.node(ia).value);
                  });
}

// ---- structural ops --------------------------------------------------------

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    Graph<S>& g = *parts[0].graph();
    Eigen::Index rows = 0, cols = parts[0].cols();
    std::vector<int> ids;
    for (const auto& p : parts) {
        detail::check_same_graph(parts[0], p);
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
        ids.push_back(p.id());
    }
    Mat<S> v(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return g.make(std::move(v), ids,
                  [ids](Graph<S>& gr, typename Graph<S>::Node& n) {
                      Eigen::Index r = 0;
                      for (int id : ids) {
                          Eigen::Index h = gr.node(id).value.rows();
                          gr.accumulate(id, n.grad.middleRows(r, h));
                          r += h;
                      }
                  });
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    Graph<S>& g = *parts[0].graph();
    Eigen::Index cols = 0, rows = parts[0].rows();
    std::vector<int> ids;
    for (const auto& p : parts) {
        detail::check_same_graph(parts[0], p);
        if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
        ids.push_back(p.id());
    }
    Mat<S> v(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        v.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return g.make(std::move(v), ids,
                  [ids](Graph<S>& gr, typename Graph<S>::Node& n) {
                      Eigen::Index c = 0;
                      for (int id : ids) {
                          Eigen::Index w = gr.node(id).value.cols();
                          gr.accumulate(id, n.grad.middleCols(c, w));
                          c += w;
                      }
                  });
}

template <typename S>
Tensor<S> slice_rows(Tensor<S> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 1 || start + count > a.rows())
        throw ShapeError("slice_rows: out of range");
    Graph<S>& g = *a.graph();
    int ia = a.id();
    return g.make(a.value().middleRows(start, count), {ia},
                  [ia, start, count](Graph<S>& gr, typename Graph<S>::Node& n) {
                      const Mat<S>& x = gr.node(ia).value;
                      Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
                      gx.middleRows(start, count) = n.grad;
                      gr.accumulate(ia, gx);
                  });
}

template <typename S>
Tensor<S> slice_cols(Tensor<S> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 1 || start + count > a.cols())
        throw ShapeError("slice_cols: out of range");
    Graph<S>& g = *a.graph();
    int ia = a.id();
    return g.make(a.value().middleCols(start, count), {ia},
                  [ia, start, count](Graph<S>& gr, typename Graph<S>::Node& n) {
                      const Mat<S>& x = gr.node(ia).value;
                      Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
                      gx.middleCols(start, count) = n.grad;
                      gr.accumulate(ia, gx);
                  });
}

// Row gather (embedding lookup); backward scatter-adds.
template <typename S>
Tensor<S> gather_rows(Tensor<S> a, std::vector<int> idx) {
    Graph<S>& g = *a.graph();
    for (int i : idx)
        if (i < 0 || i >= a.rows()) throw ShapeError("gather_rows: index out of range");
    int ia = a.id();
    Mat<S> v(static_cast<Eigen::Index>(idx.size()), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        v.row(static_cast<Eigen::Index>(r)) = a.value().row(idx[r]);
    return g.make(std::move(v), {ia},
                  [ia, idx](Graph<S>& gr, typename Graph<S>::Node& n) {
                      const Mat<S>& x = gr.node(ia).value;
                      Mat<S> gx = Mat<S>::Zero(x.rows(), x.cols());
                      for (std::size_t r = 0; r < idx.size(); ++r)
                          gx.row(idx[r]) += n.grad.row(static_cast<Eigen::Index>(r));
                      gr.accumulate(ia, gx);
                  });
}

// 3x3 zero-padded neighborhood unfold on an HxW token grid: (H*W)xC ->
// (H*W)x9C, row-major positions, neighbor order (dr,dc) in row-major scan.
template <typename S>
Tensor<S> unfold3x3(Tensor<S> a, int grid_h, int grid_w) {
    if (a.rows() != static_cast<Eigen::Index>(grid_h) * grid_w)
        throw ShapeError("unfold3x3: rows != H*W");
    Graph<S>& g = *a.graph();
    int ia = a.id();
    const Eigen::Index c = a.cols();
    Mat<S> v = Mat<S>::Zero(a.rows(), 9 * c);
    for (int r = 0; r < grid_h; ++r) {
        for (int col = 0; col < grid_w; ++col) {
            Eigen::Index out_row = static_cast<Eigen::Index>(r) * grid_w + col;
            int k = 0;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc, ++k) {
                    int nr = r + dr, nc = col + dc;
                    if (nr < 0 || nr >= grid_h || nc < 0 || nc >= grid_w) continue;
                    v.block(out_row, k * c, 1, c) =
                        a.value().row(static_cast<Eigen::Index>(nr) * grid_w + nc);
                }
            }
        }
    }
    return g.make(std::move(v), {ia},
                  [ia, grid_h, grid_w, c](Graph<S>& gr, typename Graph<S>::Node& n) {
                      Mat<S> gx = Mat<S>::Zero(gr.node(ia).value.rows(), c);
                      for (int r = 0; r < grid_h; ++r) {
                          for (int col = 0; col < grid_w; ++col) {
                              Eigen::Index out_row = static_cast<Eigen::Index>(r) * grid_w + col;
                              int k = 0;
                              for (int dr = -1; dr <= 1; ++dr) {
                                  for (int dc = -1; dc <= 1; ++dc, ++k) {
                                      int nr = r + dr, nc = col + dc;
                                      if (nr < 0 || nr >= grid_h || nc < 0 || nc >= grid_w) continue;
                                      gx.row(static_cast<Eigen::Index>(nr) * grid_w + nc) +=
                                          n.grad.block(out_row, k * c, 1, c);
                                  }
                              }
                          }
                      }
                      gr.accumulate(ia, gx);
                  });
}

// ---- softmax / normalization / losses --------------------------------------

// Numerically stable row softmax (max subtraction). An optional additive
// mask (same shape, 0 or large negative) is applied before normalization.
template <typename S>
Tensor<S> softmax_rows(Tensor<S> a, const Mat<S>* mask = nullptr) {
    Graph<S>& g = *a.graph();
    int ia = a.id();
    Mat<S> z = a.value();
    if (mask) {
        if (mask->rows() != z.rows() || mask->cols() != z.cols())
            throw ShapeError("softmax_rows: mask shape mismatch");
        z += *mask;
    }
    Mat<S> out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        S m = z.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (z.row(r).array() - m).exp();
        out.row(r) = (e / e.sum()).matrix();
    }
    return g.make(std::move(out), {ia},
                  [ia](Graph<S>& gr, typename Graph<S>::Node& n) {
                      const Mat<S>& s = n.value;
                      Mat<S> gx(s.rows(), s.cols());
                      for (Eigen::Index r = 0; r < s.rows(); ++r) {
                          S dot = n.grad.row(r).dot(s.row(r));
                          gx.row(r) = s.row(r).cwiseProduct(
                              n.grad.row(r) - Mat<S>::Constant(1, s.cols(), dot));
                      }
                      gr.accumulate(ia, gx);
                  });
}

// Row layer norm with learned gain/bias (1xC each).
template <typename S>
Tensor<S> layer_norm(Tensor<S> a, Tensor<S> gain, Tensor<S> bias, S eps = S(1e-5)) {
    detail::check_same_graph(a, gain);
    detail::check_same_graph(a, bias);
    if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 ||
        bias.cols() != a.cols())
        throw ShapeError("layer_norm: gain/bias must be 1xC");
    Graph<S>& g = *a.graph();
    int ia = a.id(), ig = gain.id(), ib = bias.id();
    const Eigen::Index C = a.cols();
    Mat<S> xhat(a.rows(), C);
    Mat<S> inv_sigma(a.rows(), 1);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        S mu = a.value().row(r).mean();
        Eigen::Array<S, 1, Eigen::Dynamic> centered = a.value().row(r).array() - mu;
        S var = centered.square().sum() / static_cast<S>(C);
        S is = S(1) / std::sqrt(var + eps);
        inv_sigma(r, 0) = is;
        xhat.row(r) = (centered * is).matrix();
    }
    Mat<S> out = xhat;
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        out.row(r) = out.row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    struct Saved {
        Mat<S> xhat;
        Mat<S> inv_sigma;
    };
    auto saved = std::make_shared<Saved>(Saved{std::move(xhat), std::move(inv_sigma)});
    return g.make(std::move(out), {ia, ig, ib},
                  [ia, ig, ib, saved, C](Graph<S>& gr, typename Graph<S>::Node& n) {
                      const Mat<S>& gam = gr.node(ig).value;
                      Mat<S> dgain = Mat<S>::Zero(1, C);
                      Mat<S> dbias = Mat<S>::Zero(1, C);
                      Mat<S> gx(n.grad.rows(), C);
                      for (Eigen::Index r = 0; r < n.grad.rows(); ++r) {
                          dgain += n.grad.row(r).cwiseProduct(saved->xhat.row(r));
                          dbias += n.grad.row(r);
                          Mat<S> dxhat = n.grad.row(r).cwiseProduct(gam.row(0));
                          S m1 = dxhat.row(0).mean();
                          S m2 = dxhat.row(0).cwiseProduct(saved->xhat.row(r)).mean();
                          gx.row(r) = saved->inv_sigma(r, 0) *
                                      (dxhat.row(0).array() - m1 -
                                       saved->xhat.row(r).array() * m2)
                                          .matrix();
                      }
                      gr.accumulate(ia, gx);
                      gr.accumulate(ig, dgain);
                      gr.accumulate(ib, dbias);
                  });
}

// Softmax cross-entropy over rows of logits against integer targets; rows
// with weight 0 are excluded. Returns the mean over rows with weight 1.
template <typename S>
Tensor<S> cross_entropy_rows(Tensor<S> logits, const std::vector<int>& targets,
                             const std::vector<S>& weights) {
    if (static_cast<Eigen::Index>(targets.size()) != logits.rows() ||
        weights.size() != targets.size())
        throw ShapeError("cross_entropy_rows: targets/weights size mismatch");
    Graph<S>& g = *logits.graph();
    int il = logits.id();
    const Mat<S>& z = logits.value();
    S wsum = S(0);
    for (S w : weights) wsum += w;
    if (wsum <= S(0)) throw InputError("cross_entropy_rows: no active rows");
    Mat<S> probs(z.rows(), z.cols());
    S loss = S(0);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        S m = z.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (z.row(r).array() - m).exp();
        S denom = e.sum();
        probs.row(r) = (e / denom).matrix();
        int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= z.cols()) throw ShapeError("cross_entropy_rows: target out of range");
        loss += weights[static_cast<std::size_t>(r)] *
                (std::log(denom) + m - z(r, t));
    }
    Mat<S> v(1, 1);
    v(0, 0) = loss / wsum;
    auto saved = std::make_shared<Mat<S>>(std::move(probs));
    return g.make(std::move(v), {il},
                  [il, targets, weights, wsum, saved](Graph<S>& gr,
                                                      typename Graph<S>::Node& n) {
                      Mat<S> gx = *saved;
                      for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                          gx(r, targets[static_cast<std::size_t>(r)]) -= S(1);
                          gx.row(r) *= weights[static_cast<std::size_t>(r)] / wsum;
                      }
                      gr.accumulate(il, n.grad(0, 0) * gx);
                  });
}

// Inverted dropout with an explicit engine so training runs are replayable.
template <typename S>
Tensor<S> dropout(Tensor<S> a, S p, std::mt19937_64& rng) {
    if (p <= S(0)) return a;
    if (p >= S(1)) throw ConfigError("dropout: p must be < 1");
    Graph<S>& g = *a.graph();
    int ia = a.id();
    Mat<S> mask(a.rows(), a.cols());
    const S keep = S(1) - p;
    for (Eigen::Index r = 0; r < mask.rows(); ++r)
        for (Eigen::Index c = 0; c < mask.cols(); ++c)
            mask(r, c) = (uniform01(rng) < static_cast<double>(p)) ? S(0) : S(1) / keep;
    auto saved = std::make_shared<Mat<S>>(std::move(mask));
    return g.make(a.value().cwiseProduct(*saved), {ia},
                  [ia, saved](Graph<S>& gr, typename Graph<S>::Node& n) {
                      gr.accumulate(ia, n.grad.cwiseProduct(*saved));
                  });
}

}  // namespace cortex::ad
