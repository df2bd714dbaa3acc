#pragma once

#include "jepat/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace jepat {

/// Reverse-mode tape over Tensor values.
///
/// Every differentiable operation appends its output as a new slot and, when
/// recording, a closure that scatters the output gradient back onto its
/// inputs. backward() replays the closures in reverse. Leaves registered via
/// leaf() accumulate gradients; constants never do. A tape constructed with
/// recording=false evaluates forward only, which is what inference and
/// finite-difference probes use.
template <typename S>
class GradTape {
public:
    struct Var {
        int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    explicit GradTape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    size_t size() const { return slots_.size(); }

    Var leaf(const Tensor<S>& value, std::string name = {}) {
        return push(value, recording_, std::move(name));
    }

    Var constant(const Tensor<S>& value) { return push(value, false, {}); }

    const Tensor<S>& value(Var v) const { return slot(v).value; }

    /// Gradient of the last backward() target w.r.t. this var. Exact zeros
    /// for vars the loss never touched.
    const Tensor<S>& grad(Var v) const {
        const SlotRec& s = slot(v);
        if (s.grad.size() == 0) {
            const_cast<SlotRec&>(s).grad = Tensor<S>::zeros(s.value.shape());
        }
        return s.grad;
    }

    void backward(Var loss) {
        if (!recording_) throw std::logic_error("tape: backward() on a non-recording tape");
        if (value(loss).size() != 1) {
            throw std::invalid_argument("tape: backward target must be scalar, got " + value(loss).shape_str());
        }
        grad_ref(loss.id).mat()(0, 0) = S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    // -- op building blocks ------------------------------------------------

    Var push(Tensor<S> value, bool requires_grad, std::string name = {}) {
        slots_.push_back(SlotRec{std::move(value), Tensor<S>(), requires_grad, std::move(name)});
        return Var{static_cast<int32_t>(slots_.size() - 1)};
    }

    bool needs_grad(Var v) const { return slot(v).requires_grad; }

    template <typename... Vs>
    bool any_needs_grad(Vs... vs) const {
        return (needs_grad(vs) || ...);
    }

    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    Tensor<S>& grad_ref(int32_t id) {
        SlotRec& s = slots_.at(static_cast<size_t>(id));
        if (s.grad.size() == 0) s.grad = Tensor<S>::zeros(s.value.shape());
        return s.grad;
    }

    const std::string& name(Var v) const { return slot(v).name; }

private:
    struct SlotRec {
        Tensor<S> value;
        Tensor<S> grad;
        bool requires_grad = false;
        std::string name;
    };

    const SlotRec& slot(Var v) const {
        if (!v.valid()) throw std::logic_error("tape: use of invalid var");
        return slots_.at(static_cast<size_t>(v.id));
    }

    bool recording_;
    std::deque<SlotRec> slots_;  // deque: refs stay valid as ops append
    std::vector<std::function<void()>> records_;
};

namespace detail {

template <typename S>
S gelu_fwd(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2.0)));
}

template <typename S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2.0)));
    const S pdf = S(std::exp(-0.5 * double(x) * double(x)) / std::sqrt(2.0 * std::numbers::pi));
    return cdf + x * pdf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul family

template <typename S>
typename GradTape<S>::Var matmul(GradTape<S>& t, typename GradTape<S>::Var a, typename GradTape<S>::Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (av.cols() != bv.rows()) {
        throw std::invalid_argument("matmul: inner extents differ: " + av.shape_str() + " vs " + bv.shape_str());
    }
    MatrixX<S> out = av.mat() * bv.mat();
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), t.any_needs_grad(a, b));
    if (t.needs_grad(r)) {
        t.record([&t, a, b, r] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            if (t.needs_grad(a)) t.grad_ref(a.id).mat().noalias() += g * t.value(b).mat().transpose();
            if (t.needs_grad(b)) t.grad_ref(b.id).mat().noalias() += t.value(a).mat().transpose() * g;
        });
    }
    return r;
}

/// a * b^T
template <typename S>
typename GradTape<S>::Var matmul_nt(GradTape<S>& t, typename GradTape<S>::Var a, typename GradTape<S>::Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (av.cols() != bv.cols()) {
        throw std::invalid_argument("matmul_nt: inner extents differ: " + av.shape_str() + " vs " + bv.shape_str());
    }
    MatrixX<S> out = av.mat() * bv.mat().transpose();
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), t.any_needs_grad(a, b));
    if (t.needs_grad(r)) {
        t.record([&t, a, b, r] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            if (t.needs_grad(a)) t.grad_ref(a.id).mat().noalias() += g * t.value(b).mat();
            if (t.needs_grad(b)) t.grad_ref(b.id).mat().noalias() += g.transpose() * t.value(a).mat();
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
typename GradTape<S>::Var add(GradTape<S>& t, typename GradTape<S>::Var a, typename GradTape<S>::Var b) {
    require_same_shape(t.value(a), t.value(b), "add");
    Tensor<S> out(t.value(a).shape(), t.value(a).mat() + t.value(b).mat());
    auto r = t.push(std::move(out), t.any_needs_grad(a, b));
    if (t.needs_grad(r)) {
        t.record([&t, a, b, r] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            if (t.needs_grad(a)) t.grad_ref(a.id).mat() += g;
            if (t.needs_grad(b)) t.grad_ref(b.id).mat() += g;
        });
    }
    return r;
}

/// x[N x D] + broadcast row v[D]
template <typename S>
typename GradTape<S>::Var add_rowvec(GradTape<S>& t, typename GradTape<S>::Var x, typename GradTape<S>::Var v) {
    const Tensor<S>& xv = t.value(x);
    const Tensor<S>& vv = t.value(v);
    if (vv.rows() != 1 || vv.cols() != xv.cols()) {
        throw std::invalid_argument("add_rowvec: row " + vv.shape_str() + " does not broadcast over " +
                                    xv.shape_str());
    }
    Tensor<S> out(xv.shape(), xv.mat().rowwise() + vv.mat().row(0));
    auto r = t.push(std::move(out), t.any_needs_grad(x, v));
    if (t.needs_grad(r)) {
        t.record([&t, x, v, r] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            if (t.needs_grad(x)) t.grad_ref(x.id).mat() += g;
            if (t.needs_grad(v)) t.grad_ref(v.id).mat().row(0) += g.colwise().sum();
        });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var mul(GradTape<S>& t, typename GradTape<S>::Var a, typename GradTape<S>::Var b) {
    require_same_shape(t.value(a), t.value(b), "mul");
    Tensor<S> out(t.value(a).shape(), t.value(a).mat().cwiseProduct(t.value(b).mat()));
    auto r = t.push(std::move(out), t.any_needs_grad(a, b));
    if (t.needs_grad(r)) {
        t.record([&t, a, b, r] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            if (t.needs_grad(a)) t.grad_ref(a.id).mat() += g.cwiseProduct(t.value(b).mat());
            if (t.needs_grad(b)) t.grad_ref(b.id).mat() += g.cwiseProduct(t.value(a).mat());
        });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var scale(GradTape<S>& t, typename GradTape<S>::Var x, S k) {
    Tensor<S> out(t.value(x).shape(), t.value(x).mat() * k);
    auto r = t.push(std::move(out), t.needs_grad(x));
    if (t.needs_grad(r)) {
        t.record([&t, x, r, k] { t.grad_ref(x.id).mat() += t.grad_ref(r.id).mat() * k; });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var gelu(GradTape<S>& t, typename GradTape<S>::Var x) {
    Tensor<S> out(t.value(x).shape(),
                  t.value(x).mat().unaryExpr([](S v) { return detail::gelu_fwd(v); }));
    auto r = t.push(std::move(out), t.needs_grad(x));
    if (t.needs_grad(r)) {
        t.record([&t, x, r] {
            const MatrixX<S>& xv = t.value(x).mat();
            t.grad_ref(x.id).mat() +=
                t.grad_ref(r.id).mat().cwiseProduct(xv.unaryExpr([](S v) { return detail::gelu_grad(v); }));
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// row-wise

/// Max-subtracted softmax over the last axis.
template <typename S>
typename GradTape<S>::Var softmax_rows(GradTape<S>& t, typename GradTape<S>::Var x) {
    const MatrixX<S>& xv = t.value(x).mat();
    MatrixX<S> y(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.rows(); ++i) {
        const S mx = xv.row(i).maxCoeff();
        y.row(i) = (xv.row(i).array() - mx).exp();
        y.row(i) /= y.row(i).sum();
    }
    auto r = t.push(Tensor<S>(t.value(x).shape(), std::move(y)), t.needs_grad(x));
    if (t.needs_grad(r)) {
        t.record([&t, x, r] {
            const MatrixX<S>& yv = t.value(r).mat();
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            MatrixX<S>& gx = t.grad_ref(x.id).mat();
            for (Index i = 0; i < yv.rows(); ++i) {
                const S dot = yv.row(i).dot(g.row(i));
                gx.row(i) += (yv.row(i).array() * (g.row(i).array() - dot)).matrix();
            }
        });
    }
    return r;
}

/// Normalize each row to zero mean / unit variance, then apply gain and bias.
template <typename S>
typename GradTape<S>::Var layer_norm(GradTape<S>& t, typename GradTape<S>::Var x, typename GradTape<S>::Var gain,
                                     typename GradTape<S>::Var bias, S eps) {
    if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const Tensor<S>& xv = t.value(x);
    const Tensor<S>& gv = t.value(gain);
    const Tensor<S>& bv = t.value(bias);
    if (gv.size() != xv.cols() || bv.size() != xv.cols()) {
        throw std::invalid_argument("layer_norm: gain/bias " + gv.shape_str() + "/" + bv.shape_str() +
                                    " do not match last axis of " + xv.shape_str());
    }
    const Index n = xv.rows(), d = xv.cols();
    MatrixX<S> xhat(n, d);
    MatrixX<S> inv_sd(n, 1);
    for (Index i = 0; i < n; ++i) {
        const S mean = xv.mat().row(i).mean();
        const S var = (xv.mat().row(i).array() - mean).square().sum() / S(d);
        inv_sd(i, 0) = S(1) / std::sqrt(var + eps);
        xhat.row(i) = (xv.mat().row(i).array() - mean) * inv_sd(i, 0);
    }
    MatrixX<S> y = (xhat.array().rowwise() * gv.mat().reshaped(1, d).array().row(0)).rowwise() +
                   bv.mat().reshaped(1, d).array().row(0);
    auto r = t.push(Tensor<S>(xv.shape(), std::move(y)), t.any_needs_grad(x, gain, bias));
    if (t.needs_grad(r)) {
        t.record([&t, x, gain, bias, r, xhat = std::move(xhat), inv_sd = std::move(inv_sd)] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            const Index n = g.rows(), d = g.cols();
            const auto grow = t.value(gain).mat().reshaped(1, d);
            if (t.needs_grad(gain)) {
                t.grad_ref(gain.id).mat().reshaped(1, d) += (g.array() * xhat.array()).colwise().sum().matrix();
            }
            if (t.needs_grad(bias)) {
                t.grad_ref(bias.id).mat().reshaped(1, d) += g.colwise().sum();
            }
            if (t.needs_grad(x)) {
                MatrixX<S>& gx = t.grad_ref(x.id).mat();
                for (Index i = 0; i < n; ++i) {
                    Eigen::Array<S, 1, Eigen::Dynamic> gy = g.row(i).array() * grow.array().row(0);
                    const S mean_gy = gy.mean();
                    const S mean_gyx = (gy * xhat.row(i).array()).mean();
                    gx.row(i) += ((gy - mean_gy - xhat.row(i).array() * mean_gyx) * inv_sd(i, 0)).matrix();
                }
            }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// structure

/// Concatenate along the last axis.
template <typename S>
typename GradTape<S>::Var concat_cols(GradTape<S>& t, typename GradTape<S>::Var a, typename GradTape<S>::Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (av.rows() != bv.rows()) {
        throw std::invalid_argument("concat_cols: leading extents differ: " + av.shape_str() + " vs " +
                                    bv.shape_str());
    }
    MatrixX<S> out(av.rows(), av.cols() + bv.cols());
    out.leftCols(av.cols()) = av.mat();
    out.rightCols(bv.cols()) = bv.mat();
    std::vector<Index> shape = av.shape();
    shape.back() += bv.shape().back();
    auto r = t.push(Tensor<S>(std::move(shape), std::move(out)), t.any_needs_grad(a, b));
    if (t.needs_grad(r)) {
        const Index ca = av.cols(), cb = bv.cols();
        t.record([&t, a, b, r, ca, cb] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            if (t.needs_grad(a)) t.grad_ref(a.id).mat() += g.leftCols(ca);
            if (t.needs_grad(b)) t.grad_ref(b.id).mat() += g.rightCols(cb);
        });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var concat_rows(GradTape<S>& t, const std::vector<typename GradTape<S>::Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Index rows = 0;
    const Index cols = t.value(parts[0]).cols();
    bool needs = false;
    for (auto p : parts) {
        if (t.value(p).cols() != cols) {
            throw std::invalid_argument("concat_rows: column extents differ: " + t.value(parts[0]).shape_str() +
                                        " vs " + t.value(p).shape_str());
        }
        rows += t.value(p).rows();
        needs = needs || t.needs_grad(p);
    }
    MatrixX<S> out(rows, cols);
    Index at = 0;
    for (auto p : parts) {
        out.middleRows(at, t.value(p).rows()) = t.value(p).mat();
        at += t.value(p).rows();
    }
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), needs);
    if (t.needs_grad(r)) {
        t.record([&t, parts, r] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            Index at = 0;
            for (auto p : parts) {
                const Index pr = t.value(p).rows();
                if (t.needs_grad(p)) t.grad_ref(p.id).mat() += g.middleRows(at, pr);
                at += pr;
            }
        });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var slice_cols(GradTape<S>& t, typename GradTape<S>::Var x, Index c0, Index w) {
    const Tensor<S>& xv = t.value(x);
    if (c0 < 0 || w <= 0 || c0 + w > xv.cols()) {
        throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + w) +
                                    ") out of range for " + xv.shape_str());
    }
    auto r = t.push(Tensor<S>::from_matrix(xv.mat().middleCols(c0, w)), t.needs_grad(x));
    if (t.needs_grad(r)) {
        t.record([&t, x, r, c0, w] { t.grad_ref(x.id).mat().middleCols(c0, w) += t.grad_ref(r.id).mat(); });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var gather_rows(GradTape<S>& t, typename GradTape<S>::Var x, std::vector<int> idx) {
    const Tensor<S>& xv = t.value(x);
    MatrixX<S> out(static_cast<Index>(idx.size()), xv.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= xv.rows()) {
            throw std::invalid_argument("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                                        xv.shape_str());
        }
        out.row(static_cast<Index>(i)) = xv.mat().row(idx[i]);
    }
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), t.needs_grad(x));
    if (t.needs_grad(r)) {
        t.record([&t, x, r, idx = std::move(idx)] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            MatrixX<S>& gx = t.grad_ref(x.id).mat();
            for (size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Index>(i));
        });
    }
    return r;
}

/// Place src rows at the given row indices of an n_rows-tall zero matrix.
template <typename S>
typename GradTape<S>::Var scatter_rows(GradTape<S>& t, typename GradTape<S>::Var src, std::vector<int> idx,
                                       Index n_rows) {
    const Tensor<S>& sv = t.value(src);
    if (static_cast<Index>(idx.size()) != sv.rows()) {
        throw std::invalid_argument("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                                    sv.shape_str());
    }
    MatrixX<S> out = MatrixX<S>::Zero(n_rows, sv.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n_rows) {
            throw std::invalid_argument("scatter_rows: index " + std::to_string(idx[i]) + " out of range");
        }
        out.row(idx[i]) += sv.mat().row(static_cast<Index>(i));
    }
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), t.needs_grad(src));
    if (t.needs_grad(r)) {
        t.record([&t, src, r, idx = std::move(idx)] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            MatrixX<S>& gs = t.grad_ref(src.id).mat();
            for (size_t i = 0; i < idx.size(); ++i) gs.row(static_cast<Index>(i)) += g.row(idx[i]);
        });
    }
    return r;
}

/// Row i of the result is visible.row(row_map[i]) when row_map[i] >= 0, else
/// the (single-row) filler token.
template <typename S>
typename GradTape<S>::Var compose_rows(GradTape<S>& t, typename GradTape<S>::Var visible,
                                       typename GradTape<S>::Var filler, std::vector<int> row_map) {
    const Tensor<S>& vv = t.value(visible);
    const Tensor<S>& fv = t.value(filler);
    if (fv.rows() != 1 || fv.cols() != vv.cols()) {
        throw std::invalid_argument("compose_rows: filler " + fv.shape_str() + " does not match " + vv.shape_str());
    }
    MatrixX<S> out(static_cast<Index>(row_map.size()), vv.cols());
    for (size_t i = 0; i < row_map.size(); ++i) {
        const int j = row_map[i];
        if (j >= vv.rows()) throw std::invalid_argument("compose_rows: index " + std::to_string(j) + " out of range");
        out.row(static_cast<Index>(i)) = j < 0 ? fv.mat().row(0) : vv.mat().row(j);
    }
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), t.any_needs_grad(visible, filler));
    if (t.needs_grad(r)) {
        t.record([&t, visible, filler, r, row_map = std::move(row_map)] {
            const MatrixX<S>& g = t.grad_ref(r.id).mat();
            for (size_t i = 0; i < row_map.size(); ++i) {
                const int j = row_map[i];
                if (j < 0) {
                    if (t.needs_grad(filler)) t.grad_ref(filler.id).mat().row(0) += g.row(static_cast<Index>(i));
                } else if (t.needs_grad(visible)) {
                    t.grad_ref(visible.id).mat().row(j) += g.row(static_cast<Index>(i));
                }
            }
        });
    }
    return r;
}

template <typename S>
typename GradTape<S>::Var repeat_rows(GradTape<S>& t, typename GradTape<S>::Var row, Index n) {
    const Tensor<S>& rv = t.value(row);
    if (rv.rows() != 1) throw std::invalid_argument("repeat_rows: input must be a single row, got " + rv.shape_str());
    MatrixX<S> out = rv.mat().replicate(n, 1);
    auto r = t.push(Tensor<S>::from_matrix(std::move(out)), t.needs_grad(row));
    if (t.needs_grad(r)) {
        t.record([&t, row, r] { t.grad_ref(row.id).mat().row(0) += t.grad_ref(r.id).mat().colwise().sum(); });
    }
    return r;
}

// ---------------------------------------------------------------------------
// losses

namespace detail {

/// Expand a {0,1} weight mask to the full shape of x. Accepts the same shape
/// or a per-row mask of length rows(x).
template <typename S>
MatrixX<S> expand_mask(const Tensor<S>& mask, const Tensor<S>& x) {
    if (mask.same_shape(x)) return mask.mat();
    if (mask.size() == x.rows()) {
        return mask.mat().reshaped(x.rows(), 1).replicate(1, x.cols());
    }
    throw std::invalid_argument("mse: mask " + mask.shape_str() + " does not broadcast over " + x.shape_str());
}

}  // namespace detail

/// Mean squared error over positions where weight_mask is 1.
template <typename S>
typename GradTape<S>::Var mse(GradTape<S>& t, typename GradTape<S>::Var pred, typename GradTape<S>::Var target,
                              const Tensor<S>& weight_mask) {
    require_same_shape(t.value(pred), t.value(target), "mse");
    MatrixX<S> w = detail::expand_mask(weight_mask, t.value(pred));
    const S count = w.sum();
    if (count <= S(0)) throw std::invalid_argument("mse: empty mask");
    MatrixX<S> diff = t.value(pred).mat() - t.value(target).mat();
    const S val = diff.cwiseProduct(diff).cwiseProduct(w).sum() / count;
    auto r = t.push(Tensor<S>::scalar(val), t.any_needs_grad(pred, target));
    if (t.needs_grad(r)) {
        t.record([&t, pred, target, r, w = std::move(w), count] {
            const S g = t.grad_ref(r.id).mat()(0, 0);
            MatrixX<S> d = (t.value(pred).mat() - t.value(target).mat()).cwiseProduct(w) * (S(2) * g / count);
            if (t.needs_grad(pred)) t.grad_ref(pred.id).mat() += d;
            if (t.needs_grad(target)) t.grad_ref(target.id).mat() -= d;
        });
    }
    return r;
}

/// Plain mean squared error over every element.
template <typename S>
typename GradTape<S>::Var mse(GradTape<S>& t, typename GradTape<S>::Var pred, typename GradTape<S>::Var target) {
    return mse(t, pred, target, Tensor<S>::ones(t.value(pred).shape()));
}

/// Sum of scalars divided by their count, accumulated in index order.
template <typename S>
typename GradTape<S>::Var mean_of(GradTape<S>& t, const std::vector<typename GradTape<S>::Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_of: no inputs");
    auto acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(t, acc, xs[i]);
    return scale(t, acc, S(1) / S(xs.size()));
}

}  // namespace jepat
