#pragma once

#include "jepat/grad_tape.hpp"
#include "jepat/rng.hpp"
#include "jepat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace jepat {

/// Which token positions are hidden from the context encoder. The masked set
/// is the first masked_count() entries of `order`, a fresh permutation per
/// sample.
struct MaskPlan {
    std::vector<uint8_t> mask;  // 1 = masked
    std::vector<int> order;
    double ratio = 0.0;

    int n() const { return static_cast<int>(mask.size()); }

    int masked_count() const {
        int m = 0;
        for (uint8_t b : mask) m += b;
        return m;
    }

    std::vector<int> masked_indices() const {
        std::vector<int> out;
        for (int i = 0; i < n(); ++i) {
            if (mask[static_cast<size_t>(i)]) out.push_back(i);
        }
        return out;
    }

    std::vector<int> visible_indices() const {
        std::vector<int> out;
        for (int i = 0; i < n(); ++i) {
            if (!mask[static_cast<size_t>(i)]) out.push_back(i);
        }
        return out;
    }

    /// Visible tokens the encoder consumes. When everything is masked the
    /// last token of the shuffle order is kept visible so the encoder always
    /// has input; the loss mask is untouched by this.
    std::vector<int> context_indices() const {
        auto vis = visible_indices();
        if (vis.empty()) vis.push_back(order.back());
        return vis;
    }

    template <typename S>
    Tensor<S> row_mask() const {
        Tensor<S> w({static_cast<Index>(mask.size())});
        for (size_t i = 0; i < mask.size(); ++i) w.data()[i] = static_cast<S>(mask[i]);
        return w;
    }
};

/// Masking ratio from a Gaussian centered at 1.0 (std 0.25) conditioned on
/// [0.7, 1.0]; the masked set is a prefix of a fresh permutation.
inline MaskPlan sample_mask_plan(int n, Rng& rng) {
    if (n < 2) throw std::invalid_argument("sample_mask_plan: need at least 2 tokens, got " + std::to_string(n));
    MaskPlan plan;
    plan.ratio = rng.trunc_normal(1.0, 0.25, 0.7, 1.0);
    plan.order = rng.permutation(n);
    plan.mask.assign(static_cast<size_t>(n), 0);
    const int m = std::max<int>(1, static_cast<int>(std::llround(plan.ratio * n)));
    for (int i = 0; i < m; ++i) plan.mask[static_cast<size_t>(plan.order[static_cast<size_t>(i)])] = 1;
    return plan;
}

/// Same construction at a caller-chosen ratio (evaluation, tests).
inline MaskPlan make_mask_plan(int n, double ratio, Rng& rng) {
    if (n < 2) throw std::invalid_argument("make_mask_plan: need at least 2 tokens, got " + std::to_string(n));
    MaskPlan plan;
    plan.ratio = ratio;
    plan.order = rng.permutation(n);
    plan.mask.assign(static_cast<size_t>(n), 0);
    const int m = std::clamp<int>(static_cast<int>(std::llround(ratio * n)), 1, n);
    for (int i = 0; i < m; ++i) plan.mask[static_cast<size_t>(plan.order[static_cast<size_t>(i)])] = 1;
    return plan;
}

// ---------------------------------------------------------------------------
// flow matching

/// Linear path between noise and data; times are kept off the endpoints.
inline constexpr double kFlowTimeMin = 1e-4;
inline constexpr double kFlowTimeMax = 1.0 - 1e-4;

template <typename S>
struct FlowSample {
    double t = 0.0;
    Tensor<S> epsilon;
    Tensor<S> v_t;  // (1-t)*epsilon + t*v0
};

template <typename S>
FlowSample<S> draw_flow_sample(const Tensor<S>& v0, Rng& rng) {
    FlowSample<S> fs;
    fs.t = std::clamp(rng.uniform(), kFlowTimeMin, kFlowTimeMax);
    fs.epsilon = Tensor<S>(v0.shape());
    rng.fill_normal(fs.epsilon);
    fs.v_t = Tensor<S>(v0.shape(), fs.epsilon.mat() * S(1.0 - fs.t) + v0.mat() * S(fs.t));
    return fs;
}

// ---------------------------------------------------------------------------
// losses

struct LossWeights {
    double beta = 2.0;         // masked-prediction scale
    double lambda_jepa = 2.0;  // weight of the masked-prediction term in the total
    int fm_repeat = 4;         // noise/time draws per sample
};

/// Mean squared difference over masked rows only, computed directly.
template <typename S>
S masked_row_mse(const Tensor<S>& a, const Tensor<S>& b, const MaskPlan& plan) {
    require_same_shape(a, b, "masked_row_mse");
    if (a.rows() != plan.n()) {
        throw std::invalid_argument("masked_row_mse: " + std::to_string(plan.n()) + "-token plan against " +
                                    a.shape_str());
    }
    const int m = plan.masked_count();
    if (m == 0) throw std::invalid_argument("masked_row_mse: empty mask");
    S acc = S(0);
    for (int i = 0; i < plan.n(); ++i) {
        if (!plan.mask[static_cast<size_t>(i)]) continue;
        acc += (a.mat().row(i) - b.mat().row(i)).squaredNorm();
    }
    return acc / (S(m) * S(a.cols()));
}

/// beta * masked mean squared difference between student and teacher rows.
/// The teacher side carries no gradient by construction.
template <typename S>
S jepa_loss(const Tensor<S>& z_student, const Tensor<S>& z_ema, const MaskPlan& plan, S beta) {
    return beta * masked_row_mse(z_student, z_ema, plan);
}

template <typename S>
typename GradTape<S>::Var jepa_loss(GradTape<S>& t, typename GradTape<S>::Var z_student, const Tensor<S>& z_ema,
                                    const MaskPlan& plan, S beta) {
    if (plan.masked_count() == 0) throw std::invalid_argument("jepa_loss: empty mask");
    auto target = t.constant(z_ema);
    return scale(t, mse(t, z_student, target, plan.row_mask<S>()), beta);
}

/// Sub-seed for the i-th flow draw. fm_repeat=k under seed s decomposes into
/// k single-draw evaluations under seeds s + i*golden.
inline uint64_t fm_subseed(uint64_t seed, int i) {
    uint64_t x = seed + static_cast<uint64_t>(i) * 0x9E3779B97F4A7C15ull;
    return splitmix64(x);
}

/// Conditional flow-matching loss: masked mean squared error between the
/// model's clean-target prediction and v0, averaged over fm_repeat (t, eps)
/// draws. `model` maps (v_t, t) to a predicted v0.
template <typename S, typename F>
S fm_loss(const Tensor<S>& v0, const MaskPlan& plan, F&& model, int fm_repeat, uint64_t seed) {
    if (fm_repeat < 1) throw std::invalid_argument("fm_loss: fm_repeat must be >= 1");
    if (plan.masked_count() == 0) throw std::invalid_argument("fm_loss: empty mask");
    S acc = S(0);
    for (int i = 0; i < fm_repeat; ++i) {
        Rng rng(fm_subseed(seed, i));
        const FlowSample<S> fs = draw_flow_sample(v0, rng);
        const Tensor<S> v_hat = model(fs.v_t, fs.t);
        acc += masked_row_mse(v_hat, v0, plan);
    }
    return acc / S(fm_repeat);
}

/// Tape-route flow-matching loss; `model` maps a (v_t, t) pair to a tape var.
template <typename S, typename F>
typename GradTape<S>::Var fm_loss(GradTape<S>& t, const Tensor<S>& v0, const MaskPlan& plan, F&& model,
                                  int fm_repeat, uint64_t seed) {
    if (fm_repeat < 1) throw std::invalid_argument("fm_loss: fm_repeat must be >= 1");
    if (plan.masked_count() == 0) throw std::invalid_argument("fm_loss: empty mask");
    const Tensor<S> row_mask = plan.template row_mask<S>();
    std::vector<typename GradTape<S>::Var> terms;
    auto v0_const = t.constant(v0);
    for (int i = 0; i < fm_repeat; ++i) {
        Rng rng(fm_subseed(seed, i));
        const FlowSample<S> fs = draw_flow_sample(v0, rng);
        terms.push_back(mse(t, model(fs.v_t, fs.t), v0_const, row_mask));
    }
    return mean_of(t, terms);
}

template <typename S>
S total_loss(S l_fm, S l_jepa, const LossWeights& w) {
    return l_fm + S(w.lambda_jepa) * l_jepa;
}

template <typename S>
typename GradTape<S>::Var total_loss(GradTape<S>& t, typename GradTape<S>::Var l_fm,
                                     typename GradTape<S>::Var l_jepa, const LossWeights& w) {
    return add(t, l_fm, scale(t, l_jepa, S(w.lambda_jepa)));
}

}  // namespace jepat
