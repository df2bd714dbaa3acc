#pragma once

#include "jepat/forward.hpp"
#include "jepat/model.hpp"
#include "jepat/objectives.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace jepat {

struct OptimizerConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 200;
};

inline double warmup_factor(int64_t step, int warmup_steps) {
    if (warmup_steps <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(step + 1) / warmup_steps);
}

template <typename S>
struct OptimizerState {
    int64_t step = 0;
    std::vector<Tensor<S>> m;  // first moments, registry order
    std::vector<Tensor<S>> v;  // second moments
};

template <typename S>
OptimizerState<S> init_optimizer_state(ModelParams<S>& params) {
    OptimizerState<S> st;
    for (const auto& ref : param_registry(params)) {
        st.m.push_back(Tensor<S>::zeros(ref.tensor->shape()));
        st.v.push_back(Tensor<S>::zeros(ref.tensor->shape()));
    }
    return st;
}

/// Decoupled-weight-decay Adam with bias correction and linear warmup.
template <typename S>
void optimizer_step(ModelParams<S>& params, const std::vector<Tensor<S>>& grads, OptimizerState<S>& st,
                    const OptimizerConfig& cfg) {
    auto reg = param_registry(params);
    if (grads.size() != reg.size() || st.m.size() != reg.size()) {
        throw std::invalid_argument("optimizer_step: gradient/state count does not match parameter registry");
    }
    const double lr = cfg.lr * warmup_factor(st.step, cfg.warmup_steps);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < reg.size(); ++i) {
        if (!grads[i].same_shape(*reg[i].tensor)) {
            throw std::invalid_argument("optimizer_step: gradient shape mismatch for " + reg[i].name);
        }
        if (!grads[i].all_finite()) {
            throw std::runtime_error("optimizer_step: non-finite gradient for " + reg[i].name);
        }
        auto& m = st.m[i].mat();
        auto& v = st.v[i].mat();
        const auto& g = grads[i].mat();
        m = S(cfg.beta1) * m + S(1.0 - cfg.beta1) * g;
        v = S(cfg.beta2) * v + S(1.0 - cfg.beta2) * g.cwiseProduct(g);
        auto& p = reg[i].tensor->mat();
        p -= (S(lr) * ((m / S(bc1)).array() / ((v / S(bc2)).array().sqrt() + S(cfg.eps)) +
                       S(cfg.weight_decay) * p.array()))
                 .matrix();
    }
}

/// ema <- m * ema + (1 - m) * params, every trainable tensor.
template <typename S>
void ema_update(const ModelParams<S>& params, ModelParams<S>& ema, double momentum) {
    if (momentum < 0.0 || momentum > 1.0) {
        throw std::invalid_argument("ema_update: momentum " + std::to_string(momentum) + " outside [0,1]");
    }
    auto src = param_registry(const_cast<ModelParams<S>&>(params));
    auto dst = param_registry(ema);
    if (src.size() != dst.size()) throw std::invalid_argument("ema_update: parameter sets differ");
    for (size_t i = 0; i < src.size(); ++i) {
        if (!src[i].tensor->same_shape(*dst[i].tensor)) {
            throw std::invalid_argument("ema_update: shape mismatch for " + src[i].name);
        }
        dst[i].tensor->mat() = S(momentum) * dst[i].tensor->mat() + S(1.0 - momentum) * src[i].tensor->mat();
    }
}

/// Scales gradients in place when their global norm exceeds max_norm.
/// Returns the pre-clip norm (accumulated in double).
template <typename S>
double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) sq += static_cast<double>(g.mat().template cast<double>().squaredNorm());
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const S k = static_cast<S>(max_norm / norm);
        for (auto& g : grads) g.mat() *= k;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainRecord {
    int64_t step = 0;
    double l_fm = 0.0;
    double l_jepa = 0.0;
    double l_total = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct TrainConfig {
    int64_t steps = 5000;
    int batch_size = 64;
    OptimizerConfig opt;
    double ema_momentum = 0.996;
    double clip_norm = 1.0;
    double caption_dropout = 0.0;
    int64_t checkpoint_every = 1000;
    uint64_t seed = 7;
    LossWeights loss;
    AblationFlags flags;
};

template <typename S>
struct TrainSample {
    Tensor<S> tokens;  // folded image latents, n_tokens x d_tok
    CaptionInputs<S> caption;
};

template <typename S>
struct TrainState {
    ModelParams<S> params;
    ModelParams<S> ema;
    OptimizerState<S> opt;
    Rng rng{0};
    int64_t step = 0;
};

template <typename S>
TrainState<S> init_train_state(const ModelConfig& mcfg, const TrainConfig& tcfg) {
    TrainState<S> st;
    st.rng = Rng(tcfg.seed);
    st.params = init_model_params<S>(mcfg, st.rng);
    st.ema = st.params;
    st.opt = init_optimizer_state(st.params);
    st.step = 0;
    return st;
}

using RecordSink = std::function<void(const TrainRecord&)>;

template <typename S>
using CheckpointHook = std::function<void(const TrainState<S>&)>;

/// Indices of one batch. Uses the whole dataset in order when it fits,
/// otherwise a without-replacement draw from the step's rng.
inline std::vector<int> draw_batch(int dataset_size, int batch_size, Rng& rng) {
    std::vector<int> idx;
    if (batch_size >= dataset_size) {
        idx.resize(static_cast<size_t>(dataset_size));
        for (int i = 0; i < dataset_size; ++i) idx[static_cast<size_t>(i)] = i;
        return idx;
    }
    std::vector<int> pool(static_cast<size_t>(dataset_size));
    for (int i = 0; i < dataset_size; ++i) pool[static_cast<size_t>(i)] = i;
    for (int i = 0; i < batch_size; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(dataset_size - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        idx.push_back(pool[static_cast<size_t>(i)]);
    }
    return idx;
}

/// One optimization step over a batch: forward both objectives per sample,
/// backward the batch-mean total, clip, Adam, EMA. Per-sample rng draws
/// happen in a fixed order (batch indices, then per sample: mask plan,
/// caption dropout when enabled, flow seed) so runs are reproducible.
template <typename S>
TrainRecord train_step(TrainState<S>& st, const std::vector<TrainSample<S>>& data, const ModelConfig& mcfg,
                       const TrainConfig& tcfg) {
    if (data.empty()) throw std::invalid_argument("train_step: empty dataset");
    const auto t0 = std::chrono::steady_clock::now();

    const auto batch = draw_batch(static_cast<int>(data.size()), tcfg.batch_size, st.rng);
    GradTape<S> tape;
    auto mvars = register_leaves(tape, st.params);

    std::vector<typename GradTape<S>::Var> totals;
    double fm_sum = 0.0, jepa_sum = 0.0;
    for (int i : batch) {
        const TrainSample<S>& sample = data[static_cast<size_t>(i)];
        MaskPlan plan = sample_mask_plan(static_cast<int>(mcfg.n_tokens()), st.rng);
        bool dropped = false;
        if (tcfg.caption_dropout > 0.0) dropped = st.rng.uniform() < tcfg.caption_dropout;
        const uint64_t fm_seed = st.rng.next_u64();
        auto losses = sample_losses(tape, sample.tokens, sample.caption, plan, mvars, st.ema, mcfg, tcfg.flags,
                                    tcfg.loss, fm_seed, dropped);
        totals.push_back(losses.l_total);
        fm_sum += static_cast<double>(tape.value(losses.l_fm).value());
        jepa_sum += static_cast<double>(tape.value(losses.l_jepa).value());
    }
    auto batch_loss = mean_of(tape, totals);
    const double loss_value = static_cast<double>(tape.value(batch_loss).value());
    if (!std::isfinite(loss_value)) {
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(st.step));
    }
    tape.backward(batch_loss);

    std::vector<Tensor<S>> grads;
    for (auto v : var_list<S>(mvars)) grads.push_back(tape.grad(v));
    const double grad_norm = clip_global_norm(grads, tcfg.clip_norm);

    TrainRecord rec;
    rec.step = st.step;
    rec.lr = tcfg.opt.lr * warmup_factor(st.opt.step, tcfg.opt.warmup_steps);
    optimizer_step(st.params, grads, st.opt, tcfg.opt);
    ema_update(st.params, st.ema, tcfg.ema_momentum);
    st.step += 1;

    rec.l_fm = fm_sum / static_cast<double>(batch.size());
    rec.l_jepa = jepa_sum / static_cast<double>(batch.size());
    rec.l_total = loss_value;
    rec.grad_norm = grad_norm;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

/// Run n_steps steps, reporting each TrainRecord and checkpointing every
/// checkpoint_every steps (and never at step 0).
template <typename S>
void train_steps(TrainState<S>& st, const std::vector<TrainSample<S>>& data, const ModelConfig& mcfg,
                 const TrainConfig& tcfg, int64_t n_steps, const RecordSink& sink = {},
                 const CheckpointHook<S>& checkpoint = {}) {
    for (int64_t k = 0; k < n_steps; ++k) {
        TrainRecord rec = train_step(st, data, mcfg, tcfg);
        if (sink) sink(rec);
        if (checkpoint && tcfg.checkpoint_every > 0 && st.step % tcfg.checkpoint_every == 0) checkpoint(st);
    }
}

/// Fold the images and embed the captions once, up front.
template <typename S, typename DatasetT>
std::vector<TrainSample<S>> prepare_samples(const DatasetT& dataset, const TextStub<S>& stub, Index patch_size) {
    std::vector<TrainSample<S>> out;
    for (size_t i = 0; i < dataset.images.size(); ++i) {
        TrainSample<S> s;
        s.tokens = fold_image(dataset.images[i], patch_size);
        s.caption = CaptionInputs<S>::make(stub, dataset.captions[i]);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace jepat
