#pragma once

#include "jepat/forward.hpp"
#include "jepat/tokenization.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace jepat {

struct SampleConfig {
    int steps = 64;      // reveal iterations
    int substeps = 4;    // Euler steps per revealed group
    bool guidance = false;
    double guidance_scale = 3.0;
};

/// Tokens finalized after `step` under the ceil-cosine schedule. Reaches n
/// exactly at step `steps - 1`.
inline int unmask_cumulative(int step, int steps, int n) {
    if (steps < 1 || step < 0 || step >= steps) {
        throw std::invalid_argument("unmask_cumulative: step " + std::to_string(step) + " outside [0," +
                                    std::to_string(steps) + ")");
    }
    const double frac = static_cast<double>(step + 1) / static_cast<double>(steps);
    const double c = std::ceil(static_cast<double>(n) * (1.0 - std::cos(std::numbers::pi / 2.0 * frac)));
    return std::clamp(static_cast<int>(c), 0, n);
}

template <typename S>
struct GenerationState {
    Tensor<S> latents;              // n x d_tok; unrevealed rows hold the noise being transported
    std::vector<uint8_t> revealed;  // 1 = committed
    int step = 0;

    int revealed_count() const {
        int c = 0;
        for (uint8_t b : revealed) c += b;
        return c;
    }
};

/// Classifier-free combination. Exact passthrough at the endpoints.
template <typename S>
Tensor<S> guided_predict(const Tensor<S>& cond, const Tensor<S>& uncond, double scale) {
    if (scale == 1.0) return cond;
    if (scale == 0.0) return uncond;
    return Tensor<S>(cond.shape(), uncond.mat() + S(scale) * (cond.mat() - uncond.mat()));
}

/// A trained model bound to one caption for iterative generation.
template <typename S>
struct SamplerModel {
    const ModelParams<S>* params = nullptr;
    const ModelConfig* cfg = nullptr;
    AblationFlags flags;
    Tensor<S> raw;      // caption embedding
    Tensor<S> neutral;  // null caption
    bool guidance = false;
    double guidance_scale = 3.0;

    /// Clean-target prediction for the current state. Revealed rows are clean
    /// context; unrevealed rows enter as the denoising input.
    Tensor<S> predict(const GenerationState<S>& state) const {
        MaskPlan plan;
        const int n = static_cast<int>(state.revealed.size());
        plan.mask.resize(static_cast<size_t>(n));
        int masked = 0;
        for (int i = 0; i < n; ++i) {
            plan.mask[static_cast<size_t>(i)] = state.revealed[static_cast<size_t>(i)] ? 0 : 1;
            masked += plan.mask[static_cast<size_t>(i)];
        }
        plan.order.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) plan.order[static_cast<size_t>(i)] = i;
        plan.ratio = static_cast<double>(masked) / n;

        Tensor<S> cond = predict_v0(*params, *cfg, flags, raw, neutral, plan, state.latents);
        if (!guidance) return cond;
        Tensor<S> uncond = predict_v0(*params, *cfg, flags, neutral, neutral, plan, state.latents);
        return guided_predict(cond, uncond, guidance_scale);
    }
};

/// Integrate the selected rows from their current noise to the model's clean
/// prediction: K Euler steps of the velocity (v0_hat - x) / (1 - t) on the
/// linear path, committing the final prediction exactly at t = 1.
template <typename S>
void denoise_group(GenerationState<S>& state, const std::vector<int>& group, const SamplerModel<S>& model,
                   int substeps) {
    if (group.empty()) throw std::invalid_argument("denoise_group: empty group");
    const int k_steps = std::max(1, substeps);
    for (int k = 0; k < k_steps; ++k) {
        const Tensor<S> v0_hat = model.predict(state);
        if (k == k_steps - 1) {
            for (int g : group) state.latents.mat().row(g) = v0_hat.mat().row(g);
            break;
        }
        const double t = static_cast<double>(k) / k_steps;
        const double factor = 1.0 / (1.0 - std::min(t, 1.0 - 1e-3));
        const S gain = S(factor / k_steps);
        for (int g : group) {
            state.latents.mat().row(g) += gain * (v0_hat.mat().row(g) - state.latents.mat().row(g));
        }
    }
    for (int g : group) state.revealed[static_cast<size_t>(g)] = 1;
}

template <typename S>
struct GenerateResult {
    ImageGrid<S> image;
    Tensor<S> tokens;
};

/// Full text-to-image pipeline: noise-initialized latents, cosine reveal
/// schedule, per-group flow integration, patch unfold. Deterministic in
/// (seed, caption, params, config).
template <typename S>
GenerateResult<S> generate(const std::string& caption, const ModelParams<S>& params, const ModelConfig& mcfg,
                           const AblationFlags& flags, const TextStub<S>& stub, const SampleConfig& scfg,
                           uint64_t seed) {
    mcfg.validate();
    if (scfg.steps < 1) throw std::invalid_argument("generate: sample steps must be >= 1");
    const int n = static_cast<int>(mcfg.n_tokens());

    Rng rng(seed);
    GenerationState<S> state;
    state.latents = Tensor<S>({mcfg.n_tokens(), mcfg.d_tok()});
    rng.fill_normal(state.latents);
    state.revealed.assign(static_cast<size_t>(n), 0);

    SamplerModel<S> model;
    model.params = &params;
    model.cfg = &mcfg;
    model.flags = flags;
    model.raw = stub.embed(caption);
    model.neutral = Tensor<S>::zeros({mcfg.d_txt});
    model.guidance = scfg.guidance;
    model.guidance_scale = scfg.guidance_scale;

    for (int step = 0; step < scfg.steps; ++step) {
        state.step = step;
        const int target = unmask_cumulative(step, scfg.steps, n);
        const int need = target - state.revealed_count();
        if (need <= 0) continue;

        std::vector<int> pool;
        for (int i = 0; i < n; ++i) {
            if (!state.revealed[static_cast<size_t>(i)]) pool.push_back(i);
        }
        for (int i = 0; i < need; ++i) {
            const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(pool.size() - i)));
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        std::vector<int> group(pool.begin(), pool.begin() + need);
        denoise_group(state, group, model, scfg.substeps);
    }

    GenerateResult<S> out;
    out.tokens = state.latents;
    out.image = unfold_tokens(state.latents, mcfg.patch_size, mcfg.image_size, mcfg.image_size, mcfg.channels);
    out.image.pixels.mat() = out.image.pixels.mat().cwiseMax(S(0)).cwiseMin(S(1));
    return out;
}

}  // namespace jepat
