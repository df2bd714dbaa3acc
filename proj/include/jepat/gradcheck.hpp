#pragma once

#include "jepat/forward.hpp"
#include "jepat/training.hpp"

#include <string>
#include <vector>

namespace jepat {

struct GradCheckOptions {
    double fd_step = 1e-5;
    double threshold = 1e-4;
    std::string corrupt_group;  // negative-control fixture: bias this group's analytic gradients
    LossWeights weights;
    AblationFlags flags;
    uint64_t seed = 42;
};

struct GradCheckResult {
    std::string group;
    double worst_rel_err = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckResult> groups;
    double threshold = 0.0;
    double worst = 0.0;
    bool pass = true;
};

namespace detail {

inline ModelConfig gradcheck_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.patch_size = 4;  // 4 tokens of 16 latents
    cfg.d_txt = 8;
    cfg.cond_hidden = 8;
    cfg.enc = EncoderConfig{1, 2, 8, 2, 2};
    cfg.dec = PredictorConfig{1, 2, 8, 2};
    return cfg;
}

}  // namespace detail

/// Central finite differences against the tape gradients for every parameter
/// group of a miniature model, through the full total loss (both objectives,
/// fusion included). Double precision throughout.
inline GradCheckReport grad_check_suite(const GradCheckOptions& opts = {}) {
    const ModelConfig cfg = detail::gradcheck_config();
    const uint64_t fm_seed = 7788;
    LossWeights weights = opts.weights;
    weights.fm_repeat = std::min(weights.fm_repeat, 2);  // coverage is per-parameter, not per-draw

    Rng rng(opts.seed);
    auto params = init_model_params<double>(cfg, rng);
    const auto ema = init_model_params<double>(cfg, rng);  // fixed teacher fixture

    Tensor<double> v0({cfg.n_tokens(), cfg.d_tok()});
    rng.fill_normal(v0, 0.5);
    TextStub<double> stub(Vocabulary::from_captions({"a photo of a red square"}), cfg.d_txt, 3);
    const auto caption = CaptionInputs<double>::make(stub, "a photo of a red square");
    const MaskPlan plan = make_mask_plan(static_cast<int>(cfg.n_tokens()), 0.75, rng);

    auto eval_loss = [&](const ModelParams<double>& p) {
        GradTape<double> t(false);
        auto m = register_constants(t, p);
        auto losses = sample_losses(t, v0, caption, plan, m, ema, cfg, opts.flags, weights, fm_seed);
        return t.value(losses.l_total).value();
    };

    // analytic gradients in one backward pass
    GradTape<double> tape;
    auto mvars = register_leaves(tape, params);
    auto losses = sample_losses(tape, v0, caption, plan, mvars, ema, cfg, opts.flags, weights, fm_seed);
    tape.backward(losses.l_total);

    GradCheckReport report;
    report.threshold = opts.threshold;
    auto reg = param_registry(params);
    auto vars = var_list<double>(mvars);
    for (size_t gi = 0; gi < reg.size(); ++gi) {
        Tensor<double> analytic = tape.grad(vars[gi]);
        if (reg[gi].name == opts.corrupt_group) analytic.mat().array() += 1e-2;

        GradCheckResult res;
        res.group = reg[gi].name;
        Tensor<double>& target = *reg[gi].tensor;
        for (Index i = 0; i < target.size(); ++i) {
            const double keep = target.data()[i];
            target.data()[i] = keep + opts.fd_step;
            const double up = eval_loss(params);
            target.data()[i] = keep - opts.fd_step;
            const double dn = eval_loss(params);
            target.data()[i] = keep;
            const double fd = (up - dn) / (2.0 * opts.fd_step);
            const double an = analytic.data()[i];
            const double rel = std::abs(an - fd) / std::max(1e-4, std::abs(an) + std::abs(fd));
            res.worst_rel_err = std::max(res.worst_rel_err, rel);
        }
        res.pass = res.worst_rel_err < opts.threshold;
        report.worst = std::max(report.worst, res.worst_rel_err);
        report.pass = report.pass && res.pass;
        report.groups.push_back(std::move(res));
    }
    return report;
}

}  // namespace jepat
