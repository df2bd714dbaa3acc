#pragma once

#include "jepat/fusion.hpp"
#include "jepat/model.hpp"
#include "jepat/objectives.hpp"
#include "jepat/tokenization.hpp"

#include <numeric>
#include <vector>

namespace jepat {

/// Ablation switches. text_inject gates every backbone-side text path (the
/// conditioning token prepended to the encoder, the additive injection and
/// cross-attention memory inside the predictor, and the concatenated text
/// channel in the fusion projection); cross_attn gates the post-predictor
/// cross-attention. With both off the forward pass is caption-invariant.
struct AblationFlags {
    bool text_inject = true;
    bool cross_attn = true;
    bool flow_matching = true;
};

/// Trainable projections of one frozen caption embedding.
template <typename S>
struct CondVars {
    typename GradTape<S>::Var c;          // encoder/predictor conditioning vector
    typename GradTape<S>::Var t_emb;      // decoder-dim text embedding
    typename GradTape<S>::Var t_emb_enc;  // encoder-dim text channel for fusion
};

/// MLP (one hidden layer, GELU) for c; separate linear maps for the decoder-
/// and encoder-dim text embeddings. The raw embedding enters as a constant,
/// so no gradient ever reaches the text stub.
template <typename S>
CondVars<S> project_condition(GradTape<S>& t, const Tensor<S>& raw, const ModelVars<S>& m) {
    auto raw_c = t.constant(raw);
    auto h = gelu(t, linear(t, raw_c, m.cond.hidden));
    CondVars<S> out;
    out.c = linear(t, h, m.cond.out);
    out.t_emb = linear(t, raw_c, m.cond.t_emb);
    out.t_emb_enc = linear(t, raw_c, m.fusion.text_enc);
    return out;
}

/// Gather the context tokens of v0, project into the encoder dimension and
/// add positional embeddings.
template <typename S>
typename GradTape<S>::Var encode_visible(GradTape<S>& t, const Tensor<S>& v0, const std::vector<int>& context,
                                         const ModelVars<S>& m) {
    if (context.empty()) throw std::invalid_argument("encode_context: no context tokens");
    auto tokens = gather_rows(t, t.constant(v0), context);
    auto z = linear(t, tokens, m.z_proj);
    return add(t, z, gather_rows(t, m.enc.pos, context));
}

template <typename S>
struct StudentPass {
    typename GradTape<S>::Var ctx;      // encoder output, full sequence
    typename GradTape<S>::Var z_pred;   // predictor output
    typename GradTape<S>::Var z_final;  // post-fusion output
};

/// One full pass: context encoder over visible tokens, predictor over the
/// rebuilt sequence, post-predictor fusion. `backbone` conditions the
/// encoder/predictor and the fusion concat channel; `fusion_text` feeds the
/// fusion cross-attention (kept separate so the two ablations are
/// independent). `latent_state` is the denoising input for flow matching and
/// sampling; the clean masked-prediction pass leaves it null.
template <typename S>
StudentPass<S> student_pass(GradTape<S>& t, const Tensor<S>& v0, const MaskPlan& plan, const CondVars<S>& backbone,
                            const CondVars<S>& fusion_text, const ModelVars<S>& m, const ModelConfig& cfg,
                            const AblationFlags& flags, const Tensor<S>* latent_state = nullptr,
                            ForwardTrace<S>* trace = nullptr) {
    StudentPass<S> out;
    auto visible = encode_visible(t, v0, plan.context_indices(), m);
    out.ctx = encode_context(t, visible, backbone.c, m.enc, cfg.enc, trace);
    out.z_pred = predict_tokens(t, out.ctx, backbone.c, backbone.t_emb, plan, m, cfg, latent_state, trace);
    out.z_final = fuse(t, out.z_pred, fusion_text.t_emb, backbone.t_emb_enc, m.fusion, cfg.dec.heads,
                       flags.cross_attn, trace);
    return out;
}

/// Teacher targets: the EMA encoder runs over every token (no mask) and the
/// token rows of its output are the regression targets. Never recorded on a
/// gradient tape.
template <typename S>
Tensor<S> ema_targets(const Tensor<S>& v0, const Tensor<S>& backbone_raw, const ModelParams<S>& ema,
                      const ModelConfig& cfg) {
    GradTape<S> t(false);
    auto m = register_constants(t, ema);
    auto cond = project_condition(t, backbone_raw, m);
    std::vector<int> all(static_cast<size_t>(cfg.n_tokens()));
    std::iota(all.begin(), all.end(), 0);
    auto ctx = encode_context(t, encode_visible(t, v0, all, m), cond.c, m.enc, cfg.enc);
    std::vector<int> token_rows(static_cast<size_t>(cfg.n_tokens()));
    std::iota(token_rows.begin(), token_rows.end(), 1 + cfg.enc.buffer_len);
    return t.value(gather_rows(t, ctx, token_rows));
}

/// Raw embeddings feeding one training/inference step. The neutral embedding
/// (all zeros) is the null caption used by ablations and caption dropout.
template <typename S>
struct CaptionInputs {
    Tensor<S> raw;
    Tensor<S> neutral;

    static CaptionInputs make(const TextStub<S>& stub, const std::string& caption) {
        return {stub.embed(caption), Tensor<S>::zeros({stub.d_txt()})};
    }
};

/// Both loss terms of one sample on the tape. Flow matching runs fm_repeat
/// passes with fresh (t, eps) draws; the masked-prediction pass runs clean.
template <typename S>
struct SampleLosses {
    typename GradTape<S>::Var l_fm;
    typename GradTape<S>::Var l_jepa;
    typename GradTape<S>::Var l_total;
};

template <typename S>
SampleLosses<S> sample_losses(GradTape<S>& t, const Tensor<S>& v0, const CaptionInputs<S>& caption,
                              const MaskPlan& plan, const ModelVars<S>& m, const ModelParams<S>& ema,
                              const ModelConfig& cfg, const AblationFlags& flags, const LossWeights& weights,
                              uint64_t fm_seed, bool caption_dropped = false) {
    const Tensor<S>& backbone_raw =
        (flags.text_inject && !caption_dropped) ? caption.raw : caption.neutral;
    const Tensor<S>& fusion_raw = caption_dropped ? caption.neutral : caption.raw;
    auto backbone = project_condition(t, backbone_raw, m);
    auto fusion_text = project_condition(t, fusion_raw, m);

    SampleLosses<S> out;
    auto clean = student_pass(t, v0, plan, backbone, fusion_text, m, cfg, flags);
    out.l_jepa = jepa_loss(t, jepa_head(t, clean.z_final, m), ema_targets(v0, backbone_raw, ema, cfg), plan,
                           S(weights.beta));

    if (flags.flow_matching) {
        out.l_fm = fm_loss(
            t, v0, plan,
            [&](const Tensor<S>& v_t, double) {
                auto pass = student_pass(t, v0, plan, backbone, fusion_text, m, cfg, flags, &v_t);
                return decode_head(t, pass.z_final, m);
            },
            weights.fm_repeat, fm_seed);
    } else {
        out.l_fm = t.constant(Tensor<S>::scalar(S(0)));
    }
    out.l_total = total_loss(t, out.l_fm, out.l_jepa, weights);
    return out;
}

/// Deterministic v0 prediction for sampling and evaluation: unrevealed
/// positions carry `latent_state` as the denoising input, revealed positions
/// are clean context.
template <typename S>
Tensor<S> predict_v0(const ModelParams<S>& params, const ModelConfig& cfg, const AblationFlags& flags,
                     const Tensor<S>& raw, const Tensor<S>& neutral_raw, const MaskPlan& plan,
                     const Tensor<S>& latent_state) {
    GradTape<S> t(false);
    auto m = register_constants(t, params);
    auto backbone = project_condition(t, flags.text_inject ? raw : neutral_raw, m);
    auto fusion_text = project_condition(t, raw, m);
    Tensor<S> clean = latent_state;  // revealed rows double as the visible v0
    auto pass = student_pass(t, clean, plan, backbone, fusion_text, m, cfg, flags, &latent_state);
    return t.value(decode_head(t, pass.z_final, m));
}

}  // namespace jepat
