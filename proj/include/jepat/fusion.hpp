#pragma once

#include "jepat/model.hpp"

namespace jepat {

/// Multi-head cross-attention from (normalized) predicted tokens into the
/// text memory. The memory is a single row, so each query's attention weight
/// is exactly one; the path still runs the full attention machinery.
template <typename S>
typename GradTape<S>::Var cross_attend(GradTape<S>& t, typename GradTape<S>::Var z_pred,
                                       typename GradTape<S>::Var t_emb, const FusionT<typename GradTape<S>::Var>& p,
                                       int heads, ForwardTrace<S>* trace = nullptr) {
    auto q_in = layer_norm(t, z_pred, p.ln_q.gain, p.ln_q.bias, S(1e-5));
    return attention(t, q_in, t_emb, p.attn, heads, trace);
}

/// z_fuse1 = z_pred + z_attended
template <typename S>
typename GradTape<S>::Var residual_fuse(GradTape<S>& t, typename GradTape<S>::Var z_pred,
                                        typename GradTape<S>::Var z_attended) {
    return add(t, z_pred, z_attended);
}

/// Append the broadcast text channel to every row and project back to the
/// decoder dimension: row_i <- [z_fuse1_i ; t_emb_enc] * W_P. W_P's input
/// extent must be exactly d_dec + d_enc.
template <typename S>
typename GradTape<S>::Var concat_project(GradTape<S>& t, typename GradTape<S>::Var z_fuse1,
                                         typename GradTape<S>::Var t_emb_enc,
                                         const FusionT<typename GradTape<S>::Var>& p) {
    const Index d_dec = t.value(z_fuse1).cols();
    const Index d_enc = t.value(t_emb_enc).cols();
    const Tensor<S>& wp = t.value(p.w_p);
    if (wp.rows() != d_dec + d_enc || wp.cols() != d_dec) {
        throw std::invalid_argument("concat_project: W_P " + wp.shape_str() + " must be " +
                                    std::to_string(d_dec + d_enc) + "x" + std::to_string(d_dec));
    }
    auto broadcast = repeat_rows(t, t_emb_enc, t.value(z_fuse1).rows());
    return matmul(t, concat_cols(t, z_fuse1, broadcast), p.w_p);
}

/// Full post-predictor fusion. With cross-attention disabled the attended
/// term is identically zero and z_fuse1 == z_pred bit for bit; the concat
/// projection always runs.
template <typename S>
typename GradTape<S>::Var fuse(GradTape<S>& t, typename GradTape<S>::Var z_pred, typename GradTape<S>::Var t_emb,
                               typename GradTape<S>::Var t_emb_enc, const FusionT<typename GradTape<S>::Var>& p,
                               int heads, bool cross_attn_enabled, ForwardTrace<S>* trace = nullptr) {
    auto z_fuse1 = cross_attn_enabled
                       ? residual_fuse(t, z_pred, cross_attend(t, z_pred, t_emb, p, heads, trace))
                       : z_pred;
    return concat_project(t, z_fuse1, t_emb_enc, p);
}

}  // namespace jepat
