#pragma once

#include "jepat/grad_tape.hpp"
#include "jepat/objectives.hpp"
#include "jepat/rng.hpp"
#include "jepat/tensor.hpp"

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

namespace jepat {

// ---------------------------------------------------------------------------
// configuration

struct EncoderConfig {
    int depth = 4;
    int heads = 4;
    Index d_enc = 32;
    int buffer_len = 4;
    int mlp_ratio = 4;
};

struct PredictorConfig {
    int depth = 4;
    int heads = 4;
    Index d_dec = 32;
    int mlp_ratio = 4;
};

struct ModelConfig {
    Index image_size = 32;
    Index channels = 3;
    Index patch_size = 8;
    Index d_txt = 64;
    Index cond_hidden = 64;
    EncoderConfig enc;
    PredictorConfig dec;

    Index grid() const { return image_size / patch_size; }
    Index n_tokens() const { return grid() * grid(); }
    Index d_tok() const { return channels * patch_size * patch_size; }

    void validate() const {
        if (patch_size <= 0 || image_size % patch_size != 0) {
            throw std::invalid_argument("config: image size " + std::to_string(image_size) +
                                        " not divisible by patch size " + std::to_string(patch_size));
        }
        if (enc.d_enc % enc.heads != 0) {
            throw std::invalid_argument("config: d_enc " + std::to_string(enc.d_enc) + " not divisible by " +
                                        std::to_string(enc.heads) + " heads");
        }
        if (dec.d_dec % dec.heads != 0) {
            throw std::invalid_argument("config: d_dec " + std::to_string(dec.d_dec) + " not divisible by " +
                                        std::to_string(dec.heads) + " heads");
        }
        if (enc.buffer_len < 1) throw std::invalid_argument("config: buffer_len must be >= 1");
        if (enc.depth < 0 || dec.depth < 0) throw std::invalid_argument("config: negative depth");
        if (n_tokens() < 2) throw std::invalid_argument("config: need at least 2 tokens");
    }
};

// ---------------------------------------------------------------------------
// parameter structures, generic over the leaf type (Tensor<S> for storage,
// GradTape<S>::Var once registered on a tape)

template <typename T>
struct LinearT {
    T w, b;  // x*w + b, w is in x out
};

template <typename T>
struct LayerNormT {
    T gain, bias;
};

template <typename T>
struct AttentionT {
    LinearT<T> q, k, v, o;
};

template <typename T>
struct EncBlockT {
    LayerNormT<T> ln1;
    AttentionT<T> attn;
    LayerNormT<T> ln2;
    LinearT<T> fc1, fc2;
};

template <typename T>
struct DecBlockT {
    LayerNormT<T> ln1;
    AttentionT<T> self_attn;
    LayerNormT<T> ln_x;
    AttentionT<T> cross_attn;  // keys/values from the text memory
    LayerNormT<T> ln2;
    LinearT<T> fc1, fc2;
};

template <typename T>
struct CondT {
    LinearT<T> hidden;  // d_txt -> cond_hidden, GELU after
    LinearT<T> out;     // cond_hidden -> d_enc, produces c
    LinearT<T> t_emb;   // d_txt -> d_dec, the fusion-side text embedding
};

template <typename T>
struct EncoderT {
    T buffer;  // buffer_len x d_enc
    T pos;     // n_tokens x d_enc
    std::vector<EncBlockT<T>> blocks;
};

template <typename T>
struct PredictorT {
    T pos;         // n_tokens x d_dec
    T mask_token;  // d_dec
    LinearT<T> enc2dec;
    T inject_w;      // d_enc x d_dec, bias-free so zero conditioning injects zero
    T latent_embed;  // d_tok x d_dec, bias-free; carries the denoising input
    std::vector<DecBlockT<T>> blocks;
};

template <typename T>
struct FusionT {
    LayerNormT<T> ln_q;
    AttentionT<T> attn;
    T w_p;                // (d_dec + d_enc) x d_dec
    LinearT<T> text_enc;  // d_txt -> d_enc, the concatenated text channel
};

template <typename T>
struct ModelT {
    LinearT<T> z_proj;  // d_tok -> d_enc
    CondT<T> cond;
    EncoderT<T> enc;
    PredictorT<T> dec;
    FusionT<T> fusion;
    LinearT<T> out_head;   // d_dec -> d_tok, clean-target prediction
    LinearT<T> jepa_head;  // d_dec -> d_enc, projection into the teacher space
};

template <typename S>
using ModelParams = ModelT<Tensor<S>>;

template <typename S>
using ModelVars = ModelT<typename GradTape<S>::Var>;

// ---------------------------------------------------------------------------
// structure walkers

namespace detail {

template <typename T, typename F>
void visit(const std::string& p, LinearT<T>& x, F&& f) {
    f(p + ".w", x.w);
    f(p + ".b", x.b);
}

template <typename T, typename F>
void visit(const std::string& p, LayerNormT<T>& x, F&& f) {
    f(p + ".gain", x.gain);
    f(p + ".bias", x.bias);
}

template <typename T, typename F>
void visit(const std::string& p, AttentionT<T>& x, F&& f) {
    visit(p + ".q", x.q, f);
    visit(p + ".k", x.k, f);
    visit(p + ".v", x.v, f);
    visit(p + ".o", x.o, f);
}

template <typename T, typename F>
void visit(const std::string& p, EncBlockT<T>& x, F&& f) {
    visit(p + ".ln1", x.ln1, f);
    visit(p + ".attn", x.attn, f);
    visit(p + ".ln2", x.ln2, f);
    visit(p + ".fc1", x.fc1, f);
    visit(p + ".fc2", x.fc2, f);
}

template <typename T, typename F>
void visit(const std::string& p, DecBlockT<T>& x, F&& f) {
    visit(p + ".ln1", x.ln1, f);
    visit(p + ".self_attn", x.self_attn, f);
    visit(p + ".ln_x", x.ln_x, f);
    visit(p + ".cross_attn", x.cross_attn, f);
    visit(p + ".ln2", x.ln2, f);
    visit(p + ".fc1", x.fc1, f);
    visit(p + ".fc2", x.fc2, f);
}

}  // namespace detail

/// Visit every parameter as (name, leaf&) in a fixed order.
template <typename T, typename F>
void visit_model(ModelT<T>& m, F&& f) {
    detail::visit("z_proj", m.z_proj, f);
    detail::visit("cond.hidden", m.cond.hidden, f);
    detail::visit("cond.out", m.cond.out, f);
    detail::visit("cond.t_emb", m.cond.t_emb, f);
    f("enc.buffer", m.enc.buffer);
    f("enc.pos", m.enc.pos);
    for (size_t i = 0; i < m.enc.blocks.size(); ++i) {
        detail::visit("enc.block" + std::to_string(i), m.enc.blocks[i], f);
    }
    f("dec.pos", m.dec.pos);
    f("dec.mask_token", m.dec.mask_token);
    detail::visit("dec.enc2dec", m.dec.enc2dec, f);
    f("dec.inject_w", m.dec.inject_w);
    f("dec.latent_embed", m.dec.latent_embed);
    for (size_t i = 0; i < m.dec.blocks.size(); ++i) {
        detail::visit("dec.block" + std::to_string(i), m.dec.blocks[i], f);
    }
    detail::visit("fusion.ln_q", m.fusion.ln_q, f);
    detail::visit("fusion.attn", m.fusion.attn, f);
    f("fusion.w_p", m.fusion.w_p);
    detail::visit("fusion.text_enc", m.fusion.text_enc, f);
    detail::visit("out_head", m.out_head, f);
    detail::visit("jepa_head", m.jepa_head, f);
}

template <typename T, typename F>
void visit_model(const ModelT<T>& m, F&& f) {
    visit_model(const_cast<ModelT<T>&>(m), [&](const std::string& name, T& leaf) { f(name, std::as_const(leaf)); });
}

namespace detail {

template <typename A, typename F>
auto map(const LinearT<A>& x, F&& f) -> LinearT<std::invoke_result_t<F, const A&>> {
    return {f(x.w), f(x.b)};
}

template <typename A, typename F>
auto map(const LayerNormT<A>& x, F&& f) -> LayerNormT<std::invoke_result_t<F, const A&>> {
    return {f(x.gain), f(x.bias)};
}

template <typename A, typename F>
auto map(const AttentionT<A>& x, F&& f) -> AttentionT<std::invoke_result_t<F, const A&>> {
    return {map(x.q, f), map(x.k, f), map(x.v, f), map(x.o, f)};
}

template <typename A, typename F>
auto map(const EncBlockT<A>& x, F&& f) -> EncBlockT<std::invoke_result_t<F, const A&>> {
    return {map(x.ln1, f), map(x.attn, f), map(x.ln2, f), map(x.fc1, f), map(x.fc2, f)};
}

template <typename A, typename F>
auto map(const DecBlockT<A>& x, F&& f) -> DecBlockT<std::invoke_result_t<F, const A&>> {
    return {map(x.ln1, f), map(x.self_attn, f), map(x.ln_x, f), map(x.cross_attn, f),
            map(x.ln2, f), map(x.fc1, f),       map(x.fc2, f)};
}

}  // namespace detail

template <typename A, typename F>
auto map_model(const ModelT<A>& m, F&& f) -> ModelT<std::invoke_result_t<F, const A&>> {
    using B = std::invoke_result_t<F, const A&>;
    ModelT<B> out;
    out.z_proj = detail::map(m.z_proj, f);
    out.cond = {detail::map(m.cond.hidden, f), detail::map(m.cond.out, f), detail::map(m.cond.t_emb, f)};
    out.enc.buffer = f(m.enc.buffer);
    out.enc.pos = f(m.enc.pos);
    for (const auto& b : m.enc.blocks) out.enc.blocks.push_back(detail::map(b, f));
    out.dec.pos = f(m.dec.pos);
    out.dec.mask_token = f(m.dec.mask_token);
    out.dec.enc2dec = detail::map(m.dec.enc2dec, f);
    out.dec.inject_w = f(m.dec.inject_w);
    out.dec.latent_embed = f(m.dec.latent_embed);
    for (const auto& b : m.dec.blocks) out.dec.blocks.push_back(detail::map(b, f));
    out.fusion = {detail::map(m.fusion.ln_q, f), detail::map(m.fusion.attn, f), f(m.fusion.w_p),
                  detail::map(m.fusion.text_enc, f)};
    out.out_head = detail::map(m.out_head, f);
    out.jepa_head = detail::map(m.jepa_head, f);
    return out;
}

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S>* tensor;
};

template <typename S>
std::vector<ParamRef<S>> param_registry(ModelParams<S>& p) {
    std::vector<ParamRef<S>> out;
    visit_model(p, [&](const std::string& name, Tensor<S>& t) { out.push_back({name, &t}); });
    return out;
}

template <typename S>
std::vector<typename GradTape<S>::Var> var_list(const ModelVars<S>& v) {
    std::vector<typename GradTape<S>::Var> out;
    visit_model(v, [&](const std::string&, const typename GradTape<S>::Var& x) { out.push_back(x); });
    return out;
}

template <typename S>
ModelVars<S> register_leaves(GradTape<S>& t, const ModelParams<S>& p) {
    return map_model(p, [&](const Tensor<S>& x) { return t.leaf(x); });
}

template <typename S>
ModelVars<S> register_constants(GradTape<S>& t, const ModelParams<S>& p) {
    return map_model(p, [&](const Tensor<S>& x) { return t.constant(x); });
}

// ---------------------------------------------------------------------------
// initialization

namespace detail {

template <typename S>
LinearT<Tensor<S>> init_linear(Index in, Index out, Rng& rng, double std_dev = 0.02) {
    LinearT<Tensor<S>> l{Tensor<S>({in, out}), Tensor<S>({out})};
    rng.fill_trunc_normal(l.w, std_dev);
    return l;
}

template <typename S>
LayerNormT<Tensor<S>> init_ln(Index d) {
    return {Tensor<S>::ones({d}), Tensor<S>::zeros({d})};
}

template <typename S>
AttentionT<Tensor<S>> init_attn(Index d, Rng& rng) {
    return {init_linear<S>(d, d, rng), init_linear<S>(d, d, rng), init_linear<S>(d, d, rng),
            init_linear<S>(d, d, rng)};
}

template <typename S>
EncBlockT<Tensor<S>> init_enc_block(Index d, int mlp_ratio, Rng& rng) {
    return {init_ln<S>(d), init_attn<S>(d, rng), init_ln<S>(d), init_linear<S>(d, d * mlp_ratio, rng),
            init_linear<S>(d * mlp_ratio, d, rng)};
}

template <typename S>
DecBlockT<Tensor<S>> init_dec_block(Index d, int mlp_ratio, Rng& rng) {
    return {init_ln<S>(d),           init_attn<S>(d, rng), init_ln<S>(d),
            init_attn<S>(d, rng),    init_ln<S>(d),        init_linear<S>(d, d * mlp_ratio, rng),
            init_linear<S>(d * mlp_ratio, d, rng)};
}

}  // namespace detail

/// Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains.
template <typename S>
ModelParams<S> init_model_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    using detail::init_linear;
    ModelParams<S> p;
    p.z_proj = init_linear<S>(cfg.d_tok(), cfg.enc.d_enc, rng);
    p.cond.hidden = init_linear<S>(cfg.d_txt, cfg.cond_hidden, rng);
    p.cond.out = init_linear<S>(cfg.cond_hidden, cfg.enc.d_enc, rng);
    p.cond.t_emb = init_linear<S>(cfg.d_txt, cfg.dec.d_dec, rng);

    p.enc.buffer = Tensor<S>({cfg.enc.buffer_len, cfg.enc.d_enc});
    rng.fill_trunc_normal(p.enc.buffer, 0.02);
    p.enc.pos = Tensor<S>({cfg.n_tokens(), cfg.enc.d_enc});
    rng.fill_trunc_normal(p.enc.pos, 0.02);
    for (int i = 0; i < cfg.enc.depth; ++i) {
        p.enc.blocks.push_back(detail::init_enc_block<S>(cfg.enc.d_enc, cfg.enc.mlp_ratio, rng));
    }

    p.dec.pos = Tensor<S>({cfg.n_tokens(), cfg.dec.d_dec});
    rng.fill_trunc_normal(p.dec.pos, 0.02);
    p.dec.mask_token = Tensor<S>({cfg.dec.d_dec});
    rng.fill_normal(p.dec.mask_token, 0.02);
    p.dec.enc2dec = init_linear<S>(cfg.enc.d_enc, cfg.dec.d_dec, rng);
    p.dec.inject_w = Tensor<S>({cfg.enc.d_enc, cfg.dec.d_dec});
    rng.fill_trunc_normal(p.dec.inject_w, 0.02);
    p.dec.latent_embed = Tensor<S>({cfg.d_tok(), cfg.dec.d_dec});
    rng.fill_trunc_normal(p.dec.latent_embed, 0.02);
    for (int i = 0; i < cfg.dec.depth; ++i) {
        p.dec.blocks.push_back(detail::init_dec_block<S>(cfg.dec.d_dec, cfg.dec.mlp_ratio, rng));
    }

    p.fusion.ln_q = detail::init_ln<S>(cfg.dec.d_dec);
    p.fusion.attn = detail::init_attn<S>(cfg.dec.d_dec, rng);
    // W_P replaces the stream rather than adding to it; start it as a
    // pass-through of z_fuse1 plus noise so the decoder output survives init
    p.fusion.w_p = Tensor<S>({cfg.dec.d_dec + cfg.enc.d_enc, cfg.dec.d_dec});
    rng.fill_trunc_normal(p.fusion.w_p, 0.02);
    p.fusion.w_p.mat().topRows(cfg.dec.d_dec) += MatrixX<S>::Identity(cfg.dec.d_dec, cfg.dec.d_dec);
    p.fusion.text_enc = init_linear<S>(cfg.d_txt, cfg.enc.d_enc, rng);

    p.out_head = init_linear<S>(cfg.dec.d_dec, cfg.d_tok(), rng);
    p.jepa_head = init_linear<S>(cfg.dec.d_dec, cfg.enc.d_enc, rng);
    return p;
}

// ---------------------------------------------------------------------------
// forward pieces

/// Attention probability matrices recorded during a forward pass, one entry
/// per (block, head) in evaluation order.
template <typename S>
struct ForwardTrace {
    std::vector<MatrixX<S>> attention;
};

template <typename S>
typename GradTape<S>::Var linear(GradTape<S>& t, typename GradTape<S>::Var x, const LinearT<typename GradTape<S>::Var>& p) {
    return add_rowvec(t, matmul(t, x, p.w), p.b);
}

/// Multi-head scaled dot-product attention; queries from `q_in`, keys and
/// values from `kv_in`.
template <typename S>
typename GradTape<S>::Var attention(GradTape<S>& t, typename GradTape<S>::Var q_in, typename GradTape<S>::Var kv_in,
                                    const AttentionT<typename GradTape<S>::Var>& p, int heads,
                                    ForwardTrace<S>* trace) {
    const Index d = t.value(q_in).cols();
    const Index dh = d / heads;
    auto q = linear(t, q_in, p.q);
    auto k = linear(t, kv_in, p.k);
    auto v = linear(t, kv_in, p.v);
    const S inv_sqrt = S(1) / std::sqrt(S(dh));
    std::vector<typename GradTape<S>::Var> head_outs;
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(t, q, h * dh, dh);
        auto kh = slice_cols(t, k, h * dh, dh);
        auto vh = slice_cols(t, v, h * dh, dh);
        auto probs = softmax_rows(t, scale(t, matmul_nt(t, qh, kh), inv_sqrt));
        if (trace) trace->attention.push_back(t.value(probs).mat());
        head_outs.push_back(matmul(t, probs, vh));
    }
    auto merged = head_outs[0];
    for (size_t h = 1; h < head_outs.size(); ++h) merged = concat_cols(t, merged, head_outs[h]);
    return linear(t, merged, p.o);
}

template <typename S>
typename GradTape<S>::Var mlp(GradTape<S>& t, typename GradTape<S>::Var x,
                              const LinearT<typename GradTape<S>::Var>& fc1,
                              const LinearT<typename GradTape<S>::Var>& fc2) {
    return linear(t, gelu(t, linear(t, x, fc1)), fc2);
}

template <typename S>
typename GradTape<S>::Var enc_block(GradTape<S>& t, typename GradTape<S>::Var x,
                                    const EncBlockT<typename GradTape<S>::Var>& b, int heads,
                                    ForwardTrace<S>* trace) {
    auto h1 = layer_norm(t, x, b.ln1.gain, b.ln1.bias, S(1e-5));
    x = add(t, x, attention(t, h1, h1, b.attn, heads, trace));
    auto h2 = layer_norm(t, x, b.ln2.gain, b.ln2.bias, S(1e-5));
    return add(t, x, mlp(t, h2, b.fc1, b.fc2));
}

template <typename S>
typename GradTape<S>::Var dec_block(GradTape<S>& t, typename GradTape<S>::Var x, typename GradTape<S>::Var memory,
                                    const DecBlockT<typename GradTape<S>::Var>& b, int heads,
                                    ForwardTrace<S>* trace) {
    auto h1 = layer_norm(t, x, b.ln1.gain, b.ln1.bias, S(1e-5));
    x = add(t, x, attention(t, h1, h1, b.self_attn, heads, trace));
    auto hx = layer_norm(t, x, b.ln_x.gain, b.ln_x.bias, S(1e-5));
    x = add(t, x, attention(t, hx, memory, b.cross_attn, heads, trace));
    auto h2 = layer_norm(t, x, b.ln2.gain, b.ln2.bias, S(1e-5));
    return add(t, x, mlp(t, h2, b.fc1, b.fc2));
}

/// Transformer over [conditioning, buffer, visible tokens]; the visible rows
/// arrive with positional embeddings already added. Keeps the full sequence.
template <typename S>
typename GradTape<S>::Var encode_context(GradTape<S>& t, typename GradTape<S>::Var visible,
                                         typename GradTape<S>::Var c,
                                         const EncoderT<typename GradTape<S>::Var>& enc, const EncoderConfig& cfg,
                                         ForwardTrace<S>* trace = nullptr) {
    std::vector<typename GradTape<S>::Var> parts{c, enc.buffer, visible};
    auto x = concat_rows(t, parts);
    for (const auto& b : enc.blocks) x = enc_block(t, x, b, cfg.heads, trace);
    return x;
}

/// Rebuild the full-length token sequence from the encoder output: visible
/// positions take projected encoder rows, masked positions take the learned
/// mask token (plus an optional projection of the current latent state, the
/// denoising input). Adds decoder positional embeddings, injects a broadcast
/// projection of c into every row, then runs the decoder blocks with the text
/// embedding as cross-attention memory.
template <typename S>
typename GradTape<S>::Var predict_tokens(GradTape<S>& t, typename GradTape<S>::Var ctx,
                                         typename GradTape<S>::Var c, typename GradTape<S>::Var t_emb,
                                         const MaskPlan& plan, const ModelVars<S>& m, const ModelConfig& cfg,
                                         const Tensor<S>* latent_state = nullptr,
                                         ForwardTrace<S>* trace = nullptr) {
    const int n = plan.n();
    if (n != static_cast<int>(cfg.n_tokens())) {
        throw std::invalid_argument("predict_tokens: plan covers " + std::to_string(n) + " tokens, model has " +
                                    std::to_string(cfg.n_tokens()));
    }
    const auto context = plan.context_indices();
    std::vector<int> row_map(static_cast<size_t>(n), -1);
    std::vector<int> ctx_rows;
    for (size_t r = 0; r < context.size(); ++r) {
        row_map[static_cast<size_t>(context[r])] = static_cast<int>(r);
        ctx_rows.push_back(1 + static_cast<int>(cfg.enc.buffer_len) + static_cast<int>(r));
    }
    auto vis_dec = linear(t, gather_rows(t, ctx, ctx_rows), m.dec.enc2dec);
    auto x = compose_rows(t, vis_dec, m.dec.mask_token, row_map);

    if (latent_state != nullptr) {
        if (latent_state->rows() != cfg.n_tokens() || latent_state->cols() != cfg.d_tok()) {
            throw std::invalid_argument("predict_tokens: latent state " + latent_state->shape_str() +
                                        " does not cover " + std::to_string(cfg.n_tokens()) + " tokens of dim " +
                                        std::to_string(cfg.d_tok()));
        }
        std::vector<int> masked;
        for (int i = 0; i < n; ++i) {
            if (row_map[static_cast<size_t>(i)] < 0) masked.push_back(i);
        }
        if (!masked.empty()) {
            auto state_rows = gather_rows(t, t.constant(*latent_state), masked);
            auto embedded = matmul(t, state_rows, m.dec.latent_embed);
            x = add(t, x, scatter_rows(t, embedded, masked, cfg.n_tokens()));
        }
    }

    x = add(t, x, m.dec.pos);
    x = add_rowvec(t, x, matmul(t, c, m.dec.inject_w));
    for (const auto& b : m.dec.blocks) x = dec_block(t, x, t_emb, b, cfg.dec.heads, trace);
    return x;
}

/// Per-token linear map into the tokenizer latent space (v0 prediction).
template <typename S>
typename GradTape<S>::Var decode_head(GradTape<S>& t, typename GradTape<S>::Var z_final, const ModelVars<S>& m) {
    return linear(t, z_final, m.out_head);
}

/// Per-token linear map into the teacher (encoder) space.
template <typename S>
typename GradTape<S>::Var jepa_head(GradTape<S>& t, typename GradTape<S>::Var z_final, const ModelVars<S>& m) {
    return linear(t, z_final, m.jepa_head);
}

}  // namespace jepat
