#pragma once

#include "jepat/forward.hpp"
#include "jepat/model.hpp"
#include "jepat/objectives.hpp"
#include "jepat/sampling.hpp"
#include "jepat/training.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace jepat {

struct DataConfig {
    int classes = 4;
    int samples_per_class = 64;
    double noise_sigma = 0.05;
};

struct TextConfig {
    uint64_t stub_seed = 1234;
    int oov_buckets = 32;
    int max_caption_len = 16;
};

struct MetricsConfig {
    int frechet_samples = 256;
    int gen_per_class = 8;
    int eval_draws = 4;
    int eval_samples_per_class = 16;
};

/// One resolved configuration for a run; every knob reachable from the
/// key=value config file lives here.
struct FullConfig {
    uint64_t seed = 7;
    DataConfig data;
    ModelConfig model;  // enc/dec heads and mlp_ratio are shared knobs
    TextConfig text;
    AblationFlags flags;
    LossWeights loss;
    // training
    int64_t train_steps = 5000;
    int batch_size = 64;
    OptimizerConfig opt;
    double ema_momentum = 0.996;
    double clip_norm = 1.0;
    double caption_dropout = 0.0;
    int64_t checkpoint_every = 1000;
    SampleConfig sample;
    MetricsConfig metrics;

    TrainConfig train_config() const {
        TrainConfig t;
        t.steps = train_steps;
        t.batch_size = batch_size;
        t.opt = opt;
        t.ema_momentum = ema_momentum;
        t.clip_norm = clip_norm;
        t.caption_dropout = caption_dropout;
        t.checkpoint_every = checkpoint_every;
        t.seed = seed;
        t.loss = loss;
        t.flags = flags;
        return t;
    }
};

namespace detail {

struct KeyBinding {
    std::string key;
    std::function<std::string(const FullConfig&)> get;
    std::function<void(FullConfig&, const std::string&)> set;
};

inline std::string num_to_string(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("config: cannot format number");
    return std::string(buf, end);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
    T v{};
    const char* begin = raw.data();
    const char* end = raw.data() + raw.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end) {
        throw std::invalid_argument("config: bad value '" + raw + "' for key " + key);
    }
    return v;
}

inline bool parse_flag(const std::string& key, const std::string& raw) {
    if (raw == "on" || raw == "true" || raw == "1") return true;
    if (raw == "off" || raw == "false" || raw == "0") return false;
    throw std::invalid_argument("config: bad value '" + raw + "' for key " + key + " (want on/off)");
}

}  // namespace detail

// The schema is written out longhand below; a macro keeps the table readable.

#define JEPAT_CFG_NUM(KEY, FIELD)                                                                       \
    {KEY, [](const FullConfig& c) {                                                                     \
         if constexpr (std::is_floating_point_v<std::decay_t<decltype(c.FIELD)>>)                       \
             return detail::num_to_string(static_cast<double>(c.FIELD));                                \
         else                                                                                           \
             return std::to_string(c.FIELD);                                                            \
     },                                                                                                 \
     [](FullConfig& c, const std::string& raw) {                                                        \
         c.FIELD = detail::parse_number<std::decay_t<decltype(c.FIELD)>>(KEY, raw);                     \
     }}

#define JEPAT_CFG_FLAG(KEY, FIELD)                                                       \
    {KEY, [](const FullConfig& c) { return std::string(c.FIELD ? "on" : "off"); },       \
     [](FullConfig& c, const std::string& raw) { c.FIELD = detail::parse_flag(KEY, raw); }}

inline const std::vector<detail::KeyBinding>& config_schema() {
    static const std::vector<detail::KeyBinding> bindings = {
        JEPAT_CFG_NUM("run.seed", seed),
        JEPAT_CFG_NUM("data.classes", data.classes),
        JEPAT_CFG_NUM("data.samples_per_class", data.samples_per_class),
        JEPAT_CFG_NUM("data.noise_sigma", data.noise_sigma),
        JEPAT_CFG_NUM("model.image_size", model.image_size),
        JEPAT_CFG_NUM("model.channels", model.channels),
        JEPAT_CFG_NUM("model.patch_size", model.patch_size),
        JEPAT_CFG_NUM("model.d_enc", model.enc.d_enc),
        JEPAT_CFG_NUM("model.d_dec", model.dec.d_dec),
        JEPAT_CFG_NUM("model.d_txt", model.d_txt),
        JEPAT_CFG_NUM("model.cond_hidden", model.cond_hidden),
        JEPAT_CFG_NUM("model.enc_depth", model.enc.depth),
        JEPAT_CFG_NUM("model.dec_depth", model.dec.depth),
        JEPAT_CFG_NUM("model.buffer_len", model.enc.buffer_len),
        JEPAT_CFG_NUM("text.stub_seed", text.stub_seed),
        JEPAT_CFG_NUM("text.oov_buckets", text.oov_buckets),
        JEPAT_CFG_NUM("text.max_caption_len", text.max_caption_len),
        JEPAT_CFG_FLAG("fusion.cross_attn", flags.cross_attn),
        JEPAT_CFG_FLAG("fusion.text_inject", flags.text_inject),
        JEPAT_CFG_NUM("loss.beta", loss.beta),
        JEPAT_CFG_NUM("loss.lambda_jepa", loss.lambda_jepa),
        JEPAT_CFG_NUM("loss.fm_repeat", loss.fm_repeat),
        JEPAT_CFG_NUM("train.steps", train_steps),
        JEPAT_CFG_NUM("train.batch_size", batch_size),
        JEPAT_CFG_NUM("train.lr", opt.lr),
        JEPAT_CFG_NUM("train.warmup_steps", opt.warmup_steps),
        JEPAT_CFG_NUM("train.weight_decay", opt.weight_decay),
        JEPAT_CFG_NUM("train.adam_beta1", opt.beta1),
        JEPAT_CFG_NUM("train.adam_beta2", opt.beta2),
        JEPAT_CFG_NUM("train.adam_eps", opt.eps),
        JEPAT_CFG_NUM("train.ema_momentum", ema_momentum),
        JEPAT_CFG_NUM("train.clip_norm", clip_norm),
        JEPAT_CFG_NUM("train.caption_dropout", caption_dropout),
        JEPAT_CFG_NUM("train.checkpoint_every", checkpoint_every),
        JEPAT_CFG_NUM("sample.steps", sample.steps),
        JEPAT_CFG_NUM("sample.substeps", sample.substeps),
        JEPAT_CFG_FLAG("sample.guidance", sample.guidance),
        JEPAT_CFG_NUM("sample.guidance_scale", sample.guidance_scale),
        JEPAT_CFG_NUM("metrics.frechet_samples", metrics.frechet_samples),
        JEPAT_CFG_NUM("metrics.gen_per_class", metrics.gen_per_class),
        JEPAT_CFG_NUM("metrics.eval_draws", metrics.eval_draws),
        JEPAT_CFG_NUM("metrics.eval_samples_per_class", metrics.eval_samples_per_class),
    };
    return bindings;
}

#undef JEPAT_CFG_NUM
#undef JEPAT_CFG_FLAG

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace detail

/// Apply one key=value pair; unknown keys are errors that name the key.
inline void apply_config_line(FullConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& binding : config_schema()) {
        if (binding.key == key) {
            binding.set(cfg, value);
            return;
        }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline FullConfig parse_config_text(const std::string& text) {
    FullConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string stripped = detail::trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value: " + line);
        }
        apply_config_line(cfg, detail::trim(stripped.substr(0, eq)), detail::trim(stripped.substr(eq + 1)));
    }
    return cfg;
}

inline FullConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

/// Canonical serialization: schema order, shortest round-trip numbers.
inline std::string serialize_config(const FullConfig& cfg) {
    std::string out;
    for (const auto& binding : config_schema()) {
        out += binding.key;
        out.push_back('=');
        out += binding.get(cfg);
        out.push_back('\n');
    }
    return out;
}

inline void write_config_snapshot(const std::string& path, const FullConfig& cfg) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("config: cannot write snapshot " + path);
    out << serialize_config(cfg);
}

}  // namespace jepat
