#pragma once

#include "jepat/dataset.hpp"
#include "jepat/metrics.hpp"
#include "jepat/sampling.hpp"
#include "jepat/training.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace jepat {

struct AblationSpec {
    std::string name;
    AblationFlags flags;
};

inline AblationSpec make_variant(const std::string& name) {
    AblationFlags f;
    if (name == "full") return {name, f};
    if (name == "no_cross_attn") {
        f.cross_attn = false;
        return {name, f};
    }
    if (name == "no_text_inj") {
        f.text_inject = false;
        return {name, f};
    }
    if (name == "no_flow_matching") {
        f.flow_matching = false;
        return {name, f};
    }
    if (name == "no_text_no_ca") {  // both text paths off: the caption-blind control
        f.text_inject = false;
        f.cross_attn = false;
        return {name, f};
    }
    throw std::invalid_argument("ablation: unknown variant '" + name + "'");
}

inline std::vector<AblationSpec> parse_variants(const std::string& csv) {
    std::vector<AblationSpec> out;
    std::istringstream is(csv);
    std::string name;
    while (std::getline(is, name, ',')) {
        if (!name.empty()) out.push_back(make_variant(name));
    }
    if (out.empty()) throw std::invalid_argument("ablation: no variants given");
    return out;
}

struct AblationRow {
    std::string variant;
    bool ok = false;
    std::string error;
    ToyMetrics metrics;
    int64_t steps = 0;
};

struct AblationOptions {
    int64_t steps = 5000;
    bool with_generation_metrics = true;  // text separation + Fréchet need sampling
    int frechet_samples = 256;
    int gen_per_class = 8;
    int eval_draws = 4;
    uint64_t metrics_seed = 0xE7A1;
    SampleConfig sample;
};

/// Trains every variant from the same seed, data and step budget, then
/// evaluates the toy metrics. A diverging variant is reported as a failed
/// row; the run continues.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationSpec>& specs,
                                             const ToyDataset<float>& train_ds, const ToyDataset<float>& eval_ds,
                                             const TextStub<float>& stub, const ModelConfig& mcfg,
                                             const TrainConfig& base, const AblationOptions& opts,
                                             const RecordSink& sink = {}) {
    const auto train_samples = prepare_samples(train_ds, stub, mcfg.patch_size);
    const auto eval_samples = prepare_samples(eval_ds, stub, mcfg.patch_size);

    std::vector<AblationRow> rows;
    for (const auto& spec : specs) {
        AblationRow row;
        row.variant = spec.name;
        row.steps = opts.steps;
        try {
            TrainConfig tcfg = base;
            tcfg.flags = spec.flags;
            auto st = init_train_state<float>(mcfg, tcfg);
            train_steps(st, train_samples, mcfg, tcfg, opts.steps, sink);

            row.metrics.masked_mse =
                masked_token_mse(st.params, mcfg, spec.flags, eval_samples, opts.eval_draws, opts.metrics_seed);

            if (opts.with_generation_metrics && opts.gen_per_class > 0) {
                std::vector<std::vector<Tensor<float>>> per_class;
                for (int k = 0; k < train_ds.classes(); ++k) {
                    per_class.emplace_back();
                    const std::string caption = label_to_caption(k, train_ds.class_names);
                    for (int i = 0; i < opts.gen_per_class; ++i) {
                        auto res = generate(caption, st.params, mcfg, spec.flags, stub, opts.sample,
                                            opts.metrics_seed + 1000 * static_cast<uint64_t>(k) + i);
                        per_class.back().push_back(res.tokens);
                    }
                }
                row.metrics.text_sep = text_separation_ratio(per_class);
            }
            if (opts.with_generation_metrics && opts.frechet_samples > 0) {
                std::vector<Tensor<float>> generated;
                for (int i = 0; i < opts.frechet_samples; ++i) {
                    const int k = i % train_ds.classes();
                    auto res = generate(label_to_caption(k, train_ds.class_names), st.params, mcfg, spec.flags,
                                        stub, opts.sample, opts.metrics_seed + 5000 + i);
                    generated.push_back(res.tokens);
                }
                std::vector<Tensor<float>> real;
                for (const auto& img : train_ds.images) real.push_back(fold_image(img, mcfg.patch_size));
                row.metrics.frechet = token_frechet(real, generated, opts.frechet_samples);
            }

            if (!std::isfinite(row.metrics.masked_mse) || !std::isfinite(row.metrics.text_sep) ||
                !std::isfinite(row.metrics.frechet)) {
                throw std::runtime_error("non-finite metric");
            }
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return ec == std::errc() ? std::string(buf, end) : "nan";
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "variant,status,masked_mse,text_sep,frechet,steps\n";
    for (const auto& r : rows) {
        out += r.variant;
        out += r.ok ? ",ok," : ",failed,";
        out += format_double(r.metrics.masked_mse) + "," + format_double(r.metrics.text_sep) + "," +
               format_double(r.metrics.frechet) + "," + std::to_string(r.steps) + "\n";
    }
    return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows, double floor) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "variant" << std::setw(9) << "status" << std::right << std::setw(14)
       << "masked_mse" << std::setw(12) << "text_sep" << std::setw(12) << "frechet" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(18) << r.variant << std::setw(9) << (r.ok ? "ok" : "failed") << std::right
           << std::fixed << std::setprecision(6) << std::setw(14) << r.metrics.masked_mse << std::setprecision(3)
           << std::setw(12) << r.metrics.text_sep << std::setprecision(4) << std::setw(12) << r.metrics.frechet
           << "\n";
        if (!r.ok) os << "  error: " << r.error << "\n";
    }
    os << "text-blind floor: " << std::setprecision(6) << floor << "\n";
    return os.str();
}

}  // namespace jepat
