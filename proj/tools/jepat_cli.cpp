#include "jepat/ablation.hpp"
#include "jepat/checkpoint.hpp"
#include "jepat/config.hpp"
#include "jepat/dataset.hpp"
#include "jepat/gradcheck.hpp"
#include "jepat/image_io.hpp"
#include "jepat/metrics.hpp"
#include "jepat/sampling.hpp"
#include "jepat/training.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace jepat;

namespace {

FullConfig load_config_with_env(const std::string& path) {
    FullConfig cfg = load_config_file(path);
    if (const char* env = std::getenv("JEPAT_SEED")) {
        cfg.seed = std::stoull(env);
    }
    return cfg;
}

ToyDataset<float> build_dataset(const FullConfig& cfg, uint64_t seed_offset = 0) {
    return make_toy_dataset<float>(cfg.data.classes, cfg.data.samples_per_class, cfg.model.image_size,
                                   cfg.model.channels, cfg.data.noise_sigma, cfg.seed + seed_offset);
}

TextStub<float> build_stub(const FullConfig& cfg) {
    std::vector<std::string> captions;
    for (const auto& name : toy_class_names(cfg.data.classes)) {
        captions.push_back("a photo of a " + name);
    }
    Vocabulary vocab = Vocabulary::from_captions(captions, cfg.text.max_caption_len);
    return TextStub<float>(vocab, cfg.model.d_txt, cfg.text.stub_seed, cfg.text.oov_buckets);
}

void ensure_run_dir(const FullConfig& cfg, const std::string& out) {
    fs::create_directories(out);
    fs::create_directories(fs::path(out) / "checkpoints");
    fs::create_directories(fs::path(out) / "samples");
    write_config_snapshot((fs::path(out) / "config.snapshot").string(), cfg);
}

std::optional<std::string> latest_checkpoint(const std::string& out) {
    const fs::path dir = fs::path(out) / "checkpoints";
    if (!fs::exists(dir)) return std::nullopt;
    std::optional<std::string> best;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".bin") continue;
        if (!best || entry.path().filename().string() > fs::path(*best).filename().string()) {
            best = entry.path().string();
        }
    }
    return best;
}

std::string checkpoint_name(int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%09lld.bin", static_cast<long long>(step));
    return buf;
}

int cmd_train(const std::string& config_path, const std::string& out, bool resume) {
    FullConfig cfg = load_config_with_env(config_path);
    cfg.model.validate();
    ensure_run_dir(cfg, out);

    ToyDataset<float> dataset = build_dataset(cfg);
    TextStub<float> stub = build_stub(cfg);
    stub.vocab().save((fs::path(out) / "vocab.txt").string());
    auto samples = prepare_samples(dataset, stub, cfg.model.patch_size);

    TrainConfig tcfg = cfg.train_config();
    TrainState<float> st;
    if (resume) {
        auto ckpt = latest_checkpoint(out);
        if (!ckpt) {
            std::cerr << "train: --resume set but no checkpoint under " << out << "/checkpoints\n";
            return 1;
        }
        st = restore_train_state(read_checkpoint(*ckpt), cfg.model);
        std::cerr << "resumed from " << *ckpt << " at step " << st.step << "\n";
    } else {
        st = init_train_state<float>(cfg.model, tcfg);
    }

    const fs::path csv_path = fs::path(out) / "metrics.csv";
    const bool fresh_csv = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
    std::ofstream csv(csv_path, std::ios::app);
    if (!csv) {
        std::cerr << "train: cannot open " << csv_path.string() << "\n";
        return 1;
    }
    if (fresh_csv) csv << "step,l_fm,l_jepa,l_total,grad_norm,lr,wall_ms\n";

    const std::string config_text = serialize_config(cfg);
    auto save = [&](const TrainState<float>& state) {
        save_checkpoint((fs::path(out) / "checkpoints" / checkpoint_name(state.step)).string(), config_text,
                        state);
    };

    const int64_t remaining = cfg.train_steps - st.step;
    if (remaining <= 0) {
        std::cerr << "train: checkpoint already at step " << st.step << ", nothing to do\n";
        save(st);
        return 0;
    }
    train_steps<float>(
        st, samples, cfg.model, tcfg, remaining,
        [&](const TrainRecord& r) {
            csv << r.step << ',' << format_double(r.l_fm) << ',' << format_double(r.l_jepa) << ','
                << format_double(r.l_total) << ',' << format_double(r.grad_norm) << ',' << format_double(r.lr)
                << ',' << format_double(r.wall_ms) << '\n';
            if (r.step % 100 == 0) {
                std::cerr << "step " << r.step << " total " << r.l_total << " fm " << r.l_fm << " jepa "
                          << r.l_jepa << "\n";
            }
        },
        save);
    save(st);
    std::cerr << "trained to step " << st.step << ", checkpoints under " << out << "/checkpoints\n";
    return 0;
}

int cmd_sample(const std::string& checkpoint_path, std::string caption, int class_id, int count, uint64_t seed,
               const std::string& out, bool dump_tokens) {
    CheckpointData data = read_checkpoint(checkpoint_path);
    FullConfig cfg = parse_config_text(data.config_text);
    TrainState<float> st = restore_train_state(data, cfg.model);
    TextStub<float> stub = build_stub(cfg);

    if (caption.empty()) {
        if (class_id < 0) {
            std::cerr << "sample: need --caption or --class\n";
            return 1;
        }
        caption = label_to_caption(class_id, toy_class_names(cfg.data.classes));
    }
    if (cfg.sample.guidance && cfg.caption_dropout <= 0.0) {
        std::cerr << "warning: guidance requested but the checkpoint was trained without caption dropout; "
                     "unconditional predictions are untrained\n";
    }

    fs::create_directories(out);
    write_config_snapshot((fs::path(out) / "config.snapshot").string(), cfg);
    for (int i = 0; i < count; ++i) {
        auto res = generate(caption, st.params, cfg.model, cfg.flags, stub, cfg.sample,
                            seed + static_cast<uint64_t>(i));
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%03d.ppm", i);
        write_ppm((fs::path(out) / name).string(), res.image);
        if (dump_tokens) {
            CheckpointData dump;
            dump.tensors.emplace_back("tokens", res.tokens);
            std::snprintf(name, sizeof(name), "sample_%03d.tokens.bin", i);
            write_checkpoint_file((fs::path(out) / name).string(), dump);
        }
    }
    std::cerr << "wrote " << count << " sample(s) for \"" << caption << "\" under " << out << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& variants_csv, const std::string& out) {
    FullConfig cfg = load_config_with_env(config_path);
    cfg.model.validate();
    fs::create_directories(out);
    write_config_snapshot((fs::path(out) / "config.snapshot").string(), cfg);

    ToyDataset<float> train_ds = build_dataset(cfg);
    ToyDataset<float> eval_ds =
        make_toy_dataset<float>(cfg.data.classes, cfg.metrics.eval_samples_per_class, cfg.model.image_size,
                                cfg.model.channels, cfg.data.noise_sigma, cfg.seed + 0x5EED);
    TextStub<float> stub = build_stub(cfg);

    AblationOptions opts;
    opts.steps = cfg.train_steps;
    opts.frechet_samples = cfg.metrics.frechet_samples;
    opts.gen_per_class = cfg.metrics.gen_per_class;
    opts.eval_draws = cfg.metrics.eval_draws;
    opts.sample = cfg.sample;

    auto rows = run_ablation(parse_variants(variants_csv), train_ds, eval_ds, stub, cfg.model,
                             cfg.train_config(), opts);
    const double floor = text_blind_floor(eval_ds, cfg.model.patch_size);

    std::ofstream csv(fs::path(out) / "ablation.csv", std::ios::trunc);
    csv << ablation_csv(rows);
    std::cout << ablation_table(rows, floor);
    return 0;
}

int cmd_gradcheck(double threshold) {
    GradCheckOptions opts;
    opts.threshold = threshold;
    GradCheckReport report = grad_check_suite(opts);
    for (const auto& g : report.groups) {
        std::cout << (g.pass ? "PASS " : "FAIL ") << g.group << " worst_rel_err=" << g.worst_rel_err << "\n";
    }
    std::cout << (report.pass ? "PASS" : "FAIL") << " overall worst=" << report.worst
              << " threshold=" << report.threshold << "\n";
    return report.pass ? 0 : 1;
}

int cmd_dataset_info(const std::string& config_path) {
    FullConfig cfg = load_config_with_env(config_path);
    ToyDataset<float> ds = build_dataset(cfg);
    std::cout << "classes: " << ds.classes() << "\n";
    for (int k = 0; k < ds.classes(); ++k) {
        std::cout << "  [" << k << "] \"" << label_to_caption(k, ds.class_names) << "\"\n";
    }
    std::cout << "samples: " << ds.size() << " (" << cfg.data.samples_per_class << " per class)\n";
    std::cout << "image: " << cfg.model.channels << "x" << cfg.model.image_size << "x" << cfg.model.image_size
              << ", patch " << cfg.model.patch_size << " -> " << cfg.model.n_tokens() << " tokens of dim "
              << cfg.model.d_tok() << "\n";
    std::cout << "noise sigma: " << ds.noise_sigma << "\n";
    std::cout << "text-blind floor (empirical): " << text_blind_floor(ds, cfg.model.patch_size) << "\n";
    std::cout << "text-blind floor (closed form): " << analytic_text_blind_floor(ds) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"jepat: desk-scale text-conditioned masked-token image generation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint_path, caption;
    std::string variants = "full,no_cross_attn,no_text_inj,no_flow_matching";
    bool resume = false, dump_tokens = false;
    int class_id = -1, count = 1;
    uint64_t seed = 0;
    double threshold = 1e-4;

    auto* train = app.add_subcommand("train", "train on the toy dataset");
    train->add_option("--config", config_path, "config file (key=value)")->required();
    train->add_option("--out", out_dir, "run directory")->default_val("runs/train");
    train->add_flag("--resume", resume, "resume from the latest checkpoint in the run directory");

    auto* sample = app.add_subcommand("sample", "generate images from a checkpoint");
    sample->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    sample->add_option("--caption", caption, "free-text caption");
    sample->add_option("--class", class_id, "class id (uses the class caption template)");
    sample->add_option("--count", count, "number of images")->default_val(1);
    sample->add_option("--seed", seed, "sampling seed")->default_val(0);
    sample->add_option("--out", out_dir, "output directory")->default_val("runs/sample");
    sample->add_flag("--dump-tokens", dump_tokens, "also dump raw token latents");

    auto* ablate = app.add_subcommand("ablate", "train and compare ablation variants");
    ablate->add_option("--config", config_path, "config file")->required();
    ablate->add_option("--variants", variants, "comma-separated variant names");
    ablate->add_option("--out", out_dir, "output directory")->default_val("runs/ablate");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every parameter group");
    gradcheck->add_option("--threshold", threshold, "worst relative error allowed")->default_val(1e-4);

    auto* info = app.add_subcommand("dataset-info", "describe the toy dataset for a config");
    info->add_option("--config", config_path, "config file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir, resume);
        if (sample->parsed()) return cmd_sample(checkpoint_path, caption, class_id, count, seed, out_dir, dump_tokens);
        if (ablate->parsed()) return cmd_ablate(config_path, variants, out_dir);
        if (gradcheck->parsed()) return cmd_gradcheck(threshold);
        if (info->parsed()) return cmd_dataset_info(config_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
