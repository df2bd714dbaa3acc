#pragma once

#include "jepat/rng.hpp"
#include "jepat/tokenization.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace jepat {

/// Caption-conditioned synthetic dataset: K color/shape classes, each a
/// deterministic base image plus bounded uniform pixel noise. Per-class
/// expected token latents are exactly the folded base images.
template <typename S>
struct ToyDataset {
    std::vector<ImageGrid<S>> images;
    std::vector<std::string> captions;
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::vector<ImageGrid<S>> class_base;  // noiseless generator means
    double noise_sigma = 0.0;
    uint64_t seed = 0;

    int classes() const { return static_cast<int>(class_names.size()); }
    size_t size() const { return images.size(); }
};

namespace detail {

struct ShapeSpec {
    const char* name;
    std::array<double, 3> color;
};

inline const std::vector<ShapeSpec>& shape_table() {
    static const std::vector<ShapeSpec> table = {
        {"red square", {0.80, 0.20, 0.20}},    {"green circle", {0.20, 0.75, 0.25}},
        {"blue triangle", {0.20, 0.25, 0.80}}, {"yellow cross", {0.80, 0.78, 0.20}},
        {"magenta ring", {0.78, 0.22, 0.78}},  {"cyan stripes", {0.20, 0.78, 0.80}},
        {"white diamond", {0.85, 0.85, 0.85}}, {"orange corners", {0.80, 0.55, 0.20}},
    };
    return table;
}

inline bool inside_shape(int klass, double u, double v) {
    // u, v in [-1, 1] relative to the image center
    const double au = std::abs(u), av = std::abs(v);
    switch (klass) {
        case 0: return au <= 0.55 && av <= 0.55;                          // square
        case 1: return u * u + v * v <= 0.55 * 0.55;                      // circle
        case 2: return v >= -0.55 && v <= 0.6 && au <= (0.6 - v) * 0.55;  // triangle
        case 3: return (au <= 0.2 && av <= 0.65) || (av <= 0.2 && au <= 0.65);  // cross
        case 4: {
            const double r2 = u * u + v * v;
            return r2 <= 0.6 * 0.6 && r2 >= 0.32 * 0.32;  // ring
        }
        case 5: return std::fmod(std::abs(v + 3.0), 0.5) < 0.25;  // stripes
        case 6: return au + av <= 0.7;                            // diamond
        case 7: return au >= 0.5 && av >= 0.5;                    // corners
        default: return false;
    }
}

template <typename S>
ImageGrid<S> base_image(int klass, Index image_size, Index channels) {
    const auto& spec = shape_table()[static_cast<size_t>(klass)];
    const double background = 0.45;
    auto img = ImageGrid<S>::zeros(channels, image_size, image_size);
    for (Index y = 0; y < image_size; ++y) {
        for (Index x = 0; x < image_size; ++x) {
            const double u = (2.0 * x + 1.0) / image_size - 1.0;
            const double v = (2.0 * y + 1.0) / image_size - 1.0;
            const bool in = inside_shape(klass, u, v);
            for (Index ch = 0; ch < channels; ++ch) {
                double value = background;
                if (in) {
                    value = channels == 3 ? spec.color[static_cast<size_t>(ch)]
                                          : 0.299 * spec.color[0] + 0.587 * spec.color[1] + 0.114 * spec.color[2];
                }
                img.at(ch, y, x) = static_cast<S>(value);
            }
        }
    }
    return img;
}

}  // namespace detail

inline std::vector<std::string> toy_class_names(int classes) {
    if (classes < 1 || classes > static_cast<int>(detail::shape_table().size())) {
        throw std::invalid_argument("toy_class_names: " + std::to_string(classes) + " classes unavailable");
    }
    std::vector<std::string> names;
    for (int k = 0; k < classes; ++k) names.push_back(detail::shape_table()[static_cast<size_t>(k)].name);
    return names;
}

/// Deterministic given the seed. Noise is uniform on [-sigma*sqrt(3),
/// sigma*sqrt(3)] (standard deviation sigma) so the closed-form class means
/// survive; classes must stay separated by at least 4 sigma and pixels must
/// stay inside [0,1], otherwise construction fails.
template <typename S>
ToyDataset<S> make_toy_dataset(int classes, int samples_per_class, Index image_size, Index channels,
                               double noise_sigma, uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("make_toy_dataset: need at least 2 classes");
    if (classes > static_cast<int>(detail::shape_table().size())) {
        throw std::invalid_argument("make_toy_dataset: at most " +
                                    std::to_string(detail::shape_table().size()) + " classes available");
    }
    if (samples_per_class < 1) throw std::invalid_argument("make_toy_dataset: samples_per_class must be >= 1");

    ToyDataset<S> ds;
    ds.noise_sigma = noise_sigma;
    ds.seed = seed;
    for (int k = 0; k < classes; ++k) {
        ds.class_names.push_back(detail::shape_table()[static_cast<size_t>(k)].name);
        ds.class_base.push_back(detail::base_image<S>(k, image_size, channels));
    }

    const double amplitude = noise_sigma * std::sqrt(3.0);
    double min_sep = 1e9;
    double lo = 1e9, hi = -1e9;
    for (int a = 0; a < classes; ++a) {
        for (Index i = 0; i < ds.class_base[static_cast<size_t>(a)].pixels.size(); ++i) {
            const double v = static_cast<double>(ds.class_base[static_cast<size_t>(a)].pixels.data()[i]);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (int b = a + 1; b < classes; ++b) {
            const auto& pa = ds.class_base[static_cast<size_t>(a)].pixels;
            const auto& pb = ds.class_base[static_cast<size_t>(b)].pixels;
            min_sep = std::min(min_sep, static_cast<double>((pa.mat() - pb.mat()).cwiseAbs().maxCoeff()));
        }
    }
    if (min_sep < 4.0 * noise_sigma) {
        throw std::invalid_argument("make_toy_dataset: class separation " + std::to_string(min_sep) +
                                    " below 4 sigma = " + std::to_string(4.0 * noise_sigma));
    }
    if (lo - amplitude < 0.0 || hi + amplitude > 1.0) {
        throw std::invalid_argument("make_toy_dataset: noise sigma " + std::to_string(noise_sigma) +
                                    " pushes pixels outside [0,1]");
    }

    Rng rng(seed);
    for (int k = 0; k < classes; ++k) {
        const std::string caption = label_to_caption(k, ds.class_names);
        for (int s = 0; s < samples_per_class; ++s) {
            ImageGrid<S> img = ds.class_base[static_cast<size_t>(k)];
            for (Index i = 0; i < img.pixels.size(); ++i) {
                img.pixels.data()[i] += static_cast<S>(rng.uniform(-amplitude, amplitude));
            }
            ds.images.push_back(std::move(img));
            ds.captions.push_back(caption);
            ds.labels.push_back(k);
        }
    }
    return ds;
}

/// Mean per-position variance of the token latents over the whole dataset:
/// the best masked-token MSE any caption-blind predictor can reach.
template <typename S>
double text_blind_floor(const ToyDataset<S>& ds, Index patch_size) {
    if (ds.images.empty()) throw std::invalid_argument("text_blind_floor: empty dataset");
    std::vector<Tensor<S>> latents;
    for (const auto& img : ds.images) latents.push_back(fold_image(img, patch_size));
    const Index count = latents[0].size();
    Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(count);
    for (const auto& l : latents) {
        for (Index i = 0; i < count; ++i) mean[i] += static_cast<double>(l.data()[i]);
    }
    mean /= static_cast<double>(latents.size());
    Eigen::ArrayXd var = Eigen::ArrayXd::Zero(count);
    for (const auto& l : latents) {
        for (Index i = 0; i < count; ++i) {
            const double d = static_cast<double>(l.data()[i]) - mean[i];
            var[i] += d * d;
        }
    }
    var /= static_cast<double>(latents.size());
    return var.mean();
}

/// Closed-form floor from the generator definition: between-class variance of
/// the base images plus the noise variance.
template <typename S>
double analytic_text_blind_floor(const ToyDataset<S>& ds) {
    const int k = ds.classes();
    const Index count = ds.class_base[0].pixels.size();
    Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(count);
    for (const auto& base : ds.class_base) {
        for (Index i = 0; i < count; ++i) mean[i] += static_cast<double>(base.pixels.data()[i]);
    }
    mean /= static_cast<double>(k);
    double between = 0.0;
    for (const auto& base : ds.class_base) {
        for (Index i = 0; i < count; ++i) {
            const double d = static_cast<double>(base.pixels.data()[i]) - mean[i];
            between += d * d;
        }
    }
    between /= static_cast<double>(k) * static_cast<double>(count);
    return between + ds.noise_sigma * ds.noise_sigma;
}

/// MSE of the marginal-mean predictor, evaluated sample by sample. Matches
/// the floor up to floating accumulation error.
template <typename S>
double marginal_mean_predictor_mse(const ToyDataset<S>& ds, Index patch_size) {
    std::vector<Tensor<S>> latents;
    for (const auto& img : ds.images) latents.push_back(fold_image(img, patch_size));
    const Index count = latents[0].size();
    Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(count);
    for (const auto& l : latents) {
        for (Index i = 0; i < count; ++i) mean[i] += static_cast<double>(l.data()[i]);
    }
    mean /= static_cast<double>(latents.size());
    double acc = 0.0;
    for (const auto& l : latents) {
        double per = 0.0;
        for (Index i = 0; i < count; ++i) {
            const double d = static_cast<double>(l.data()[i]) - mean[i];
            per += d * d;
        }
        acc += per / static_cast<double>(count);
    }
    return acc / static_cast<double>(latents.size());
}

}  // namespace jepat
