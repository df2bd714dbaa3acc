#pragma once

#include "jepat/dataset.hpp"
#include "jepat/forward.hpp"
#include "jepat/sampling.hpp"
#include "jepat/training.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <vector>

namespace jepat {

/// Gaussian Fréchet distance between two row-sample matrices:
/// |mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}), full covariances.
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("frechet_distance: dimension mismatch");
    if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("frechet_distance: need at least 2 samples");

    const Eigen::VectorXd mu1 = a.colwise().mean();
    const Eigen::VectorXd mu2 = b.colwise().mean();
    const Eigen::MatrixXd ca = a.rowwise() - mu1.transpose();
    const Eigen::MatrixXd cb = b.rowwise() - mu2.transpose();
    const Eigen::MatrixXd c1 = ca.transpose() * ca / static_cast<double>(a.rows() - 1);
    const Eigen::MatrixXd c2 = cb.transpose() * cb / static_cast<double>(b.rows() - 1);

    // sqrt(C1) via eigendecomposition, then tr((C1 C2)^{1/2}) through the
    // symmetric product sqrt(C1) C2 sqrt(C1)
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(c1);
    Eigen::VectorXd ev = es1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd sqrt_c1 = es1.eigenvectors() * ev.asDiagonal() * es1.eigenvectors().transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(sqrt_c1 * c2 * sqrt_c1);
    const double tr_sqrt = es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double d2 = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d2);
}

/// Stack per-image token latents into one row-per-token sample matrix.
template <typename S>
Eigen::MatrixXd stack_token_rows(const std::vector<Tensor<S>>& latents) {
    if (latents.empty()) throw std::invalid_argument("stack_token_rows: no samples");
    const Index n = latents[0].rows(), d = latents[0].cols();
    Eigen::MatrixXd out(static_cast<Index>(latents.size()) * n, d);
    for (size_t i = 0; i < latents.size(); ++i) {
        out.middleRows(static_cast<Index>(i) * n, n) = latents[i].mat().template cast<double>();
    }
    return out;
}

/// Fréchet distance in token-latent space between real and generated image
/// sets. Requires at least min_samples images per side.
template <typename S>
double token_frechet(const std::vector<Tensor<S>>& real, const std::vector<Tensor<S>>& generated,
                     int min_samples = 256) {
    if (static_cast<int>(real.size()) < min_samples || static_cast<int>(generated.size()) < min_samples) {
        throw std::invalid_argument("token_frechet: need at least " + std::to_string(min_samples) +
                                    " samples per side, got " + std::to_string(real.size()) + "/" +
                                    std::to_string(generated.size()));
    }
    return frechet_distance(stack_token_rows(real), stack_token_rows(generated));
}

/// Masked-token MSE in the generative regime: every token is masked (the
/// guard token stays visible as context) and the model predicts the clean
/// latents through the deterministic masked-prediction path (mask tokens
/// only, no denoising input). The prediction sees nothing of the target
/// beyond the guard token and the caption. Averaged over `draws` mask
/// shuffles per sample; deterministic in the seed.
template <typename S>
double masked_token_mse(const ModelParams<S>& params, const ModelConfig& cfg, const AblationFlags& flags,
                        const std::vector<TrainSample<S>>& eval, int draws, uint64_t seed) {
    if (eval.empty()) throw std::invalid_argument("masked_token_mse: empty evaluation set");
    Rng rng(seed);
    double acc = 0.0;
    for (const auto& sample : eval) {
        double per = 0.0;
        for (int r = 0; r < draws; ++r) {
            MaskPlan plan = make_mask_plan(static_cast<int>(cfg.n_tokens()), 1.0, rng);
            GradTape<S> t(false);
            auto m = register_constants(t, params);
            auto backbone =
                project_condition(t, flags.text_inject ? sample.caption.raw : sample.caption.neutral, m);
            auto fusion_text = project_condition(t, sample.caption.raw, m);
            auto pass = student_pass(t, sample.tokens, plan, backbone, fusion_text, m, cfg, flags);
            const Tensor<S>& v0_hat = t.value(decode_head(t, pass.z_final, m));
            per += static_cast<double>(masked_row_mse(v0_hat, sample.tokens, plan));
        }
        acc += per / draws;
    }
    return acc / static_cast<double>(eval.size());
}

/// Between-class over within-class distance ratio of flattened generated
/// latents; higher means captions separate the outputs more cleanly.
template <typename S>
double text_separation_ratio(const std::vector<std::vector<Tensor<S>>>& per_class) {
    const int k = static_cast<int>(per_class.size());
    if (k < 2) throw std::invalid_argument("text_separation_ratio: need at least 2 classes");
    std::vector<Eigen::VectorXd> centroids;
    for (const auto& cls : per_class) {
        if (cls.empty()) throw std::invalid_argument("text_separation_ratio: empty class");
        Eigen::VectorXd c = Eigen::VectorXd::Zero(cls[0].size());
        for (const auto& t : cls) {
            c += Eigen::Map<const MatrixX<S>>(t.data(), 1, t.size()).template cast<double>().transpose();
        }
        centroids.push_back(c / static_cast<double>(cls.size()));
    }
    double between = 0.0;
    int pairs = 0;
    for (int i = 0; i < k; ++i) {
        for (int j = i + 1; j < k; ++j) {
            between += (centroids[static_cast<size_t>(i)] - centroids[static_cast<size_t>(j)]).norm();
            ++pairs;
        }
    }
    between /= pairs;
    double within = 0.0;
    int count = 0;
    for (int i = 0; i < k; ++i) {
        for (const auto& t : per_class[static_cast<size_t>(i)]) {
            Eigen::VectorXd x =
                Eigen::Map<const MatrixX<S>>(t.data(), 1, t.size()).template cast<double>().transpose();
            within += (x - centroids[static_cast<size_t>(i)]).norm();
            ++count;
        }
    }
    within /= count;
    return within > 0.0 ? between / within : std::numeric_limits<double>::infinity();
}

struct ToyMetrics {
    double masked_mse = 0.0;
    double text_sep = 0.0;
    double frechet = 0.0;
};

}  // namespace jepat
