#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "jepat/forward.hpp"
#include "jepat/objectives.hpp"

#include "test_util.hpp"

#include <cmath>
#include <numbers>

using namespace jepat;
using jepat_test::bits_equal;

namespace {

// closed-form mean of a Gaussian(mu, sigma) conditioned on [lo, hi]
double trunc_normal_mean(double mu, double sigma, double lo, double hi) {
    auto phi = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); };
    auto cdf = [](double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); };
    const double a = (lo - mu) / sigma, b = (hi - mu) / sigma;
    return mu + sigma * (phi(a) - phi(b)) / (cdf(b) - cdf(a));
}

ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.patch_size = 4;
    cfg.d_txt = 8;
    cfg.cond_hidden = 8;
    cfg.enc = EncoderConfig{1, 2, 8, 2, 2};
    cfg.dec = PredictorConfig{1, 2, 8, 2};
    return cfg;
}

}  // namespace

TEST_CASE("mask plan: forced ratio arithmetic and structure") {
    Rng rng(1);
    MaskPlan plan = make_mask_plan(16, 0.75, rng);
    CHECK(plan.masked_count() == 12);
    CHECK(plan.visible_indices().size() == 4);

    std::vector<bool> seen(16, false);
    for (int v : plan.order) {
        CHECK(!seen[static_cast<size_t>(v)]);
        seen[static_cast<size_t>(v)] = true;
    }

    CHECK_THROWS(make_mask_plan(1, 0.75, rng));
    CHECK_THROWS(sample_mask_plan(1, rng));
}

TEST_CASE("mask plan: all-masked guard keeps the last of the shuffle order") {
    Rng rng(2);
    MaskPlan plan = make_mask_plan(16, 1.0, rng);
    CHECK(plan.masked_count() == 16);
    CHECK(plan.visible_indices().empty());
    auto ctx = plan.context_indices();
    REQUIRE(ctx.size() == 1);
    CHECK(ctx[0] == plan.order.back());
}

TEST_CASE("mask plan distribution: floor holds, mean matches the oracle") {
    Rng rng(3);
    double sum = 0.0, lo = 1.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        MaskPlan plan = sample_mask_plan(16, rng);
        CHECK(plan.ratio >= 0.7);
        CHECK(plan.ratio <= 1.0);
        CHECK(plan.masked_count() == static_cast<int>(std::llround(plan.ratio * 16)));
        sum += plan.ratio;
        lo = std::min(lo, plan.ratio);
    }
    CHECK(lo >= 0.7);
    const double oracle = trunc_normal_mean(1.0, 0.25, 0.7, 1.0);
    CHECK(std::abs(sum / draws - oracle) < 0.01);
}

TEST_CASE("mask plan determinism") {
    Rng a(77), b(77);
    MaskPlan p1 = sample_mask_plan(16, a);
    MaskPlan p2 = sample_mask_plan(16, b);
    CHECK(p1.ratio == p2.ratio);
    CHECK(p1.mask == p2.mask);
    CHECK(p1.order == p2.order);
}

TEST_CASE("jepa loss: examples and masking exclusivity") {
    Rng rng(4);
    MaskPlan plan = make_mask_plan(4, 0.25, rng);  // exactly one masked row
    REQUIRE(plan.masked_count() == 1);
    const int masked = plan.masked_indices()[0];

    Tensor<double> z({4, 4});
    rng.fill_normal(z);
    CHECK(jepa_loss(z, z, plan, 2.0) == 0.0);

    Tensor<double> z2 = z;
    z2.mat().row(masked).array() += 1.0;
    CHECK(jepa_loss(z2, z, plan, 2.0) == doctest::Approx(2.0).epsilon(1e-12));

    // perturbing an unmasked row changes nothing, bit for bit
    const double before = jepat::jepa_loss(z2, z, plan, 2.0);
    Tensor<double> z3 = z2;
    for (int i = 0; i < 4; ++i) {
        if (i != masked) z3.mat().row(i).array() += 123.0;
    }
    Tensor<double> zt = z;
    for (int i = 0; i < 4; ++i) {
        if (i != masked) zt.mat().row(i).array() -= 55.0;
    }
    const double after = jepat::jepa_loss(z3, zt, plan, 2.0);
    CHECK(std::memcmp(&before, &after, sizeof(double)) == 0);

    MaskPlan empty;
    empty.mask.assign(4, 0);
    empty.order = {0, 1, 2, 3};
    CHECK_THROWS_WITH_AS(jepa_loss(z, z, empty, 2.0), doctest::Contains("empty mask"), std::invalid_argument);
}

TEST_CASE("jepa loss: tape route agrees with the direct route") {
    Rng rng(5);
    MaskPlan plan = make_mask_plan(6, 0.8, rng);
    Tensor<double> zs({6, 8}), ze({6, 8});
    rng.fill_normal(zs);
    rng.fill_normal(ze);

    GradTape<double> t;
    auto var = jepa_loss(t, t.leaf(zs), ze, plan, 2.0);
    CHECK(t.value(var).value() == doctest::Approx(jepa_loss(zs, ze, plan, 2.0)).epsilon(1e-12));
}

TEST_CASE("flow sample path identity") {
    Rng rng(6);
    Tensor<double> v0({4, 6});
    rng.fill_normal(v0);
    FlowSample<double> fs = draw_flow_sample(v0, rng);
    CHECK(fs.t >= kFlowTimeMin);
    CHECK(fs.t <= kFlowTimeMax);
    Tensor<double> rebuilt(v0.shape(), fs.epsilon.mat() * (1.0 - fs.t) + v0.mat() * fs.t);
    CHECK(bits_equal(rebuilt, fs.v_t));

    // at t = 1 the linear path lands exactly on v0
    Tensor<double> end(v0.shape(), fs.epsilon.mat() * 0.0 + v0.mat() * 1.0);
    CHECK(bits_equal(end, v0));
}

TEST_CASE("fm loss: oracle closures") {
    Rng rng(7);
    MaskPlan plan = make_mask_plan(4, 0.75, rng);

    Tensor<double> ones = Tensor<double>::ones({4, 6});
    auto return_truth = [&](const Tensor<double>&, double) { return ones; };
    CHECK(fm_loss(ones, plan, return_truth, 3, 99) == 0.0);

    auto return_zero = [](const Tensor<double>& vt, double) { return Tensor<double>::zeros(vt.shape()); };
    CHECK(fm_loss(ones, plan, return_zero, 3, 99) == doctest::Approx(1.0).epsilon(1e-12));

    // closure returning v_t: per-draw error is (1-t)^2 * masked mean of (eps - v0)^2,
    // reproduced here from the same sub-seeds
    Tensor<double> v0({4, 6});
    rng.fill_normal(v0);
    auto identity = [](const Tensor<double>& vt, double) { return vt; };
    const double got = fm_loss(v0, plan, identity, 4, 1234);
    double expect = 0.0;
    for (int i = 0; i < 4; ++i) {
        Rng sub(fm_subseed(1234, i));
        FlowSample<double> fs = draw_flow_sample(v0, sub);
        expect += masked_row_mse(fs.v_t, v0, plan);
    }
    expect /= 4.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-15));

    MaskPlan empty;
    empty.mask.assign(4, 0);
    empty.order = {0, 1, 2, 3};
    CHECK_THROWS_WITH_AS(fm_loss(v0, empty, identity, 1, 0), doctest::Contains("empty mask"),
                         std::invalid_argument);
}

TEST_CASE("fm loss: repeat linearity is exact under sub-seeds") {
    Rng rng(8);
    MaskPlan plan = make_mask_plan(5, 0.8, rng);
    Tensor<double> v0({5, 4});
    rng.fill_normal(v0);
    auto noisy_model = [&](const Tensor<double>& vt, double t) {
        return Tensor<double>(vt.shape(), vt.mat() * (0.3 + t));
    };
    const uint64_t seed = 3141;
    const int k = 5;
    const double joint = fm_loss(v0, plan, noisy_model, k, seed);
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
        acc += fm_loss(v0, plan, noisy_model, 1, seed + static_cast<uint64_t>(i) * 0x9E3779B97F4A7C15ull);
    }
    const double mean = acc / k;
    CHECK(std::memcmp(&joint, &mean, sizeof(double)) == 0);
}

TEST_CASE("fm loss: unmasked-position mutations leave the value bit-identical") {
    ModelConfig cfg = mini_config();
    Rng rng(9);
    auto params = init_model_params<double>(cfg, rng);
    Tensor<double> v0({cfg.n_tokens(), cfg.d_tok()});
    rng.fill_normal(v0, 0.5);
    MaskPlan plan = make_mask_plan(static_cast<int>(cfg.n_tokens()), 0.75, rng);
    TextStub<double> stub(Vocabulary::from_captions({"a b"}), cfg.d_txt, 0);
    Tensor<double> raw = stub.embed("a b");
    Tensor<double> neutral = Tensor<double>::zeros({cfg.d_txt});

    // the model closure is bound to the clean context v0; the loss's v0
    // argument is what gets mutated at unmasked positions
    auto closure = [&](const Tensor<double>& vt, double) {
        GradTape<double> t(false);
        auto m = register_constants(t, params);
        auto bundle = project_condition(t, raw, m);
        auto pass = student_pass(t, v0, plan, bundle, bundle, m, cfg, AblationFlags{}, &vt);
        return t.value(decode_head(t, pass.z_final, m));
    };

    const double base = fm_loss(v0, plan, closure, 2, 555);
    Tensor<double> mutated = v0;
    for (int i : plan.visible_indices()) mutated.mat().row(i).array() += 7.5;
    const double after = fm_loss(mutated, plan, closure, 2, 555);
    CHECK(std::memcmp(&base, &after, sizeof(double)) == 0);
}

TEST_CASE("fm loss: tape route matches the direct route through the model") {
    ModelConfig cfg = mini_config();
    Rng rng(10);
    auto params = init_model_params<double>(cfg, rng);
    Tensor<double> v0({cfg.n_tokens(), cfg.d_tok()});
    rng.fill_normal(v0, 0.5);
    MaskPlan plan = make_mask_plan(static_cast<int>(cfg.n_tokens()), 0.75, rng);
    TextStub<double> stub(Vocabulary::from_captions({"a b"}), cfg.d_txt, 0);
    Tensor<double> raw = stub.embed("a b");
    const uint64_t seed = 808;

    GradTape<double> t;
    auto m = register_leaves(t, params);
    auto bundle = project_condition(t, raw, m);
    auto tape_loss = fm_loss(
        t, v0, plan,
        [&](const Tensor<double>& vt, double) {
            auto pass = student_pass(t, v0, plan, bundle, bundle, m, cfg, AblationFlags{}, &vt);
            return decode_head(t, pass.z_final, m);
        },
        3, seed);

    auto plain_closure = [&](const Tensor<double>& vt, double) {
        GradTape<double> s(false);
        auto mv = register_constants(s, params);
        auto b = project_condition(s, raw, mv);
        auto pass = student_pass(s, v0, plan, b, b, mv, cfg, AblationFlags{}, &vt);
        return s.value(decode_head(s, pass.z_final, mv));
    };
    const double plain = fm_loss(v0, plan, plain_closure, 3, seed);
    CHECK(t.value(tape_loss).value() == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("total loss combinations") {
    LossWeights w;
    w.lambda_jepa = 2.0;
    CHECK(total_loss(1.0, 0.5, w) == 2.0);
    w.lambda_jepa = 0.0;
    CHECK(total_loss(1.25, 9.0, w) == 1.25);
    w.lambda_jepa = 2.0;
    CHECK(total_loss(1.25, 0.0, w) == 1.25);

    GradTape<double> t;
    auto fm = t.constant(Tensor<double>::scalar(1.0));
    auto je = t.constant(Tensor<double>::scalar(0.5));
    LossWeights w2;
    CHECK(t.value(total_loss(t, fm, je, w2)).value() == 2.0);
}
