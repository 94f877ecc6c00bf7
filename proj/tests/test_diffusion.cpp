#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "stitch/diffusion.hpp"

using namespace stitch;

namespace {

UNetConfig tiny_unet_cfg() {
    UNetConfig c;
    c.widths = {8, 8, 8, 8};
    c.heads = 2;
    c.d_ctx = 64;
    c.temb_dim = 16;
    c.temb_hidden = 32;
    c.norm_groups = 2;
    return c;
}

struct Fixture {
    CodecConfig ccfg;
    Codec codec;
    Denoiser model;
    DiffusionSchedule sched;
    SampleConditions conds;

    Fixture() : ccfg(make_ccfg()), codec(ccfg, 3), model(tiny_unet_cfg(), 4),
                sched(DiffusionSchedule::make(1000, 1e-4, 0.02)) {
        model.extend_input_channels();
        Rng rng(5);
        // untrained models have zero output conv and zero extension slices;
        // sensitivity probes need both paths live
        for (auto& p : model.params())
            if (p.name == "out.conv.w" || p.name == "stem.ext.w")
                for (auto& v : p.value.vec()) v = (float)(rng.normal() * 0.02);

        int h = 24, w = 16;
        conds.latent_h = h;
        conds.latent_w = w;
        conds.mask_latent.assign((size_t)h * w, 0.f);
        for (int y = 8; y < 20; ++y)
            for (int x = 4; x < 12; ++x) conds.mask_latent[(size_t)y * w + x] = 1.f;
        conds.masked_latent.assign((size_t)4 * h * w, 0.1f);
        conds.null_text_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.1f);
        conds.null_texture_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.1f);

        conds.original = Image(3, 96, 64, 0.25f);
        for (size_t i = 0; i < conds.original.data.size(); ++i)
            conds.original.data[i] = (float)rng.uniform();
        conds.original = conds.original.quantized();
        conds.pixel_mask = Image(1, 96, 64, 0.f);
        for (int y = 32; y < 80; ++y)
            for (int x = 16; x < 48; ++x) conds.pixel_mask.at(0, y, x) = 1.f;
    }

    static CodecConfig make_ccfg() {
        CodecConfig c;
        c.base_width = 8;
        return c;
    }

    void add_all_conditions(Rng& rng) {
        conds.pose_latent.assign((size_t)18 * 24 * 16, 0.f);
        conds.pose_latent[37] = 1.f;
        conds.sketch_latent.assign((size_t)4 * 24 * 16, 0.f);
        conds.sketch_latent[11] = 0.8f;
        conds.text_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.2f);
        conds.texture_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.2f);
    }
};

}  // namespace

TEST_CASE("schedule: invariants, T=1000 tail, T=1 degenerate") {
    auto s = DiffusionSchedule::make(1000, 1e-4, 0.02);
    CHECK(s.alpha_bar[999] < 1e-3);
    CHECK(s.alpha_bar[0] > 0.999);
    for (int t = 1; t < 1000; ++t) {
        CHECK(s.alpha_bar[(size_t)t] < s.alpha_bar[(size_t)t - 1]);
        CHECK(s.beta[(size_t)t] > 0.f);
        CHECK(s.beta[(size_t)t] < 1.f);
    }
    auto s1 = DiffusionSchedule::make(1, 1e-4, 0.02);
    CHECK(s1.alpha_bar[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-6));
    CHECK_THROWS_AS(DiffusionSchedule::make(10, 0.5, 0.1), std::invalid_argument);
}

TEST_CASE("q_sample: identity at alpha_bar=1, scaling at eps=0, Monte Carlo variance") {
    Rng rng(7);
    std::vector<float> z0(256), eps(256, 0.f);
    for (auto& v : z0) v = (float)rng.normal();

    auto same = q_sample(z0, eps, 1.0);
    CHECK(std::memcmp(same.data(), z0.data(), z0.size() * sizeof(float)) == 0);

    double ab = 0.37;
    auto scaled = q_sample(z0, eps, ab);
    for (size_t i = 0; i < z0.size(); ++i)
        CHECK(scaled[i] == doctest::Approx(std::sqrt(ab) * z0[i]).epsilon(1e-6));

    // z0 = 0: empirical variance of q_sample draws should match 1 - alpha_bar
    std::vector<float> zeros(1, 0.f), e(1);
    int n = 10000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
        e[0] = (float)rng.normal();
        double v = q_sample(zeros, e, ab)[0];
        sum += v;
        sum2 += v * v;
    }
    double var = sum2 / n - (sum / n) * (sum / n);
    double expect = 1.0 - ab;
    double sigma = expect * std::sqrt(2.0 / (n - 1));  // sd of a sample variance
    CHECK(std::abs(var - expect) < 3 * sigma);
}

TEST_CASE("ddim timesteps: endpoints included, strictly increasing, count") {
    auto taus = ddim_timesteps(1000, 50);
    CHECK(taus.size() == 50);
    CHECK(taus.front() == 0);
    CHECK(taus.back() == 999);
    for (size_t i = 1; i < taus.size(); ++i) CHECK(taus[i] > taus[i - 1]);
    CHECK_THROWS_AS(ddim_timesteps(10, 11), std::invalid_argument);
}

TEST_CASE("ddim round trip: true noise recovers z0 exactly on a 2-step schedule") {
    auto sched = DiffusionSchedule::make(2, 1e-2, 2e-2);
    Rng rng(9);
    std::vector<float> z0(64), eps(64);
    for (auto& v : z0) v = (float)rng.normal();
    for (auto& v : eps) v = (float)rng.normal();
    auto z1 = q_sample(z0, eps, sched.alpha_bar[1]);
    auto r = ddim_step(sched, z1, eps, 1, 0);
    for (size_t i = 0; i < z0.size(); ++i)
        CHECK(r.z0_pred[i] == doctest::Approx(z0[i]).epsilon(1e-4));

    auto r2 = ddim_step(sched, z1, eps, 1, 0);
    CHECK(std::memcmp(r.z_prev.data(), r2.z_prev.data(), r.z_prev.size() * sizeof(float)) == 0);
    CHECK_THROWS_AS(ddim_step(sched, z1, eps, 0, 1), std::invalid_argument);
}

TEST_CASE("classifier-free guidance arithmetic") {
    std::vector<float> eu(8, 0.f), ec(8, 1.f);
    auto a1 = cfg_combine(eu, ec, 1.0);
    for (float v : a1) CHECK(v == 1.f);
    auto a0 = cfg_combine(eu, ec, 0.0);
    for (float v : a0) CHECK(v == 0.f);
    auto a75 = cfg_combine(eu, ec, 7.5);
    for (float v : a75) CHECK(v == doctest::Approx(7.5f));

    Rng rng(11);
    std::vector<float> ru(8), rc(8);
    for (auto& v : ru) v = (float)rng.normal();
    for (auto& v : rc) v = (float)rng.normal();
    auto b1 = cfg_combine(ru, rc, 1.0);
    for (size_t i = 0; i < 8; ++i) CHECK(b1[i] == doctest::Approx(rc[i]).epsilon(1e-6));
    auto b0 = cfg_combine(ru, rc, 0.0);
    for (size_t i = 0; i < 8; ++i) CHECK(b0[i] == ru[i]);
}

TEST_CASE("fast multi-condition CFG: exactly 2 forwards for K in 1..4, K=1 equals Eq. 4") {
    Fixture f;
    Rng rng(13);
    std::vector<float> z((size_t)4 * 24 * 16);
    for (auto& v : z) v = (float)rng.normal();

    // K grows from 1 to 4 as conditions are added
    std::vector<std::function<void(SampleConditions&)>> adders = {
        [&](SampleConditions& c) { c.text_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.2f); },
        [&](SampleConditions& c) {
            c.pose_latent.assign((size_t)18 * 24 * 16, 0.f);
            c.pose_latent[5] = 1.f;
        },
        [&](SampleConditions& c) {
            c.sketch_latent.assign((size_t)4 * 24 * 16, 0.f);
            c.sketch_latent[9] = 1.f;
        },
        [&](SampleConditions& c) { c.texture_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.2f); },
    };
    SampleConditions conds = f.conds;
    for (int k = 1; k <= 4; ++k) {
        adders[(size_t)k - 1](conds);
        CHECK(conds.condition_count() == k);
        f.model.reset_forward_calls();
        auto eps = fast_multi_cfg(f.model, z, conds, RoutingTable{}, 500, 7.5, true);
        CHECK(f.model.forward_calls() == 2);
        CHECK(eps.size() == z.size());
    }

    // K=1: the fast variant reduces exactly to single-condition guidance
    SampleConditions one = f.conds;
    one.text_ctx = Tensor<float>::randn({1, 16, 64}, rng, 0.2f);
    auto fast = fast_multi_cfg(f.model, z, one, RoutingTable{}, 321, 7.5, true);
    AttentionInput psi_u{{321}, {one.null_text_ctx, one.null_texture_ctx}, RoutingTable{}};
    AttentionInput psi_c{{321}, {one.text_ctx, one.null_texture_ctx}, RoutingTable{}};
    auto eu = f.model.denoise(assemble_gamma(z, one, false, false), psi_u).vec();
    auto ec = f.model.denoise(assemble_gamma(z, one, true, true), psi_c).vec();
    auto eq4 = cfg_combine(eu, ec, 7.5);
    CHECK(std::memcmp(fast.data(), eq4.data(), fast.size() * sizeof(float)) == 0);

    // alpha = 0 ignores the conditions entirely
    auto uncond = fast_multi_cfg(f.model, z, conds, RoutingTable{}, 321, 0.0, true);
    CHECK(std::memcmp(uncond.data(), eu.data(), eu.size() * sizeof(float)) == 0);

    // K = 0 needs a single forward pass
    f.model.reset_forward_calls();
    fast_multi_cfg(f.model, z, f.conds, RoutingTable{}, 500, 7.5, true);
    CHECK(f.model.forward_calls() == 1);
}

TEST_CASE("sampler: determinism, compositing contract, sketch gating at rho=0") {
    Fixture f;
    Rng rng(17);
    f.add_all_conditions(rng);

    SamplerConfig cfg;
    cfg.steps = 6;
    cfg.guidance = 7.5;
    cfg.sketch_rate = 0.2;
    cfg.seed = 42;
    auto sched = f.sched;

    Image a = sample(f.model, f.codec, f.conds, cfg, sched);
    Image b = sample(f.model, f.codec, f.conds, cfg, sched);
    CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);

    // pixels outside M are the original's, bit-exact
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 64; ++x)
            if (f.conds.pixel_mask.at(0, y, x) < 0.5f)
                for (int c = 0; c < 3; ++c) CHECK(a.at(c, y, x) == f.conds.original.at(c, y, x));

    // rho = 0: the sketch channel is zero at every step, so its content is
    // irrelevant
    cfg.sketch_rate = 0.0;
    Image s1 = sample(f.model, f.codec, f.conds, cfg, sched);
    SampleConditions other = f.conds;
    for (auto& v : other.sketch_latent) v = 123.f;
    Image s2 = sample(f.model, f.codec, other, cfg, sched);
    CHECK(std::memcmp(s1.data.data(), s2.data.data(), s1.data.size() * sizeof(float)) == 0);

    // rho = 1 conditions every step; different sketches now matter
    cfg.sketch_rate = 1.0;
    Image t1 = sample(f.model, f.codec, f.conds, cfg, sched);
    Image t2 = sample(f.model, f.codec, other, cfg, sched);
    CHECK(std::memcmp(t1.data.data(), t2.data.data(), t1.data.size() * sizeof(float)) != 0);

    // missing mandatory mask is rejected
    SampleConditions broken = f.conds;
    broken.mask_latent.clear();
    CHECK_THROWS_AS(sample(f.model, f.codec, broken, cfg, sched), std::invalid_argument);
}

TEST_CASE("sampler requires the extended denoiser") {
    Fixture f;
    Denoiser base(tiny_unet_cfg(), 91);
    SamplerConfig cfg;
    cfg.steps = 2;
    CHECK_THROWS_AS(sample(base, f.codec, f.conds, cfg, f.sched), std::invalid_argument);
}
