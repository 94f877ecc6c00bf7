#include "stitch/diffusion.hpp"

#include <cmath>

#include "stitch/ops.hpp"

namespace stitch {

DiffusionSchedule DiffusionSchedule::make(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize((size_t)T);
    s.alpha.resize((size_t)T);
    s.alpha_bar.resize((size_t)T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
        prod *= 1.0 - b;
        s.beta[(size_t)t] = (float)b;
        s.alpha[(size_t)t] = (float)(1.0 - b);
        s.alpha_bar[(size_t)t] = (float)prod;
    }
    return s;
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("ddim steps must be in [1, T]");
    std::vector<int> taus;
    if (steps == 1) {
        taus.push_back(T - 1);
        return taus;
    }
    for (int i = 0; i < steps; ++i)
        taus.push_back((int)std::lround((double)i * (T - 1) / (steps - 1)));
    for (size_t i = 1; i < taus.size(); ++i)
        if (taus[i] <= taus[i - 1]) throw std::logic_error("ddim timesteps not strictly increasing");
    return taus;
}

std::vector<float> q_sample(const std::vector<float>& z0, const std::vector<float>& eps,
                            double alpha_bar_t) {
    if (z0.size() != eps.size()) throw std::invalid_argument("q_sample: size mismatch");
    float a = (float)std::sqrt(alpha_bar_t);
    float b = (float)std::sqrt(1.0 - alpha_bar_t);
    std::vector<float> out(z0.size());
    for (size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

DdimResult ddim_step(const DiffusionSchedule& sched, const std::vector<float>& z_t,
                     const std::vector<float>& eps_hat, int t, int t_prev) {
    if (z_t.size() != eps_hat.size()) throw std::invalid_argument("ddim_step: size mismatch");
    if (t <= t_prev || t >= sched.T || t_prev < -1)
        throw std::invalid_argument("ddim_step needs T > t > t_prev >= -1");
    double ab_t = sched.alpha_bar[(size_t)t];
    double sa = std::sqrt(ab_t), sb = std::sqrt(1.0 - ab_t);
    DdimResult r;
    r.z0_pred.resize(z_t.size());
    for (size_t i = 0; i < z_t.size(); ++i)
        r.z0_pred[i] = (float)(((double)z_t[i] - sb * eps_hat[i]) / sa);
    if (t_prev < 0) {
        r.z_prev = r.z0_pred;
        return r;
    }
    double ab_p = sched.alpha_bar[(size_t)t_prev];
    double pa = std::sqrt(ab_p), pb = std::sqrt(1.0 - ab_p);
    r.z_prev.resize(z_t.size());
    for (size_t i = 0; i < z_t.size(); ++i)
        r.z_prev[i] = (float)(pa * r.z0_pred[i] + pb * eps_hat[i]);
    return r;
}

std::vector<float> cfg_combine(const std::vector<float>& eps_uncond,
                               const std::vector<float>& eps_cond, double alpha) {
    if (eps_uncond.size() != eps_cond.size()) throw std::invalid_argument("cfg: size mismatch");
    std::vector<float> out(eps_uncond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = (float)(eps_uncond[i] + alpha * ((double)eps_cond[i] - eps_uncond[i]));
    return out;
}

void SampleConditions::check_mandatory() const {
    size_t hw = (size_t)latent_h * latent_w;
    if (latent_h <= 0 || latent_w <= 0) throw std::invalid_argument("conditions missing latent dims");
    if (mask_latent.size() != hw)
        throw std::invalid_argument("mandatory inpainting mask missing or mis-sized");
    if (masked_latent.size() != 4 * hw)
        throw std::invalid_argument("mandatory masked-image latent missing or mis-sized");
    if (!null_text_ctx.defined() || !null_texture_ctx.defined())
        throw std::invalid_argument("null contexts are required for the unconditional branch");
    if (!pose_latent.empty() && pose_latent.size() != 18 * hw)
        throw std::invalid_argument("pose latent mis-sized");
    if (!sketch_latent.empty() && sketch_latent.size() != 4 * hw)
        throw std::invalid_argument("sketch latent mis-sized");
}

Tensor<float> assemble_gamma(const std::vector<float>& z_t, const SampleConditions& conds,
                             bool conditional, bool sketch_active) {
    int h = conds.latent_h, w = conds.latent_w;
    size_t hw = (size_t)h * w;
    std::vector<float> g;
    g.reserve(31 * hw);
    g.insert(g.end(), z_t.begin(), z_t.end());
    g.insert(g.end(), conds.mask_latent.begin(), conds.mask_latent.end());
    g.insert(g.end(), conds.masked_latent.begin(), conds.masked_latent.end());
    if (conditional && !conds.pose_latent.empty())
        g.insert(g.end(), conds.pose_latent.begin(), conds.pose_latent.end());
    else
        g.resize(g.size() + 18 * hw, 0.f);
    if (conditional && sketch_active && !conds.sketch_latent.empty())
        g.insert(g.end(), conds.sketch_latent.begin(), conds.sketch_latent.end());
    else
        g.resize(g.size() + 4 * hw, 0.f);
    return Tensor<float>::from({1, UNetConfig::kFullChannels, h, w}, std::move(g));
}

std::vector<float> fast_multi_cfg(const Denoiser& model, const std::vector<float>& z_t,
                                  const SampleConditions& conds, const RoutingTable& routing,
                                  int t, double guidance, bool sketch_active) {
    conds.check_mandatory();
    AttentionInput psi_uncond{{t}, {conds.null_text_ctx, conds.null_texture_ctx}, routing};
    std::vector<float> eps_uncond =
        model.denoise(assemble_gamma(z_t, conds, false, false), psi_uncond).vec();
    if (conds.condition_count() == 0) return eps_uncond;

    AttentionInput psi_cond{{t},
                            {conds.text_ctx.defined() ? conds.text_ctx : conds.null_text_ctx,
                             conds.texture_ctx.defined() ? conds.texture_ctx
                                                         : conds.null_texture_ctx},
                            routing};
    std::vector<float> eps_cond =
        model.denoise(assemble_gamma(z_t, conds, true, sketch_active), psi_cond).vec();
    return cfg_combine(eps_uncond, eps_cond, guidance);
}

Image sample(const Denoiser& model, const Codec& codec, const SampleConditions& conds,
             const SamplerConfig& cfg, const DiffusionSchedule& sched,
             std::vector<float>* out_latent) {
    NoGradGuard ng;
    conds.check_mandatory();
    if (!model.extended())
        throw std::invalid_argument("sampling requires the 31-channel extended denoiser");
    int h = conds.latent_h, w = conds.latent_w;

    Rng rng(cfg.seed);
    std::vector<float> z((size_t)4 * h * w);
    for (auto& v : z) v = (float)rng.normal();

    std::vector<int> taus = ddim_timesteps(sched.T, cfg.steps);
    int active_steps = (int)std::lround(cfg.sketch_rate * cfg.steps);
    std::vector<float> z0_pred = z;
    for (int i = (int)taus.size() - 1; i >= 0; --i) {
        int t = taus[(size_t)i];
        int t_prev = i > 0 ? taus[(size_t)i - 1] : -1;
        // the sketch conditions only the earliest (noisiest) steps
        bool sketch_active = ((int)taus.size() - 1 - i) < active_steps;
        std::vector<float> eps =
            fast_multi_cfg(model, z, conds, cfg.routing, t, cfg.guidance, sketch_active);
        DdimResult r = ddim_step(sched, z, eps, t, t_prev);
        z = std::move(r.z_prev);
        z0_pred = std::move(r.z0_pred);
    }
    if (out_latent) *out_latent = z0_pred;

    // undo the latent normalization before decoding
    std::vector<float> raw = z0_pred;
    float inv_scale = 1.f / codec.latent_scale();
    for (auto& v : raw) v *= inv_scale;
    Image gen = codec.decode_image(raw);

    // pixels outside the inpainting mask come from the original, bit-exact
    Image out = conds.original;
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            if (conds.pixel_mask.at(0, y, x) > 0.5f)
                for (int c = 0; c < 3; ++c) out.at(c, y, x) = gen.at(c, y, x);
    return out;
}

}  // namespace stitch
