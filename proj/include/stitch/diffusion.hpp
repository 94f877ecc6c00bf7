#pragma once

#include "stitch/codec.hpp"
#include "stitch/config.hpp"
#include "stitch/unet.hpp"

namespace stitch {

// Linear beta schedule with cumulative products computed in double.
struct DiffusionSchedule {
    int T = 0;
    std::vector<float> beta, alpha, alpha_bar;

    static DiffusionSchedule make(int T, double beta_start, double beta_end);
};

// Uniformly spaced ascending timestep subsequence including both endpoints
// (0 and T-1).
std::vector<int> ddim_timesteps(int T, int steps);

// z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps
std::vector<float> q_sample(const std::vector<float>& z0, const std::vector<float>& eps,
                            double alpha_bar_t);

struct DdimResult {
    std::vector<float> z_prev;
    std::vector<float> z0_pred;
};

// Deterministic (eta = 0) DDIM update from t to t_prev < t. t_prev == -1
// returns the clean prediction itself.
DdimResult ddim_step(const DiffusionSchedule& sched, const std::vector<float>& z_t,
                     const std::vector<float>& eps_hat, int t, int t_prev);

// Classifier-free guidance: eps_u + alpha (eps_c - eps_u).
std::vector<float> cfg_combine(const std::vector<float>& eps_uncond,
                               const std::vector<float>& eps_cond, double alpha);

// Per-sample conditions prepared in latent space (already latent-scaled).
// Empty vectors / undefined tensors mean "condition absent"; absent spatial
// conditions enter the denoiser as zero tensors and absent semantic streams
// as the null contexts.
struct SampleConditions {
    int latent_h = 0, latent_w = 0;

    std::vector<float> mask_latent;    // (1,h,w), mandatory
    std::vector<float> masked_latent;  // (4,h,w), mandatory

    std::vector<float> pose_latent;    // (18,h,w)
    std::vector<float> sketch_latent;  // (4,h,w)
    Tensor<float> text_ctx;            // (1,L,d)
    Tensor<float> texture_ctx;         // (1,N,d)

    Tensor<float> null_text_ctx;       // mandatory
    Tensor<float> null_texture_ctx;    // mandatory

    Image original;    // (3,H,W) pixel image for compositing
    Image pixel_mask;  // (1,H,W) binary inpainting mask

    int condition_count() const {
        return (pose_latent.empty() ? 0 : 1) + (sketch_latent.empty() ? 0 : 1) +
               (text_ctx.defined() ? 1 : 0) + (texture_ctx.defined() ? 1 : 0);
    }
    void check_mandatory() const;
};

struct SamplerConfig {
    int steps = 50;
    double guidance = 7.5;
    double sketch_rate = 0.2;
    RoutingTable routing;
    uint64_t seed = 0;

    static SamplerConfig from_run(const RunConfig& rc) {
        SamplerConfig c;
        c.steps = rc.ddim_steps;
        c.guidance = rc.guidance;
        c.sketch_rate = rc.sketch_rate;
        c.routing = rc.routing_table();
        c.seed = rc.seed;
        return c;
    }
};

// gamma = [z_t; m; E(I_M); p; s] for one latent, 31 channels.
Tensor<float> assemble_gamma(const std::vector<float>& z_t, const SampleConditions& conds,
                             bool conditional, bool sketch_active);

// Fast multi-condition guidance: one joint-conditional and one unconditional
// forward per step regardless of how many conditions are present (K = 0 uses
// a single unconditional pass).
std::vector<float> fast_multi_cfg(const Denoiser& model, const std::vector<float>& z_t,
                                  const SampleConditions& conds, const RoutingTable& routing,
                                  int t, double guidance, bool sketch_active);

// DDIM sampling with sketch-rate gating, decoding and exact outside-mask
// compositing. Pure function of (model, conditions, config, schedule).
Image sample(const Denoiser& model, const Codec& codec, const SampleConditions& conds,
             const SamplerConfig& cfg, const DiffusionSchedule& sched,
             std::vector<float>* out_latent = nullptr);

}  // namespace stitch
