#pragma once

#include "stitch/checkpoint.hpp"
#include "stitch/conditioning.hpp"
#include "stitch/config.hpp"
#include "stitch/layers.hpp"

namespace stitch {

struct UNetConfig {
    std::vector<int> widths = {32, 48, 64, 64};  // finest (24x16) ... coarsest (3x2)
    int heads = 2;
    int d_ctx = 64;
    int temb_dim = 64;
    int temb_hidden = 128;
    int norm_groups = 4;
    int latent_channels = 4;

    static constexpr int kBaseChannels = 9;    // z_t(4) + m(1) + E(I_M)(4)
    static constexpr int kPoseChannels = 18;
    static constexpr int kSketchChannels = 4;  // E(S-bar)
    static constexpr int kExtChannels = kPoseChannels + kSketchChannels;
    static constexpr int kFullChannels = kBaseChannels + kExtChannels;  // 31

    static UNetConfig from_run(const RunConfig& rc) {
        UNetConfig c;
        c.widths = rc.unet_widths;
        c.heads = rc.unet_heads;
        c.d_ctx = rc.d_ctx;
        c.temb_dim = rc.temb_dim;
        c.temb_hidden = rc.temb_hidden;
        c.norm_groups = rc.norm_groups;
        return c;
    }
};

// Attention conditioning input psi = [t; text context; texture context] with
// the per-group routing table.
struct AttentionInput {
    std::vector<int> t;  // diffusion step per batch element
    PsiStreams streams;
    RoutingTable routing;
};

// Conditional denoiser epsilon_theta: UNet over the latent space with the
// concatenated spatial input gamma and cross-attention at four resolution
// groups (group 3 = highest resolution, group 0 = bottleneck). Self-attention
// runs at every level except the finest, where its quadratic token cost buys
// nothing at this scale; cross-attention is present in all four groups.
class Denoiser {
public:
    Denoiser(UNetConfig cfg, uint64_t seed);

    // Adds zero-initialized kernel slices for the 22 pose+sketch channels.
    // The original 9-channel slices are untouched, so the extended model is
    // bit-identical to the base model until the new slices train away from
    // zero. Rejected if already extended.
    void extend_input_channels();
    bool extended() const { return stem_ext_ != nullptr; }

    // gamma: (B,9,h,w) for the base model, (B,31,h,w) once extended.
    Tensor<float> denoise(const Tensor<float>& gamma, const AttentionInput& psi) const;

    // group id of each cross-attention block, by construction order
    const std::vector<std::pair<std::string, int>>& attention_groups() const { return attn_groups_; }
    static int group_for_level(int level) { return 3 - level; }

    int64_t forward_calls() const { return forward_calls_; }
    void reset_forward_calls() { forward_calls_ = 0; }

    ParamStore<float>& params() { return params_; }
    const ParamStore<float>& params() const { return params_; }
    const UNetConfig& config() const { return cfg_; }

    // Checkpoint layout: the stem extension tensor is emitted directly after
    // the base stem tensor so the zero-init extension is auditable from the
    // file.
    void save_into(Checkpoint& ck, const std::string& prefix = "unet.") const;
    void load_from(const Checkpoint& ck, const std::string& prefix = "unet.");

private:
    struct ResBlock {
        GroupNormLayer<float> n1, n2;
        Conv2d<float> conv1, conv2;
        Dense<float> temb;
        Conv2d<float> skip;  // 1x1 when channel counts differ
        bool has_skip = false;

        Tensor<float> operator()(const Tensor<float>& x, const Tensor<float>& temb_vec) const;
    };

    struct AttnBlock {
        GroupNormLayer<float> norm;
        LayerNormLayer<float> ln1, ln2, ln3;
        MultiheadAttention<float> self_attn, cross_attn;
        Dense<float> ff1, ff2;
        int group = 0;
        bool with_self = true;

        Tensor<float> operator()(const Tensor<float>& x, const AttentionInput& psi) const;
    };

    ResBlock make_res(const std::string& name, int cin, int cout, Rng& rng);
    AttnBlock make_attn(const std::string& name, int channels, int group, Rng& rng,
                        bool with_self = true);

    UNetConfig cfg_;
    ParamStore<float> params_;
    mutable int64_t forward_calls_ = 0;
    std::vector<std::pair<std::string, int>> attn_groups_;

    Parameter<float>* stem_w_ = nullptr;
    Parameter<float>* stem_b_ = nullptr;
    Parameter<float>* stem_ext_ = nullptr;

    Dense<float> temb1_, temb2_;

    ResBlock enc_res_[3];
    AttnBlock enc_attn_[3];
    Conv2d<float> down_[3];
    ResBlock mid_res1_, mid_res2_;
    AttnBlock mid_attn_;
    Conv2d<float> up_[3];
    ResBlock dec_res_[3];
    AttnBlock dec_attn_[3];
    GroupNormLayer<float> out_norm_;
    Conv2d<float> out_conv_;
};

// Sinusoidal timestep embedding rows, shape (B, dim).
Tensor<float> timestep_embedding(const std::vector<int>& t, int dim);

}  // namespace stitch
