#pragma once

#include "stitch/config.hpp"
#include "stitch/image.hpp"
#include "stitch/layers.hpp"

namespace stitch {

struct CodecConfig {
    int image_h = 96;
    int image_w = 64;
    int downsample_factor = 4;  // realized as two stride-2 stages
    int latent_channels = 4;
    int base_width = 16;

    static CodecConfig from_run(const RunConfig& rc) {
        CodecConfig c;
        c.image_h = rc.image_h;
        c.image_w = rc.image_w;
        c.downsample_factor = rc.downsample_factor;
        c.latent_channels = rc.latent_channels;
        c.base_width = rc.codec_base_width;
        return c;
    }

    int latent_h() const { return image_h / downsample_factor; }
    int latent_w() const { return image_w / downsample_factor; }
};

// Fully convolutional autoencoder defining the diffusion latent space.
// No normalization layers, so encode/decode are exactly shift-equivariant
// away from borders. Frozen after training.
class Codec {
public:
    Codec(CodecConfig cfg, uint64_t seed);

    const CodecConfig& config() const { return cfg_; }
    ParamStore<float>& params() { return params_; }
    const ParamStore<float>& params() const { return params_; }

    // (N,3,H,W) in [0,1] -> (N,4,h,w). Deterministic.
    Tensor<float> encode(const Tensor<float>& images) const;
    // (N,4,h,w) -> (N,3,H,W); training-mode output is unclamped.
    Tensor<float> decode(const Tensor<float>& latents, bool clamp = true) const;

    // Single-image helpers.
    std::vector<float> encode_image(const Image& img) const;
    Image decode_image(const std::vector<float>& latent) const;

    // Scale applied to latents before diffusion so they are roughly unit
    // variance; measured after codec training.
    float latent_scale() const { return latent_scale_; }
    void set_latent_scale(float s) { latent_scale_ = s; }

    void freeze() { params_.freeze(); }

private:
    CodecConfig cfg_;
    ParamStore<float> params_;
    float latent_scale_ = 1.f;

    Conv2d<float> enc_in_, enc_down1_, enc_down2_, enc_out_;
    Conv2d<float> enc_res1a_, enc_res1b_, enc_res2a_, enc_res2b_;
    Conv2d<float> dec_in_, dec_up1_, dec_up2_, dec_out_;
    Conv2d<float> dec_res1a_, dec_res1b_, dec_res2a_, dec_res2b_;
};

double psnr(const Image& a, const Image& b);

}  // namespace stitch
