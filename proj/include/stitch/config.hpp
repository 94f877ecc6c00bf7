#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stitch {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Cross-attention stream routed to a group.
enum class Stream { kText, kTexture };

// Per-group stream assignment; index = group id (0 = lowest resolution).
struct RoutingTable {
    std::array<Stream, 4> streams{Stream::kText, Stream::kText, Stream::kTexture, Stream::kTexture};

    Stream at(int group) const;
    // 4 chars of 't' (text) / 'x' (texture), group 0 first; spaces ignored.
    static RoutingTable parse(const std::string& s);
    std::string str() const;
    bool operator==(const RoutingTable&) const = default;
};

// All run hyperparameters, flat and fully serializable. Unknown keys are
// rejected at parse time. The paper_* entries record the full-scale reference
// values; the unprefixed fields are this repo's desk-scale defaults.
struct RunConfig {
    uint64_t seed = 0;
    int threads = 0;  // 0 = hardware

    // canvas / latent geometry
    int image_h = 96;
    int image_w = 64;
    int downsample_factor = 4;
    int latent_channels = 4;

    // dataset
    double train_frac = 0.7;
    double val_frac = 0.1;

    // codec
    int codec_base_width = 16;
    int codec_steps = 3000;
    double codec_lr = 2e-3;
    int codec_batch = 16;

    // vision encoder pretraining
    int vision_width = 32;
    int vision_steps = 1500;
    double vision_lr = 2e-3;

    // conditioning
    int d_ctx = 64;   // token embedding and context width (shared)
    int text_len = 16;
    int n_pte = 16;
    int tt_layers = 2;
    int tt_heads = 4;
    double adapter_dropout = 0.1;

    // denoiser
    std::vector<int> unet_widths = {32, 48, 64, 64};
    int unet_heads = 2;
    int temb_dim = 64;
    int temb_hidden = 128;
    int norm_groups = 4;

    // diffusion
    int diffusion_T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // training
    int train_steps = 20000;
    int batch_size = 16;
    double lr = 3e-4;
    double weight_decay = 1e-2;
    int warmup_steps = 500;
    double uncond_prob = 0.2;
    double text_stream_prob = 0.5;

    // sampling
    int ddim_steps = 50;
    double guidance = 7.5;
    double sketch_rate = 0.2;
    std::string routing = "ttxx";

    // full-scale reference hyperparameters (not used for desk-scale runs)
    double paper_lr = 1e-5;
    double paper_weight_decay = 1e-2;
    int paper_warmup_steps = 500;
    int paper_batch_size = 16;
    int paper_train_steps = 200000;
    int paper_image_h = 512;
    int paper_image_w = 384;
    int paper_downsample_factor = 8;

    int latent_h() const { return image_h / downsample_factor; }
    int latent_w() const { return image_w / downsample_factor; }
    RoutingTable routing_table() const { return RoutingTable::parse(routing); }

    // Throws ConfigError when an invariant is broken.
    void validate() const;

    std::string to_json() const;
    // Strict parse on top of defaults: unknown keys or wrong types throw.
    static RunConfig from_json(const std::string& text);
    static RunConfig load_file(const std::string& path);
    void save_file(const std::string& path) const;

    // FNV-1a over the canonical serialization.
    std::string hash() const;
};

}  // namespace stitch
