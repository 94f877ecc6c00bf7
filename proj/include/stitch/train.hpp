#pragma once

#include <functional>
#include <iosfwd>

#include "stitch/model.hpp"

namespace stitch {

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Which conditions a training sample keeps. The semantic stream is chosen
// text-or-texture exclusively; each condition is then dropped independently
// with the unconditional probability.
struct ConditionDrops {
    bool use_text_stream = true;  // vs texture
    bool drop_semantic = false;
    bool drop_pose = false;
    bool drop_sketch = false;

    static ConditionDrops draw(Rng& rng, double uncond_prob, double text_stream_prob);
};

struct CodecTrainResult {
    double init_val_psnr = 0;
    double final_val_psnr = 0;
    double init_val_loss = 0;
    double final_val_loss = 0;
    float latent_scale = 1.f;
};

// MSE autoencoder training; freezes the codec and sets its latent scale from
// the training latents. Throws TrainingError on divergence.
CodecTrainResult train_codec(Codec& codec, const std::vector<Image>& train,
                             const std::vector<Image>& val, int steps, int batch, double lr,
                             uint64_t seed, std::ostream* log = nullptr);

// Patch-autoencoder pretraining of the visual encoder; freezes it afterwards.
void pretrain_vision(VisionEncoder& vision, ParamStore<float>& params,
                     const std::vector<Image>& patches, int steps, int batch, double lr,
                     uint64_t seed, std::ostream* log = nullptr);

// Per-sample latent-space training inputs, precomputed once per run.
struct PreparedSample {
    std::vector<float> z0, masked, mask, pose, sketch;
    std::vector<int> text_ids, empty_ids;
    Tensor<float> vision_tokens;  // frozen V_E features of the texture patch
};

PreparedSample prepare_training_sample(const GarmentModel& model, const Sample& s);

struct DiffusionTrainResult {
    double init_val_loss = 0;
    double final_val_loss = 0;
    std::vector<std::pair<int, double>> val_curve;
};

// Validation loss over prepared samples with a fixed noise/drop stream.
double validation_loss(GarmentModel& model, const std::vector<PreparedSample>& val,
                       uint64_t noise_seed);

// Denoising-objective training of the denoiser, text pipeline and inversion
// adapter. Codec and visual encoder must already be frozen.
DiffusionTrainResult train_diffusion(GarmentModel& model,
                                     const std::vector<PreparedSample>& train,
                                     const std::vector<PreparedSample>& val, int steps,
                                     std::ostream* log = nullptr,
                                     const std::function<void(int)>& progress = {});

// Dataset loading helpers.
std::vector<Sample> load_split(const std::string& root, const DatasetManifest& manifest,
                               const std::string& split, int limit = 0);

}  // namespace stitch
