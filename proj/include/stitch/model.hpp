#pragma once

#include <memory>

#include "stitch/codec.hpp"
#include "stitch/conditioning.hpp"
#include "stitch/config.hpp"
#include "stitch/dataset.hpp"
#include "stitch/diffusion.hpp"
#include "stitch/unet.hpp"

namespace stitch {

// The full system: codec, frozen visual encoder, shared text transformer,
// inversion adapter and the extended denoiser, plus the schedule. One
// checkpoint file carries every parameter store and the latent scale.
class GarmentModel {
public:
    explicit GarmentModel(const RunConfig& cfg);

    RunConfig cfg;
    Vocabulary vocab;
    Codec codec;
    ParamStore<float> vision_params;
    std::unique_ptr<VisionEncoder> vision;
    ParamStore<float> cond_params;
    std::unique_ptr<TextEncoder> text;
    std::unique_ptr<InversionAdapter> adapter;
    Denoiser unet;
    DiffusionSchedule schedule;

    void save(const std::string& path) const;
    // Mismatched config hash throws unless force is set (after warning).
    static std::unique_ptr<GarmentModel> load(const std::string& path, bool force_config = false);
    // Partial loads for the staged pipeline.
    void load_codec(const std::string& path, bool force_config = false);
    void load_vision(const std::string& path, bool force_config = false);

    // Trainable parameters of the diffusion stage (denoiser + conditioning).
    std::vector<Parameter<float>*> diffusion_parameters();

    // Cached null contexts (computed from current parameters on demand).
    Tensor<float> null_text_context() const;
    Tensor<float> null_texture_context() const;

    // Latent-space conditions for one person/donor pair. Absent conditions
    // (null Tensor / empty vectors) follow the ConditionSet conventions.
    struct ConditionChoice {
        bool text = true, texture = true, pose = true, sketch = true;
    };
    SampleConditions prepare_conditions(const Sample& person, const Sample& donor,
                                        const ConditionChoice& choice) const;

    // Latent encodings used by both training and sampling.
    std::vector<float> encode_image_scaled(const Image& img) const;
    std::vector<float> encode_masked_image(const Image& img, const Image& pixel_mask) const;
    std::vector<float> encode_sketch(const Image& sketch) const;
    std::vector<float> mask_to_latent(const Image& pixel_mask) const;
    std::vector<float> pose_to_latent(const Skeleton& kps) const;
    Tensor<float> texture_tokens(const Image& patch) const;  // frozen V_E features

    Tensor<float> text_context(const std::string& caption) const;
    Tensor<float> texture_context(const Image& patch) const;
};

}  // namespace stitch
