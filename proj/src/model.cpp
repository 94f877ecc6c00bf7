#include "stitch/model.hpp"

#include <iostream>

#include "stitch/checkpoint.hpp"
#include "stitch/ops.hpp"

namespace stitch {

GarmentModel::GarmentModel(const RunConfig& cfg_)
    : cfg(cfg_),
      vocab(Vocabulary::standard()),
      codec(CodecConfig::from_run(cfg_), cfg_.seed),
      unet(UNetConfig::from_run(cfg_), cfg_.seed + 1),
      schedule(DiffusionSchedule::make(cfg_.diffusion_T, cfg_.beta_start, cfg_.beta_end)) {
    cfg.validate();
    vision = std::make_unique<VisionEncoder>(vision_params, cfg.vision_width, cfg.seed + 2);
    ConditioningConfig cc = ConditioningConfig::from_run(cfg, vocab.size());
    text = std::make_unique<TextEncoder>(cond_params, cc, cfg.seed + 3);
    adapter = std::make_unique<InversionAdapter>(cond_params, cc, cfg.seed + 4);
    unet.extend_input_channels();
}

void GarmentModel::save(const std::string& path) const {
    Checkpoint ck;
    ck.config_hash = cfg.hash();
    ck.meta["latent_scale"] = std::to_string(codec.latent_scale());
    ck.meta["runconfig"] = cfg.to_json();
    ck.add_store(codec.params(), "codec.");
    ck.add_store(vision_params, "vision.");
    ck.add_store(cond_params, "cond.");
    unet.save_into(ck, "unet.");
    ck.save(path);
}

namespace {

void check_hash(const Checkpoint& ck, const RunConfig& cfg, bool force, const std::string& path) {
    if (ck.config_hash != cfg.hash()) {
        std::cerr << "warning: checkpoint " << path << " was written under config hash "
                  << ck.config_hash << ", current config hashes to " << cfg.hash() << "\n";
        if (!force)
            throw CheckpointError("config hash mismatch for " + path +
                                  " (pass the force-config override to load anyway)");
    }
}

}  // namespace

std::unique_ptr<GarmentModel> GarmentModel::load(const std::string& path, bool force_config) {
    Checkpoint ck = Checkpoint::load(path);
    auto it = ck.meta.find("runconfig");
    if (it == ck.meta.end()) throw CheckpointError("checkpoint lacks an embedded config: " + path);
    RunConfig cfg = RunConfig::from_json(it->second);
    check_hash(ck, cfg, force_config, path);

    auto model = std::make_unique<GarmentModel>(cfg);
    ck.load_store(model->codec.params(), "codec.");
    ck.load_store(model->vision_params, "vision.");
    ck.load_store(model->cond_params, "cond.");
    model->unet.load_from(ck, "unet.");
    model->codec.set_latent_scale((float)ck.meta_number("latent_scale", 1.0));
    return model;
}

void GarmentModel::load_codec(const std::string& path, bool force_config) {
    Checkpoint ck = Checkpoint::load(path);
    check_hash(ck, cfg, force_config, path);
    ck.load_store(codec.params(), "codec.");
    codec.set_latent_scale((float)ck.meta_number("latent_scale", 1.0));
}

void GarmentModel::load_vision(const std::string& path, bool force_config) {
    Checkpoint ck = Checkpoint::load(path);
    check_hash(ck, cfg, force_config, path);
    ck.load_store(vision_params, "vision.");
}

std::vector<Parameter<float>*> GarmentModel::diffusion_parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& p : unet.params()) out.push_back(&p);
    for (auto& p : cond_params) out.push_back(&p);
    return out;
}

Tensor<float> GarmentModel::null_text_context() const {
    return stitch::null_text_context(*text, vocab);
}

Tensor<float> GarmentModel::null_texture_context() const {
    return stitch::null_texture_context(*text, *vision, *adapter);
}

std::vector<float> GarmentModel::encode_image_scaled(const Image& img) const {
    std::vector<float> z = codec.encode_image(img);
    for (auto& v : z) v *= codec.latent_scale();
    return z;
}

std::vector<float> GarmentModel::encode_masked_image(const Image& img,
                                                     const Image& pixel_mask) const {
    Image masked = img;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            if (pixel_mask.at(0, y, x) > 0.5f)
                for (int c = 0; c < 3; ++c) masked.at(c, y, x) = 0.f;
    return encode_image_scaled(masked);
}

std::vector<float> GarmentModel::encode_sketch(const Image& sketch) const {
    Image bar(3, sketch.h, sketch.w);
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < sketch.data.size(); ++i)
            bar.data[(size_t)c * sketch.data.size() + i] = sketch.data[i];
    return encode_image_scaled(bar);
}

std::vector<float> GarmentModel::mask_to_latent(const Image& pixel_mask) const {
    return resize_nearest(pixel_mask.data, 1, pixel_mask.h, pixel_mask.w, cfg.latent_h(),
                          cfg.latent_w());
}

std::vector<float> GarmentModel::pose_to_latent(const Skeleton& kps) const {
    std::vector<float> pose = rasterize_pose_map(kps, cfg.image_h, cfg.image_w);
    return resize_nearest(pose, kNumKeypoints, cfg.image_h, cfg.image_w, cfg.latent_h(),
                          cfg.latent_w());
}

Tensor<float> GarmentModel::texture_tokens(const Image& patch) const {
    NoGradGuard ng;
    auto t = Tensor<float>::from({1, 3, VisionEncoder::kPatch, VisionEncoder::kPatch}, patch.data);
    return vision->tokens(t);
}

Tensor<float> GarmentModel::text_context(const std::string& caption) const {
    NoGradGuard ng;
    return text->context_from_ids(tokenize(vocab, caption, cfg.text_len), 1);
}

Tensor<float> GarmentModel::texture_context(const Image& patch) const {
    NoGradGuard ng;
    Rng rng(0);
    return text->transform(adapter->ptes(texture_tokens(patch), false, rng));
}

SampleConditions GarmentModel::prepare_conditions(const Sample& person, const Sample& donor,
                                                  const ConditionChoice& choice) const {
    SampleConditions c;
    c.latent_h = cfg.latent_h();
    c.latent_w = cfg.latent_w();
    c.mask_latent = mask_to_latent(person.inpaint_mask);
    c.masked_latent = encode_masked_image(person.image, person.inpaint_mask);
    if (choice.pose) c.pose_latent = pose_to_latent(person.keypoints);
    if (choice.sketch) c.sketch_latent = encode_sketch(donor.sketch);
    if (choice.text) c.text_ctx = text_context(donor.caption);
    if (choice.texture) c.texture_ctx = texture_context(donor.texture);
    c.null_text_ctx = null_text_context();
    c.null_texture_ctx = null_texture_context();
    c.original = person.image;
    c.pixel_mask = person.inpaint_mask;
    return c;
}

}  // namespace stitch
