#include "stitch/train.hpp"

#include <cmath>
#include <ostream>

#include "stitch/ops.hpp"
#include "stitch/optim.hpp"

namespace stitch {

ConditionDrops ConditionDrops::draw(Rng& rng, double uncond_prob, double text_stream_prob) {
    ConditionDrops d;
    d.use_text_stream = rng.bernoulli(text_stream_prob);
    d.drop_semantic = rng.bernoulli(uncond_prob);
    d.drop_pose = rng.bernoulli(uncond_prob);
    d.drop_sketch = rng.bernoulli(uncond_prob);
    return d;
}

// ---------------------------------------------------------------------------
// codec
// ---------------------------------------------------------------------------

namespace {

Tensor<float> image_batch(const std::vector<Image>& images, const std::vector<size_t>& idx) {
    int h = images[0].h, w = images[0].w;
    auto t = Tensor<float>::zeros({(int)idx.size(), 3, h, w});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(images[idx[i]].data.begin(), images[idx[i]].data.end(),
                  t.data() + i * images[idx[i]].data.size());
    return t;
}

}  // namespace

CodecTrainResult train_codec(Codec& codec, const std::vector<Image>& train,
                             const std::vector<Image>& val, int steps, int batch, double lr,
                             uint64_t seed, std::ostream* log) {
    if (train.empty()) throw TrainingError("codec training needs a non-empty dataset");
    Rng rng(Rng::splitmix64(seed) ^ 0x10dec0deULL);
    AdamW<float> opt(lr, 0.0, 100);
    auto params = codec.params().all();

    auto eval_val = [&](double* loss_out) {
        NoGradGuard ng;
        double psnr_sum = 0, loss_sum = 0;
        int count = 0;
        for (size_t i = 0; i < val.size(); ++i) {
            std::vector<float> z = codec.encode_image(val[i]);
            Image rec = codec.decode_image(z);
            psnr_sum += psnr(val[i], rec);
            for (size_t j = 0; j < rec.data.size(); ++j) {
                double d = (double)rec.data[j] - val[i].data[j];
                loss_sum += d * d;
            }
            count += (int)rec.data.size();
        }
        if (loss_out) *loss_out = loss_sum / count;
        return psnr_sum / (double)val.size();
    };

    CodecTrainResult res;
    res.init_val_psnr = eval_val(&res.init_val_loss);

    for (int step = 0; step < steps; ++step) {
        std::vector<size_t> idx((size_t)batch);
        for (auto& i : idx) i = (size_t)rng.uniform_int(train.size());
        Tensor<float> x = image_batch(train, idx);
        Tensor<float> rec = codec.decode(codec.encode(x), false);
        Tensor<float> loss = mse(rec, x);
        float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("codec training diverged at step " + std::to_string(step) +
                                " (loss " + std::to_string(lv) + ")");
        codec.params().zero_grad();
        backward(loss);
        opt.step(params);
        if (log && (step + 1) % 500 == 0)
            *log << "{\"stage\":\"codec\",\"step\":" << step + 1 << ",\"train_loss\":" << lv
                 << ",\"val_psnr\":" << eval_val(nullptr) << "}\n";
    }
    res.final_val_psnr = eval_val(&res.final_val_loss);

    // latent scale: roughly unit-variance latents for diffusion
    {
        NoGradGuard ng;
        double sq = 0;
        int64_t n = 0;
        size_t probe = std::min<size_t>(train.size(), 64);
        for (size_t i = 0; i < probe; ++i) {
            std::vector<float> z = codec.encode_image(train[i]);
            for (float v : z) sq += (double)v * v;
            n += (int64_t)z.size();
        }
        double std_dev = std::sqrt(sq / (double)n);
        res.latent_scale = std_dev > 1e-6 ? (float)(1.0 / std_dev) : 1.f;
        codec.set_latent_scale(res.latent_scale);
    }
    codec.freeze();
    return res;
}

// ---------------------------------------------------------------------------
// vision encoder
// ---------------------------------------------------------------------------

void pretrain_vision(VisionEncoder& vision, ParamStore<float>& params,
                     const std::vector<Image>& patches, int steps, int batch, double lr,
                     uint64_t seed, std::ostream* log) {
    if (patches.empty()) throw TrainingError("vision pretraining needs texture patches");
    Rng rng(Rng::splitmix64(seed) ^ 0x7151011ULL);
    AdamW<float> opt(lr, 0.0, 50);
    auto plist = params.all();
    for (int step = 0; step < steps; ++step) {
        std::vector<size_t> idx((size_t)batch);
        for (auto& i : idx) i = (size_t)rng.uniform_int(patches.size());
        Tensor<float> x = image_batch(patches, idx);
        Tensor<float> loss = mse(vision.reconstruct(x), x);
        float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("vision pretraining diverged at step " + std::to_string(step));
        params.zero_grad();
        backward(loss);
        opt.step(plist);
        if (log && (step + 1) % 500 == 0)
            *log << "{\"stage\":\"vision\",\"step\":" << step + 1 << ",\"train_loss\":" << lv
                 << "}\n";
    }
    params.freeze();
}

// ---------------------------------------------------------------------------
// diffusion
// ---------------------------------------------------------------------------

PreparedSample prepare_training_sample(const GarmentModel& model, const Sample& s) {
    PreparedSample p;
    p.z0 = model.encode_image_scaled(s.image);
    p.masked = model.encode_masked_image(s.image, s.inpaint_mask);
    p.mask = model.mask_to_latent(s.inpaint_mask);
    p.pose = model.pose_to_latent(s.keypoints);
    p.sketch = model.encode_sketch(s.sketch);
    p.text_ids = tokenize(model.vocab, s.caption, model.cfg.text_len);
    p.empty_ids = tokenize(model.vocab, "", model.cfg.text_len);
    p.vision_tokens = model.texture_tokens(s.texture);
    return p;
}

namespace {

struct BatchDraw {
    std::vector<int> t;
    std::vector<float> gamma;        // (B,31,h,w) flat
    std::vector<float> eps;          // (B,4,h,w) flat
    std::vector<int> ids;            // (B*L)
    Tensor<float> vtokens;           // (B,16,dv)
    std::vector<uint8_t> pick_text;  // per-sample stream selector
};

// Assembles gamma = [z_t; m; E(I_M); p; s] with per-condition dropout and the
// exclusive text/texture stream choice.
BatchDraw draw_batch(const GarmentModel& model, const std::vector<PreparedSample>& data,
                     const std::vector<size_t>& idx, Rng& rng) {
    const RunConfig& cfg = model.cfg;
    int h = cfg.latent_h(), w = cfg.latent_w();
    size_t hw = (size_t)h * w;
    int B = (int)idx.size();
    int dv = model.vision->width();

    BatchDraw b;
    b.gamma.reserve((size_t)B * 31 * hw);
    b.eps.reserve((size_t)B * 4 * hw);
    b.vtokens = Tensor<float>::zeros({B, VisionEncoder::kTokens, dv});
    Tensor<float> gray = Tensor<float>::filled({1, 3, 16, 16}, 0.5f);
    Tensor<float> gray_tokens;
    {
        NoGradGuard ng;
        gray_tokens = model.vision->tokens(gray);
    }

    for (int i = 0; i < B; ++i) {
        const PreparedSample& s = data[idx[(size_t)i]];
        int t = (int)rng.uniform_int((uint64_t)cfg.diffusion_T);
        b.t.push_back(t);
        ConditionDrops drops = ConditionDrops::draw(rng, cfg.uncond_prob, cfg.text_stream_prob);

        std::vector<float> eps(4 * hw);
        for (auto& v : eps) v = (float)rng.normal();
        std::vector<float> zt = q_sample(s.z0, eps, model.schedule.alpha_bar[(size_t)t]);
        b.eps.insert(b.eps.end(), eps.begin(), eps.end());

        b.gamma.insert(b.gamma.end(), zt.begin(), zt.end());
        b.gamma.insert(b.gamma.end(), s.mask.begin(), s.mask.end());
        b.gamma.insert(b.gamma.end(), s.masked.begin(), s.masked.end());
        if (drops.drop_pose)
            b.gamma.resize(b.gamma.size() + 18 * hw, 0.f);
        else
            b.gamma.insert(b.gamma.end(), s.pose.begin(), s.pose.end());
        if (drops.drop_sketch)
            b.gamma.resize(b.gamma.size() + 4 * hw, 0.f);
        else
            b.gamma.insert(b.gamma.end(), s.sketch.begin(), s.sketch.end());

        // exclusive stream per sample; a dropped stream falls back to the
        // null condition (empty caption / gray patch), trained in-graph
        bool text_stream = drops.use_text_stream;
        const std::vector<int>& ids = (text_stream && !drops.drop_semantic) ? s.text_ids : s.empty_ids;
        b.ids.insert(b.ids.end(), ids.begin(), ids.end());
        const Tensor<float>& vt =
            (!text_stream && !drops.drop_semantic) ? s.vision_tokens : gray_tokens;
        std::copy(vt.data(), vt.data() + vt.numel(),
                  b.vtokens.data() + (size_t)i * VisionEncoder::kTokens * dv);
        b.pick_text.push_back(text_stream ? 1 : 0);
    }
    return b;
}

Tensor<float> batch_loss(GarmentModel& model, const BatchDraw& b, bool training, Rng& drop_rng) {
    const RunConfig& cfg = model.cfg;
    int h = cfg.latent_h(), w = cfg.latent_w();
    int B = (int)b.t.size();

    Tensor<float> gamma = Tensor<float>::from({B, 31, h, w}, b.gamma);
    Tensor<float> eps = Tensor<float>::from({B, 4, h, w}, b.eps);

    Tensor<float> text_ctx = model.text->context_from_ids(b.ids, B);
    Tensor<float> ptes = model.adapter->ptes(b.vtokens, training, drop_rng);
    Tensor<float> tex_ctx = model.text->transform(ptes);
    // exclusive conditioning: every cross-attention group of a sample sees
    // the same stream
    Tensor<float> ctx = select_batch(b.pick_text, text_ctx, tex_ctx);

    AttentionInput psi;
    psi.t = b.t;
    psi.streams.text = ctx;
    psi.streams.texture = ctx;
    psi.routing = RoutingTable::parse("tttt");

    Tensor<float> pred = model.unet.denoise(gamma, psi);
    return mse(pred, eps);
}

}  // namespace

double validation_loss(GarmentModel& model, const std::vector<PreparedSample>& val,
                       uint64_t noise_seed) {
    if (val.empty()) return 0;
    NoGradGuard ng;
    Rng rng(Rng::splitmix64(noise_seed) ^ 0x7a1ULL);
    Rng drop_rng(1);
    double total = 0;
    int batches = 0;
    int B = std::min<int>((int)val.size(), model.cfg.batch_size);
    for (size_t start = 0; start + (size_t)B <= val.size(); start += (size_t)B) {
        std::vector<size_t> idx;
        for (int i = 0; i < B; ++i) idx.push_back(start + (size_t)i);
        BatchDraw b = draw_batch(model, val, idx, rng);
        total += batch_loss(model, b, false, drop_rng).item();
        ++batches;
    }
    return total / std::max(1, batches);
}

DiffusionTrainResult train_diffusion(GarmentModel& model,
                                     const std::vector<PreparedSample>& train,
                                     const std::vector<PreparedSample>& val, int steps,
                                     std::ostream* log,
                                     const std::function<void(int)>& progress) {
    if (train.empty()) throw TrainingError("diffusion training needs a non-empty dataset");
    const RunConfig& cfg = model.cfg;
    uint64_t seed = cfg.seed;
    Rng rng(Rng::splitmix64(seed) ^ 0xd1ffULL);
    seed = cfg.seed;
    Rng drop_rng(Rng::splitmix64(seed) ^ 0xd20bULL);
    AdamW<float> opt(cfg.lr, cfg.weight_decay, cfg.warmup_steps);
    auto params = model.diffusion_parameters();

    DiffusionTrainResult res;
    res.init_val_loss = validation_loss(model, val, cfg.seed);
    res.val_curve.push_back({0, res.init_val_loss});

    double window_loss = 0;
    int window_n = 0;
    for (int step = 0; step < steps; ++step) {
        std::vector<size_t> idx((size_t)cfg.batch_size);
        for (auto& i : idx) i = (size_t)rng.uniform_int(train.size());
        BatchDraw b = draw_batch(model, train, idx, rng);
        Tensor<float> loss = batch_loss(model, b, true, drop_rng);
        float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("diffusion training diverged at step " + std::to_string(step) +
                                " (loss " + std::to_string(lv) + ")");
        window_loss += lv;
        ++window_n;
        for (auto* p : params) p->value.zero_grad();
        backward(loss);
        opt.step(params);

        if ((step + 1) % 1000 == 0 || step + 1 == steps) {
            double vl = validation_loss(model, val, cfg.seed);
            res.val_curve.push_back({step + 1, vl});
            if (log)
                *log << "{\"stage\":\"diffusion\",\"step\":" << step + 1
                     << ",\"train_loss\":" << window_loss / std::max(1, window_n)
                     << ",\"val_loss\":" << vl << "}" << std::endl;
            window_loss = 0;
            window_n = 0;
        }
        if (progress) progress(step + 1);
    }
    res.final_val_loss = res.val_curve.back().second;
    return res;
}

std::vector<Sample> load_split(const std::string& root, const DatasetManifest& manifest,
                               const std::string& split, int limit) {
    std::vector<Sample> out;
    for (auto* e : manifest.split(split)) {
        if (limit > 0 && (int)out.size() >= limit) break;
        out.push_back(read_sample(root, e->id));
    }
    return out;
}

}  // namespace stitch
