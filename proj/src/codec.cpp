#include "stitch/codec.hpp"

#include <cmath>

#include "stitch/ops.hpp"

namespace stitch {

Codec::Codec(CodecConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg_.downsample_factor != 4)
        throw std::invalid_argument("codec supports downsample_factor 4 (two stride-2 stages)");
    if (cfg_.image_h % 4 || cfg_.image_w % 4)
        throw std::invalid_argument("image size must be divisible by the downsample factor");
    Rng rng(Rng::splitmix64(seed) ^ 0xc0decULL);
    int w1 = cfg_.base_width, w2 = 2 * cfg_.base_width, w3 = 4 * cfg_.base_width;
    int zc = cfg_.latent_channels;

    enc_in_ = Conv2d<float>(params_, "enc.in", 3, w1, 3, 1, 1, rng);
    enc_down1_ = Conv2d<float>(params_, "enc.down1", w1, w2, 3, 2, 1, rng);
    enc_res1a_ = Conv2d<float>(params_, "enc.res1a", w2, w2, 3, 1, 1, rng);
    enc_res1b_ = Conv2d<float>(params_, "enc.res1b", w2, w2, 3, 1, 1, rng);
    enc_down2_ = Conv2d<float>(params_, "enc.down2", w2, w3, 3, 2, 1, rng);
    enc_res2a_ = Conv2d<float>(params_, "enc.res2a", w3, w3, 3, 1, 1, rng);
    enc_res2b_ = Conv2d<float>(params_, "enc.res2b", w3, w3, 3, 1, 1, rng);
    enc_out_ = Conv2d<float>(params_, "enc.out", w3, zc, 3, 1, 1, rng);

    dec_in_ = Conv2d<float>(params_, "dec.in", zc, w3, 3, 1, 1, rng);
    dec_res2a_ = Conv2d<float>(params_, "dec.res2a", w3, w3, 3, 1, 1, rng);
    dec_res2b_ = Conv2d<float>(params_, "dec.res2b", w3, w3, 3, 1, 1, rng);
    dec_up1_ = Conv2d<float>(params_, "dec.up1", w3, w2, 3, 1, 1, rng);
    dec_res1a_ = Conv2d<float>(params_, "dec.res1a", w2, w2, 3, 1, 1, rng);
    dec_res1b_ = Conv2d<float>(params_, "dec.res1b", w2, w2, 3, 1, 1, rng);
    dec_up2_ = Conv2d<float>(params_, "dec.up2", w2, w1, 3, 1, 1, rng);
    dec_out_ = Conv2d<float>(params_, "dec.out", w1, 3, 3, 1, 1, rng);
}

namespace {

Tensor<float> res_pair(const Conv2d<float>& a, const Conv2d<float>& b, const Tensor<float>& x) {
    return add(x, b(gelu(a(gelu(x)))));
}

}  // namespace

Tensor<float> Codec::encode(const Tensor<float>& images) const {
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_h ||
        images.dim(3) != cfg_.image_w)
        shape_error("Codec::encode", "expected (N,3," + std::to_string(cfg_.image_h) + "," +
                                         std::to_string(cfg_.image_w) + "), got " +
                                         shape_str(images.shape()));
    Tensor<float> h = gelu(enc_in_(images));
    h = enc_down1_(h);
    h = res_pair(enc_res1a_, enc_res1b_, h);
    h = enc_down2_(h);
    h = res_pair(enc_res2a_, enc_res2b_, h);
    return enc_out_(gelu(h));
}

Tensor<float> Codec::decode(const Tensor<float>& latents, bool clamp) const {
    if (latents.ndim() != 4 || latents.dim(1) != cfg_.latent_channels ||
        latents.dim(2) != cfg_.latent_h() || latents.dim(3) != cfg_.latent_w())
        shape_error("Codec::decode", "expected (N,4," + std::to_string(cfg_.latent_h()) + "," +
                                         std::to_string(cfg_.latent_w()) + "), got " +
                                         shape_str(latents.shape()));
    Tensor<float> h = dec_in_(latents);
    h = res_pair(dec_res2a_, dec_res2b_, h);
    h = dec_up1_(upsample_nearest(h, 2));
    h = res_pair(dec_res1a_, dec_res1b_, h);
    h = dec_up2_(upsample_nearest(h, 2));
    Tensor<float> out = dec_out_(gelu(h));
    if (clamp)
        for (auto& v : out.vec()) v = std::clamp(v, 0.f, 1.f);
    return out;
}

std::vector<float> Codec::encode_image(const Image& img) const {
    NoGradGuard ng;
    auto t = Tensor<float>::from({1, 3, cfg_.image_h, cfg_.image_w}, img.data);
    return encode(t).vec();
}

Image Codec::decode_image(const std::vector<float>& latent) const {
    NoGradGuard ng;
    auto t = Tensor<float>::from({1, cfg_.latent_channels, cfg_.latent_h(), cfg_.latent_w()}, latent);
    auto out = decode(t, true);
    Image img(3, cfg_.image_h, cfg_.image_w);
    img.data = out.vec();
    return img;
}

double psnr(const Image& a, const Image& b) {
    if (a.data.size() != b.data.size()) throw std::invalid_argument("psnr: size mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = (double)a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= (double)a.data.size();
    if (mse <= 0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace stitch
