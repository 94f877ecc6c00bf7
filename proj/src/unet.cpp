#include "stitch/unet.hpp"

#include <cmath>

#include "stitch/ops.hpp"

namespace stitch {

Tensor<float> timestep_embedding(const std::vector<int>& t, int dim) {
    int B = (int)t.size();
    auto out = Tensor<float>::zeros({B, dim});
    int half = dim / 2;
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / half);
            double a = t[(size_t)b] * freq;
            out.data()[b * dim + i] = (float)std::sin(a);
            out.data()[b * dim + half + i] = (float)std::cos(a);
        }
    return out;
}

Tensor<float> Denoiser::ResBlock::operator()(const Tensor<float>& x,
                                             const Tensor<float>& temb_vec) const {
    Tensor<float> h = conv1(gelu(n1(x)));
    h = add_channel_broadcast(h, temb(temb_vec));
    h = conv2(gelu(n2(h)));
    return add(h, has_skip ? skip(x) : x);
}

Tensor<float> Denoiser::AttnBlock::operator()(const Tensor<float>& x,
                                              const AttentionInput& psi) const {
    int H = x.dim(2), W = x.dim(3);
    Tensor<float> h = nchw_to_tokens(norm(x));
    if (with_self) {
        Tensor<float> s = ln1(h);
        h = add(h, self_attn(s, s));
    }
    h = add(h, cross_attn(ln2(h), route_stream(psi.streams, psi.routing, group)));
    h = add(h, ff2(gelu(ff1(ln3(h)))));
    return add(x, tokens_to_nchw(h, H, W));
}

Denoiser::ResBlock Denoiser::make_res(const std::string& name, int cin, int cout, Rng& rng) {
    ResBlock r;
    r.n1 = GroupNormLayer<float>(params_, name + ".n1", cin, cfg_.norm_groups);
    r.conv1 = Conv2d<float>(params_, name + ".conv1", cin, cout, 3, 1, 1, rng);
    r.temb = Dense<float>(params_, name + ".temb", cfg_.temb_hidden, cout, rng);
    r.n2 = GroupNormLayer<float>(params_, name + ".n2", cout, cfg_.norm_groups);
    r.conv2 = Conv2d<float>(params_, name + ".conv2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) {
        r.skip = Conv2d<float>(params_, name + ".skip", cin, cout, 1, 1, 0, rng);
        r.has_skip = true;
    }
    return r;
}

Denoiser::AttnBlock Denoiser::make_attn(const std::string& name, int channels, int group,
                                        Rng& rng, bool with_self) {
    AttnBlock a;
    a.group = group;
    a.with_self = with_self;
    a.norm = GroupNormLayer<float>(params_, name + ".norm", channels, cfg_.norm_groups);
    if (with_self) {
        a.ln1 = LayerNormLayer<float>(params_, name + ".ln1", channels);
        a.self_attn = MultiheadAttention<float>(params_, name + ".self", channels, channels,
                                                cfg_.heads, rng);
    }
    a.ln2 = LayerNormLayer<float>(params_, name + ".ln2", channels);
    a.cross_attn = MultiheadAttention<float>(params_, name + ".cross", channels, cfg_.d_ctx,
                                             cfg_.heads, rng);
    a.ln3 = LayerNormLayer<float>(params_, name + ".ln3", channels);
    a.ff1 = Dense<float>(params_, name + ".ff1", channels, 2 * channels, rng);
    a.ff2 = Dense<float>(params_, name + ".ff2", 2 * channels, channels, rng);
    attn_groups_.push_back({name, group});
    return a;
}

Denoiser::Denoiser(UNetConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.widths.size() != 4) throw std::invalid_argument("denoiser needs 4 level widths");
    Rng rng(Rng::splitmix64(seed) ^ 0x0e70ULL);
    const auto& w = cfg_.widths;

    stem_w_ = &params_.add("stem.base.w", init::he_normal<float>(
                                              {w[0], UNetConfig::kBaseChannels, 3, 3},
                                              (int64_t)UNetConfig::kBaseChannels * 9, rng));
    stem_b_ = &params_.add("stem.base.b", Tensor<float>::zeros({w[0]}));

    temb1_ = Dense<float>(params_, "temb.fc1", cfg_.temb_dim, cfg_.temb_hidden, rng);
    temb2_ = Dense<float>(params_, "temb.fc2", cfg_.temb_hidden, cfg_.temb_hidden, rng);

    for (int l = 0; l < 3; ++l) {
        std::string p = "enc" + std::to_string(l);
        enc_res_[l] = make_res(p + ".res", w[(size_t)l], w[(size_t)l], rng);
        enc_attn_[l] = make_attn(p + ".attn", w[(size_t)l], group_for_level(l), rng, l > 0);
        down_[l] = Conv2d<float>(params_, p + ".down", w[(size_t)l], w[(size_t)l + 1], 3, 2, 1, rng);
    }
    mid_res1_ = make_res("mid.res1", w[3], w[3], rng);
    mid_attn_ = make_attn("mid.attn", w[3], group_for_level(3), rng);
    mid_res2_ = make_res("mid.res2", w[3], w[3], rng);

    for (int l = 2; l >= 0; --l) {
        std::string p = "dec" + std::to_string(l);
        up_[l] = Conv2d<float>(params_, p + ".up", w[(size_t)l + 1], w[(size_t)l], 3, 1, 1, rng);
        dec_res_[l] = make_res(p + ".res", 2 * w[(size_t)l], w[(size_t)l], rng);
        dec_attn_[l] = make_attn(p + ".attn", w[(size_t)l], group_for_level(l), rng, l > 0);
    }

    out_norm_ = GroupNormLayer<float>(params_, "out.norm", w[0], cfg_.norm_groups);
    out_conv_ = Conv2d<float>(params_, "out.conv", w[0], cfg_.latent_channels, 3, 1, 1, rng, true);
}

void Denoiser::extend_input_channels() {
    if (stem_ext_) throw std::logic_error("denoiser input channels are already extended");
    stem_ext_ = &params_.add(
        "stem.ext.w", Tensor<float>::zeros({cfg_.widths[0], UNetConfig::kExtChannels, 3, 3}));
}

Tensor<float> Denoiser::denoise(const Tensor<float>& gamma, const AttentionInput& psi) const {
    ++forward_calls_;
    int expect = stem_ext_ ? UNetConfig::kFullChannels : UNetConfig::kBaseChannels;
    if (gamma.ndim() != 4 || gamma.dim(1) != expect)
        shape_error("Denoiser::denoise", "expected " + std::to_string(expect) +
                                             " input channels, got " + shape_str(gamma.shape()));
    if ((int)psi.t.size() != gamma.dim(0))
        shape_error("Denoiser::denoise", "psi.t batch mismatch");

    Tensor<float> temb_vec = gelu(temb1_(timestep_embedding(psi.t, cfg_.temb_dim)));
    temb_vec = temb2_(temb_vec);

    Tensor<float> x;
    if (stem_ext_) {
        Tensor<float> base = conv2d(slice(gamma, 1, 0, UNetConfig::kBaseChannels), stem_w_->value,
                                    stem_b_->value, 1, 1);
        Tensor<float> ext = conv2d(slice(gamma, 1, UNetConfig::kBaseChannels,
                                         UNetConfig::kExtChannels),
                                   stem_ext_->value, Tensor<float>{}, 1, 1);
        x = add(base, ext);
    } else {
        x = conv2d(gamma, stem_w_->value, stem_b_->value, 1, 1);
    }

    Tensor<float> skips[3];
    for (int l = 0; l < 3; ++l) {
        x = enc_res_[l](x, temb_vec);
        x = enc_attn_[l](x, psi);
        skips[l] = x;
        x = down_[l](x);
    }
    x = mid_res1_(x, temb_vec);
    x = mid_attn_(x, psi);
    x = mid_res2_(x, temb_vec);
    for (int l = 2; l >= 0; --l) {
        x = up_[l](upsample_nearest(x, 2));
        x = concat<float>({x, skips[l]}, 1);
        x = dec_res_[l](x, temb_vec);
        x = dec_attn_[l](x, psi);
    }
    return out_conv_(gelu(out_norm_(x)));
}

void Denoiser::save_into(Checkpoint& ck, const std::string& prefix) const {
    ck.add(prefix + "stem.base.w", stem_w_->value.shape(), stem_w_->value.vec());
    if (stem_ext_) ck.add(prefix + "stem.ext.w", stem_ext_->value.shape(), stem_ext_->value.vec());
    for (auto& p : params_) {
        if (&p == stem_w_ || &p == stem_ext_) continue;
        ck.add(prefix + p.name, p.value.shape(), p.value.vec());
    }
}

void Denoiser::load_from(const Checkpoint& ck, const std::string& prefix) {
    if (ck.find(prefix + "stem.ext.w") && !stem_ext_) extend_input_channels();
    ck.load_store(params_, prefix);
}

}  // namespace stitch
