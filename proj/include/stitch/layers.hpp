#pragma once

#include <cmath>
#include <string>

#include "stitch/ops.hpp"
#include "stitch/params.hpp"
#include "stitch/rng.hpp"

namespace stitch {

namespace init {

template <typename S>
Tensor<S> he_normal(Shape shape, int64_t fan_in, Rng& rng) {
    return Tensor<S>::randn(std::move(shape), rng, (S)std::sqrt(2.0 / (double)fan_in));
}

template <typename S>
Tensor<S> glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
    S lim = (S)std::sqrt(6.0 / (double)(fan_in + fan_out));
    return Tensor<S>::uniform(std::move(shape), rng, -lim, lim);
}

}  // namespace init

template <typename S>
struct Dense {
    Parameter<S>* w = nullptr;
    Parameter<S>* b = nullptr;

    Dense() = default;
    Dense(ParamStore<S>& ps, const std::string& name, int in, int out, Rng& rng,
          bool bias = true, bool zero_init = false) {
        Tensor<S> wt = zero_init ? Tensor<S>::zeros({out, in})
                                 : init::glorot_uniform<S>({out, in}, in, out, rng);
        w = &ps.add(name + ".w", std::move(wt));
        if (bias) b = &ps.add(name + ".b", Tensor<S>::zeros({out}));
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        return linear(x, w->value, b ? b->value : Tensor<S>{});
    }
};

template <typename S>
struct Conv2d {
    Parameter<S>* w = nullptr;
    Parameter<S>* b = nullptr;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamStore<S>& ps, const std::string& name, int in_ch, int out_ch, int k, int stride_,
           int pad_, Rng& rng, bool zero_init = false) : stride(stride_), pad(pad_) {
        Tensor<S> wt = zero_init ? Tensor<S>::zeros({out_ch, in_ch, k, k})
                                 : init::he_normal<S>({out_ch, in_ch, k, k},
                                                      (int64_t)in_ch * k * k, rng);
        w = &ps.add(name + ".w", std::move(wt));
        b = &ps.add(name + ".b", Tensor<S>::zeros({out_ch}));
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        return conv2d(x, w->value, b->value, stride, pad);
    }
};

template <typename S>
struct GroupNormLayer {
    Parameter<S>* gamma = nullptr;
    Parameter<S>* beta = nullptr;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore<S>& ps, const std::string& name, int channels, int groups_)
        : groups(groups_) {
        gamma = &ps.add(name + ".g", Tensor<S>::filled({channels}, S(1)));
        beta = &ps.add(name + ".b", Tensor<S>::zeros({channels}));
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        return group_norm(x, groups, gamma->value, beta->value);
    }
};

template <typename S>
struct LayerNormLayer {
    Parameter<S>* gamma = nullptr;
    Parameter<S>* beta = nullptr;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<S>& ps, const std::string& name, int dim) {
        gamma = &ps.add(name + ".g", Tensor<S>::filled({dim}, S(1)));
        beta = &ps.add(name + ".b", Tensor<S>::zeros({dim}));
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gamma->value, beta->value); }
};

// Query stream (B,Lq,dq) attending over a context (B,Lk,dkv); self-attention
// when the same tensor is passed for both.
template <typename S>
struct MultiheadAttention {
    Dense<S> wq, wk, wv, wo;
    int heads = 1;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore<S>& ps, const std::string& name, int dq, int dkv, int heads_,
                       Rng& rng)
        : heads(heads_) {
        wq = Dense<S>(ps, name + ".q", dq, dq, rng, false);
        wk = Dense<S>(ps, name + ".k", dkv, dq, rng, false);
        wv = Dense<S>(ps, name + ".v", dkv, dq, rng, false);
        wo = Dense<S>(ps, name + ".o", dq, dq, rng, true);
    }

    Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& ctx) const {
        Tensor<S> q = split_heads(wq(x), heads);
        Tensor<S> k = split_heads(wk(ctx), heads);
        Tensor<S> v = split_heads(wv(ctx), heads);
        return wo(merge_heads(scaled_dot_attention(q, k, v)));
    }
};

// Pre-norm transformer encoder block (self-attention + GELU MLP).
template <typename S>
struct TransformerBlock {
    LayerNormLayer<S> n1, n2;
    MultiheadAttention<S> attn;
    Dense<S> ff1, ff2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<S>& ps, const std::string& name, int dim, int heads, int ff_dim,
                     Rng& rng) {
        n1 = LayerNormLayer<S>(ps, name + ".n1", dim);
        attn = MultiheadAttention<S>(ps, name + ".attn", dim, dim, heads, rng);
        n2 = LayerNormLayer<S>(ps, name + ".n2", dim);
        ff1 = Dense<S>(ps, name + ".ff1", dim, ff_dim, rng);
        ff2 = Dense<S>(ps, name + ".ff2", ff_dim, dim, rng);
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        Tensor<S> h = n1(x);
        Tensor<S> y = add(x, attn(h, h));
        return add(y, ff2(gelu(ff1(n2(y)))));
    }
};

}  // namespace stitch
