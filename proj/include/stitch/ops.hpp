#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "stitch/parallel.hpp"
#include "stitch/tensor.hpp"

// Differentiable op vocabulary. Ops validate shapes, compute forward values
// eagerly, and (when taping is enabled and an input requires grad) attach a
// backward closure that accumulates into parent grads. Heavy ops parallelize
// over a decomposition that is independent of the thread count, so results
// are bit-identical to a single-threaded run.

namespace stitch {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

namespace detail {

template <typename S>
inline NodePtr<S> alloc_out(Shape shape) {
    auto n = std::make_shared<Node<S>>();
    n->value.resize((size_t)shape_numel(shape));
    n->shape = std::move(shape);
    return n;
}

template <typename S>
inline void record(const NodePtr<S>& out, std::vector<NodePtr<S>> grad_parents,
                   std::function<void(Node<S>&)> bw) {
    std::vector<NodePtr<S>> live;
    for (auto& p : grad_parents)
        if (p && p->requires_grad) live.push_back(p);
    if (!stitch::grad_enabled() || live.empty()) return;
    out->requires_grad = true;
    out->parents = std::move(live);
    out->backward = std::move(bw);
}

template <typename S>
inline bool wants_grad(const Tensor<S>& t) {
    return stitch::grad_enabled() && t.requires_grad();
}

// Range-reduced polynomial expf, |rel err| < 3e-7 on the softmax domain
// (inputs <= 0 after the max shift). Branch-free so the row loops vectorize.
inline float fast_exp(float x) {
    x = std::max(x, -87.0f);
    const float log2e = 1.442695040888963f;
    float fi = std::floor(x * log2e + 0.5f);
    float f = x - fi * 0.6931471805599453f;
    float p = 1.0f + f * (1.0f + f * (0.5f + f * (0.16666667f + f * (0.041666668f +
              f * (0.008333334f + f * 0.0013888889f)))));
    uint32_t bits = (uint32_t)((int)fi + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, 4);
    return p * scale;
}

inline double fast_exp(double x) { return std::exp(x); }

// Fixed-size chunking for elementwise loops: the decomposition is independent
// of the thread count, so results are bit-identical to serial execution.
constexpr int64_t kChunk = 1 << 15;

template <typename Fn>
inline void for_chunks(int64_t n, Fn&& fn) {
    int chunks = (int)((n + kChunk - 1) / kChunk);
    if (chunks <= 1) {
        fn((int64_t)0, n);
        return;
    }
    parallel_for(chunks, [&](int c) {
        int64_t lo = (int64_t)c * kChunk;
        fn(lo, std::min(n, lo + kChunk));
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::alloc_out<S>(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out->value.data();
    detail::for_chunks(a.numel(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
    });
    auto an = a.node(), bn = b.node();
    detail::record<S>(out, {an, bn}, [an, bn](Node<S>& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) an->grad[i] += n.grad[i];
            });
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) bn->grad[i] += n.grad[i];
            });
        }
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        shape_error("sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::alloc_out<S>(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out->value.data();
    detail::for_chunks(a.numel(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] - pb[i];
    });
    auto an = a.node(), bn = b.node();
    detail::record<S>(out, {an, bn}, [an, bn](Node<S>& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) an->grad[i] += n.grad[i];
            });
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) bn->grad[i] -= n.grad[i];
            });
        }
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        shape_error("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::alloc_out<S>(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out->value.data();
    detail::for_chunks(a.numel(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
    });
    auto an = a.node(), bn = b.node();
    detail::record<S>(out, {an, bn}, [an, bn](Node<S>& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) an->grad[i] += n.grad[i] * bn->value[i];
            });
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) bn->grad[i] += n.grad[i] * an->value[i];
            });
        }
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    auto out = detail::alloc_out<S>(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out->value[i] = a.data()[i] * c;
    auto an = a.node();
    detail::record<S>(out, {an}, [an, c](Node<S>& n) {
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    auto out = detail::alloc_out<S>(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out->value[i] = a.data()[i] + c;
    auto an = a.node();
    detail::record<S>(out, {an}, [an](Node<S>& n) {
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
    return Tensor<S>(out);
}

namespace detail {

// tanh(u) ~ u(27+u^2)/(27+9u^2) on [-3,3], exactly +-1 with zero slope at the
// ends, so the clamped extension is C1. Fully vectorizable.
template <typename S>
inline S rational_tanh(S u) {
    if (u <= S(-3)) return S(-1);
    if (u >= S(3)) return S(1);
    S u2 = u * u;
    return u * (S(27) + u2) / (S(27) + S(9) * u2);
}

template <typename S>
inline S rational_tanh_grad(S u) {
    if (u <= S(-3) || u >= S(3)) return S(0);
    S u2 = u * u;
    S denom = S(27) + S(9) * u2;
    return ((S(27) + S(3) * u2) * denom - (S(27) * u + u * u2) * S(18) * u) / (denom * denom);
}

}  // namespace detail

// tanh-form GELU with the rational tanh above; smooth, gelu(0) = 0.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    constexpr S kA = (S)0.7978845608028654;  // sqrt(2/pi)
    constexpr S kB = (S)0.044715;
    auto out = detail::alloc_out<S>(x.shape());
    const S* px = x.data();
    S* po = out->value.data();
    detail::for_chunks(x.numel(), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            S v = px[i];
            S u = kA * (v + kB * v * v * v);
            po[i] = (S)0.5 * v * (S(1) + detail::rational_tanh(u));
        }
    });
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn](Node<S>& n) {
        xn->ensure_grad();
        detail::for_chunks((int64_t)n.grad.size(), [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                S v = xn->value[i];
                S u = kA * (v + kB * v * v * v);
                S t = detail::rational_tanh(u);
                S du = kA * (S(1) + S(3) * kB * v * v);
                xn->grad[i] += n.grad[i] * ((S)0.5 * (S(1) + t) +
                                            (S)0.5 * v * detail::rational_tanh_grad(u) * du);
            }
        });
    });
    return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// softmax / reductions
// ---------------------------------------------------------------------------

// Softmax over the last dimension.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
    if (x.ndim() < 1) shape_error("softmax", "needs >=1 dim");
    int D = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / D;
    auto out = detail::alloc_out<S>(x.shape());
    const S* px = x.data();
    S* po = out->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = px + r * D;
        S* yr = po + r * D;
        S mx = xr[0];
        for (int j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
        double sum = 0;
        for (int j = 0; j < D; ++j) {
            S e = detail::fast_exp(xr[j] - mx);
            yr[j] = e;
            sum += (double)e;
        }
        S inv = (S)(1.0 / sum);
        for (int j = 0; j < D; ++j) yr[j] *= inv;
    }
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, D](Node<S>& n) {
        xn->ensure_grad();
        int64_t rows = n.numel() / D;
        for (int64_t r = 0; r < rows; ++r) {
            const S* y = n.value.data() + r * D;
            const S* g = n.grad.data() + r * D;
            S* gx = xn->grad.data() + r * D;
            double dot = 0;
            for (int j = 0; j < D; ++j) dot += (double)g[j] * y[j];
            for (int j = 0; j < D; ++j) gx[j] += y[j] * (g[j] - (S)dot);
        }
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    double acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += (double)x.data()[i];
    auto out = detail::alloc_out<S>({1});
    out->value[0] = (S)(acc / (double)x.numel());
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn](Node<S>& n) {
        xn->ensure_grad();
        S g = n.grad[0] / (S)xn->numel();
        for (auto& v : xn->grad) v += g;
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    double acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += (double)x.data()[i];
    auto out = detail::alloc_out<S>({1});
    out->value[0] = (S)acc;
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn](Node<S>& n) {
        xn->ensure_grad();
        for (auto& v : xn->grad) v += n.grad[0];
    });
    return Tensor<S>(out);
}

// Mean squared error; the reduction accumulates in double.
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        shape_error("mse", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int64_t numel = a.numel();
    int chunks = (int)((numel + detail::kChunk - 1) / detail::kChunk);
    std::vector<double> partial((size_t)chunks, 0.0);
    const S* pa = a.data();
    const S* pb = b.data();
    parallel_for(chunks, [&](int c) {
        int64_t lo = (int64_t)c * detail::kChunk, hi = std::min(numel, lo + detail::kChunk);
        double acc = 0;
        for (int64_t i = lo; i < hi; ++i) {
            double d = (double)pa[i] - pb[i];
            acc += d * d;
        }
        partial[(size_t)c] = acc;
    });
    double acc = 0;
    for (double p : partial) acc += p;  // fixed combine order
    auto out = detail::alloc_out<S>({1});
    out->value[0] = (S)(acc / (double)numel);
    auto an = a.node(), bn = b.node();
    detail::record<S>(out, {an, bn}, [an, bn](Node<S>& n) {
        S g = n.grad[0] * (S)(2.0 / (double)an->numel());
        if (an->requires_grad) {
            an->ensure_grad();
            detail::for_chunks(an->numel(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) an->grad[i] += g * (an->value[i] - bn->value[i]);
            });
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::for_chunks(bn->numel(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) bn->grad[i] -= g * (an->value[i] - bn->value[i]);
            });
        }
    });
    return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        shape_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
    auto out = detail::alloc_out<S>(std::move(shape));
    out->value = x.vec();
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn](Node<S>& n) {
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
    if (xs.empty()) shape_error("concat", "empty input list");
    Shape base = xs[0].shape();
    if (axis < 0 || axis >= (int)base.size()) shape_error("concat", "bad axis");
    int total = 0;
    for (auto& x : xs) {
        if ((int)x.shape().size() != (int)base.size()) shape_error("concat", "rank mismatch");
        for (int d = 0; d < (int)base.size(); ++d)
            if (d != axis && x.shape()[d] != base[d])
                shape_error("concat", shape_str(x.shape()) + " vs " + shape_str(base) +
                                          " on axis " + std::to_string(d));
        total += x.shape()[axis];
    }
    Shape oshape = base;
    oshape[axis] = total;
    auto out = detail::alloc_out<S>(oshape);

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= base[d];
    for (int d = axis + 1; d < (int)base.size(); ++d) inner *= base[d];

    int64_t ostride = (int64_t)total * inner;
    int64_t off = 0;
    std::vector<int64_t> offsets;
    for (auto& x : xs) {
        int64_t blk = (int64_t)x.shape()[axis] * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out->value.data() + o * ostride + off, x.data() + o * blk, blk * sizeof(S));
        offsets.push_back(off);
        off += blk;
    }

    std::vector<NodePtr<S>> parents;
    for (auto& x : xs) parents.push_back(x.node());
    detail::record<S>(out, parents, [parents, offsets, outer, inner, ostride](Node<S>& n) {
        for (size_t k = 0; k < parents.size(); ++k) {
            auto& p = parents[k];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            int64_t blk = p->numel() / outer;
            for (int64_t o = 0; o < outer; ++o) {
                const S* g = n.grad.data() + o * ostride + offsets[k];
                S* gp = p->grad.data() + o * blk;
                for (int64_t i = 0; i < blk; ++i) gp[i] += g[i];
            }
        }
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int start, int len) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= (int)s.size() || start < 0 || start + len > s[axis])
        shape_error("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                 ") out of " + shape_str(s));
    Shape oshape = s;
    oshape[axis] = len;
    auto out = detail::alloc_out<S>(oshape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (int d = axis + 1; d < (int)s.size(); ++d) inner *= s[d];
    int64_t istride = (int64_t)s[axis] * inner;
    int64_t blk = (int64_t)len * inner;
    int64_t ioff = (int64_t)start * inner;
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out->value.data() + o * blk, x.data() + o * istride + ioff, blk * sizeof(S));
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, outer, istride, blk, ioff](Node<S>& n) {
        xn->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const S* g = n.grad.data() + o * blk;
            S* gp = xn->grad.data() + o * istride + ioff;
            for (int64_t i = 0; i < blk; ++i) gp[i] += g[i];
        }
    });
    return Tensor<S>(out);
}

// (B,L,D) -> (B,H,L,D/H)
template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, int heads) {
    if (x.ndim() != 3) shape_error("split_heads", "expected (B,L,D), got " + shape_str(x.shape()));
    int B = x.dim(0), L = x.dim(1), D = x.dim(2);
    if (D % heads != 0) shape_error("split_heads", "D=" + std::to_string(D) + " not divisible by heads");
    int Dh = D / heads;
    auto out = detail::alloc_out<S>({B, heads, L, Dh});
    const S* px = x.data();
    S* po = out->value.data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int l = 0; l < L; ++l)
                std::memcpy(po + (((int64_t)b * heads + h) * L + l) * Dh,
                            px + ((int64_t)b * L + l) * D + h * Dh, Dh * sizeof(S));
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, B, heads, L, Dh, D](Node<S>& n) {
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l) {
                    const S* g = n.grad.data() + (((int64_t)b * heads + h) * L + l) * Dh;
                    S* gp = xn->grad.data() + ((int64_t)b * L + l) * D + h * Dh;
                    for (int i = 0; i < Dh; ++i) gp[i] += g[i];
                }
    });
    return Tensor<S>(out);
}

// (B,H,L,Dh) -> (B,L,H*Dh)
template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
    if (x.ndim() != 4) shape_error("merge_heads", "expected (B,H,L,Dh), got " + shape_str(x.shape()));
    int B = x.dim(0), H = x.dim(1), L = x.dim(2), Dh = x.dim(3);
    int D = H * Dh;
    auto out = detail::alloc_out<S>({B, L, D});
    const S* px = x.data();
    S* po = out->value.data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int l = 0; l < L; ++l)
                std::memcpy(po + ((int64_t)b * L + l) * D + h * Dh,
                            px + (((int64_t)b * H + h) * L + l) * Dh, Dh * sizeof(S));
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, B, H, L, Dh, D](Node<S>& n) {
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < H; ++h)
                for (int l = 0; l < L; ++l) {
                    const S* g = n.grad.data() + ((int64_t)b * L + l) * D + h * Dh;
                    S* gp = xn->grad.data() + (((int64_t)b * H + h) * L + l) * Dh;
                    for (int i = 0; i < Dh; ++i) gp[i] += g[i];
                }
    });
    return Tensor<S>(out);
}

// (N,C,H,W) -> (N,H*W,C) token view for attention over spatial positions.
template <typename S>
Tensor<S> nchw_to_tokens(const Tensor<S>& x) {
    if (x.ndim() != 4) shape_error("nchw_to_tokens", "expected NCHW, got " + shape_str(x.shape()));
    int N = x.dim(0), C = x.dim(1);
    int64_t HW = (int64_t)x.dim(2) * x.dim(3);
    auto out = detail::alloc_out<S>({N, (int)HW, C});
    const S* px = x.data();
    S* po = out->value.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* src = px + ((int64_t)n * C + c) * HW;
            S* dst = po + (int64_t)n * HW * C + c;
            for (int64_t i = 0; i < HW; ++i) dst[i * C] = src[i];
        }
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, N, C, HW](Node<S>& n) {
        xn->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S* g = n.grad.data() + (int64_t)b * HW * C + c;
                S* gp = xn->grad.data() + ((int64_t)b * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) gp[i] += g[i * C];
            }
    });
    return Tensor<S>(out);
}

// (N,L,C) -> (N,C,H,W) with L == H*W.
template <typename S>
Tensor<S> tokens_to_nchw(const Tensor<S>& x, int H, int W) {
    if (x.ndim() != 3 || x.dim(1) != H * W)
        shape_error("tokens_to_nchw", shape_str(x.shape()) + " vs H*W=" + std::to_string(H * W));
    int N = x.dim(0), C = x.dim(2);
    int64_t HW = (int64_t)H * W;
    auto out = detail::alloc_out<S>({N, C, H, W});
    const S* px = x.data();
    S* po = out->value.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S* src = px + (int64_t)n * HW * C + c;
            S* dst = po + ((int64_t)n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i * C];
        }
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, N, C, HW](Node<S>& n) {
        xn->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const S* g = n.grad.data() + ((int64_t)b * C + c) * HW;
                S* gp = xn->grad.data() + (int64_t)b * HW * C + c;
                for (int64_t i = 0; i < HW; ++i) gp[i * C] += g[i];
            }
    });
    return Tensor<S>(out);
}

template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x, int factor) {
    if (x.ndim() != 4) shape_error("upsample_nearest", "expected NCHW, got " + shape_str(x.shape()));
    if (factor < 1) shape_error("upsample_nearest", "factor must be >= 1");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto out = detail::alloc_out<S>({N, C, H * factor, W * factor});
    const S* px = x.data();
    S* po = out->value.data();
    int OW = W * factor;
    parallel_for(N * C, [&](int nc) {
        for (int y = 0; y < H * factor; ++y) {
            const S* src = px + ((int64_t)nc * H + y / factor) * W;
            S* dst = po + ((int64_t)nc * H * factor + y) * OW;
            for (int xcol = 0; xcol < OW; ++xcol) dst[xcol] = src[xcol / factor];
        }
    });
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, N, C, H, W, factor](Node<S>& n) {
        xn->ensure_grad();
        int OW = W * factor;
        parallel_for(N * C, [&](int nc) {
            for (int y = 0; y < H * factor; ++y) {
                const S* g = n.grad.data() + ((int64_t)nc * H * factor + y) * OW;
                S* gp = xn->grad.data() + ((int64_t)nc * H + y / factor) * W;
                for (int xcol = 0; xcol < OW; ++xcol) gp[xcol / factor] += g[xcol];
            }
        });
    });
    return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    auto out = detail::alloc_out<S>({M, N});
    ConstMatMap<S> am(a.data(), M, K), bm(b.data(), K, N);
    MatMap<S>(out->value.data(), M, N).noalias() = am * bm;
    auto an = a.node(), bn = b.node();
    detail::record<S>(out, {an, bn}, [an, bn, M, K, N](Node<S>& n) {
        ConstMatMap<S> g(n.grad.data(), M, N);
        if (an->requires_grad) {
            an->ensure_grad();
            ConstMatMap<S> bm(bn->value.data(), K, N);
            MatMap<S>(an->grad.data(), M, K).noalias() += g * bm.transpose();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            ConstMatMap<S> am(an->value.data(), M, K);
            MatMap<S>(bn->grad.data(), K, N).noalias() += am.transpose() * g;
        }
    });
    return Tensor<S>(out);
}

// x: (..., Din), w: (Dout, Din), b: (Dout) or undefined.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = {}) {
    if (x.ndim() < 2 || w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(1))
        shape_error("linear", shape_str(x.shape()) + " x weight " + shape_str(w.shape()));
    int Din = w.dim(1), Dout = w.dim(0);
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != Dout))
        shape_error("linear", "bias " + shape_str(b.shape()) + " vs Dout=" + std::to_string(Dout));
    int64_t R = x.numel() / Din;
    Shape oshape = x.shape();
    oshape.back() = Dout;
    auto out = detail::alloc_out<S>(oshape);
    constexpr int64_t kRowBlock = 1024;
    int row_blocks = (int)((R + kRowBlock - 1) / kRowBlock);
    {
        const S* px = x.data();
        const S* pw = w.data();
        S* po = out->value.data();
        parallel_for(row_blocks, [&](int blk) {
            int64_t lo = (int64_t)blk * kRowBlock, rows = std::min(R, lo + kRowBlock) - lo;
            ConstMatMap<S> xm(px + lo * Din, rows, Din);
            ConstMatMap<S> wm(pw, Dout, Din);
            MatMap<S> om(po + lo * Dout, rows, Dout);
            om.noalias() = xm * wm.transpose();
            if (b.defined())
                om.rowwise() +=
                    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data(), Dout);
        });
    }

    auto xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    detail::record<S>(out, {xn, wn, bn}, [xn, wn, bn, R, Din, Dout, row_blocks](Node<S>& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            parallel_for(row_blocks, [&](int blk) {
                int64_t lo = (int64_t)blk * kRowBlock, rows = std::min(R, lo + kRowBlock) - lo;
                ConstMatMap<S> g(n.grad.data() + lo * Dout, rows, Dout);
                ConstMatMap<S> wm(wn->value.data(), Dout, Din);
                MatMap<S>(xn->grad.data() + lo * Din, rows, Din).noalias() += g * wm;
            });
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            // per-block partials reduced in fixed order
            std::vector<S> partial((size_t)row_blocks * Dout * Din);
            parallel_for(row_blocks, [&](int blk) {
                int64_t lo = (int64_t)blk * kRowBlock, rows = std::min(R, lo + kRowBlock) - lo;
                ConstMatMap<S> g(n.grad.data() + lo * Dout, rows, Dout);
                ConstMatMap<S> xm(xn->value.data() + lo * Din, rows, Din);
                MatMap<S>(partial.data() + (size_t)blk * Dout * Din, Dout, Din).noalias() =
                    g.transpose() * xm;
            });
            for (int blk = 0; blk < row_blocks; ++blk) {
                const S* p = partial.data() + (size_t)blk * Dout * Din;
                for (int64_t j = 0; j < (int64_t)Dout * Din; ++j) wn->grad[j] += p[j];
            }
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t r = 0; r < R; ++r)
                for (int j = 0; j < Dout; ++j) bn->grad[j] += n.grad[r * Dout + j];
        }
    });
    return Tensor<S>(out);
}

namespace detail {

template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW,
            S* col) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                S* row = col + (((int64_t)c * kh + ky) * kw + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    S* dst = row + (int64_t)oy * OW;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst, 0, OW * sizeof(S));
                        continue;
                    }
                    const S* src = x + ((int64_t)c * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                    }
                }
            }
}

// Reusable per-thread scratch: repeated ops at the same shape reuse the same
// pages instead of re-faulting fresh allocations.
template <typename S>
inline S* op_scratch(int slot, size_t n) {
    static thread_local std::vector<S> bufs[5];
    auto& b = bufs[(size_t)slot];
    if (b.size() < n) b.resize(n);
    return b.data();
}

template <typename S>
void col2im_add(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
                int OW, S* gx) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const S* row = col + (((int64_t)c * kh + ky) * kw + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = gx + ((int64_t)c * H + iy) * W;
                    const S* src = row + (int64_t)oy * OW;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace detail

// x: (N,C,H,W), w: (O,C,kh,kw), b: (O) or undefined.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = {}, int stride = 1,
                 int pad = 0) {
    if (x.ndim() != 4 || w.ndim() != 4)
        shape_error("conv2d", "input " + shape_str(x.shape()) + ", kernel " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        shape_error("conv2d", "channel mismatch: input " + shape_str(x.shape()) + " vs kernel " +
                                  shape_str(w.shape()));
    if (stride < 1) shape_error("conv2d", "stride must be >= 1");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != O))
        shape_error("conv2d", "bias " + shape_str(b.shape()) + " vs O=" + std::to_string(O));
    int OH = (H + 2 * pad - kh) / stride + 1;
    int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0)
        shape_error("conv2d", "empty output for input " + shape_str(x.shape()) + ", kernel " +
                                  shape_str(w.shape()) + ", stride " + std::to_string(stride) +
                                  ", pad " + std::to_string(pad));
    int CKK = C * kh * kw;
    auto out = detail::alloc_out<S>({N, O, OH, OW});

    const S* px = x.data();
    const S* pw = w.data();
    S* po = out->value.data();
    parallel_for(N, [&](int n) {
        S* col = detail::op_scratch<S>(0, (size_t)CKK * OH * OW);
        detail::im2col(px + (int64_t)n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col);
        ConstMatMap<S> wm(pw, O, CKK), cm(col, CKK, OH * OW);
        MatMap<S> om(po + (int64_t)n * O * OH * OW, O, OH * OW);
        om.noalias() = wm * cm;
        if (b.defined())
            for (int o = 0; o < O; ++o) om.row(o).array() += b.data()[o];
    });

    auto xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    detail::record<S>(out, {xn, wn, bn},
                      [xn, wn, bn, N, C, H, W, O, kh, kw, stride, pad, OH, OW, CKK](Node<S>& n) {
        // per-sample weight-grad partials reduced in fixed order keep the
        // result independent of the thread count
        std::vector<S> wpart;
        bool need_w = wn->requires_grad;
        if (need_w) wpart.assign((size_t)N * O * CKK, S(0));
        if (xn->requires_grad) xn->ensure_grad();
        const S* pw = wn->value.data();
        parallel_for(N, [&](int i) {
            S* col = detail::op_scratch<S>(0, (size_t)CKK * OH * OW);
            detail::im2col(xn->value.data() + (int64_t)i * C * H * W, C, H, W, kh, kw, stride, pad,
                           OH, OW, col);
            ConstMatMap<S> g(n.grad.data() + (int64_t)i * O * OH * OW, O, OH * OW);
            if (need_w) {
                ConstMatMap<S> cm(col, CKK, OH * OW);
                MatMap<S>(wpart.data() + (int64_t)i * O * CKK, O, CKK).noalias() =
                    g * cm.transpose();
            }
            if (xn->requires_grad) {
                S* gcol = detail::op_scratch<S>(1, (size_t)CKK * OH * OW);
                ConstMatMap<S> wm(pw, O, CKK);
                MatMap<S>(gcol, CKK, OH * OW).noalias() = wm.transpose() * g;
                detail::col2im_add(gcol, C, H, W, kh, kw, stride, pad, OH, OW,
                                   xn->grad.data() + (int64_t)i * C * H * W);
            }
        });
        if (need_w) {
            wn->ensure_grad();
            for (int i = 0; i < N; ++i) {
                const S* p = wpart.data() + (int64_t)i * O * CKK;
                for (int64_t j = 0; j < (int64_t)O * CKK; ++j) wn->grad[j] += p[j];
            }
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int o = 0; o < O; ++o) {
                    const S* g = n.grad.data() + ((int64_t)i * O + o) * OH * OW;
                    double acc = 0;
                    for (int64_t j = 0; j < (int64_t)OH * OW; ++j) acc += (double)g[j];
                    bn->grad[o] += (S)acc;
                }
        }
    });
    return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = (S)1e-5) {
    if (x.ndim() != 4) shape_error("group_norm", "expected NCHW, got " + shape_str(x.shape()));
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (groups < 1 || C % groups != 0)
        shape_error("group_norm", "channels " + std::to_string(C) + " not divisible by groups " +
                                      std::to_string(groups));
    if (gamma.numel() != C || beta.numel() != C)
        shape_error("group_norm", "affine params must have C=" + std::to_string(C) + " entries");
    int cg = C / groups;
    int64_t gsz = (int64_t)cg * H * W;
    auto out = detail::alloc_out<S>(x.shape());
    const S* px = x.data();
    S* po = out->value.data();
    parallel_for(N * groups, [&](int task) {
        {
            int n = task / groups, g = task % groups;
            const S* xs = px + ((int64_t)n * C + g * cg) * H * W;
            S* ys = po + ((int64_t)n * C + g * cg) * H * W;
            double mean = 0;
            for (int64_t i = 0; i < gsz; ++i) mean += (double)xs[i];
            mean /= (double)gsz;
            double var = 0;
            for (int64_t i = 0; i < gsz; ++i) {
                double d = (double)xs[i] - mean;
                var += d * d;
            }
            var /= (double)gsz;
            double inv = 1.0 / std::sqrt(var + (double)eps);
            for (int c = 0; c < cg; ++c) {
                S gm = gamma.data()[g * cg + c], bt = beta.data()[g * cg + c];
                for (int64_t i = 0; i < (int64_t)H * W; ++i) {
                    int64_t k = (int64_t)c * H * W + i;
                    ys[k] = (S)(((double)xs[k] - mean) * inv) * gm + bt;
                }
            }
        }
    });

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    detail::record<S>(out, {xn, gn, bn}, [xn, gn, bn, N, C, H, W, groups, cg, gsz, eps](Node<S>& n) {
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        int64_t hw = (int64_t)H * W;
        bool affine_grads = gn->requires_grad || bn->requires_grad;
        // per-(sample,group) affine partials, reduced afterwards in fixed order
        std::vector<double> dgamma, dbeta;
        if (affine_grads) {
            dgamma.assign((size_t)N * C, 0.0);
            dbeta.assign((size_t)N * C, 0.0);
        }
        parallel_for(N * groups, [&](int task) {
            int i = task / groups, g = task % groups;
            const S* xs = xn->value.data() + ((int64_t)i * C + g * cg) * hw;
            const S* gr = n.grad.data() + ((int64_t)i * C + g * cg) * hw;
            double mean = 0;
            for (int64_t k = 0; k < gsz; ++k) mean += (double)xs[k];
            mean /= (double)gsz;
            double var = 0;
            for (int64_t k = 0; k < gsz; ++k) {
                double d = (double)xs[k] - mean;
                var += d * d;
            }
            var /= (double)gsz;
            double inv = 1.0 / std::sqrt(var + (double)eps);

            if (affine_grads) {
                for (int c = 0; c < cg; ++c) {
                    double dg = 0, db = 0;
                    for (int64_t k = 0; k < hw; ++k) {
                        double xh = ((double)xs[c * hw + k] - mean) * inv;
                        dg += (double)gr[c * hw + k] * xh;
                        db += (double)gr[c * hw + k];
                    }
                    dgamma[(size_t)i * C + g * cg + c] = dg;
                    dbeta[(size_t)i * C + g * cg + c] = db;
                }
            }
            if (xn->requires_grad) {
                double mean_dxh = 0, mean_dxh_xh = 0;
                for (int c = 0; c < cg; ++c) {
                    double gm = (double)gn->value[g * cg + c];
                    for (int64_t k = 0; k < hw; ++k) {
                        double dxh = (double)gr[c * hw + k] * gm;
                        double xh = ((double)xs[c * hw + k] - mean) * inv;
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                }
                mean_dxh /= (double)gsz;
                mean_dxh_xh /= (double)gsz;
                S* gx = xn->grad.data() + ((int64_t)i * C + g * cg) * hw;
                for (int c = 0; c < cg; ++c) {
                    double gm = (double)gn->value[g * cg + c];
                    for (int64_t k = 0; k < hw; ++k) {
                        double dxh = (double)gr[c * hw + k] * gm;
                        double xh = ((double)xs[c * hw + k] - mean) * inv;
                        gx[c * hw + k] += (S)(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
                    }
                }
            }
        });
        if (affine_grads) {
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c) {
                    if (gn->requires_grad) gn->grad[c] += (S)dgamma[(size_t)i * C + c];
                    if (bn->requires_grad) bn->grad[c] += (S)dbeta[(size_t)i * C + c];
                }
        }
    });
    return Tensor<S>(out);
}

// Normalizes the last dimension.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = (S)1e-5) {
    int D = x.dim(x.ndim() - 1);
    if (gamma.numel() != D || beta.numel() != D)
        shape_error("layer_norm", "affine params must have D=" + std::to_string(D) + " entries");
    int64_t rows = x.numel() / D;
    auto out = detail::alloc_out<S>(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const S* xs = x.data() + r * D;
        S* ys = out->value.data() + r * D;
        double mean = 0;
        for (int j = 0; j < D; ++j) mean += (double)xs[j];
        mean /= D;
        double var = 0;
        for (int j = 0; j < D; ++j) {
            double d = (double)xs[j] - mean;
            var += d * d;
        }
        var /= D;
        double inv = 1.0 / std::sqrt(var + (double)eps);
        for (int j = 0; j < D; ++j)
            ys[j] = (S)(((double)xs[j] - mean) * inv) * gamma.data()[j] + beta.data()[j];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    detail::record<S>(out, {xn, gn, bn}, [xn, gn, bn, D, eps](Node<S>& n) {
        int64_t rows = n.numel() / D;
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const S* xs = xn->value.data() + r * D;
            const S* gr = n.grad.data() + r * D;
            double mean = 0;
            for (int j = 0; j < D; ++j) mean += (double)xs[j];
            mean /= D;
            double var = 0;
            for (int j = 0; j < D; ++j) {
                double d = (double)xs[j] - mean;
                var += d * d;
            }
            var /= D;
            double inv = 1.0 / std::sqrt(var + (double)eps);
            double mean_dxh = 0, mean_dxh_xh = 0;
            for (int j = 0; j < D; ++j) {
                double xh = ((double)xs[j] - mean) * inv;
                double dxh = (double)gr[j] * (double)gn->value[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh;
                if (gn->requires_grad) gn->grad[j] += (S)((double)gr[j] * xh);
                if (bn->requires_grad) bn->grad[j] += gr[j];
            }
            mean_dxh /= D;
            mean_dxh_xh /= D;
            if (xn->requires_grad) {
                S* gx = xn->grad.data() + r * D;
                for (int j = 0; j < D; ++j) {
                    double xh = ((double)xs[j] - mean) * inv;
                    double dxh = (double)gr[j] * (double)gn->value[j];
                    gx[j] += (S)(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
                }
            }
        }
    });
    return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// q: (B,H,Lq,Dh), k/v: (B,H,Lk,Dh) -> (B,H,Lq,Dh). softmax(q k^T / sqrt(Dh)) v.
// The attention matrix is recomputed in backward instead of stored.
template <typename S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
    if (q.ndim() != 4 || k.ndim() != 4 || v.ndim() != 4)
        shape_error("scaled_dot_attention", "expected (B,H,L,Dh) operands");
    int B = q.dim(0), H = q.dim(1), Lq = q.dim(2), Dh = q.dim(3);
    int Lk = k.dim(2);
    if (k.dim(0) != B || k.dim(1) != H || k.dim(3) != Dh)
        shape_error("scaled_dot_attention", "q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
    if (v.dim(0) != B || v.dim(1) != H || v.dim(2) != Lk || v.dim(3) != Dh)
        shape_error("scaled_dot_attention", "k " + shape_str(k.shape()) + " vs v " + shape_str(v.shape()));
    S scale = (S)(1.0 / std::sqrt((double)Dh));
    auto out = detail::alloc_out<S>({B, H, Lq, Dh});

    auto softmax_rows = [](MatMap<S>& m) {
        for (int r = 0; r < m.rows(); ++r) {
            S* row = m.data() + (size_t)r * m.cols();
            S mx = row[0];
            for (int c = 1; c < m.cols(); ++c) mx = std::max(mx, row[c]);
            double sum = 0;
            for (int c = 0; c < m.cols(); ++c) {
                S e = detail::fast_exp(row[c] - mx);
                row[c] = e;
                sum += (double)e;
            }
            S inv = (S)(1.0 / sum);
            for (int c = 0; c < m.cols(); ++c) row[c] *= inv;
        }
    };

    const S* pq = q.data();
    const S* pk = k.data();
    const S* pv = v.data();
    S* po = out->value.data();
    parallel_for(B * H, [&](int bh) {
        ConstMatMap<S> qm(pq + (int64_t)bh * Lq * Dh, Lq, Dh);
        ConstMatMap<S> km(pk + (int64_t)bh * Lk * Dh, Lk, Dh);
        ConstMatMap<S> vm(pv + (int64_t)bh * Lk * Dh, Lk, Dh);
        MatMap<S> p(detail::op_scratch<S>(2, (size_t)Lq * Lk), Lq, Lk);
        p.noalias() = qm * km.transpose() * scale;
        softmax_rows(p);
        MatMap<S>(po + (int64_t)bh * Lq * Dh, Lq, Dh).noalias() = p * vm;
    });

    auto qn = q.node(), kn = k.node(), vn = v.node();
    detail::record<S>(out, {qn, kn, vn},
                      [qn, kn, vn, B, H, Lq, Lk, Dh, scale, softmax_rows](Node<S>& n) {
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        parallel_for(B * H, [&](int bh) {
            ConstMatMap<S> qm(qn->value.data() + (int64_t)bh * Lq * Dh, Lq, Dh);
            ConstMatMap<S> km(kn->value.data() + (int64_t)bh * Lk * Dh, Lk, Dh);
            ConstMatMap<S> vm(vn->value.data() + (int64_t)bh * Lk * Dh, Lk, Dh);
            ConstMatMap<S> g(n.grad.data() + (int64_t)bh * Lq * Dh, Lq, Dh);
            MatMap<S> p(detail::op_scratch<S>(2, (size_t)Lq * Lk), Lq, Lk);
            p.noalias() = qm * km.transpose() * scale;
            softmax_rows(p);
            MatMap<S> dp(detail::op_scratch<S>(3, (size_t)Lq * Lk), Lq, Lk);
            dp.noalias() = g * vm.transpose();
            // softmax backward per row
            MatMap<S> da(detail::op_scratch<S>(4, (size_t)Lq * Lk), Lq, Lk);
            for (int r = 0; r < Lq; ++r) {
                double dot = 0;
                for (int c = 0; c < Lk; ++c) dot += (double)dp(r, c) * p(r, c);
                for (int c = 0; c < Lk; ++c) da(r, c) = p(r, c) * (dp(r, c) - (S)dot);
            }
            if (qn->requires_grad)
                MatMap<S>(qn->grad.data() + (int64_t)bh * Lq * Dh, Lq, Dh).noalias() +=
                    da * km * scale;
            if (kn->requires_grad)
                MatMap<S>(kn->grad.data() + (int64_t)bh * Lk * Dh, Lk, Dh).noalias() +=
                    da.transpose() * qm * scale;
            if (vn->requires_grad)
                MatMap<S>(vn->grad.data() + (int64_t)bh * Lk * Dh, Lk, Dh).noalias() +=
                    p.transpose() * g;
        });
    });
    return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

// Identity when training is off; otherwise zeroes entries with probability
// rate and rescales survivors by 1/(1-rate).
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, bool training, Rng& rng) {
    if (rate < 0 || rate >= 1) shape_error("dropout", "rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0) {
        auto out = detail::alloc_out<S>(x.shape());
        out->value = x.vec();
        auto xn = x.node();
        detail::record<S>(out, {xn}, [xn](Node<S>& n) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        });
        return Tensor<S>(out);
    }
    auto out = detail::alloc_out<S>(x.shape());
    auto mask = std::make_shared<std::vector<uint8_t>>(x.numel());
    S keep_scale = (S)(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < x.numel(); ++i) {
        bool keep = !rng.bernoulli(rate);
        (*mask)[i] = keep;
        out->value[i] = keep ? x.data()[i] * keep_scale : S(0);
    }
    auto xn = x.node();
    detail::record<S>(out, {xn}, [xn, mask, keep_scale](Node<S>& n) {
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            if ((*mask)[i]) xn->grad[i] += n.grad[i] * keep_scale;
    });
    return Tensor<S>(out);
}

// x: (N,C,H,W) plus per-(sample,channel) offsets e: (N,C).
template <typename S>
Tensor<S> add_channel_broadcast(const Tensor<S>& x, const Tensor<S>& e) {
    if (x.ndim() != 4 || e.ndim() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(1))
        shape_error("add_channel_broadcast", shape_str(x.shape()) + " vs " + shape_str(e.shape()));
    int N = x.dim(0), C = x.dim(1);
    int64_t hw = (int64_t)x.dim(2) * x.dim(3);
    auto out = detail::alloc_out<S>(x.shape());
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
        S off = e.data()[nc];
        const S* src = x.data() + nc * hw;
        S* dst = out->value.data() + nc * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + off;
    }
    auto xn = x.node(), en = e.node();
    detail::record<S>(out, {xn, en}, [xn, en, N, C, hw](Node<S>& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (en->requires_grad) {
            en->ensure_grad();
            for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
                const S* g = n.grad.data() + nc * hw;
                double acc = 0;
                for (int64_t i = 0; i < hw; ++i) acc += (double)g[i];
                en->grad[nc] += (S)acc;
            }
        }
    });
    return Tensor<S>(out);
}

// Per-sample row selection over the batch axis: out[b] = pick_a[b] ? a[b] : b_[b].
template <typename S>
Tensor<S> select_batch(const std::vector<uint8_t>& pick_a, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) shape_error("select_batch", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if ((int)pick_a.size() != a.dim(0)) shape_error("select_batch", "selector size != batch");
    int B = a.dim(0);
    int64_t per = a.numel() / B;
    auto out = detail::alloc_out<S>(a.shape());
    for (int i = 0; i < B; ++i) {
        const S* src = (pick_a[(size_t)i] ? a.data() : b.data()) + i * per;
        std::memcpy(out->value.data() + i * per, src, (size_t)per * sizeof(S));
    }
    auto an = a.node(), bn = b.node();
    detail::record<S>(out, {an, bn}, [an, bn, pick_a, B, per](Node<S>& n) {
        for (int i = 0; i < B; ++i) {
            Node<S>* target = pick_a[(size_t)i] ? an.get() : bn.get();
            if (!target->requires_grad) continue;
            target->ensure_grad();
            const S* g = n.grad.data() + i * per;
            S* gp = target->grad.data() + i * per;
            for (int64_t j = 0; j < per; ++j) gp[j] += g[j];
        }
    });
    return Tensor<S>(out);
}

// x: (B,N,D) plus shared per-position rows (N,D) (e.g. positional embeddings).
template <typename S>
Tensor<S> add_rows_broadcast(const Tensor<S>& x, const Tensor<S>& rows) {
    if (x.ndim() != 3 || rows.ndim() != 2 || rows.dim(0) != x.dim(1) || rows.dim(1) != x.dim(2))
        shape_error("add_rows_broadcast", shape_str(x.shape()) + " vs " + shape_str(rows.shape()));
    int B = x.dim(0);
    int64_t nd = (int64_t)x.dim(1) * x.dim(2);
    auto out = detail::alloc_out<S>(x.shape());
    for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < nd; ++i) out->value[b * nd + i] = x.data()[b * nd + i] + rows.data()[i];
    auto xn = x.node(), rn = rows.node();
    detail::record<S>(out, {xn, rn}, [xn, rn, B, nd](Node<S>& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (rn->requires_grad) {
            rn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int64_t i = 0; i < nd; ++i) rn->grad[i] += n.grad[b * nd + i];
        }
    });
    return Tensor<S>(out);
}

// table: (V,D), ids: flat index list with its logical shape. Out of range ids
// are rejected.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids, Shape ids_shape) {
    if (table.ndim() != 2) shape_error("embedding", "table must be (V,D)");
    if ((int64_t)ids.size() != shape_numel(ids_shape))
        shape_error("embedding", "ids size mismatch vs " + shape_str(ids_shape));
    int V = table.dim(0), D = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= V)
            shape_error("embedding", "id " + std::to_string(id) + " out of vocab " + std::to_string(V));
    Shape oshape = ids_shape;
    oshape.push_back(D);
    auto out = detail::alloc_out<S>(oshape);
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out->value.data() + i * D, table.data() + (int64_t)ids[i] * D, D * sizeof(S));
    auto tn = table.node();
    detail::record<S>(out, {tn}, [tn, ids, D](Node<S>& n) {
        tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const S* g = n.grad.data() + i * D;
            S* gp = tn->grad.data() + (int64_t)ids[i] * D;
            for (int j = 0; j < D; ++j) gp[j] += g[j];
        }
    });
    return Tensor<S>(out);
}

}  // namespace stitch
