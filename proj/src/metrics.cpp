#include "stitch/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace stitch {

std::vector<float> image_descriptor(const Image& img) {
    std::vector<float> desc(32, 0.f);
    size_t hw = (size_t)img.h * img.w;
    for (int c = 0; c < 3 && c < img.channels; ++c)
        for (size_t i = 0; i < hw; ++i) {
            int bin = std::min(7, (int)(img.data[(size_t)c * hw + i] * 8.f));
            desc[(size_t)(c * 8 + bin)] += 1.f;
        }
    for (int i = 0; i < 24; ++i) desc[(size_t)i] /= (float)hw;

    // gradient orientation histogram over [0, pi), magnitude weighted
    auto lum = [&](int y, int x) {
        y = std::clamp(y, 0, img.h - 1);
        x = std::clamp(x, 0, img.w - 1);
        if (img.channels == 1) return img.at(0, y, x);
        return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
    };
    double total = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            float gx = lum(y, x + 1) - lum(y, x - 1);
            float gy = lum(y + 1, x) - lum(y - 1, x);
            float mag = std::sqrt(gx * gx + gy * gy);
            if (mag < 1e-6f) continue;
            float ang = std::atan2(gy, gx);
            if (ang < 0) ang += 3.14159265358979f;
            if (ang >= 3.14159265358979f) ang -= 3.14159265358979f;
            int bin = std::min(7, (int)(ang / 3.14159265358979f * 8.f));
            desc[(size_t)(24 + bin)] += mag;
            total += mag;
        }
    if (total > 0)
        for (int i = 24; i < 32; ++i) desc[(size_t)i] /= (float)total;

    double norm = 0;
    for (float v : desc) norm += (double)v * v;
    norm = std::sqrt(norm);
    if (norm > 0)
        for (auto& v : desc) v = (float)(v / norm);
    return desc;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: dim mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += (double)a[i] * b[i];
        na += (double)a[i] * a[i];
        nb += (double)b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0;
    return dot / std::sqrt(na * nb);
}

std::optional<std::pair<int, int>> largest_inset_window(const Image& mask, int size) {
    // integral image over the binary mask
    int h = mask.h, w = mask.w;
    std::vector<int> sums((size_t)(h + 1) * (w + 1), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            sums[(size_t)(y + 1) * (w + 1) + x + 1] = (mask.at(0, y, x) > 0.5f ? 1 : 0) +
                                                      sums[(size_t)y * (w + 1) + x + 1] +
                                                      sums[(size_t)(y + 1) * (w + 1) + x] -
                                                      sums[(size_t)y * (w + 1) + x];
    auto count = [&](int y0, int x0, int sy, int sx) {
        int y1 = y0 + sy, x1 = x0 + sx;
        return sums[(size_t)y1 * (w + 1) + x1] - sums[(size_t)y0 * (w + 1) + x1] -
               sums[(size_t)y1 * (w + 1) + x0] + sums[(size_t)y0 * (w + 1) + x0];
    };
    std::optional<std::pair<int, int>> best;
    int best_margin = -1;
    for (int y = 0; y + size <= h; ++y)
        for (int x = 0; x + size <= w; ++x) {
            if (count(y, x, size, size) != size * size) continue;
            int margin = 0;
            for (int m = 1; m <= 8; ++m) {
                int y0 = y - m, x0 = x - m, sy = size + 2 * m, sx = size + 2 * m;
                if (y0 < 0 || x0 < 0 || y0 + sy > h || x0 + sx > w) break;
                if (count(y0, x0, sy, sx) != sy * sx) break;
                margin = m;
            }
            if (margin > best_margin) {
                best_margin = margin;
                best = {y, x};
            }
        }
    return best;
}

MetricValue pose_distance(const Skeleton& real, const Skeleton& gen, const Image& inpaint_mask,
                          double miss_penalty) {
    if (miss_penalty < 0)
        miss_penalty = std::sqrt((double)inpaint_mask.h * inpaint_mask.h +
                                 (double)inpaint_mask.w * inpaint_mask.w) / 4.0;
    double sum = 0;
    int used = 0;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Keypoint& r = real[(size_t)i];
        if (!r.present) continue;
        int rx = std::clamp((int)std::lround(r.x), 0, inpaint_mask.w - 1);
        int ry = std::clamp((int)std::lround(r.y), 0, inpaint_mask.h - 1);
        if (inpaint_mask.at(0, ry, rx) < 0.5f) continue;
        const Keypoint& g = gen[(size_t)i];
        if (!g.present) {
            sum += miss_penalty;
        } else {
            double d = std::sqrt((double)(r.x - g.x) * (r.x - g.x) + (double)(r.y - g.y) * (r.y - g.y));
            sum += std::min((double)r.confidence, (double)g.confidence) * d;
        }
        ++used;
    }
    MetricValue out;
    if (used == 0) {
        out.flag = "no keypoint inside the inpainting mask";
        return out;
    }
    out.defined = true;
    out.value = sum / used;
    return out;
}

MetricValue sketch_distance(const Image& input_sketch, const Image& generated,
                            const Image& garment_mask) {
    MetricValue out;
    size_t n = input_sketch.data.size();
    int active = 0;
    for (float v : input_sketch.data) active += v > 0.1f;
    if (active == 0) {
        out.flag = "input sketch has no activated pixels";
        return out;
    }
    double freq = (double)active / (double)n;

    // garment pixels pasted onto white, then the same edge operator
    Image pasted(3, generated.h, generated.w, 1.f);
    for (int y = 0; y < generated.h; ++y)
        for (int x = 0; x < generated.w; ++x)
            if (garment_mask.at(0, y, x) > 0.5f)
                for (int c = 0; c < 3; ++c) pasted.at(c, y, x) = generated.at(c, y, x);
    Image regen = extract_sketch(pasted, garment_mask);

    double mse = 0;
    for (size_t i = 0; i < n; ++i) {
        double d = (double)input_sketch.data[i] - regen.data[i];
        mse += d * d;
    }
    mse /= (double)n;
    out.defined = true;
    out.value = mse / std::max(freq, 1e-4);
    return out;
}

namespace {

std::vector<float> crop_descriptor(const Image& img, int y0, int x0, int size) {
    Image crop(3, size, size);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) crop.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return image_descriptor(crop);
}

}  // namespace

MetricValue texture_similarity(const Image& patch, const Image& generated,
                               const Image& garment_mask) {
    MetricValue out;
    int size = 16;
    auto win = largest_inset_window(garment_mask, size);
    if (!win) {
        size = 8;
        win = largest_inset_window(garment_mask, size);
        if (win) out.flag = "fallback 8x8 crop";
    }
    if (!win) {
        out.flag = "mask admits no interior window";
        return out;
    }
    auto [y, x] = *win;
    out.defined = true;
    out.value = cosine(image_descriptor(patch), crop_descriptor(generated, y, x, size));
    return out;
}

MetricValue caption_agreement(const std::string& caption, const Image& generated,
                              const Image& region_mask, const Skeleton& kps) {
    auto attrs = parse_caption(caption);
    if (!attrs) throw std::invalid_argument("caption does not parse against the grammar: " + caption);
    AttributeCheck chk = check_caption_attributes(generated, region_mask, kps, *attrs);
    MetricValue out;
    out.defined = true;
    out.value = chk.score();
    return out;
}

FeatureStats FeatureStats::from(const std::vector<std::vector<float>>& features) {
    if (features.size() < 2) throw std::invalid_argument("need >= 2 samples for covariance");
    int d = (int)features[0].size();
    FeatureStats st;
    st.dim = d;
    st.mu.assign((size_t)d, 0.0);
    for (auto& f : features)
        for (int i = 0; i < d; ++i) st.mu[(size_t)i] += f[(size_t)i];
    for (auto& m : st.mu) m /= (double)features.size();
    st.sigma.assign((size_t)d * d, 0.0);
    for (auto& f : features)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                st.sigma[(size_t)i * d + j] +=
                    ((double)f[(size_t)i] - st.mu[(size_t)i]) * ((double)f[(size_t)j] - st.mu[(size_t)j]);
    for (auto& s : st.sigma) s /= (double)(features.size() - 1);
    return st;
}

double frechet_feature_distance(const FeatureStats& a, const FeatureStats& b, bool* regularized) {
    if (a.dim != b.dim) throw std::invalid_argument("feature stats dim mismatch");
    int d = a.dim;
    if (regularized) *regularized = false;
    using Mat = Eigen::MatrixXd;
    Mat Sa = Eigen::Map<const Mat>(a.sigma.data(), d, d);
    Mat Sb = Eigen::Map<const Mat>(b.sigma.data(), d, d);

    auto trace_sqrt_product = [&](const Mat& A, const Mat& B, bool& ok) {
        Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (A + A.transpose()));
        ok = es.info() == Eigen::Success;
        if (!ok) return 0.0;
        Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        Mat Ah = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
        Mat M = Ah * 0.5 * (B + B.transpose()) * Ah;
        Eigen::SelfAdjointEigenSolver<Mat> es2(0.5 * (M + M.transpose()));
        ok = es2.info() == Eigen::Success && es2.eigenvalues().minCoeff() > -1e-6;
        if (!ok) return 0.0;
        return es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    };

    bool ok = false;
    double tsp = trace_sqrt_product(Sa, Sb, ok);
    if (!ok) {
        if (regularized) *regularized = true;
        Sa += 1e-6 * Mat::Identity(d, d);
        Sb += 1e-6 * Mat::Identity(d, d);
        tsp = trace_sqrt_product(Sa, Sb, ok);
        if (!ok) throw std::runtime_error("matrix square root failed after regularization");
    }
    double mean_term = 0;
    for (int i = 0; i < d; ++i) {
        double dm = a.mu[(size_t)i] - b.mu[(size_t)i];
        mean_term += dm * dm;
    }
    return mean_term + Sa.trace() + Sb.trace() - 2.0 * tsp;
}

double kernel_mmd(const std::vector<std::vector<float>>& a,
                  const std::vector<std::vector<float>>& b) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("need >= 2 samples per side");
    size_t d = a[0].size();
    auto k = [&](const std::vector<float>& x, const std::vector<float>& y) {
        double dot = 0;
        for (size_t i = 0; i < d; ++i) dot += (double)x[i] * y[i];
        double v = dot / (double)d + 1.0;
        return v * v * v;
    };
    double kaa = 0, kbb = 0, kab = 0;
    size_t m = a.size(), n = b.size();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < m; ++j)
            if (i != j) kaa += k(a[i], a[j]);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            if (i != j) kbb += k(b[i], b[j]);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) kab += k(a[i], b[j]);
    return kaa / ((double)m * (m - 1)) + kbb / ((double)n * (n - 1)) - 2.0 * kab / ((double)m * n);
}

}  // namespace stitch
