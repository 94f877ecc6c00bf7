#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stitch/dataset.hpp"
#include "stitch/image.hpp"

namespace stitch {

// 32-dim handcrafted descriptor: 3x8-bin color histogram and an 8-bin
// gradient-orientation histogram, L2-normalized. Frozen by construction so
// metric values reproduce bit-for-bit.
std::vector<float> image_descriptor(const Image& img);

double cosine(const std::vector<float>& a, const std::vector<float>& b);

// Largest-margin window of the given size fully inside the mask, scan-order
// deterministic.
std::optional<std::pair<int, int>> largest_inset_window(const Image& mask, int size);

struct MetricValue {
    double value = 0;
    bool defined = false;
    std::string flag;  // reason when undefined or degraded
};

// Mean over keypoints whose real location lies inside the inpainting mask of
// min(conf_real, conf_gen) * l2(real, gen); a keypoint missing on either side
// contributes the penalty distance (canvas diagonal / 4 by default).
MetricValue pose_distance(const Skeleton& real, const Skeleton& gen, const Image& inpaint_mask,
                          double miss_penalty = -1);

// MSE between the input sketch and the sketch re-extracted from the generated
// garment pasted on white, weighted by the inverse frequency of activated
// (>0.1) pixels of the input sketch. No sketch thresholding.
MetricValue sketch_distance(const Image& input_sketch, const Image& generated,
                            const Image& garment_mask);

// Cosine between descriptors of the input texture patch and a 16x16 crop at
// the largest inscribed mask window (8x8 fallback, flagged).
MetricValue texture_similarity(const Image& patch, const Image& generated,
                               const Image& garment_mask);

// Fraction of caption attributes satisfied by the garment pixels inside the
// region mask. Unparseable captions are rejected.
MetricValue caption_agreement(const std::string& caption, const Image& generated,
                              const Image& region_mask, const Skeleton& kps);

struct FeatureStats {
    std::vector<double> mu;
    std::vector<double> sigma;  // row-major d x d
    int dim = 0;

    static FeatureStats from(const std::vector<std::vector<float>>& features);
};

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); covariances are
// regularized by +1e-6 I (flagged) if the square root fails.
double frechet_feature_distance(const FeatureStats& a, const FeatureStats& b,
                                bool* regularized = nullptr);

// Unbiased MMD^2 with the cubic polynomial kernel (x.y/d + 1)^3.
double kernel_mmd(const std::vector<std::vector<float>>& a,
                  const std::vector<std::vector<float>>& b);

}  // namespace stitch
