#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "stitch/grammar.hpp"
#include "stitch/image.hpp"
#include "stitch/rng.hpp"

namespace stitch {

constexpr int kNumKeypoints = 18;

enum KeypointId {
    kNose = 0, kLeftEye, kRightEye, kLeftEar, kRightEar, kNeck,
    kLeftShoulder, kRightShoulder, kLeftElbow, kRightElbow, kLeftWrist, kRightWrist,
    kLeftHip, kRightHip, kLeftKnee, kRightKnee, kLeftAnkle, kRightAnkle,
};

struct Keypoint {
    float x = 0, y = 0;
    float confidence = 1.f;
    bool present = true;
};

using Skeleton = std::array<Keypoint, kNumKeypoints>;

struct TextureSpec {
    PatternFamily family = PatternFamily::kPlain;
    int color = 0;       // grammar color index
    Rgb primary;         // jittered anchor shade
    int stripe_width = 4;
    bool vertical = false;
    int dot_spacing = 10;
    float dot_radius = 2.5f;
    int phase_x = 0, phase_y = 0;
    uint64_t speckle_seed = 0;

    Rgb at(int x, int y) const;  // procedural fill color at canvas coords
};

struct SceneSpec {
    Skeleton keypoints;
    float hip_x = 32, hip_y = 54, shoulder_y = 28;
    float hip_half = 7, shoulder_half = 9;
    int background = 0;
    GarmentFamily garment = GarmentFamily::kTop;
    int modifier = -1;
    TextureSpec texture;
    CaptionAttrs caption;
};

struct Sample {
    std::string id;
    Image image;         // 3 x H x W
    Skeleton keypoints;  // ground truth, confidence 1
    Image garment_mask;  // M_C, 1 x H x W
    Image inpaint_mask;  // M = bbox(M_C), 1 x H x W
    Image sketch;        // S, 1 x H x W
    Image texture;       // X, 3 x 16 x 16, exact sub-window of image
    std::string caption;
};

struct GeneratorConfig {
    int h = 96, w = 64;
    int min_garment_area = 250;
    int texture_patch = 16;
};

// Scene sampling and deterministic rendering. generate_sample rerolls
// degenerate garments (area below threshold or no valid texture window).
SceneSpec generate_scene(Rng& rng, const GeneratorConfig& cfg);
Sample render_scene(const SceneSpec& spec, const GeneratorConfig& cfg);
Sample generate_sample(uint64_t master_seed, uint64_t sample_index, const GeneratorConfig& cfg);

// Pose map P: one channel per keypoint, Gaussian blob (sigma 1.5 px) with
// peak 1 at the keypoint, clipped at canvas borders.
std::vector<float> rasterize_pose_map(const Skeleton& kps, int h, int w);

// Gradient-magnitude sketch inside the garment mask, normalized to [0,1].
Image extract_sketch(const Image& image, const Image& garment_mask);

// Rule-based detector: finds the reserved marker color of each keypoint.
Skeleton detect_keypoints(const Image& image);

// bbox mask of a binary mask; empty input gives an all-zero mask
Image bbox_mask(const Image& mask);

// ---------------------------------------------------------------------------
// caption attribute checking (shared by the generator oracle and the
// Caption Agreement Score)
// ---------------------------------------------------------------------------

struct AttributeCheck {
    bool color = false;
    bool pattern = false;
    bool category = false;
    bool modifier = false;
    int total = 3;  // 4 when the caption carries a modifier

    int satisfied() const {
        return (color ? 1 : 0) + (pattern ? 1 : 0) + (category ? 1 : 0) +
               (total == 4 && modifier ? 1 : 0);
    }
    double score() const { return (double)satisfied() / total; }
};

// Checks the caption's attributes against the garment pixels inside
// region_mask, using ground-truth keypoints as body landmarks.
AttributeCheck check_caption_attributes(const Image& image, const Image& region_mask,
                                        const Skeleton& kps, const CaptionAttrs& caption);

// Pattern family read off the garment pixels (kPlain when nothing matches).
PatternFamily classify_pattern(const Image& image, const Image& region_mask);

// ---------------------------------------------------------------------------
// on-disk dataset
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    std::string split;  // train | val | test
    std::string donor;  // unpaired garment donor id ("" until assigned)
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> split(const std::string& name) const;
    const ManifestEntry* find(const std::string& id) const;

    void save(const std::string& path) const;  // jsonl
    static DatasetManifest load(const std::string& path);
};

// Assigns each sample (per split) a donor via a derangement, preferring
// within-category cycles when every category has at least two members.
void make_unpaired_split(DatasetManifest& manifest,
                         const std::vector<GarmentFamily>& families, Rng& rng);

void write_sample(const std::string& root, const Sample& sample);
Sample read_sample(const std::string& root, const std::string& id);

// Generates n samples, splits them train/val/test and writes everything
// including the manifest; returns the manifest.
DatasetManifest generate_dataset(const std::string& root, int n, uint64_t seed,
                                 double train_frac, double val_frac, const GeneratorConfig& cfg);

}  // namespace stitch
