#include "stitch/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace stitch {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// procedural texture
// ---------------------------------------------------------------------------

Rgb TextureSpec::at(int x, int y) const {
    Rgb secondary = primary.scaled(palette::kSecondaryShade);
    switch (family) {
        case PatternFamily::kPlain:
            return primary;
        case PatternFamily::kStriped: {
            int c = vertical ? x + phase_x : y + phase_y;
            return ((c / stripe_width) & 1) ? secondary : primary;
        }
        case PatternFamily::kCheckered: {
            int cx = (x + phase_x) / stripe_width;
            int cy = (y + phase_y) / stripe_width;
            return ((cx ^ cy) & 1) ? secondary : primary;
        }
        case PatternFamily::kDotted: {
            int dx = (x + phase_x) % dot_spacing;
            int dy = (y + phase_y) % dot_spacing;
            float cx = dot_spacing / 2.f, cy = dot_spacing / 2.f;
            float d2 = (dx - cx) * (dx - cx) + (dy - cy) * (dy - cy);
            return d2 <= dot_radius * dot_radius ? secondary : primary;
        }
        case PatternFamily::kSpeckled: {
            // block-aligned luminance jitter; 4x4 blocks line up with the
            // latent grid so the codec can represent them
            uint64_t s = speckle_seed ^ (0x9e3779b97f4a7c15ULL * (uint64_t)(x / 4)) ^
                         (0xbf58476d1ce4e5b9ULL * (uint64_t)(y / 4));
            uint64_t h = Rng::splitmix64(s);
            double u = 2.0 * ((double)(h >> 11) * 0x1.0p-53) - 1.0;
            return primary.scaled(palette::kSpeckleBase + palette::kSpeckleAmplitude * (float)u);
        }
    }
    return primary;
}

// ---------------------------------------------------------------------------
// scene sampling
// ---------------------------------------------------------------------------

namespace {

float deg(double d) { return (float)(d * 3.14159265358979323846 / 180.0); }

struct Vec2 {
    float x, y;
};

Keypoint kp(float x, float y) { return Keypoint{x, y, 1.f, true}; }

bool in_canvas(const Skeleton& kps, const GeneratorConfig& cfg) {
    for (auto& k : kps)
        if (k.x < 4.5f || k.x > cfg.w - 5.5f || k.y < 4.5f || k.y > cfg.h - 5.5f) return false;
    return true;
}

Skeleton sample_skeleton(Rng& rng, const GeneratorConfig& cfg, float& hip_x, float& hip_y,
                         float& shoulder_y, float& hip_half, float& shoulder_half) {
    for (int attempt = 0; attempt < 200; ++attempt) {
        hip_x = cfg.w / 2.f + (float)rng.uniform(-3, 3);
        hip_y = 54.f + (float)rng.uniform(-2.5, 2.5);
        shoulder_y = hip_y - 26.f + (float)rng.uniform(-2, 2);
        float lean = (float)rng.uniform(-2, 2);
        float neck_x = hip_x + lean;
        shoulder_half = (float)rng.uniform(7.5, 9.0);
        hip_half = (float)rng.uniform(6.8, 8.0);

        Skeleton k;
        Vec2 head{neck_x, shoulder_y - 2.f - 7.5f};
        k[kNose] = kp(head.x, head.y + 2.0f);
        k[kLeftEye] = kp(head.x + 2.2f, head.y - 2.0f);
        k[kRightEye] = kp(head.x - 2.2f, head.y - 2.0f);
        k[kLeftEar] = kp(head.x + 4.8f, head.y + 0.6f);
        k[kRightEar] = kp(head.x - 4.8f, head.y + 0.6f);
        k[kNeck] = kp(neck_x, shoulder_y - 2.f);

        for (int side = 0; side < 2; ++side) {
            float sgn = side == 0 ? 1.f : -1.f;  // left = +x
            Vec2 sho{neck_x + sgn * shoulder_half, shoulder_y};
            float a1 = deg(rng.uniform(14, 30));
            float upper = (float)rng.uniform(11, 13);
            Vec2 elb{sho.x + sgn * upper * std::sin(a1), sho.y + upper * std::cos(a1)};
            float a2 = a1 + deg(rng.uniform(-8, 15));
            float fore = (float)rng.uniform(10, 12);
            Vec2 wri{elb.x + sgn * fore * std::sin(a2), elb.y + fore * std::cos(a2)};
            k[side == 0 ? kLeftShoulder : kRightShoulder] = kp(sho.x, sho.y);
            k[side == 0 ? kLeftElbow : kRightElbow] = kp(elb.x, elb.y);
            k[side == 0 ? kLeftWrist : kRightWrist] = kp(wri.x, wri.y);

            Vec2 hip{hip_x + sgn * hip_half, hip_y};
            float s1 = deg(rng.uniform(2, 9));
            float thigh = (float)rng.uniform(15, 17);
            Vec2 knee{hip.x + sgn * thigh * std::sin(s1), hip.y + thigh * std::cos(s1)};
            float s2 = deg(rng.uniform(-4, 5));
            float shin = (float)rng.uniform(13, 15);
            Vec2 ank{knee.x + sgn * shin * std::sin(s2), knee.y + shin * std::cos(s2)};
            k[side == 0 ? kLeftHip : kRightHip] = kp(hip.x, hip.y);
            k[side == 0 ? kLeftKnee : kRightKnee] = kp(knee.x, knee.y);
            k[side == 0 ? kLeftAnkle : kRightAnkle] = kp(ank.x, ank.y);
        }
        if (in_canvas(k, cfg)) return k;
    }
    throw std::runtime_error("could not sample an in-canvas skeleton");
}

}  // namespace

SceneSpec generate_scene(Rng& rng, const GeneratorConfig& cfg) {
    SceneSpec s;
    s.keypoints = sample_skeleton(rng, cfg, s.hip_x, s.hip_y, s.shoulder_y, s.hip_half,
                                  s.shoulder_half);
    s.background = (int)rng.uniform_int(palette::backgrounds().size());
    s.garment = (GarmentFamily)rng.uniform_int(3);

    auto& mods = grammar::modifiers_for(s.garment);
    s.modifier = rng.bernoulli(0.7) ? (int)rng.uniform_int(mods.size()) : -1;

    TextureSpec& t = s.texture;
    t.family = (PatternFamily)rng.uniform_int(5);
    t.color = (int)rng.uniform_int(grammar::colors().size());
    Rgb anchor = grammar::colors()[(size_t)t.color].anchor;
    t.primary = Rgb{std::clamp(anchor.r + (float)rng.uniform(-0.06, 0.06), 0.02f, 0.98f),
                    std::clamp(anchor.g + (float)rng.uniform(-0.06, 0.06), 0.02f, 0.98f),
                    std::clamp(anchor.b + (float)rng.uniform(-0.06, 0.06), 0.02f, 0.98f)};
    const int stripe_widths[3] = {4, 5, 6};
    t.stripe_width = stripe_widths[rng.uniform_int(3)];
    t.vertical = rng.bernoulli(0.5);
    const int spacings[3] = {9, 11, 13};
    t.dot_spacing = spacings[rng.uniform_int(3)];
    // dot fill ratio pinned well inside the dotted classification band
    t.dot_radius = t.dot_spacing * (float)rng.uniform(0.20, 0.26);
    t.phase_x = (int)rng.uniform_int(16);
    t.phase_y = (int)rng.uniform_int(16);
    t.speckle_seed = rng.next_u64();

    s.caption = CaptionAttrs{t.color, (int)t.family, (int)s.garment, s.modifier};
    return s;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

void put(Image& img, int x, int y, const Rgb& c) {
    img.at(0, y, x) = c.r;
    img.at(1, y, x) = c.g;
    img.at(2, y, x) = c.b;
}

template <typename Fn>
void for_circle(const Image& img, float cx, float cy, float r, Fn&& fn) {
    int x0 = std::max(0, (int)std::floor(cx - r)), x1 = std::min(img.w - 1, (int)std::ceil(cx + r));
    int y0 = std::max(0, (int)std::floor(cy - r)), y1 = std::min(img.h - 1, (int)std::ceil(cy + r));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) fn(x, y);
}

template <typename Fn>
void for_capsule(const Image& img, Vec2 a, Vec2 b, float hw, Fn&& fn) {
    float x0f = std::min(a.x, b.x) - hw, x1f = std::max(a.x, b.x) + hw;
    float y0f = std::min(a.y, b.y) - hw, y1f = std::max(a.y, b.y) + hw;
    int x0 = std::max(0, (int)std::floor(x0f)), x1 = std::min(img.w - 1, (int)std::ceil(x1f));
    int y0 = std::max(0, (int)std::floor(y0f)), y1 = std::min(img.h - 1, (int)std::ceil(y1f));
    float vx = b.x - a.x, vy = b.y - a.y;
    float len2 = vx * vx + vy * vy;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            float t = len2 > 0 ? ((x - a.x) * vx + (y - a.y) * vy) / len2 : 0.f;
            t = std::clamp(t, 0.f, 1.f);
            float dx = x - (a.x + t * vx), dy = y - (a.y + t * vy);
            if (dx * dx + dy * dy <= hw * hw) fn(x, y);
        }
}

template <typename Fn>
void for_convex(const Image& img, const std::vector<Vec2>& poly, Fn&& fn) {
    float x0f = 1e9f, x1f = -1e9f, y0f = 1e9f, y1f = -1e9f;
    for (auto& p : poly) {
        x0f = std::min(x0f, p.x);
        x1f = std::max(x1f, p.x);
        y0f = std::min(y0f, p.y);
        y1f = std::max(y1f, p.y);
    }
    int x0 = std::max(0, (int)std::floor(x0f)), x1 = std::min(img.w - 1, (int)std::ceil(x1f));
    int y0 = std::max(0, (int)std::floor(y0f)), y1 = std::min(img.h - 1, (int)std::ceil(y1f));
    auto inside = [&](float px, float py) {
        int sign = 0;
        for (size_t i = 0; i < poly.size(); ++i) {
            const Vec2& a = poly[i];
            const Vec2& b = poly[(i + 1) % poly.size()];
            float cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
            int s = cross > 0 ? 1 : (cross < 0 ? -1 : 0);
            if (s != 0) {
                if (sign == 0)
                    sign = s;
                else if (sign != s)
                    return false;
            }
        }
        return true;
    };
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (inside((float)x, (float)y)) fn(x, y);
}

Vec2 v(const Keypoint& k) { return Vec2{k.x, k.y}; }
Vec2 mid(Vec2 a, Vec2 b) { return Vec2{(a.x + b.x) / 2, (a.y + b.y) / 2}; }

}  // namespace

Sample render_scene(const SceneSpec& spec, const GeneratorConfig& cfg) {
    Sample s;
    s.keypoints = spec.keypoints;
    s.caption = spec.caption.text();
    s.image = Image(3, cfg.h, cfg.w);
    s.garment_mask = Image(1, cfg.h, cfg.w, 0.f);

    Image& img = s.image;
    const Skeleton& k = spec.keypoints;
    Rgb bg = palette::backgrounds()[(size_t)spec.background];
    Rgb skin = palette::skin();
    for (int y = 0; y < cfg.h; ++y)
        for (int x = 0; x < cfg.w; ++x) put(img, x, y, bg);

    auto paint_skin = [&](int x, int y) { put(img, x, y, skin); };
    // legs
    for (int side : {0, 1}) {
        for_capsule(img, v(k[kLeftHip + side]), v(k[kLeftKnee + side]), 2.2f, paint_skin);
        for_capsule(img, v(k[kLeftKnee + side]), v(k[kLeftAnkle + side]), 2.0f, paint_skin);
    }
    // torso
    for_convex(img,
               {Vec2{k[kRightShoulder].x, spec.shoulder_y - 1}, Vec2{k[kLeftShoulder].x, spec.shoulder_y - 1},
                Vec2{spec.hip_x + spec.hip_half + 1, spec.hip_y + 1},
                Vec2{spec.hip_x - spec.hip_half - 1, spec.hip_y + 1}},
               paint_skin);
    // arms
    for (int side : {0, 1}) {
        for_capsule(img, v(k[kLeftShoulder + side]), v(k[kLeftElbow + side]), 1.8f, paint_skin);
        for_capsule(img, v(k[kLeftElbow + side]), v(k[kLeftWrist + side]), 1.6f, paint_skin);
    }
    // neck and head
    for_capsule(img, v(k[kNeck]), Vec2{k[kNeck].x, k[kNeck].y - 4}, 1.8f, paint_skin);
    for_circle(img, k[kNose].x, k[kNose].y - 1.0f, 5.0f, paint_skin);

    // garment with its procedural texture
    auto paint_garment = [&](int x, int y) {
        put(img, x, y, spec.texture.at(x, y));
        s.garment_mask.at(0, y, x) = 1.f;
    };
    float sho_y = spec.shoulder_y;
    float lsx = k[kLeftShoulder].x, rsx = k[kRightShoulder].x;
    switch (spec.garment) {
        case GarmentFamily::kTop: {
            for_convex(img,
                       {Vec2{rsx - 1.5f, sho_y - 1.5f}, Vec2{lsx + 1.5f, sho_y - 1.5f},
                        Vec2{spec.hip_x + spec.hip_half + 2.3f, spec.hip_y + 2.5f},
                        Vec2{spec.hip_x - spec.hip_half - 2.3f, spec.hip_y + 2.5f}},
                       paint_garment);
            auto& mods = grammar::modifiers_for(GarmentFamily::kTop);
            std::string m = spec.modifier >= 0 ? mods[(size_t)spec.modifier] : "short-sleeve";
            for (int side : {0, 1}) {
                Vec2 sho = v(k[kLeftShoulder + side]), elb = v(k[kLeftElbow + side]),
                     wri = v(k[kLeftWrist + side]);
                for_capsule(img, sho, mid(sho, elb), 3.0f, paint_garment);
                if (m == "long-sleeve") {
                    for_capsule(img, mid(sho, elb), elb, 3.0f, paint_garment);
                    for_capsule(img, elb, wri, 2.6f, paint_garment);
                }
            }
            break;
        }
        case GarmentFamily::kTrousers: {
            float hw = spec.hip_half + 1.6f;
            for_convex(img,
                       {Vec2{spec.hip_x - hw, spec.hip_y - 3}, Vec2{spec.hip_x + hw, spec.hip_y - 3},
                        Vec2{spec.hip_x + hw, spec.hip_y + 13.5f},
                        Vec2{spec.hip_x - hw, spec.hip_y + 13.5f}},
                       paint_garment);
            auto& mods = grammar::modifiers_for(GarmentFamily::kTrousers);
            bool cropped = spec.modifier >= 0 && mods[(size_t)spec.modifier] == "cropped";
            for (int side : {0, 1}) {
                Vec2 hip = v(k[kLeftHip + side]), knee = v(k[kLeftKnee + side]),
                     ank = v(k[kLeftAnkle + side]);
                for_capsule(img, hip, knee, 3.4f, paint_garment);
                if (!cropped) for_capsule(img, knee, ank, 3.1f, paint_garment);
            }
            break;
        }
        case GarmentFamily::kDress: {
            auto& mods = grammar::modifiers_for(GarmentFamily::kDress);
            bool short_dress = spec.modifier >= 0 && mods[(size_t)spec.modifier] == "short";
            float knee_line = (k[kLeftKnee].y + k[kRightKnee].y) / 2;
            float ankle_line = (k[kLeftAnkle].y + k[kRightAnkle].y) / 2;
            float hem_y = short_dress ? knee_line : ankle_line - 1;
            for_convex(img,
                       {Vec2{rsx - 1.5f, sho_y - 1.5f}, Vec2{lsx + 1.5f, sho_y - 1.5f},
                        Vec2{spec.hip_x + spec.hip_half + 7, hem_y},
                        Vec2{spec.hip_x - spec.hip_half - 7, hem_y}},
                       paint_garment);
            break;
        }
    }

    // keypoint markers on top, one reserved color each; face markers are
    // smaller so neighbouring disks never overlap
    for (int i = 0; i < kNumKeypoints; ++i) {
        float r = i <= kRightEar ? 1.6f : 2.2f;
        for_circle(img, k[(size_t)i].x, k[(size_t)i].y, r,
                   [&](int x, int y) { put(img, x, y, palette::markers()[(size_t)i]); });
    }

    s.inpaint_mask = bbox_mask(s.garment_mask);
    s.sketch = extract_sketch(s.image, s.garment_mask);
    return s;
}

Image bbox_mask(const Image& mask) {
    Image out(1, mask.h, mask.w, 0.f);
    int x0 = mask.w, x1 = -1, y0 = mask.h, y1 = -1;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(0, y, x) > 0.5f) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) out.at(0, y, x) = 1.f;
    return out;
}

// ---------------------------------------------------------------------------
// texture patch selection
// ---------------------------------------------------------------------------

namespace {

struct IntegralMask {
    int h, w;
    std::vector<int> sums;  // (h+1) x (w+1)

    explicit IntegralMask(const Image& mask) : h(mask.h), w(mask.w), sums((size_t)(h + 1) * (w + 1), 0) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                sums[(size_t)(y + 1) * (w + 1) + x + 1] = (mask.at(0, y, x) > 0.5f ? 1 : 0) +
                                                          sums[(size_t)y * (w + 1) + x + 1] +
                                                          sums[(size_t)(y + 1) * (w + 1) + x] -
                                                          sums[(size_t)y * (w + 1) + x];
    }
    int count(int y0, int x0, int size_y, int size_x) const {
        int y1 = y0 + size_y, x1 = x0 + size_x;
        return sums[(size_t)y1 * (w + 1) + x1] - sums[(size_t)y0 * (w + 1) + x1] -
               sums[(size_t)y1 * (w + 1) + x0] + sums[(size_t)y0 * (w + 1) + x0];
    }
};

Image marker_mask(const Skeleton& kps, int h, int w) {
    Image m(1, h, w, 0.f);
    for (auto& k : kps)
        for (int y = std::max(0, (int)(k.y - 3)); y <= std::min(h - 1, (int)(k.y + 3)); ++y)
            for (int x = std::max(0, (int)(k.x - 3)); x <= std::min(w - 1, (int)(k.x + 3)); ++x)
                if ((x - k.x) * (x - k.x) + (y - k.y) * (y - k.y) <= 2.8f * 2.8f)
                    m.at(0, y, x) = 1.f;
    return m;
}

// Best fully-inside window: fewest marker pixels, then deepest inside the
// mask, then scan order.
std::optional<std::pair<int, int>> best_window(const Image& mask, const Image& markers, int size) {
    IntegralMask im(mask), mm(markers);
    int best_markers = 1 << 30, best_depth = -1;
    std::optional<std::pair<int, int>> best;
    for (int y = 0; y + size <= mask.h; ++y)
        for (int x = 0; x + size <= mask.w; ++x) {
            if (im.count(y, x, size, size) != size * size) continue;
            int mk = mm.count(y, x, size, size);
            int y0 = std::max(0, y - 2), x0 = std::max(0, x - 2);
            int y1 = std::min(mask.h, y + size + 2), x1 = std::min(mask.w, x + size + 2);
            int depth = im.count(y0, x0, y1 - y0, x1 - x0) == (y1 - y0) * (x1 - x0) ? 1 : 0;
            if (mk < best_markers || (mk == best_markers && depth > best_depth)) {
                best_markers = mk;
                best_depth = depth;
                best = {y, x};
            }
        }
    return best;
}

}  // namespace

Sample generate_sample(uint64_t master_seed, uint64_t sample_index, const GeneratorConfig& cfg) {
    for (uint64_t attempt = 0; attempt < 50; ++attempt) {
        Rng rng = Rng(master_seed).fork(sample_index * 1000 + attempt);
        SceneSpec spec = generate_scene(rng, cfg);
        Sample s = render_scene(spec, cfg);

        int area = 0;
        for (float m : s.garment_mask.data) area += m > 0.5f;
        if (area < cfg.min_garment_area) continue;

        auto win = best_window(s.garment_mask, marker_mask(s.keypoints, cfg.h, cfg.w),
                               cfg.texture_patch);
        if (!win) continue;
        auto [wy, wx] = *win;
        s.texture = Image(3, cfg.texture_patch, cfg.texture_patch);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < cfg.texture_patch; ++y)
                for (int x = 0; x < cfg.texture_patch; ++x)
                    s.texture.at(c, y, x) = s.image.at(c, wy + y, wx + x);
        return s;
    }
    throw std::runtime_error("failed to generate a non-degenerate sample");
}

// ---------------------------------------------------------------------------
// pose map, sketch, detector
// ---------------------------------------------------------------------------

std::vector<float> rasterize_pose_map(const Skeleton& kps, int h, int w) {
    std::vector<float> p((size_t)kNumKeypoints * h * w, 0.f);
    const float sigma = 1.5f;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Keypoint& k = kps[(size_t)i];
        if (!k.present) continue;
        int y0 = std::max(0, (int)(k.y - 5 * sigma)), y1 = std::min(h - 1, (int)(k.y + 5 * sigma));
        int x0 = std::max(0, (int)(k.x - 5 * sigma)), x1 = std::min(w - 1, (int)(k.x + 5 * sigma));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                float d2 = (x - k.x) * (x - k.x) + (y - k.y) * (y - k.y);
                p[((size_t)i * h + y) * w + x] = std::exp(-d2 / (2 * sigma * sigma));
            }
    }
    return p;
}

Image extract_sketch(const Image& image, const Image& garment_mask) {
    int h = image.h, w = image.w;
    std::vector<float> lum((size_t)h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            lum[(size_t)y * w + x] =
                0.299f * image.at(0, y, x) + 0.587f * image.at(1, y, x) + 0.114f * image.at(2, y, x);

    // mask dilated by one pixel so the outline itself is included
    Image dil(1, h, w, 0.f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool on = false;
            for (int dy = -1; dy <= 1 && !on; ++dy)
                for (int dx = -1; dx <= 1 && !on; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w && garment_mask.at(0, yy, xx) > 0.5f)
                        on = true;
                }
            dil.at(0, y, x) = on ? 1.f : 0.f;
        }

    Image sketch(1, h, w, 0.f);
    float maxmag = 0.f;
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return lum[(size_t)y * w + x];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (dil.at(0, y, x) < 0.5f) continue;
            float gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                       (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
            float gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                       (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
            float mag = std::sqrt(gx * gx + gy * gy);
            sketch.at(0, y, x) = mag;
            maxmag = std::max(maxmag, mag);
        }
    if (maxmag > 0)
        for (auto& vpx : sketch.data) vpx /= maxmag;
    return sketch;
}

Skeleton detect_keypoints(const Image& image) {
    Skeleton out;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Rgb& target = palette::markers()[(size_t)i];
        double sx = 0, sy = 0;
        int count = 0;
        for (int y = 0; y < image.h; ++y)
            for (int x = 0; x < image.w; ++x) {
                Rgb c{image.at(0, y, x), image.at(1, y, x), image.at(2, y, x)};
                if (c.dist(target) < palette::kMarkerTolerance) {
                    sx += x;
                    sy += y;
                    ++count;
                }
            }
        Keypoint k;
        if (count >= 3) {
            k.x = (float)(sx / count);
            k.y = (float)(sy / count);
            k.present = true;
            k.confidence = std::min(1.f, count / 12.f);
        } else {
            k.present = false;
            k.confidence = 0.f;
        }
        out[(size_t)i] = k;
    }
    return out;
}

// ---------------------------------------------------------------------------
// attribute checking
// ---------------------------------------------------------------------------

namespace {

enum class PixKind { kOther, kBackground, kSkin, kMarker, kGarment };

struct PixClass {
    PixKind kind = PixKind::kOther;
    int anchor = -1;      // grammar color index when kind == kGarment
    bool secondary = false;
};

PixClass classify_pixel(const Rgb& c) {
    PixClass out;
    for (auto& m : palette::markers())
        if (c.dist(m) < 0.14f) {
            out.kind = PixKind::kMarker;
            return out;
        }
    if (c.dist(palette::skin()) < 0.17f) {
        out.kind = PixKind::kSkin;
        return out;
    }
    for (auto& b : palette::backgrounds())
        if (c.dist(b) < 0.13f) {
            out.kind = PixKind::kBackground;
            return out;
        }
    float best = 1e9f;
    auto& colors = grammar::colors();
    for (size_t i = 0; i < colors.size(); ++i) {
        float dp = c.dist(colors[i].anchor);
        float ds = c.dist(colors[i].anchor.scaled(palette::kSecondaryShade));
        if (dp < best) {
            best = dp;
            out.anchor = (int)i;
            out.secondary = false;
        }
        if (ds < best) {
            best = ds;
            out.anchor = (int)i;
            out.secondary = true;
        }
    }
    if (best < 0.33f)
        out.kind = PixKind::kGarment;
    else
        out.anchor = -1;
    return out;
}

struct RegionStats {
    std::vector<PixClass> classes;  // parallel to region pixels
    std::vector<std::pair<int, int>> coords;
    int garment_count = 0;
    int mode_anchor = -1;
    int mode_primary = 0, mode_secondary = 0;
};

RegionStats analyze_region(const Image& image, const Image& region_mask) {
    RegionStats st;
    std::array<int, 16> votes{};
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            if (region_mask.at(0, y, x) < 0.5f) continue;
            Rgb c{image.at(0, y, x), image.at(1, y, x), image.at(2, y, x)};
            PixClass pc = classify_pixel(c);
            st.classes.push_back(pc);
            st.coords.push_back({x, y});
            if (pc.kind == PixKind::kGarment) {
                ++st.garment_count;
                ++votes[(size_t)pc.anchor];
            }
        }
    int best = 0;
    for (size_t i = 0; i < grammar::colors().size(); ++i)
        if (votes[i] > best) {
            best = votes[i];
            st.mode_anchor = (int)i;
        }
    for (size_t i = 0; i < st.classes.size(); ++i)
        if (st.classes[i].kind == PixKind::kGarment && st.classes[i].anchor == st.mode_anchor) {
            if (st.classes[i].secondary)
                ++st.mode_secondary;
            else
                ++st.mode_primary;
        }
    return st;
}

float luminance(const Image& img, int x, int y) {
    return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

}  // namespace

PatternFamily classify_pattern(const Image& image, const Image& region_mask) {
    RegionStats st = analyze_region(image, region_mask);
    if (st.garment_count < 32) return PatternFamily::kPlain;
    double sec_frac =
        (double)st.mode_secondary / std::max(1, st.mode_primary + st.mode_secondary);

    // analysis window: largest square of garment-looking pixels (markers on
    // top of the garment count as part of it)
    Image garment_px(1, image.h, image.w, 0.f);
    for (size_t i = 0; i < st.classes.size(); ++i)
        if (st.classes[i].kind == PixKind::kGarment || st.classes[i].kind == PixKind::kMarker)
            garment_px.at(0, st.coords[i].second, st.coords[i].first) = 1.f;
    Image no_markers(1, image.h, image.w, 0.f);
    std::optional<std::pair<int, int>> win;
    int size = 0;
    for (int trial : {16, 12, 8}) {
        win = best_window(garment_px, no_markers, trial);
        if (win) {
            size = trial;
            break;
        }
    }
    if (!win) return sec_frac > 0.32 ? PatternFamily::kCheckered : PatternFamily::kPlain;
    auto [wy, wx] = *win;

    // binary secondary map with marker pixels treated as primary
    std::vector<float> colmean((size_t)size, 0.f), rowmean((size_t)size, 0.f);
    std::vector<float> lums;
    int mode = st.mode_anchor;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            Rgb c{image.at(0, wy + y, wx + x), image.at(1, wy + y, wx + x),
                  image.at(2, wy + y, wx + x)};
            PixClass pc = classify_pixel(c);
            float s = pc.kind == PixKind::kGarment && pc.anchor == mode && pc.secondary ? 1.f : 0.f;
            colmean[(size_t)x] += s;
            rowmean[(size_t)y] += s;
            if (pc.kind != PixKind::kMarker) lums.push_back(luminance(image, wx + x, wy + y));
        }
    auto profile_std = [&](std::vector<float>& p) {
        double mean = 0;
        for (float vv : p) mean += vv / size;
        mean /= p.size();
        double var = 0;
        for (float vv : p) {
            double d = vv / size - mean;
            var += d * d;
        }
        return std::sqrt(var / p.size());
    };
    double std_x = profile_std(colmean), std_y = profile_std(rowmean);

    if (sec_frac > 0.32) return std::max(std_x, std_y) > 0.18 ? PatternFamily::kStriped
                                                              : PatternFamily::kCheckered;
    if (sec_frac > 0.05) return PatternFamily::kDotted;

    // plain vs speckled: 4x4 block-mean luminance spread, relative to level
    std::array<double, 64> bsum{};
    std::array<int, 64> bcnt{};
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int b = ((wy + y) / 4 % 8) * 8 + ((wx + x) / 4 % 8);
            Rgb c{image.at(0, wy + y, wx + x), image.at(1, wy + y, wx + x),
                  image.at(2, wy + y, wx + x)};
            if (classify_pixel(c).kind == PixKind::kMarker) continue;
            bsum[(size_t)b] += 0.299 * c.r + 0.587 * c.g + 0.114 * c.b;
            bcnt[(size_t)b]++;
        }
    std::vector<double> blocks;
    for (int b = 0; b < 64; ++b)
        if (bcnt[(size_t)b] >= 8) blocks.push_back(bsum[(size_t)b] / bcnt[(size_t)b]);
    if (blocks.size() < 4) return PatternFamily::kPlain;
    double mean = 0, bmin = 1e9, bmax = -1e9;
    for (double b : blocks) {
        mean += b;
        bmin = std::min(bmin, b);
        bmax = std::max(bmax, b);
    }
    mean /= (double)blocks.size();
    return (bmax - bmin) / std::max(0.05, mean) > 0.16 ? PatternFamily::kSpeckled
                                                       : PatternFamily::kPlain;
}

AttributeCheck check_caption_attributes(const Image& image, const Image& region_mask,
                                        const Skeleton& kps, const CaptionAttrs& caption) {
    AttributeCheck out;
    out.total = caption.attribute_count();
    RegionStats st = analyze_region(image, region_mask);

    // color dominance: >= 60% of garment pixels vote for the caption color
    if (st.garment_count >= 32) {
        int match = 0;
        for (auto& pc : st.classes)
            if (pc.kind == PixKind::kGarment && pc.anchor == caption.color) ++match;
        out.color = match >= (int)(0.6 * st.garment_count);
    }

    out.pattern = classify_pattern(image, region_mask) == (PatternFamily)caption.pattern;

    // category: vertical mass distribution of garment pixels vs body landmarks
    float hip_line = (kps[kLeftHip].y + kps[kRightHip].y) / 2;
    float knee_line = (kps[kLeftKnee].y + kps[kRightKnee].y) / 2;
    int above = 0, below = 0, low = 0;
    for (size_t i = 0; i < st.classes.size(); ++i) {
        if (st.classes[i].kind != PixKind::kGarment) continue;
        float y = (float)st.coords[i].second;
        if (y < hip_line - 2) ++above;
        if (y > hip_line + 2) ++below;
        if (y > knee_line + 3) ++low;
    }
    int total = std::max(1, st.garment_count);
    double fa = (double)above / total, fb = (double)below / total, fl = (double)low / total;
    switch ((GarmentFamily)caption.garment) {
        case GarmentFamily::kTop: out.category = fa >= 0.60 && fl <= 0.08; break;
        case GarmentFamily::kTrousers: out.category = fa <= 0.25 && fb >= 0.65; break;
        case GarmentFamily::kDress: out.category = fa >= 0.22 && fb >= 0.28; break;
    }

    if (caption.modifier >= 0) {
        auto near_count = [&](float cx, float cy, float r) {
            int n = 0;
            for (size_t i = 0; i < st.classes.size(); ++i) {
                if (st.classes[i].kind != PixKind::kGarment) continue;
                float dx = st.coords[i].first - cx, dy = st.coords[i].second - cy;
                if (dx * dx + dy * dy <= r * r) ++n;
            }
            return n;
        };
        const std::string& m =
            grammar::modifiers_for((GarmentFamily)caption.garment)[(size_t)caption.modifier];
        if (caption.garment == (int)GarmentFamily::kTop) {
            // forearm midpoint coverage separates the two sleeve lengths
            int fore = 0;
            for (int side : {0, 1})
                fore += near_count((kps[kLeftElbow + side].x + kps[kLeftWrist + side].x) / 2,
                                   (kps[kLeftElbow + side].y + kps[kLeftWrist + side].y) / 2, 2.0f);
            out.modifier = m == "long-sleeve" ? fore >= 5 : fore <= 1;
        } else {
            int low = 0;
            for (size_t i = 0; i < st.classes.size(); ++i)
                if (st.classes[i].kind == PixKind::kGarment &&
                    st.coords[i].second > knee_line + 3)
                    ++low;
            bool long_variant = m == "long";
            out.modifier = long_variant ? low >= 25 : low <= 6;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// manifest and dataset IO
// ---------------------------------------------------------------------------

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (auto& e : entries)
        if (e.split == name) out.push_back(&e);
    return out;
}

const ManifestEntry* DatasetManifest::find(const std::string& id) const {
    for (auto& e : entries)
        if (e.id == id) return &e;
    return nullptr;
}

void DatasetManifest::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    for (auto& e : entries) {
        json j = {{"id", e.id}, {"split", e.split}, {"donor", e.donor}};
        out << j.dump() << "\n";
    }
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    DatasetManifest m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        m.entries.push_back(ManifestEntry{j.at("id").get<std::string>(),
                                          j.at("split").get<std::string>(),
                                          j.value("donor", "")});
    }
    return m;
}

namespace {

// shuffled cycle: every element donates to the next, never to itself
void assign_cycle(DatasetManifest& m, std::vector<size_t> idx, Rng& rng) {
    if (idx.size() < 2) return;
    for (size_t i = idx.size() - 1; i > 0; --i)
        std::swap(idx[i], idx[(size_t)rng.uniform_int(i + 1)]);
    for (size_t i = 0; i < idx.size(); ++i)
        m.entries[idx[i]].donor = m.entries[idx[(i + 1) % idx.size()]].id;
}

}  // namespace

void make_unpaired_split(DatasetManifest& manifest, const std::vector<GarmentFamily>& families,
                         Rng& rng) {
    if (families.size() != manifest.entries.size())
        throw std::invalid_argument("families list must align with the manifest");
    for (const char* split : {"train", "val", "test"}) {
        std::vector<size_t> members;
        for (size_t i = 0; i < manifest.entries.size(); ++i)
            if (manifest.entries[i].split == split) members.push_back(i);
        if (members.size() < 2) continue;

        std::array<std::vector<size_t>, 3> by_family;
        for (size_t i : members) by_family[(size_t)families[i]].push_back(i);
        bool within_category = true;
        for (auto& g : by_family)
            if (g.size() == 1) within_category = false;
        if (within_category) {
            for (auto& g : by_family) assign_cycle(manifest, g, rng);
        } else {
            assign_cycle(manifest, members, rng);
        }
    }
}

void write_sample(const std::string& root, const Sample& sample) {
    fs::path dir = fs::path(root) / sample.id;
    fs::create_directories(dir);
    write_ppm((dir / "image.ppm").string(), sample.image);
    write_pgm((dir / "sketch.pgm").string(), sample.sketch);
    write_pgm((dir / "mask.pgm").string(), sample.garment_mask);
    write_ppm((dir / "texture.ppm").string(), sample.texture);
    std::ofstream cap(dir / "caption.txt");
    cap << sample.caption << "\n";
    json pose = json::array();
    for (auto& k : sample.keypoints) pose.push_back({k.x, k.y, k.confidence});
    std::ofstream pf(dir / "pose.json");
    pf << pose.dump() << "\n";
}

Sample read_sample(const std::string& root, const std::string& id) {
    fs::path dir = fs::path(root) / id;
    Sample s;
    s.id = id;
    s.image = read_ppm((dir / "image.ppm").string());
    s.sketch = read_pgm((dir / "sketch.pgm").string());
    s.garment_mask = read_pgm((dir / "mask.pgm").string());
    for (auto& vpx : s.garment_mask.data) vpx = vpx > 0.5f ? 1.f : 0.f;
    s.inpaint_mask = bbox_mask(s.garment_mask);
    s.texture = read_ppm((dir / "texture.ppm").string());
    std::ifstream cap(dir / "caption.txt");
    std::getline(cap, s.caption);
    std::ifstream pf(dir / "pose.json");
    json pose = json::parse(pf);
    for (int i = 0; i < kNumKeypoints; ++i) {
        s.keypoints[(size_t)i].x = pose.at((size_t)i).at(0).get<float>();
        s.keypoints[(size_t)i].y = pose.at((size_t)i).at(1).get<float>();
        s.keypoints[(size_t)i].confidence = pose.at((size_t)i).at(2).get<float>();
        s.keypoints[(size_t)i].present = true;
    }
    return s;
}

DatasetManifest generate_dataset(const std::string& root, int n, uint64_t seed, double train_frac,
                                 double val_frac, const GeneratorConfig& cfg) {
    fs::create_directories(root);
    DatasetManifest manifest;
    std::vector<GarmentFamily> families;
    int n_train = (int)(n * train_frac), n_val = (int)(n * val_frac);
    for (int i = 0; i < n; ++i) {
        Sample s = generate_sample(seed, (uint64_t)i, cfg);
        char buf[16];
        snprintf(buf, sizeof buf, "s%06d", i);
        s.id = buf;
        write_sample(root, s);
        auto attrs = parse_caption(s.caption);
        families.push_back((GarmentFamily)attrs->garment);
        std::string split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        manifest.entries.push_back(ManifestEntry{s.id, split, ""});
    }
    Rng rng(Rng::splitmix64(seed) ^ 0xdea1ULL);
    make_unpaired_split(manifest, families, rng);
    manifest.save((fs::path(root) / "manifest.jsonl").string());
    return manifest;
}

}  // namespace stitch
