#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace stitch {

struct Rgb {
    float r = 0, g = 0, b = 0;
    float dist(const Rgb& o) const;
    Rgb scaled(float k) const;
};

enum class PatternFamily { kPlain = 0, kStriped, kCheckered, kDotted, kSpeckled };
enum class GarmentFamily { kTop = 0, kTrousers, kDress };
enum class ChunkCategory { kUpper = 0, kLower, kDresses };

struct ColorSpec {
    const char* name;
    Rgb anchor;
};

// Caption grammar: "[modifier] <color> <pattern> <garment>". The generator,
// the tokenizer vocabulary and the caption checker all share these tables.
namespace grammar {

const std::vector<ColorSpec>& colors();           // 8 named colors
const std::vector<std::string>& patterns();       // indexed by PatternFamily
const std::vector<std::string>& garments();       // indexed by GarmentFamily
const std::vector<std::string>& modifiers_for(GarmentFamily g);

// words usable in noun chunks / prompt templates beyond the render grammar
const std::vector<std::string>& extra_words();

// full vocabulary in canonical order (specials first)
std::vector<std::string> vocabulary_words();

int color_index(const std::string& name);   // -1 if unknown
int pattern_index(const std::string& name);
int garment_index(const std::string& name);

ChunkCategory category_of(GarmentFamily g);

}  // namespace grammar

struct CaptionAttrs {
    int color = 0;
    int pattern = 0;
    int garment = 0;
    int modifier = -1;  // index into modifiers_for(garment), -1 = absent

    std::string text() const;
    int attribute_count() const { return modifier >= 0 ? 4 : 3; }
};

std::optional<CaptionAttrs> parse_caption(const std::string& caption);

// Reserved render palette. Marker colors are mutually well separated and far
// from every color a scene can otherwise contain, so a nearest-color detector
// can recover keypoints unambiguously.
namespace palette {

Rgb skin();
const std::vector<Rgb>& backgrounds();
const std::array<Rgb, 18>& markers();

constexpr float kMarkerTolerance = 0.12f;   // detector match radius
constexpr float kSecondaryShade = 0.45f;    // dark shade used by two-tone patterns
// speckled blocks scale the primary by kSpeckleBase +- kSpeckleAmplitude,
// a band that neither clamps bright anchors nor reaches the dark shade
constexpr float kSpeckleBase = 0.98f;
constexpr float kSpeckleAmplitude = 0.18f;

}  // namespace palette

}  // namespace stitch
