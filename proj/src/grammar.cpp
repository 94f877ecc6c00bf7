#include "stitch/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace stitch {

float Rgb::dist(const Rgb& o) const {
    float dr = r - o.r, dg = g - o.g, db = b - o.b;
    return std::sqrt(dr * dr + dg * dg + db * db);
}

Rgb Rgb::scaled(float k) const {
    return Rgb{std::clamp(r * k, 0.f, 1.f), std::clamp(g * k, 0.f, 1.f), std::clamp(b * k, 0.f, 1.f)};
}

namespace grammar {

const std::vector<ColorSpec>& colors() {
    static const std::vector<ColorSpec> c = {
        {"red", {0.80f, 0.10f, 0.10f}},    {"green", {0.10f, 0.65f, 0.15f}},
        {"blue", {0.12f, 0.25f, 0.85f}},   {"yellow", {0.92f, 0.85f, 0.10f}},
        {"orange", {0.95f, 0.55f, 0.08f}}, {"purple", {0.55f, 0.15f, 0.75f}},
        {"pink", {0.95f, 0.55f, 0.75f}},   {"teal", {0.05f, 0.65f, 0.65f}},
    };
    return c;
}

const std::vector<std::string>& patterns() {
    static const std::vector<std::string> p = {"plain", "striped", "checkered", "dotted", "speckled"};
    return p;
}

const std::vector<std::string>& garments() {
    static const std::vector<std::string> g = {"top", "trousers", "dress"};
    return g;
}

const std::vector<std::string>& modifiers_for(GarmentFamily g) {
    static const std::vector<std::string> top = {"short-sleeve", "long-sleeve"};
    static const std::vector<std::string> trousers = {"cropped", "long"};
    static const std::vector<std::string> dress = {"short", "long"};
    switch (g) {
        case GarmentFamily::kTop: return top;
        case GarmentFamily::kTrousers: return trousers;
        case GarmentFamily::kDress: return dress;
    }
    throw std::logic_error("bad garment family");
}

const std::vector<std::string>& extra_words() {
    static const std::vector<std::string> w = {
        "a",      "photo", "of",    "garment", "shirt", "blouse", "tee",   "pants",
        "sleeveless",
        "jeans",  "skirt", "gown",  "cotton",  "silk",  "wool",   "denim", "fitted",
        "loose",  "light", "dark",
    };
    return w;
}

std::vector<std::string> vocabulary_words() {
    std::vector<std::string> words = {"<pad>", "<start>", "<end>", "<unk>"};
    for (auto& c : colors()) words.push_back(c.name);
    for (auto& p : patterns()) words.push_back(p);
    for (auto& g : garments()) words.push_back(g);
    for (int gi = 0; gi < 3; ++gi)
        for (auto& m : modifiers_for((GarmentFamily)gi))
            if (std::find(words.begin(), words.end(), m) == words.end()) words.push_back(m);
    for (auto& w : extra_words())
        if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    return words;
}

int color_index(const std::string& name) {
    auto& cs = colors();
    for (size_t i = 0; i < cs.size(); ++i)
        if (name == cs[i].name) return (int)i;
    return -1;
}

int pattern_index(const std::string& name) {
    auto& ps = patterns();
    for (size_t i = 0; i < ps.size(); ++i)
        if (name == ps[i]) return (int)i;
    return -1;
}

int garment_index(const std::string& name) {
    auto& gs = garments();
    for (size_t i = 0; i < gs.size(); ++i)
        if (name == gs[i]) return (int)i;
    return -1;
}

ChunkCategory category_of(GarmentFamily g) {
    switch (g) {
        case GarmentFamily::kTop: return ChunkCategory::kUpper;
        case GarmentFamily::kTrousers: return ChunkCategory::kLower;
        case GarmentFamily::kDress: return ChunkCategory::kDresses;
    }
    throw std::logic_error("bad garment family");
}

}  // namespace grammar

std::string CaptionAttrs::text() const {
    std::ostringstream os;
    if (modifier >= 0)
        os << grammar::modifiers_for((GarmentFamily)garment)[(size_t)modifier] << " ";
    os << grammar::colors()[(size_t)color].name << " " << grammar::patterns()[(size_t)pattern]
       << " " << grammar::garments()[(size_t)garment];
    return os.str();
}

std::optional<CaptionAttrs> parse_caption(const std::string& caption) {
    std::istringstream is(caption);
    std::vector<std::string> words;
    std::string w;
    while (is >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
        words.push_back(w);
    }
    if (words.size() != 3 && words.size() != 4) return std::nullopt;
    CaptionAttrs a;
    size_t base = words.size() - 3;
    a.color = grammar::color_index(words[base]);
    a.pattern = grammar::pattern_index(words[base + 1]);
    a.garment = grammar::garment_index(words[base + 2]);
    if (a.color < 0 || a.pattern < 0 || a.garment < 0) return std::nullopt;
    if (words.size() == 4) {
        auto& mods = grammar::modifiers_for((GarmentFamily)a.garment);
        auto it = std::find(mods.begin(), mods.end(), words[0]);
        if (it == mods.end()) return std::nullopt;
        a.modifier = (int)(it - mods.begin());
    }
    return a;
}

namespace palette {

Rgb skin() { return Rgb{0.87f, 0.72f, 0.60f}; }

const std::vector<Rgb>& backgrounds() {
    static const std::vector<Rgb> b = {
        {0.93f, 0.93f, 0.90f}, {0.88f, 0.90f, 0.93f}, {0.92f, 0.89f, 0.93f}};
    return b;
}

namespace {

// Colors a rendered scene can contain besides markers: garment anchors at the
// shades patterns use, skin and backgrounds.
std::vector<Rgb> protected_colors() {
    std::vector<Rgb> prot;
    for (auto& c : grammar::colors()) {
        prot.push_back(c.anchor);
        prot.push_back(c.anchor.scaled(kSecondaryShade));
        prot.push_back(c.anchor.scaled(kSpeckleBase - kSpeckleAmplitude));
        prot.push_back(c.anchor.scaled(kSpeckleBase));
        prot.push_back(c.anchor.scaled(kSpeckleBase + kSpeckleAmplitude));
    }
    prot.push_back(skin());
    for (auto& b : backgrounds()) prot.push_back(b);
    return prot;
}

std::array<Rgb, 18> build_markers() {
    const std::vector<Rgb> prot = protected_colors();
    std::vector<Rgb> candidates;
    const float grid[5] = {0.f, 0.25f, 0.5f, 0.75f, 1.f};
    for (float r : grid)
        for (float g : grid)
            for (float b : grid) {
                Rgb c{r, g, b};
                bool ok = true;
                for (auto& p : prot)
                    if (c.dist(p) < 0.30f) {
                        ok = false;
                        break;
                    }
                if (ok) candidates.push_back(c);
            }
    // greedy farthest-point selection for mutual separation
    std::array<Rgb, 18> out{};
    std::vector<Rgb> chosen;
    chosen.push_back(candidates.front());
    while (chosen.size() < 18) {
        float best = -1;
        size_t best_i = 0;
        for (size_t i = 0; i < candidates.size(); ++i) {
            float dmin = 1e9f;
            for (auto& c : chosen) dmin = std::min(dmin, candidates[i].dist(c));
            if (dmin > best) {
                best = dmin;
                best_i = i;
            }
        }
        chosen.push_back(candidates[best_i]);
    }
    std::copy(chosen.begin(), chosen.begin() + 18, out.begin());
    return out;
}

}  // namespace

const std::array<Rgb, 18>& markers() {
    static const std::array<Rgb, 18> m = build_markers();
    return m;
}

}  // namespace palette

}  // namespace stitch
