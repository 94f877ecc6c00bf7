#include "stitch/annotate.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "stitch/conditioning.hpp"
#include "stitch/dataset.hpp"
#include "stitch/metrics.hpp"
#include "stitch/rng.hpp"

namespace stitch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// suffix rules only; these words keep their surface form
const std::set<std::string>& protected_words() {
    static const std::set<std::string> p = {
        "striped", "checkered", "dotted", "speckled", "fitted", "pleated",
        "trousers", "jeans", "pants", "sleeveless",
    };
    return p;
}

bool has_special(const std::string& w) {
    for (char c : w)
        if (!(std::islower((unsigned char)c) || std::isdigit((unsigned char)c) || c == ' ' || c == '-'))
            return true;
    return false;
}

ChunkCategory category_for_chunk(const std::string& text) {
    static const std::set<std::string> upper = {"top", "shirt", "blouse", "tee"};
    static const std::set<std::string> lower = {"trousers", "pants", "jeans", "skirt"};
    static const std::set<std::string> dresses = {"dress", "gown"};
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
        if (upper.count(w)) return ChunkCategory::kUpper;
        if (lower.count(w)) return ChunkCategory::kLower;
        if (dresses.count(w)) return ChunkCategory::kDresses;
    }
    return ChunkCategory::kUpper;
}

}  // namespace

std::string lemmatize_word(const std::string& word) {
    if (protected_words().count(word)) return word;
    size_t n = word.size();
    auto ends = [&](const char* suf) {
        size_t m = strlen(suf);
        return n >= m && word.compare(n - m, m, suf) == 0;
    };
    // plural stripping
    if (ends("sses")) return word.substr(0, n - 2);
    if (ends("ies") && n > 4) return word.substr(0, n - 3) + "y";
    if (ends("ss")) return word;
    if (ends("s") && n > 3) return word.substr(0, n - 1);
    // -ed / -ing reduction
    if (ends("ing") && n > 5) return word.substr(0, n - 3);
    if (ends("ed") && n > 4) return word.substr(0, n - 2);
    return word;
}

std::vector<NounChunk> normalize_chunks(const std::vector<std::string>& raw, int* dropped) {
    std::vector<NounChunk> out;
    std::set<std::string> seen;
    int drop_count = 0;
    for (const std::string& phrase : raw) {
        std::string low;
        for (char c : phrase) low.push_back((char)std::tolower((unsigned char)c));
        // trim
        size_t b = low.find_first_not_of(" \t");
        size_t e = low.find_last_not_of(" \t");
        if (b == std::string::npos) {
            ++drop_count;
            continue;
        }
        low = low.substr(b, e - b + 1);
        if (has_special(low)) {
            ++drop_count;
            continue;
        }
        // strip a leading article
        for (const char* art : {"a ", "an ", "the "}) {
            size_t m = strlen(art);
            if (low.compare(0, m, art) == 0) {
                low = low.substr(m);
                break;
            }
        }
        // lemmatize word by word
        std::istringstream is(low);
        std::string w, rebuilt;
        while (is >> w) {
            if (!rebuilt.empty()) rebuilt.push_back(' ');
            rebuilt += lemmatize_word(w);
        }
        if (rebuilt.empty()) {
            ++drop_count;
            continue;
        }
        if (seen.insert(rebuilt).second)
            out.push_back(NounChunk{rebuilt, category_for_chunk(rebuilt)});
    }
    if (dropped) *dropped = drop_count;
    return out;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& ChunkScorer::prompt_templates() {
    static const std::vector<std::string> t = {"a photo of {}", "a {}", "{} garment"};
    return t;
}

ChunkScorer::ChunkScorer(std::string name, uint64_t seed) : name_(std::move(name)) {
    Vocabulary vocab = Vocabulary::standard();
    vocab_size_ = vocab.size();
    Rng rng(seed);
    img_proj_.resize((size_t)kProjDim * 32);
    for (auto& v : img_proj_) v = (float)(rng.normal() / std::sqrt(32.0));
    bow_proj_.resize((size_t)kProjDim * vocab_size_);
    for (auto& v : bow_proj_) v = (float)(rng.normal() / std::sqrt((double)vocab_size_));
}

double ChunkScorer::score(const std::vector<float>& image_descriptor,
                          const std::string& chunk) const {
    Vocabulary vocab = Vocabulary::standard();
    std::vector<float> img_vec((size_t)kProjDim, 0.f);
    for (int i = 0; i < kProjDim; ++i)
        for (int j = 0; j < 32; ++j)
            img_vec[(size_t)i] += img_proj_[(size_t)i * 32 + j] * image_descriptor[(size_t)j];

    double total = 0;
    for (const std::string& tmpl : prompt_templates()) {
        std::string prompt = tmpl;
        size_t pos = prompt.find("{}");
        prompt.replace(pos, 2, chunk);
        std::vector<float> bow((size_t)vocab_size_, 0.f);
        std::istringstream is(prompt);
        std::string w;
        while (is >> w) bow[(size_t)vocab.id(w)] += 1.f;
        std::vector<float> chunk_vec((size_t)kProjDim, 0.f);
        for (int i = 0; i < kProjDim; ++i)
            for (int j = 0; j < vocab_size_; ++j)
                chunk_vec[(size_t)i] += bow_proj_[(size_t)i * vocab_size_ + j] * bow[(size_t)j];
        total += cosine(img_vec, chunk_vec);
    }
    return total / (double)prompt_templates().size();
}

std::vector<ChunkScorer> default_scorers() {
    std::vector<ChunkScorer> s;
    for (int i = 0; i < 5; ++i)
        s.emplace_back("proj" + std::to_string(i), 0x5c04e500ULL + (uint64_t)i);
    return s;
}

std::vector<ScorerFn> default_scorer_fns() {
    // the concrete scorers are cheap to copy; captured by value
    std::vector<ScorerFn> fns;
    for (auto& s : default_scorers())
        fns.push_back(ScorerFn{s.name(), [s](const std::vector<float>& d, const std::string& c) {
                                   return s.score(d, c);
                               }});
    return fns;
}

RankResult rank_chunks(const Image& image, const std::vector<NounChunk>& chunks,
                       const std::vector<ScorerFn>& scorers) {
    RankResult out;
    std::vector<float> desc = image_descriptor(image);

    // per-scorer rankings; ties broken by lexicographic chunk order
    std::vector<std::vector<size_t>> ranking(scorers.size());
    for (size_t s = 0; s < scorers.size(); ++s) {
        std::vector<std::pair<double, size_t>> scored;
        for (size_t c = 0; c < chunks.size(); ++c)
            scored.push_back({scorers[s].score(desc, chunks[c].text), c});
        std::sort(scored.begin(), scored.end(), [&](auto& a, auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return chunks[a.second].text < chunks[b.second].text;
        });
        for (auto& [sc, idx] : scored) ranking[s].push_back(idx);
    }

    // scorer-major merge, 5 new chunks per scorer, walking past duplicates
    std::set<std::string> seen;
    for (auto& rank : ranking) {
        int contributed = 0;
        for (size_t idx : rank) {
            if (contributed == 5) break;
            if (seen.insert(chunks[idx].text).second) {
                out.chunks.push_back(chunks[idx].text);
                ++contributed;
            }
        }
    }
    out.shortfall = (int)out.chunks.size() < 25;
    return out;
}

PatchExtraction sliding_window_textures(const Image& image, const Image& mask, int window,
                                        int stride, int fallback) {
    PatchExtraction out;
    auto extract = [&](int win, int str) {
        std::vector<std::pair<int, int>> positions;
        for (int y = 0; y + win <= mask.h; y += str)
            for (int x = 0; x + win <= mask.w; x += str) {
                bool inside = true;
                for (int yy = y; yy < y + win && inside; ++yy)
                    for (int xx = x; xx < x + win && inside; ++xx)
                        if (mask.at(0, yy, xx) < 0.5f) inside = false;
                if (inside) positions.push_back({y, x});
            }
        return positions;
    };

    auto positions = extract(window, stride);
    out.window = window;
    if (positions.empty() && fallback > 0 && fallback < window) {
        // the fallback keeps the window/stride ratio
        positions = extract(fallback, std::max(1, fallback / 2));
        out.window = fallback;
        out.fallback_used = !positions.empty();
    }
    if (positions.empty()) {
        out.empty = true;
        return out;
    }
    for (auto [y, x] : positions) {
        Image p(image.channels, out.window, out.window);
        for (int c = 0; c < image.channels; ++c)
            for (int yy = 0; yy < out.window; ++yy)
                for (int xx = 0; xx < out.window; ++xx) p.at(c, yy, xx) = image.at(c, y + yy, x + xx);
        out.patches.push_back(std::move(p));
        out.positions.push_back({y, x});
    }
    return out;
}

std::vector<std::string> build_chunk_pool() {
    std::vector<std::string> pool;
    auto& colors = grammar::colors();
    auto& patterns = grammar::patterns();
    auto& garments = grammar::garments();
    for (auto& c : colors)
        for (auto& p : patterns)
            for (size_t g = 0; g < garments.size(); ++g) {
                pool.push_back(std::string(c.name) + " " + p + " " + garments[g]);
                for (auto& m : grammar::modifiers_for((GarmentFamily)g))
                    pool.push_back(m + " " + std::string(c.name) + " " + p + " " + garments[g]);
            }
    for (auto& c : colors)
        for (const char* noun : {"shirt", "skirt", "gown", "blouse", "tee"})
            pool.push_back(std::string(c.name) + " " + noun);
    // noisy surface variants the normalizer cleans up
    pool.push_back("a red dress");
    pool.push_back("striped dresses");
    pool.push_back("the blue tops");
    pool.push_back("#cool top");
    return pool;
}

AnnotateReport annotate_dataset(const std::string& root) {
    DatasetManifest manifest = DatasetManifest::load((fs::path(root) / "manifest.jsonl").string());
    int dropped = 0;
    std::vector<NounChunk> chunks = normalize_chunks(build_chunk_pool(), &dropped);
    std::vector<ScorerFn> scorers = default_scorer_fns();

    AnnotateReport rep;
    rep.dropped_chunks = dropped;
    for (auto& entry : manifest.entries) {
        Sample s = read_sample(root, entry.id);
        RankResult ranked = rank_chunks(s.image, chunks, scorers);
        PatchExtraction patches = sliding_window_textures(s.image, s.garment_mask);
        json j = {{"id", entry.id},
                  {"chunks", ranked.chunks},
                  {"shortfall", ranked.shortfall},
                  {"texture_windows", patches.positions.size()},
                  {"texture_window_size", patches.window},
                  {"texture_fallback", patches.fallback_used}};
        std::ofstream out(fs::path(root) / entry.id / "chunks_25.json");
        out << j.dump(2) << "\n";
        ++rep.samples;
        rep.shortfalls += ranked.shortfall;
        rep.fallback_patches += patches.fallback_used;
        rep.empty_patches += patches.empty;
    }
    json agg = {{"samples", rep.samples},
                {"shortfalls", rep.shortfalls},
                {"fallback_patches", rep.fallback_patches},
                {"empty_patches", rep.empty_patches},
                {"dropped_chunks", rep.dropped_chunks}};
    std::ofstream out(fs::path(root) / "annotate_report.json");
    out << agg.dump(2) << "\n";
    return rep;
}

}  // namespace stitch
