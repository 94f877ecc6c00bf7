#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stitch/grammar.hpp"
#include "stitch/image.hpp"

namespace stitch {

struct NounChunk {
    std::string text;
    ChunkCategory category = ChunkCategory::kUpper;

    bool operator==(const NounChunk& o) const { return text == o.text; }
};

// Lowercases, strips a leading article, drops entries containing special
// characters, lemmatizes word by word via suffix rules, deduplicates.
// Idempotent. dropped (optional) reports the filtered count.
std::vector<NounChunk> normalize_chunks(const std::vector<std::string>& raw,
                                        int* dropped = nullptr);

std::string lemmatize_word(const std::string& word);

// Deterministic image-vs-chunk scorer: cosine between a seeded random
// projection of the image descriptor and a projected bag-of-words embedding,
// averaged over a fixed prompt-template set.
class ChunkScorer {
public:
    ChunkScorer(std::string name, uint64_t seed);

    const std::string& name() const { return name_; }
    double score(const std::vector<float>& image_descriptor, const std::string& chunk) const;

    static const std::vector<std::string>& prompt_templates();

private:
    std::string name_;
    std::vector<float> img_proj_;   // kProjDim x descriptor dim
    std::vector<float> bow_proj_;   // kProjDim x vocab dim
    int vocab_size_ = 0;

    static constexpr int kProjDim = 24;
};

std::vector<ChunkScorer> default_scorers();  // five fixed seeds

// Scorer interface used by the ranking: a name plus a deterministic
// score(image descriptor, chunk).
struct ScorerFn {
    std::string name;
    std::function<double(const std::vector<float>&, const std::string&)> score;
};

std::vector<ScorerFn> default_scorer_fns();

struct RankResult {
    std::vector<std::string> chunks;  // unique, scorer-major merge order
    bool shortfall = false;           // fewer than 25 distinct chunks existed
};

// Top-5 per scorer merged to 25 unique chunks: scorer-major, rank-minor, on
// duplicates continue down that scorer's ranking; score ties break
// lexicographically.
RankResult rank_chunks(const Image& image, const std::vector<NounChunk>& chunks,
                       const std::vector<ScorerFn>& scorers);

struct PatchExtraction {
    std::vector<Image> patches;
    std::vector<std::pair<int, int>> positions;  // (y, x) of each window
    int window = 0;
    bool fallback_used = false;
    bool empty = false;  // no patch even at the fallback size
};

// Sliding-window patches fully inside the mask. When the primary window finds
// nothing the fallback window is tried with a proportionally halved stride.
PatchExtraction sliding_window_textures(const Image& image, const Image& mask, int window = 16,
                                        int stride = 8, int fallback = 8);

// The candidate noun-chunk pool: every grammar phrase plus noisy surface
// variants that exercise normalization.
std::vector<std::string> build_chunk_pool();

struct AnnotateReport {
    int samples = 0;
    int shortfalls = 0;
    int fallback_patches = 0;
    int empty_patches = 0;
    int dropped_chunks = 0;
};

// Runs the pipeline over a dataset root: writes chunks_25.json per sample and
// an aggregate annotate_report.json at the root.
AnnotateReport annotate_dataset(const std::string& root);

}  // namespace stitch
