#pragma once

#include <string>
#include <vector>

#include "stitch/config.hpp"
#include "stitch/grammar.hpp"
#include "stitch/layers.hpp"

namespace stitch {

// Word-level vocabulary; id = line number in the serialized form.
class Vocabulary {
public:
    static constexpr int kPad = 0, kStart = 1, kEnd = 2, kUnk = 3;

    static Vocabulary standard();  // grammar words, specials first
    static Vocabulary from_words(std::vector<std::string> words);

    int id(const std::string& word) const;  // kUnk for unknown words
    const std::string& word(int id) const;
    int size() const { return (int)words_.size(); }

    void save(const std::string& path) const;  // one word per line
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Lowercases, splits on whitespace, wraps in start/end and pads/truncates to
// a fixed length. Total function: unknown words map to <unk>.
std::vector<int> tokenize(const Vocabulary& vocab, const std::string& caption, int text_len);
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

struct ConditioningConfig {
    int vocab_size = 0;
    int d_ctx = 64;
    int text_len = 16;
    int n_pte = 16;
    int tt_layers = 2;
    int tt_heads = 4;
    int vision_width = 32;
    double adapter_dropout = 0.1;

    static ConditioningConfig from_run(const RunConfig& rc, int vocab_size) {
        ConditioningConfig c;
        c.vocab_size = vocab_size;
        c.d_ctx = rc.d_ctx;
        c.text_len = rc.text_len;
        c.n_pte = rc.n_pte;
        c.tt_layers = rc.tt_layers;
        c.tt_heads = rc.tt_heads;
        c.vision_width = rc.vision_width;
        c.adapter_dropout = rc.adapter_dropout;
        return c;
    }
};

// Embedding lookup plus the shared token transformer. Both the text path and
// the texture PTE path run through transform(), so they share one parameter
// set.
class TextEncoder {
public:
    TextEncoder(ParamStore<float>& ps, const ConditioningConfig& cfg, uint64_t seed);

    // E_L: (B,L) ids -> (B,L,d) token embeddings.
    Tensor<float> embed_lookup(const std::vector<int>& ids, int batch) const;
    // T_T: token embeddings (B,N,d), N <= text_len -> contexts (B,N,d).
    Tensor<float> transform(const Tensor<float>& tokens) const;
    // Full text path T_T(E_L(Y)).
    Tensor<float> context_from_ids(const std::vector<int>& ids, int batch) const;

    const ConditioningConfig& config() const { return cfg_; }
    Parameter<float>* embedding_table() { return embed_; }

private:
    ConditioningConfig cfg_;
    Parameter<float>* embed_ = nullptr;
    Parameter<float>* pos_ = nullptr;
    std::vector<TransformerBlock<float>> blocks_;
    LayerNormLayer<float> final_norm_;
};

// Small convolutional patchifier (V_E). Pretrained as the encoder half of a
// patch autoencoder, then frozen for diffusion training.
class VisionEncoder {
public:
    static constexpr int kPatch = 16;
    static constexpr int kTokens = 16;  // 4x4 grid of 4x4 patches

    VisionEncoder(ParamStore<float>& ps, int width, uint64_t seed);

    // (B,3,16,16) -> (B,16,width) patch tokens.
    Tensor<float> tokens(const Tensor<float>& patches) const;
    // Autoencoder round trip used only during pretraining.
    Tensor<float> reconstruct(const Tensor<float>& patches) const;

    int width() const { return width_; }

private:
    int width_;
    Conv2d<float> patch_, mix_, dec1_, dec2_;
};

// Forward-only textual inversion adapter (F_theta): patch tokens -> PTEs in
// the token embedding space.
class InversionAdapter {
public:
    InversionAdapter(ParamStore<float>& ps, const ConditioningConfig& cfg, uint64_t seed);

    // (B,16,dv) -> (B,n_pte,d_ctx); a single forward pass, no per-image
    // optimization.
    Tensor<float> ptes(const Tensor<float>& vision_tokens, bool training, Rng& rng) const;

private:
    ConditioningConfig cfg_;
    Dense<float> proj_;
    TransformerBlock<float> vit_;
    Dense<float> mlp1_, mlp2_, mlp3_;
};

// The two cross-attention conditioning streams of psi.
struct PsiStreams {
    Tensor<float> text;     // (B,L,d) or undefined
    Tensor<float> texture;  // (B,N,d) or undefined
};

// Pure per-group stream selection; rejects a missing designated stream.
const Tensor<float>& route_stream(const PsiStreams& psi, const RoutingTable& table, int group);

// Null conditions: the empty caption's context / the reserved all-gray
// patch's PTE context.
Tensor<float> null_text_context(const TextEncoder& text, const Vocabulary& vocab);
Tensor<float> null_texture_context(const TextEncoder& text, const VisionEncoder& vision,
                                   const InversionAdapter& adapter);

}  // namespace stitch
