#include "stitch/conditioning.hpp"

#include <algorithm>
#include <fstream>

#include "stitch/ops.hpp"

namespace stitch {

Vocabulary Vocabulary::standard() { return from_words(grammar::vocabulary_words()); }

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
    Vocabulary v;
    v.words_ = std::move(words);
    for (size_t i = 0; i < v.words_.size(); ++i) {
        if (v.index_.count(v.words_[i]))
            throw std::runtime_error("duplicate vocabulary word: " + v.words_[i]);
        v.index_[v.words_[i]] = (int)i;
    }
    if (v.words_.size() < 4 || v.words_[0] != "<pad>" || v.words_[1] != "<start>" ||
        v.words_[2] != "<end>" || v.words_[3] != "<unk>")
        throw std::runtime_error("vocabulary must start with <pad>,<start>,<end>,<unk>");
    return v;
}

int Vocabulary::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= (int)words_.size()) throw std::out_of_range("vocabulary id out of range");
    return words_[(size_t)id];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
    for (auto& w : words_) out << w << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary: " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) words.push_back(line);
    return from_words(std::move(words));
}

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& caption, int text_len) {
    std::vector<int> ids;
    ids.push_back(Vocabulary::kStart);
    std::string word;
    auto flush = [&] {
        if (!word.empty() && (int)ids.size() < text_len - 1) ids.push_back(vocab.id(word));
        word.clear();
    };
    for (char ch : caption) {
        if (std::isspace((unsigned char)ch))
            flush();
        else
            word.push_back((char)std::tolower((unsigned char)ch));
    }
    flush();
    ids.push_back(Vocabulary::kEnd);
    while ((int)ids.size() < text_len) ids.push_back(Vocabulary::kPad);
    return ids;
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kPad || id == Vocabulary::kStart || id == Vocabulary::kEnd) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.word(id);
    }
    return out;
}

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(ParamStore<float>& ps, const ConditioningConfig& cfg, uint64_t seed)
    : cfg_(cfg) {
    Rng rng(Rng::splitmix64(seed) ^ 0x7e87ULL);
    embed_ = &ps.add("text.embed", Tensor<float>::randn({cfg.vocab_size, cfg.d_ctx}, rng, 0.02f));
    pos_ = &ps.add("text.pos", Tensor<float>::randn({cfg.text_len, cfg.d_ctx}, rng, 0.02f));
    for (int i = 0; i < cfg.tt_layers; ++i)
        blocks_.emplace_back(ps, "text.blk" + std::to_string(i), cfg.d_ctx, cfg.tt_heads,
                             2 * cfg.d_ctx, rng);
    final_norm_ = LayerNormLayer<float>(ps, "text.norm", cfg.d_ctx);
}

Tensor<float> TextEncoder::embed_lookup(const std::vector<int>& ids, int batch) const {
    if ((int)ids.size() != batch * cfg_.text_len)
        shape_error("embed_lookup", "ids size " + std::to_string(ids.size()) + " != B*L");
    return embedding(embed_->value, ids, {batch, cfg_.text_len});
}

Tensor<float> TextEncoder::transform(const Tensor<float>& tokens) const {
    if (tokens.ndim() != 3 || tokens.dim(2) != cfg_.d_ctx || tokens.dim(1) > cfg_.text_len)
        shape_error("TextEncoder::transform",
                    "expected (B,N<=" + std::to_string(cfg_.text_len) + "," +
                        std::to_string(cfg_.d_ctx) + "), got " + shape_str(tokens.shape()));
    Tensor<float> pos = slice(pos_->value, 0, 0, tokens.dim(1));
    Tensor<float> h = add_rows_broadcast(tokens, pos);
    for (auto& blk : blocks_) h = blk(h);
    return final_norm_(h);
}

Tensor<float> TextEncoder::context_from_ids(const std::vector<int>& ids, int batch) const {
    return transform(embed_lookup(ids, batch));
}

// ---------------------------------------------------------------------------

VisionEncoder::VisionEncoder(ParamStore<float>& ps, int width, uint64_t seed) : width_(width) {
    Rng rng(Rng::splitmix64(seed) ^ 0x715eULL);
    patch_ = Conv2d<float>(ps, "vis.patch", 3, width, 4, 4, 0, rng);
    mix_ = Conv2d<float>(ps, "vis.mix", width, width, 1, 1, 0, rng);
    dec1_ = Conv2d<float>(ps, "vis.dec1", width, width, 1, 1, 0, rng);
    dec2_ = Conv2d<float>(ps, "vis.dec2", width, 3, 3, 1, 1, rng);
}

Tensor<float> VisionEncoder::tokens(const Tensor<float>& patches) const {
    if (patches.ndim() != 4 || patches.dim(1) != 3 || patches.dim(2) != kPatch ||
        patches.dim(3) != kPatch)
        shape_error("VisionEncoder::tokens",
                    "expected (B,3,16,16), got " + shape_str(patches.shape()));
    return nchw_to_tokens(mix_(gelu(patch_(patches))));
}

Tensor<float> VisionEncoder::reconstruct(const Tensor<float>& patches) const {
    Tensor<float> f = mix_(gelu(patch_(patches)));
    return dec2_(upsample_nearest(gelu(dec1_(f)), 4));
}

// ---------------------------------------------------------------------------

InversionAdapter::InversionAdapter(ParamStore<float>& ps, const ConditioningConfig& cfg,
                                   uint64_t seed)
    : cfg_(cfg) {
    if (cfg.n_pte != VisionEncoder::kTokens)
        throw std::invalid_argument("n_pte must equal the visual token count (16)");
    Rng rng(Rng::splitmix64(seed) ^ 0xadafULL);
    int d = cfg.d_ctx, h = 2 * cfg.d_ctx;
    proj_ = Dense<float>(ps, "adapter.proj", cfg.vision_width, d, rng);
    vit_ = TransformerBlock<float>(ps, "adapter.vit", d, cfg.tt_heads, h, rng);
    mlp1_ = Dense<float>(ps, "adapter.mlp1", d, h, rng);
    mlp2_ = Dense<float>(ps, "adapter.mlp2", h, h, rng);
    mlp3_ = Dense<float>(ps, "adapter.mlp3", h, d, rng);
}

Tensor<float> InversionAdapter::ptes(const Tensor<float>& vision_tokens, bool training,
                                     Rng& rng) const {
    if (vision_tokens.ndim() != 3 || vision_tokens.dim(1) != VisionEncoder::kTokens ||
        vision_tokens.dim(2) != cfg_.vision_width)
        shape_error("InversionAdapter::ptes",
                    "expected (B,16," + std::to_string(cfg_.vision_width) + "), got " +
                        shape_str(vision_tokens.shape()));
    Tensor<float> h = vit_(proj_(vision_tokens));
    h = dropout(gelu(mlp1_(h)), cfg_.adapter_dropout, training, rng);
    h = dropout(gelu(mlp2_(h)), cfg_.adapter_dropout, training, rng);
    return mlp3_(h);
}

// ---------------------------------------------------------------------------

const Tensor<float>& route_stream(const PsiStreams& psi, const RoutingTable& table, int group) {
    Stream s = table.at(group);
    const Tensor<float>& t = s == Stream::kText ? psi.text : psi.texture;
    if (!t.defined())
        throw std::invalid_argument("routing selects the " +
                                    std::string(s == Stream::kText ? "text" : "texture") +
                                    " stream for group " + std::to_string(group) +
                                    " but that stream is missing");
    return t;
}

Tensor<float> null_text_context(const TextEncoder& text, const Vocabulary& vocab) {
    NoGradGuard ng;
    return text.context_from_ids(tokenize(vocab, "", text.config().text_len), 1);
}

Tensor<float> null_texture_context(const TextEncoder& text, const VisionEncoder& vision,
                                   const InversionAdapter& adapter) {
    NoGradGuard ng;
    auto gray = Tensor<float>::filled({1, 3, VisionEncoder::kPatch, VisionEncoder::kPatch}, 0.5f);
    Rng rng(0);
    return text.transform(adapter.ptes(vision.tokens(gray), false, rng));
}

}  // namespace stitch
