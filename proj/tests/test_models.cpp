#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "stitch/codec.hpp"
#include "stitch/conditioning.hpp"
#include "stitch/ops.hpp"
#include "stitch/optim.hpp"
#include "stitch/unet.hpp"

using namespace stitch;

namespace {

CodecConfig small_codec_cfg() {
    CodecConfig c;
    c.image_h = 96;
    c.image_w = 64;
    c.base_width = 8;
    return c;
}

ConditioningConfig cond_cfg(int vocab) {
    ConditioningConfig c;
    c.vocab_size = vocab;
    return c;
}

UNetConfig tiny_unet_cfg() {
    UNetConfig c;
    c.widths = {8, 8, 8, 8};
    c.heads = 2;
    c.d_ctx = 64;
    c.temb_dim = 16;
    c.temb_hidden = 32;
    c.norm_groups = 2;
    return c;
}

// Untrained denoisers have a zero-initialized output conv; give the output
// path nonzero weights so sensitivity probes see signal.
void randomize_output_conv(Denoiser& d, uint64_t seed) {
    Rng rng(seed);
    for (auto& p : d.params())
        if (p.name == "out.conv.w")
            for (auto& v : p.value.vec()) v = (float)(rng.normal() * 0.05);
}

AttentionInput make_psi(int B, int t, const Tensor<float>& text, const Tensor<float>& texture,
                        const std::string& routing) {
    AttentionInput psi;
    psi.t.assign((size_t)B, t);
    psi.streams.text = text;
    psi.streams.texture = texture;
    psi.routing = RoutingTable::parse(routing);
    return psi;
}

}  // namespace

// ---------------------------------------------------------------------------
// latent codec
// ---------------------------------------------------------------------------

TEST_CASE("codec shape contract: 96x64 with f=4 gives 4x24x16 latents") {
    Codec codec(small_codec_cfg(), 1);
    CHECK(codec.config().latent_h() == 24);
    CHECK(codec.config().latent_w() == 16);
    Rng rng(2);
    auto img = Tensor<float>::uniform({2, 3, 96, 64}, rng, 0.f, 1.f);
    auto z = codec.encode(img);
    CHECK(z.shape() == Shape({2, 4, 24, 16}));
    auto back = codec.decode(z);
    CHECK(back.shape() == Shape({2, 3, 96, 64}));
    for (int64_t i = 0; i < back.numel(); ++i) {
        CHECK(back.data()[i] >= 0.f);
        CHECK(back.data()[i] <= 1.f);
    }
    CHECK_THROWS_AS(codec.encode(Tensor<float>::zeros({1, 3, 64, 96})).item(), std::invalid_argument);
    CHECK_THROWS_AS(codec.decode(Tensor<float>::zeros({1, 4, 16, 24})).item(), std::invalid_argument);
}

TEST_CASE("codec encode and round trip are deterministic") {
    Codec codec(small_codec_cfg(), 5);
    Rng rng(6);
    Image img(3, 96, 64);
    for (auto& v : img.data) v = (float)rng.uniform();
    auto z1 = codec.encode_image(img);
    auto z2 = codec.encode_image(img);
    CHECK(std::memcmp(z1.data(), z2.data(), z1.size() * sizeof(float)) == 0);
    Image d1 = codec.decode_image(z1);
    Image d2 = codec.decode_image(z1);
    CHECK(std::memcmp(d1.data.data(), d2.data.data(), d1.data.size() * sizeof(float)) == 0);
}

TEST_CASE("zero latent decodes to a valid image (shape contract only)") {
    Codec codec(small_codec_cfg(), 7);
    Image img = codec.decode_image(std::vector<float>((size_t)4 * 24 * 16, 0.f));
    CHECK(img.channels == 3);
    CHECK(img.h == 96);
    CHECK(img.w == 64);
}

TEST_CASE("frozen codec receives no gradient and no update") {
    Codec codec(small_codec_cfg(), 9);
    codec.freeze();
    uint64_t before = codec.params().content_hash();
    Rng rng(10);
    auto img = Tensor<float>::uniform({1, 3, 96, 64}, rng, 0.f, 1.f);
    auto loss = mse(codec.encode(img), Tensor<float>::zeros({1, 4, 24, 16}));
    CHECK(!loss.requires_grad());
    backward(loss);
    AdamW<float> opt(1e-2, 0.0, 0);
    auto params = codec.params().all();
    opt.step(params);
    CHECK(codec.params().content_hash() == before);
}

// ---------------------------------------------------------------------------
// conditioning
// ---------------------------------------------------------------------------

TEST_CASE("tokenizer: empty caption, grammar caption, round trip") {
    Vocabulary vocab = Vocabulary::standard();
    auto empty = tokenize(vocab, "", 16);
    REQUIRE((int)empty.size() == 16);
    CHECK(empty[0] == Vocabulary::kStart);
    CHECK(empty[1] == Vocabulary::kEnd);
    for (size_t i = 2; i < empty.size(); ++i) CHECK(empty[i] == Vocabulary::kPad);

    auto ids = tokenize(vocab, "red striped dress", 16);
    int non_pad = 0;
    for (int id : ids) non_pad += id != Vocabulary::kPad;
    CHECK(non_pad == 5);  // start + 3 words + end
    CHECK(detokenize(vocab, ids) == "red striped dress");

    auto unk = tokenize(vocab, "red QUANTUM dress", 16);
    CHECK(unk[2] == Vocabulary::kUnk);
}

TEST_CASE("vocabulary round trips through its one-word-per-line file") {
    Vocabulary vocab = Vocabulary::standard();
    vocab.save("/tmp/stitch_vocab.txt");
    Vocabulary loaded = Vocabulary::load("/tmp/stitch_vocab.txt");
    CHECK(loaded.size() == vocab.size());
    for (int i = 0; i < vocab.size(); ++i) CHECK(loaded.word(i) == vocab.word(i));
    CHECK(loaded.id("striped") == vocab.id("striped"));
}

TEST_CASE("embed_lookup: repeated ids give identical rows; grads only on used ids") {
    Vocabulary vocab = Vocabulary::standard();
    ParamStore<float> ps;
    TextEncoder text(ps, cond_cfg(vocab.size()), 3);
    std::vector<int> ids = {1, 5, 5, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    auto emb = text.embed_lookup(ids, 1);
    int d = emb.dim(2);
    CHECK(std::memcmp(emb.data() + 1 * d, emb.data() + 2 * d, d * sizeof(float)) == 0);

    ps.zero_grad();
    backward(mean_all(emb));
    auto& g = text.embedding_table()->grad();
    auto row_nonzero = [&](int r) {
        for (int j = 0; j < d; ++j)
            if (g[(size_t)r * d + j] != 0.f) return true;
        return false;
    };
    CHECK(row_nonzero(5));
    CHECK(row_nonzero(0));   // pad participates in the sequence
    CHECK(!row_nonzero(7));  // never looked up
}

TEST_CASE("text_transform: position encoding active, eval deterministic, grads pass") {
    Vocabulary vocab = Vocabulary::standard();
    ParamStore<float> ps;
    TextEncoder text(ps, cond_cfg(vocab.size()), 17);

    auto ids1 = tokenize(vocab, "red striped dress", 16);
    auto ids2 = tokenize(vocab, "striped red dress", 16);  // permuted non-pad words
    auto c1 = text.context_from_ids(ids1, 1);
    auto c1b = text.context_from_ids(ids1, 1);
    auto c2 = text.context_from_ids(ids2, 1);
    CHECK(std::memcmp(c1.data(), c1b.data(), c1.numel() * sizeof(float)) == 0);
    CHECK(std::memcmp(c1.data(), c2.data(), c1.numel() * sizeof(float)) != 0);

    ParamStore<float> ps2;
    ConditioningConfig small = cond_cfg(vocab.size());
    small.d_ctx = 16;
    small.text_len = 6;
    small.tt_layers = 1;
    small.tt_heads = 2;
    TextEncoder tiny(ps2, small, 19);
    auto ids = tokenize(vocab, "red dress", 6);
    auto target = Tensor<float>::zeros({1, 6, 16});
    auto loss = [&] { return mse(tiny.context_from_ids(ids, 1), target); };
    auto rep = grad_check<float>(loss, ps2.all(), 3e-3, 16);
    CHECK(!rep.aborted);
    CHECK(rep.worst() < 1e-2);
}

TEST_CASE("visual encoder: 16 tokens, deterministic, separates gray from checkerboard") {
    ParamStore<float> ps;
    VisionEncoder vis(ps, 32, 23);
    auto gray = Tensor<float>::filled({1, 3, 16, 16}, 0.5f);
    auto checker = Tensor<float>::zeros({1, 3, 16, 16});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                checker.data()[(c * 16 + y) * 16 + x] = ((x / 2 + y / 2) % 2) ? 1.f : 0.f;

    auto t1 = vis.tokens(gray);
    auto t1b = vis.tokens(gray);
    CHECK(t1.shape() == Shape({1, 16, 32}));
    CHECK(std::memcmp(t1.data(), t1b.data(), t1.numel() * sizeof(float)) == 0);
    CHECK_THROWS_AS(vis.tokens(Tensor<float>::zeros({1, 3, 8, 8})).item(), std::invalid_argument);

    // pooled-feature cosine between distinct inputs stays below 0.99 even for
    // an untrained encoder; the pretraining acceptance test tightens this
    auto t2 = vis.tokens(checker);
    std::vector<double> p1(32, 0), p2(32, 0);
    for (int l = 0; l < 16; ++l)
        for (int j = 0; j < 32; ++j) {
            p1[(size_t)j] += t1.data()[l * 32 + j];
            p2[(size_t)j] += t2.data()[l * 32 + j];
        }
    double dot = 0, n1 = 0, n2 = 0;
    for (int j = 0; j < 32; ++j) {
        dot += p1[(size_t)j] * p2[(size_t)j];
        n1 += p1[(size_t)j] * p1[(size_t)j];
        n2 += p2[(size_t)j] * p2[(size_t)j];
    }
    CHECK(dot / std::sqrt(n1 * n2) < 0.99);
}

TEST_CASE("inversion adapter: 16 PTEs in token space, input-sensitive, frozen V_E gets no grads") {
    Vocabulary vocab = Vocabulary::standard();
    ParamStore<float> vis_ps, ps;
    VisionEncoder vis(vis_ps, 32, 29);
    vis_ps.freeze();
    TextEncoder text(ps, cond_cfg(vocab.size()), 31);
    InversionAdapter adapter(ps, cond_cfg(vocab.size()), 37);

    Rng rng(41);
    auto x1 = Tensor<float>::uniform({1, 3, 16, 16}, rng, 0.f, 1.f);
    auto x2 = Tensor<float>::uniform({1, 3, 16, 16}, rng, 0.f, 1.f);
    Rng drop(1);
    auto p1 = adapter.ptes(vis.tokens(x1), false, drop);
    auto p2 = adapter.ptes(vis.tokens(x2), false, drop);
    CHECK(p1.shape() == Shape({1, 16, 64}));
    CHECK(std::memcmp(p1.data(), p2.data(), p1.numel() * sizeof(float)) != 0);

    // grad flows into the adapter but not into the frozen visual encoder
    ps.zero_grad();
    auto ctx = text.transform(p1);
    backward(mean_all(ctx));
    bool adapter_has_grad = false;
    for (auto& p : ps)
        if (p.name.rfind("adapter.", 0) == 0)
            for (float gv : p.value.grad())
                if (gv != 0.f) adapter_has_grad = true;
    CHECK(adapter_has_grad);
    for (auto& p : vis_ps) CHECK(p.value.grad().empty());
}

TEST_CASE("texture context shares the text transformer parameters") {
    Vocabulary vocab = Vocabulary::standard();
    ParamStore<float> ps;
    TextEncoder text(ps, cond_cfg(vocab.size()), 43);
    Rng rng(44);
    auto ptes = Tensor<float>::randn({1, 16, 64}, rng, 0.1f);
    auto before = text.transform(ptes);
    CHECK(before.shape() == Shape({1, 16, 64}));
    auto again = text.transform(ptes);
    CHECK(std::memcmp(before.data(), again.data(), before.numel() * sizeof(float)) == 0);

    // perturb a T_T weight through the text path; the texture path must move
    Parameter<float>* w = ps.find("text.blk0.attn.q.w");
    REQUIRE(w != nullptr);
    w->value.data()[0] += 0.5f;
    auto after = text.transform(ptes);
    CHECK(std::memcmp(before.data(), after.data(), before.numel() * sizeof(float)) != 0);
}

TEST_CASE("routing: defaults, parsing, pure selection, missing stream rejected") {
    RoutingTable def = RoutingTable::parse("tt xx");
    CHECK(def.at(0) == Stream::kText);
    CHECK(def.at(1) == Stream::kText);
    CHECK(def.at(2) == Stream::kTexture);
    CHECK(def.at(3) == Stream::kTexture);
    CHECK(def == RoutingTable{});
    CHECK_THROWS_AS(RoutingTable::parse("ttx"), ConfigError);
    CHECK_THROWS_AS(RoutingTable::parse("ttxz"), ConfigError);

    PsiStreams psi;
    psi.text = Tensor<float>::filled({1, 2, 4}, 1.f);
    RoutingTable all_text = RoutingTable::parse("tttt");
    for (int g = 0; g < 4; ++g) CHECK(route_stream(psi, all_text, g).data() == psi.text.data());
    CHECK_THROWS_AS(route_stream(psi, def, 2).numel(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

TEST_CASE("denoiser: parameter count stable, base forward shape, 31 = 9 + 18 + 4") {
    Denoiser a(tiny_unet_cfg(), 5), b(tiny_unet_cfg(), 5);
    CHECK(a.params().total_elements() == b.params().total_elements());
    CHECK(a.params().total_elements() > 0);
    MESSAGE("tiny denoiser parameters: ", a.params().total_elements());
    CHECK(UNetConfig::kFullChannels == 31);
    CHECK(UNetConfig::kBaseChannels + UNetConfig::kPoseChannels + UNetConfig::kSketchChannels == 31);

    Rng rng(6);
    auto gamma = Tensor<float>::randn({2, 9, 24, 16}, rng);
    auto text = Tensor<float>::randn({2, 16, 64}, rng);
    auto y = a.denoise(gamma, make_psi(2, 10, text, {}, "tttt"));
    CHECK(y.shape() == Shape({2, 4, 24, 16}));
}

TEST_CASE("denoiser grad check on a miniature config") {
    UNetConfig cfg = tiny_unet_cfg();
    cfg.widths = {4, 4, 4, 4};
    cfg.heads = 2;
    cfg.norm_groups = 2;
    Denoiser model(cfg, 77);
    model.extend_input_channels();
    randomize_output_conv(model, 78);

    Rng rng(79);
    auto gamma = Tensor<float>::randn({1, 31, 8, 8}, rng, 0.5f);
    auto text = Tensor<float>::randn({1, 4, 64}, rng, 0.5f);
    auto texture = Tensor<float>::randn({1, 4, 64}, rng, 0.5f);
    auto target = Tensor<float>::zeros({1, 4, 8, 8});
    auto loss = [&] {
        return mse(model.denoise(gamma, make_psi(1, 3, text, texture, "ttxx")), target);
    };
    // deep float32 chain: larger step keeps roundoff below truncation
    auto rep = grad_check<float>(loss, model.params().all(), 1e-2, 2);
    CHECK_MESSAGE(!rep.aborted, rep.message);
    CHECK_MESSAGE(rep.worst() < 1e-2, "worst ", rep.worst());
}

TEST_CASE("zero-init extension: bit-exact equivalence, rejection, grad flow") {
    Denoiser model(tiny_unet_cfg(), 11);
    Rng rng(12);
    auto gamma9 = Tensor<float>::randn({1, 9, 24, 16}, rng);
    auto text = Tensor<float>::randn({1, 16, 64}, rng);
    auto psi = make_psi(1, 100, text, {}, "tttt");
    auto base_out = model.denoise(gamma9, psi);

    model.extend_input_channels();
    CHECK_THROWS_AS(model.extend_input_channels(), std::logic_error);

    auto extra = Tensor<float>::randn({1, 22, 24, 16}, rng);
    auto gamma31 = concat<float>({gamma9, extra}, 1);
    auto ext_out = model.denoise(gamma31, psi);
    CHECK(std::memcmp(base_out.data(), ext_out.data(), base_out.numel() * sizeof(float)) == 0);

    // one training step with nonzero pose input makes the extension slices move
    randomize_output_conv(model, 13);
    model.params().zero_grad();
    auto loss = mse(model.denoise(gamma31, psi), Tensor<float>::filled({1, 4, 24, 16}, 0.3f));
    backward(loss);
    AdamW<float> opt(1e-3, 0.0, 0);
    auto params = model.params().all();
    opt.step(params);
    const Parameter<float>* ext = model.params().find("stem.ext.w");
    REQUIRE(ext != nullptr);
    bool moved = false;
    for (float v : ext->value.vec())
        if (v != 0.f) moved = true;
    CHECK(moved);
}

TEST_CASE("attention routing isolation and sensitivity") {
    Denoiser model(tiny_unet_cfg(), 21);
    model.extend_input_channels();
    randomize_output_conv(model, 22);
    Rng rng(23);
    auto gamma = Tensor<float>::randn({1, 31, 24, 16}, rng);
    auto text = Tensor<float>::randn({1, 16, 64}, rng);
    auto tex1 = Tensor<float>::randn({1, 16, 64}, rng);
    auto tex2 = Tensor<float>::randn({1, 16, 64}, rng);

    // all-text routing: the texture stream is never consulted
    auto y1 = model.denoise(gamma, make_psi(1, 7, text, tex1, "tttt"));
    auto y2 = model.denoise(gamma, make_psi(1, 7, text, tex2, "tttt"));
    CHECK(std::memcmp(y1.data(), y2.data(), y1.numel() * sizeof(float)) == 0);

    // default routing: texture changes reach groups 2 and 3
    auto d1 = model.denoise(gamma, make_psi(1, 7, text, tex1, "ttxx"));
    auto d2 = model.denoise(gamma, make_psi(1, 7, text, tex2, "ttxx"));
    CHECK(std::memcmp(d1.data(), d2.data(), d1.numel() * sizeof(float)) != 0);
}

TEST_CASE("zeroed pose and sketch with untrained extension slices equal the base model") {
    Denoiser base(tiny_unet_cfg(), 31);
    Rng rng(32);
    auto gamma9 = Tensor<float>::randn({1, 9, 24, 16}, rng);
    auto text = Tensor<float>::randn({1, 16, 64}, rng);
    auto psi = make_psi(1, 50, text, {}, "tttt");
    auto y_base = base.denoise(gamma9, psi);

    base.extend_input_channels();
    auto zeros22 = Tensor<float>::zeros({1, 22, 24, 16});
    auto y_ext = base.denoise(concat<float>({gamma9, zeros22}, 1), psi);
    CHECK(std::memcmp(y_base.data(), y_ext.data(), y_base.numel() * sizeof(float)) == 0);
}

TEST_CASE("time sensitivity: t=0 and t=T-1 differ on fixed gamma") {
    Denoiser model(tiny_unet_cfg(), 41);
    randomize_output_conv(model, 42);
    Rng rng(43);
    auto gamma = Tensor<float>::randn({1, 9, 24, 16}, rng);
    auto text = Tensor<float>::randn({1, 16, 64}, rng);
    auto y0 = model.denoise(gamma, make_psi(1, 0, text, {}, "tttt"));
    auto y999 = model.denoise(gamma, make_psi(1, 999, text, {}, "tttt"));
    CHECK(std::memcmp(y0.data(), y999.data(), y0.numel() * sizeof(float)) != 0);
}

TEST_CASE("fully convolutional: doubled latent dims forward without rebuild") {
    Denoiser model(tiny_unet_cfg(), 51);
    Rng rng(52);
    auto gamma = Tensor<float>::randn({1, 9, 48, 32}, rng);
    auto text = Tensor<float>::randn({1, 16, 64}, rng);
    auto y = model.denoise(gamma, make_psi(1, 3, text, {}, "tttt"));
    CHECK(y.shape() == Shape({1, 4, 48, 32}));
}

TEST_CASE("cross-attention groups: resolution mapping and exactly 4 ids") {
    Denoiser model(tiny_unet_cfg(), 61);
    auto groups = model.attention_groups();
    CHECK(groups.size() == 7);  // 3 encoder + bottleneck + 3 decoder
    std::set<int> distinct;
    int enc0 = -1, dec0 = -1, mid = -1;
    for (auto& [name, g] : groups) {
        distinct.insert(g);
        if (name == "enc0.attn") enc0 = g;
        if (name == "dec0.attn") dec0 = g;
        if (name == "mid.attn") mid = g;
    }
    CHECK(distinct.size() == 4);
    CHECK(enc0 == 3);  // highest resolution layers
    CHECK(dec0 == 3);
    CHECK(mid == 0);   // lowest resolution (bottleneck)
    CHECK(Denoiser::group_for_level(0) == 3);
    CHECK(Denoiser::group_for_level(3) == 0);
}

TEST_CASE("denoiser checkpoint: extension slices stored after base, round trip exact") {
    Denoiser model(tiny_unet_cfg(), 71);
    model.extend_input_channels();
    randomize_output_conv(model, 72);
    Checkpoint ck;
    ck.config_hash = "test";
    model.save_into(ck);
    REQUIRE(ck.tensors.size() >= 2);
    CHECK(ck.tensors[0].name == "unet.stem.base.w");
    CHECK(ck.tensors[1].name == "unet.stem.ext.w");
    for (float v : ck.tensors[1].data) CHECK(v == 0.f);

    ck.save("/tmp/stitch_unet.ckpt");
    Checkpoint loaded = Checkpoint::load("/tmp/stitch_unet.ckpt");
    Denoiser fresh(tiny_unet_cfg(), 99);
    fresh.load_from(loaded);
    CHECK(fresh.extended());
    CHECK(fresh.params().content_hash() == model.params().content_hash());
}
