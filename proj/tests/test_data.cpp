#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "stitch/annotate.hpp"
#include "stitch/dataset.hpp"
#include "stitch/image.hpp"
#include "stitch/metrics.hpp"

using namespace stitch;

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

TEST_CASE("marker palette is well separated from everything a scene contains") {
    auto& mk = palette::markers();
    for (size_t i = 0; i < mk.size(); ++i) {
        for (size_t j = i + 1; j < mk.size(); ++j)
            CHECK(mk[i].dist(mk[j]) > 2 * palette::kMarkerTolerance);
        for (auto& c : grammar::colors()) {
            CHECK(mk[i].dist(c.anchor) > 0.28f);
            CHECK(mk[i].dist(c.anchor.scaled(palette::kSecondaryShade)) > 0.28f);
        }
        CHECK(mk[i].dist(palette::skin()) > 0.28f);
        for (auto& b : palette::backgrounds()) CHECK(mk[i].dist(b) > 0.28f);
    }
}

TEST_CASE("keypoint markers are recoverable within 1 px on clean renders") {
    GeneratorConfig cfg;
    for (uint64_t i = 0; i < 40; ++i) {
        Sample s = generate_sample(11, i, cfg);
        Skeleton det = detect_keypoints(s.image);
        for (int k = 0; k < kNumKeypoints; ++k) {
            REQUIRE(det[(size_t)k].present);
            float dx = det[(size_t)k].x - s.keypoints[(size_t)k].x;
            float dy = det[(size_t)k].y - s.keypoints[(size_t)k].y;
            CHECK(dx * dx + dy * dy <= 1.f);
        }
    }
}

TEST_CASE("caption attributes hold on freshly generated samples") {
    GeneratorConfig cfg;
    int with_modifier = 0;
    for (uint64_t i = 100; i < 250; ++i) {
        Sample s = generate_sample(11, i, cfg);
        auto attrs = parse_caption(s.caption);
        REQUIRE(attrs.has_value());
        AttributeCheck chk = check_caption_attributes(s.image, s.inpaint_mask, s.keypoints, *attrs);
        CHECK(chk.color);
        CHECK(chk.pattern);
        CHECK(chk.category);
        if (attrs->modifier >= 0) {
            CHECK(chk.modifier);
            ++with_modifier;
        }
        CHECK(chk.score() == 1.0);
    }
    CHECK(with_modifier > 30);
}

TEST_CASE("fixed seed gives a bit-identical sample") {
    GeneratorConfig cfg;
    Sample a = generate_sample(77, 5, cfg);
    Sample b = generate_sample(77, 5, cfg);
    CHECK(a.caption == b.caption);
    CHECK(std::memcmp(a.image.data.data(), b.image.data.data(),
                      a.image.data.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(a.texture.data.data(), b.texture.data.data(),
                      a.texture.data.size() * sizeof(float)) == 0);
}

TEST_CASE("sample invariants: masks, texture window, keypoints in canvas") {
    GeneratorConfig cfg;
    for (uint64_t i = 300; i < 330; ++i) {
        Sample s = generate_sample(11, i, cfg);
        // M contains M_C
        for (int y = 0; y < s.image.h; ++y)
            for (int x = 0; x < s.image.w; ++x)
                if (s.garment_mask.at(0, y, x) > 0.5f) CHECK(s.inpaint_mask.at(0, y, x) > 0.5f);
        for (auto& k : s.keypoints) {
            CHECK(k.x >= 0);
            CHECK(k.x < s.image.w);
            CHECK(k.y >= 0);
            CHECK(k.y < s.image.h);
        }
        // X is an exact sub-window of the image, fully inside M_C
        bool found = false;
        for (int y0 = 0; y0 + 16 <= s.image.h && !found; ++y0)
            for (int x0 = 0; x0 + 16 <= s.image.w && !found; ++x0) {
                bool match = true;
                for (int c = 0; c < 3 && match; ++c)
                    for (int y = 0; y < 16 && match; ++y)
                        for (int x = 0; x < 16 && match; ++x)
                            if (s.image.at(c, y0 + y, x0 + x) != s.texture.at(c, y, x)) match = false;
                if (match) {
                    bool inside = true;
                    for (int y = 0; y < 16 && inside; ++y)
                        for (int x = 0; x < 16 && inside; ++x)
                            if (s.garment_mask.at(0, y0 + y, x0 + x) < 0.5f) inside = false;
                    CHECK(inside);
                    found = true;
                }
            }
        CHECK(found);
    }
}

TEST_CASE("pose map: blobs peak at keypoints and survive latent downsampling") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 400, cfg);
    auto pose = rasterize_pose_map(s.keypoints, 96, 64);
    for (int k = 0; k < kNumKeypoints; ++k) {
        const float* ch = pose.data() + (size_t)k * 96 * 64;
        int argmax = 0;
        double sum = 0;
        for (int i = 1; i < 96 * 64; ++i) {
            if (ch[i] > ch[argmax]) argmax = i;
            sum += ch[i];
        }
        int ay = argmax / 64, ax = argmax % 64;
        CHECK(std::abs(ay - s.keypoints[(size_t)k].y) <= 1.0f);
        CHECK(std::abs(ax - s.keypoints[(size_t)k].x) <= 1.0f);
        CHECK(sum > 0);
        CHECK(sum < 2 * 3.14159 * 1.5 * 1.5 * 2);  // bounded by the blob mass
        CHECK(ch[argmax] > 0.8f);

        auto small = resize_nearest(std::vector<float>(ch, ch + 96 * 64), 1, 96, 64, 24, 16);
        int sarg = 0;
        for (int i = 1; i < 24 * 16; ++i)
            if (small[(size_t)i] > small[(size_t)sarg]) sarg = i;
        CHECK(std::abs(sarg / 16 - s.keypoints[(size_t)k].y / 4) <= 1.5f);
        CHECK(std::abs(sarg % 16 - s.keypoints[(size_t)k].x / 4) <= 1.5f);
    }
}

TEST_CASE("sketch: outline only for plain garments, interior edges for stripes") {
    GeneratorConfig cfg;
    Rng rng(5);
    SceneSpec spec = generate_scene(rng, cfg);
    spec.texture.family = PatternFamily::kPlain;
    Sample plain = render_scene(spec, cfg);
    spec.texture.family = PatternFamily::kStriped;
    Sample striped = render_scene(spec, cfg);

    // interior = garment mask eroded by 3
    auto interior_mass = [&](const Sample& s) {
        double mass = 0;
        for (int y = 3; y < s.image.h - 3; ++y)
            for (int x = 3; x < s.image.w - 3; ++x) {
                bool interior = true;
                for (int dy = -3; dy <= 3 && interior; ++dy)
                    for (int dx = -3; dx <= 3 && interior; ++dx)
                        if (s.garment_mask.at(0, y + dy, x + dx) < 0.5f) interior = false;
                if (interior) mass += s.sketch.at(0, y, x);
            }
        return mass;
    };
    double plain_mass = interior_mass(plain);
    double striped_mass = interior_mass(striped);
    CHECK(striped_mass > plain_mass + 5.0);

    // zero outside the (dilated) mask and idempotent given identical inputs
    Image again = extract_sketch(plain.image, plain.garment_mask);
    CHECK(std::memcmp(again.data.data(), plain.sketch.data.data(),
                      again.data.size() * sizeof(float)) == 0);
    for (int y = 0; y < plain.image.h; ++y)
        for (int x = 0; x < plain.image.w; ++x) {
            bool near_mask = false;
            for (int dy = -1; dy <= 1 && !near_mask; ++dy)
                for (int dx = -1; dx <= 1 && !near_mask; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < 96 && xx >= 0 && xx < 64 &&
                        plain.garment_mask.at(0, yy, xx) > 0.5f)
                        near_mask = true;
                }
            if (!near_mask) CHECK(plain.sketch.at(0, y, x) == 0.f);
        }
}

TEST_CASE("unpaired split is a derangement, deterministic, and swaps pairs") {
    DatasetManifest m;
    std::vector<GarmentFamily> fams;
    for (int i = 0; i < 12; ++i) {
        m.entries.push_back({"s" + std::to_string(i), i < 8 ? "train" : "test", ""});
        fams.push_back((GarmentFamily)(i % 3));
    }
    Rng rng(3);
    make_unpaired_split(m, fams, rng);
    for (auto& e : m.entries) {
        CHECK(!e.donor.empty());
        CHECK(e.donor != e.id);
        const ManifestEntry* donor = m.find(e.donor);
        REQUIRE(donor != nullptr);
        CHECK(donor->split == e.split);
    }
    DatasetManifest m2;
    for (int i = 0; i < 12; ++i) m2.entries.push_back({"s" + std::to_string(i), i < 8 ? "train" : "test", ""});
    Rng rng2(3);
    make_unpaired_split(m2, fams, rng2);
    for (size_t i = 0; i < m.entries.size(); ++i) CHECK(m.entries[i].donor == m2.entries[i].donor);

    // n=2 in a split: forced swap
    DatasetManifest two;
    two.entries.push_back({"a", "test", ""});
    two.entries.push_back({"b", "test", ""});
    std::vector<GarmentFamily> f2 = {GarmentFamily::kTop, GarmentFamily::kDress};
    Rng rng3(9);
    make_unpaired_split(two, f2, rng3);
    CHECK(two.entries[0].donor == "b");
    CHECK(two.entries[1].donor == "a");
}

TEST_CASE("sample round trips through the on-disk layout at 8-bit precision") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 500, cfg);
    s.id = "s000500";
    std::string root = "/tmp/stitch_ds_io";
    std::filesystem::remove_all(root);
    std::filesystem::create_directories(root);
    write_sample(root, s);
    Sample r = read_sample(root, "s000500");
    CHECK(r.caption == s.caption);
    Image q = s.image.quantized();
    CHECK(std::memcmp(r.image.data.data(), q.data.data(), q.data.size() * sizeof(float)) == 0);
    Image qt = s.texture.quantized();
    CHECK(std::memcmp(r.texture.data.data(), qt.data.data(), qt.data.size() * sizeof(float)) == 0);
    for (int k = 0; k < kNumKeypoints; ++k) {
        CHECK(r.keypoints[(size_t)k].x == s.keypoints[(size_t)k].x);
        CHECK(r.keypoints[(size_t)k].y == s.keypoints[(size_t)k].y);
    }
    // the stored mask is M_C; M is rebuilt as its bbox
    for (size_t i = 0; i < s.inpaint_mask.data.size(); ++i)
        CHECK(r.inpaint_mask.data[i] == s.inpaint_mask.data[i]);
}

// ---------------------------------------------------------------------------
// annotation pipeline
// ---------------------------------------------------------------------------

TEST_CASE("normalize_chunks: articles, plurals, specials, idempotence") {
    int dropped = 0;
    auto out = normalize_chunks({"a red dress", "striped dresses", "#cool top", "The Blue Tops",
                                 "walking jacket", "red dress"},
                                &dropped);
    REQUIRE(out.size() == 4);  // "a red dress" and "red dress" collapse
    CHECK(out[0].text == "red dress");
    CHECK(out[1].text == "striped dress");
    CHECK(out[2].text == "blue top");
    CHECK(out[3].text == "walk jacket");
    CHECK(dropped == 1);
    CHECK(out[0].category == ChunkCategory::kDresses);
    CHECK(out[2].category == ChunkCategory::kUpper);

    // idempotent
    std::vector<std::string> again;
    for (auto& c : out) again.push_back(c.text);
    auto twice = normalize_chunks(again);
    REQUIRE(twice.size() == out.size());
    for (size_t i = 0; i < out.size(); ++i) CHECK(twice[i].text == out[i].text);
}

TEST_CASE("lemmatizer keeps protected forms") {
    CHECK(lemmatize_word("dresses") == "dress");
    CHECK(lemmatize_word("striped") == "striped");
    CHECK(lemmatize_word("trousers") == "trousers");
    CHECK(lemmatize_word("red") == "red");
    CHECK(lemmatize_word("covered") == "cover");
    CHECK(lemmatize_word("tops") == "top");
}

namespace {

std::vector<NounChunk> numbered_chunks(int n) {
    std::vector<NounChunk> out;
    for (int i = 0; i < n; ++i) {
        char buf[8];
        snprintf(buf, sizeof buf, "c%02d", i);
        out.push_back(NounChunk{buf, ChunkCategory::kUpper});
    }
    return out;
}

}  // namespace

TEST_CASE("rank_chunks: disjoint top-5s, identical scorers, ties, shortfall") {
    Image img(3, 8, 8, 0.5f);
    auto chunks = numbered_chunks(40);

    // five scorers with disjoint top-5 blocks: scorer s ranks block s highest
    std::vector<ScorerFn> disjoint;
    for (int s = 0; s < 5; ++s)
        disjoint.push_back({"d" + std::to_string(s),
                            [s](const std::vector<float>&, const std::string& c) {
                                int idx = std::stoi(c.substr(1));
                                return idx / 5 == s ? 100.0 - idx % 5 : -(double)idx;
                            }});
    auto r = rank_chunks(img, chunks, disjoint);
    REQUIRE(r.chunks.size() == 25);
    CHECK(!r.shortfall);
    for (int s = 0; s < 5; ++s)
        for (int i = 0; i < 5; ++i) {
            char buf[8];
            snprintf(buf, sizeof buf, "c%02d", s * 5 + i);
            CHECK(r.chunks[(size_t)(s * 5 + i)] == buf);
        }

    // all scorers identical: the merge walks down to that scorer's top-25
    std::vector<ScorerFn> same(5, ScorerFn{"same", [](const std::vector<float>&, const std::string& c) {
                                               return -std::stoi(c.substr(1));
                                           }});
    auto r2 = rank_chunks(img, chunks, same);
    REQUIRE(r2.chunks.size() == 25);
    for (int i = 0; i < 25; ++i) {
        char buf[8];
        snprintf(buf, sizeof buf, "c%02d", i);
        CHECK(r2.chunks[(size_t)i] == buf);
    }

    // constant scores: lexicographic tie-break
    std::vector<ScorerFn> tied(5, ScorerFn{"tied", [](const std::vector<float>&, const std::string&) {
                                               return 1.0;
                                           }});
    auto r3 = rank_chunks(img, chunks, tied);
    REQUIRE(r3.chunks.size() == 25);
    CHECK(std::is_sorted(r3.chunks.begin(), r3.chunks.end()));

    // fewer than 25 distinct: return all, flag the shortfall
    auto r4 = rank_chunks(img, numbered_chunks(10), tied);
    CHECK(r4.chunks.size() == 10);
    CHECK(r4.shortfall);
}

TEST_CASE("rank_chunks on the real scorers is deterministic and 25 unique") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 600, cfg);
    auto chunks = normalize_chunks(build_chunk_pool());
    REQUIRE(chunks.size() >= 25);
    auto scorers = default_scorer_fns();
    auto a = rank_chunks(s.image, chunks, scorers);
    auto b = rank_chunks(s.image, chunks, scorers);
    REQUIRE(a.chunks.size() == 25);
    CHECK(a.chunks == b.chunks);
    std::set<std::string> uniq(a.chunks.begin(), a.chunks.end());
    CHECK(uniq.size() == 25);
}

TEST_CASE("sliding windows: 77-patch full mask, fallback, empty, exact copies") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 700, cfg);

    Image full(1, 96, 64, 1.f);
    auto r = sliding_window_textures(s.image, full, 16, 8, 8);
    CHECK(r.patches.size() == 77);
    CHECK(!r.fallback_used);

    // window content is an exact pixel copy
    auto [py, px] = r.positions[3];
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                CHECK(r.patches[3].at(c, y, x) == s.image.at(c, py + y, px + x));

    // mask smaller than 16x16 but at least 8x8 engages the fallback
    Image small(1, 96, 64, 0.f);
    for (int y = 10; y < 21; ++y)
        for (int x = 10; x < 21; ++x) small.at(0, y, x) = 1.f;
    auto rf = sliding_window_textures(s.image, small, 16, 8, 8);
    CHECK(rf.fallback_used);
    CHECK(rf.window == 8);
    CHECK(rf.patches.size() >= 1);

    Image empty(1, 96, 64, 0.f);
    auto re = sliding_window_textures(s.image, empty, 16, 8, 8);
    CHECK(re.empty);
    CHECK(re.patches.empty());
}

TEST_CASE("sliding window counts match a brute-force oracle on random masks") {
    Rng rng(99);
    Image img(3, 40, 32, 0.3f);
    for (int trial = 0; trial < 50; ++trial) {
        Image mask(1, 40, 32, 0.f);
        int rects = 1 + (int)rng.uniform_int(3);
        for (int r = 0; r < rects; ++r) {
            int y0 = (int)rng.uniform_int(30), x0 = (int)rng.uniform_int(24);
            int hh = 4 + (int)rng.uniform_int(20), ww = 4 + (int)rng.uniform_int(16);
            for (int y = y0; y < std::min(40, y0 + hh); ++y)
                for (int x = x0; x < std::min(32, x0 + ww); ++x) mask.at(0, y, x) = 1.f;
        }
        int window = 6 + (int)rng.uniform_int(6);
        int stride = 2 + (int)rng.uniform_int(4);

        // independent enumeration
        int expect = 0;
        for (int y = 0; y + window <= 40; y += stride)
            for (int x = 0; x + window <= 32; x += stride) {
                int covered = 0;
                for (int yy = 0; yy < window; ++yy)
                    for (int xx = 0; xx < window; ++xx) covered += mask.at(0, y + yy, x + xx) > 0.5f;
                if (covered == window * window) ++expect;
            }
        auto got = sliding_window_textures(img, mask, window, stride, 0);
        if (expect == 0)
            CHECK(got.empty);
        else
            CHECK((int)got.patches.size() == expect);
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

TEST_CASE("pose distance: identity, 3-4-5, confidence weighting, undefined case") {
    Image mask(1, 96, 64, 1.f);
    Skeleton real{}, gen{};
    for (int i = 0; i < kNumKeypoints; ++i) {
        real[(size_t)i] = Keypoint{(float)(10 + i), (float)(20 + i), 1.f, true};
        gen[(size_t)i] = real[(size_t)i];
    }
    auto same = pose_distance(real, gen, mask);
    REQUIRE(same.defined);
    CHECK(same.value == 0.0);

    // single in-mask keypoint, real (10,10) vs generated (13,14)
    Image one(1, 96, 64, 0.f);
    one.at(0, 10, 10) = 1.f;
    Skeleton r2{}, g2{};
    for (int i = 0; i < kNumKeypoints; ++i) {
        r2[(size_t)i] = Keypoint{50.f, 90.f, 1.f, true};  // outside the mask
        g2[(size_t)i] = r2[(size_t)i];
    }
    r2[0] = Keypoint{10.f, 10.f, 1.f, true};
    g2[0] = Keypoint{13.f, 14.f, 1.f, true};
    auto pd = pose_distance(r2, g2, one);
    REQUIRE(pd.defined);
    CHECK(pd.value == doctest::Approx(5.0).epsilon(1e-9));

    g2[0].confidence = 0.5f;
    auto weighted = pose_distance(r2, g2, one);
    CHECK(weighted.value == doctest::Approx(2.5).epsilon(1e-9));

    // missing generated keypoint contributes the penalty distance
    g2[0].present = false;
    auto missing = pose_distance(r2, g2, one);
    CHECK(missing.value == doctest::Approx(std::sqrt(96.0 * 96 + 64 * 64) / 4).epsilon(1e-9));

    Image nowhere(1, 96, 64, 0.f);
    auto undef = pose_distance(r2, g2, nowhere);
    CHECK(!undef.defined);
}

TEST_CASE("sketch distance: zero on self, formula, inverse-frequency weighting") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 800, cfg);

    // garment pasted on white compared against its own extraction
    Image pasted(3, 96, 64, 1.f);
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 64; ++x)
            if (s.garment_mask.at(0, y, x) > 0.5f)
                for (int c = 0; c < 3; ++c) pasted.at(c, y, x) = s.image.at(c, y, x);
    Image self_sketch = extract_sketch(pasted, s.garment_mask);
    auto zero = sketch_distance(self_sketch, pasted, s.garment_mask);
    REQUIRE(zero.defined);
    CHECK(zero.value == doctest::Approx(0.0).epsilon(1e-12));

    // the score is MSE / activated-pixel frequency
    auto sd = sketch_distance(s.sketch, s.image, s.garment_mask);
    Image regen = extract_sketch(pasted, s.garment_mask);
    double mse = 0;
    int active = 0;
    for (size_t i = 0; i < s.sketch.data.size(); ++i) {
        double d = (double)s.sketch.data[i] - regen.data[i];
        mse += d * d;
        active += s.sketch.data[i] > 0.1f;
    }
    mse /= (double)s.sketch.data.size();
    double freq = (double)active / (double)s.sketch.data.size();
    REQUIRE(sd.defined);
    CHECK(sd.value == doctest::Approx(mse / std::max(freq, 1e-4)).epsilon(1e-9));

    // same raw MSE at higher activation frequency scores lower
    Image white_garment(3, 96, 64, 1.f);
    Image sparse(1, 96, 64, 0.f), dense(1, 96, 64, 0.f);
    for (int i = 0; i < 96 * 64 / 10; ++i) sparse.data[(size_t)i * 10] = 0.5f;
    for (int i = 0; i < 96 * 64 * 2 / 5; ++i) dense.data[(size_t)i * 2] = 0.25f;
    Image full(1, 96, 64, 1.f);
    auto s_sparse = sketch_distance(sparse, white_garment, full);
    auto s_dense = sketch_distance(dense, white_garment, full);
    CHECK(s_dense.value < s_sparse.value);

    Image blank(1, 96, 64, 0.f);
    auto undef = sketch_distance(blank, s.image, s.garment_mask);
    CHECK(!undef.defined);
}

TEST_CASE("texture similarity: identity, separation, shift tolerance") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 900, cfg);

    // an exactly-square mask pins the crop, making self-similarity exact
    Image square(1, 96, 64, 0.f);
    for (int y = 30; y < 46; ++y)
        for (int x = 20; x < 36; ++x) square.at(0, y, x) = 1.f;
    Image patch(3, 16, 16);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) patch.at(c, y, x) = s.image.at(c, 30 + y, 20 + x);
    auto self = texture_similarity(patch, s.image, square);
    REQUIRE(self.defined);
    CHECK(self.value == doctest::Approx(1.0).epsilon(1e-6));

    // solid red vs solid blue separate clearly
    Image red(3, 96, 64, 0.f), blue(3, 96, 64, 0.f), redpatch(3, 16, 16, 0.f);
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 64; ++x) {
            red.at(0, y, x) = 0.8f;
            blue.at(2, y, x) = 0.8f;
        }
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) redpatch.at(0, y, x) = 0.8f;
    Image full(1, 96, 64, 1.f);
    auto rr = texture_similarity(redpatch, red, full);
    auto rb = texture_similarity(redpatch, blue, full);
    CHECK(rr.value > rb.value);
    CHECK(rb.value < 0.999);

    // periodic texture: descriptor tolerates translation by a period
    Image stripes(3, 96, 64, 0.f);
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 64; ++x) {
            float v = ((y / 4) % 2) ? 0.8f : 0.2f;
            stripes.at(0, y, x) = v;
            stripes.at(1, y, x) = v * 0.5f;
        }
    Image p1(3, 16, 16), p2(3, 16, 16);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                p1.at(c, y, x) = stripes.at(c, 20 + y, 20 + x);
                p2.at(c, y, x) = stripes.at(c, 28 + y, 20 + x);  // one period down
            }
    CHECK(cosine(image_descriptor(p1), image_descriptor(p2)) > 0.95);

    // no interior window even at the fallback size
    Image tiny(1, 96, 64, 0.f);
    tiny.at(0, 5, 5) = 1.f;
    auto undef = texture_similarity(patch, s.image, tiny);
    CHECK(!undef.defined);
}

TEST_CASE("caption agreement: fresh sample scores 1, gray garment fails, monotone") {
    GeneratorConfig cfg;
    Sample s = generate_sample(11, 1000, cfg);
    auto cas = caption_agreement(s.caption, s.image, s.inpaint_mask, s.keypoints);
    REQUIRE(cas.defined);
    CHECK(cas.value == 1.0);

    // solid-gray garment against "red striped dress": color and pattern fail
    Image gray = s.image;
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 64; ++x)
            if (s.garment_mask.at(0, y, x) > 0.5f)
                for (int c = 0; c < 3; ++c) gray.at(c, y, x) = 0.5f;
    auto low = caption_agreement("red striped dress", gray, s.inpaint_mask, s.keypoints);
    CHECK(low.value <= 1.0 / 3.0 + 1e-9);

    CHECK_THROWS_AS(caption_agreement("quantum entangled hat", s.image, s.inpaint_mask, s.keypoints),
                    std::invalid_argument);

    // satisfying strictly more attributes never lowers the score
    AttributeCheck a;
    a.total = 4;
    a.color = true;
    AttributeCheck b = a;
    b.pattern = true;
    CHECK(b.score() >= a.score());
    b.category = true;
    b.modifier = true;
    CHECK(b.score() == 1.0);
}

TEST_CASE("frechet distance: identity, mean-shift value, family separation") {
    GeneratorConfig cfg;
    std::vector<std::vector<float>> stripes_a, stripes_b, dots;
    for (uint64_t i = 0; i < 60; ++i) {
        Rng rng(3000 + i);
        SceneSpec spec = generate_scene(rng, cfg);
        spec.texture.family = PatternFamily::kStriped;
        Sample st = render_scene(spec, cfg);
        (i % 2 ? stripes_a : stripes_b).push_back(image_descriptor(st.image));
        spec.texture.family = PatternFamily::kDotted;
        Sample dt = render_scene(spec, cfg);
        if (i % 2) dots.push_back(image_descriptor(dt.image));
    }
    auto sa = FeatureStats::from(stripes_a);
    auto sb = FeatureStats::from(stripes_b);
    auto sd = FeatureStats::from(dots);

    CHECK(frechet_feature_distance(sa, sa) == doctest::Approx(0.0).epsilon(1e-6));

    // equal covariances, means differing by a norm-2 vector
    FeatureStats ma = sa, mb = sa;
    mb.mu[0] += 2.0;
    CHECK(frechet_feature_distance(ma, mb) == doctest::Approx(4.0).epsilon(1e-4));

    double within = frechet_feature_distance(sa, sb);
    double across = frechet_feature_distance(sa, sd);
    CHECK(across > within);

    // covariance symmetry
    for (int i = 0; i < sa.dim; ++i)
        for (int j = 0; j < sa.dim; ++j)
            CHECK(sa.sigma[(size_t)i * sa.dim + j] ==
                  doctest::Approx(sa.sigma[(size_t)j * sa.dim + i]).epsilon(1e-12));
}

TEST_CASE("kernel MMD separates families and stays near zero within one") {
    GeneratorConfig cfg;
    std::vector<std::vector<float>> a1, a2, b;
    for (uint64_t i = 0; i < 40; ++i) {
        Rng rng(4000 + i);
        SceneSpec spec = generate_scene(rng, cfg);
        spec.texture.family = PatternFamily::kCheckered;
        Sample sc = render_scene(spec, cfg);
        (i % 2 ? a1 : a2).push_back(image_descriptor(sc.image));
        if (i % 2) {
            spec.texture.family = PatternFamily::kPlain;
            b.push_back(image_descriptor(render_scene(spec, cfg).image));
        }
    }
    double same = kernel_mmd(a1, a2);
    double diff = kernel_mmd(a1, b);
    CHECK(diff > same);
    CHECK(std::abs(same) < 0.05);
    CHECK_THROWS_AS(kernel_mmd({{1.f}}, a1), std::invalid_argument);
}
