#include "stitch/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace stitch {

using nlohmann::json;

Stream RoutingTable::at(int group) const {
    if (group < 0 || group > 3) throw ConfigError("routing group out of range: " + std::to_string(group));
    return streams[(size_t)group];
}

RoutingTable RoutingTable::parse(const std::string& s) {
    std::string flat;
    for (char c : s)
        if (c != ' ') flat.push_back(c);
    if (flat.size() != 4)
        throw ConfigError("routing string must name 4 groups (t/x), got \"" + s + "\"");
    RoutingTable t;
    for (int g = 0; g < 4; ++g) {
        char c = flat[(size_t)g];
        if (c == 't')
            t.streams[(size_t)g] = Stream::kText;
        else if (c == 'x')
            t.streams[(size_t)g] = Stream::kTexture;
        else
            throw ConfigError("routing characters must be 't' or 'x', got \"" + s + "\"");
    }
    return t;
}

std::string RoutingTable::str() const {
    std::string s;
    for (auto st : streams) s.push_back(st == Stream::kText ? 't' : 'x');
    return s;
}

namespace {

// One row per config field keeps serialization, strict parsing and default
// handling in a single table.
struct Field {
    const char* name;
    enum Kind { kInt, kDouble, kU64, kString, kIntVec } kind;
    size_t offset;
};

#define F(member, kind) Field{#member, Field::kind, offsetof(RunConfig, member)}

const Field kFields[] = {
    F(seed, kU64),
    F(threads, kInt),
    F(image_h, kInt),
    F(image_w, kInt),
    F(downsample_factor, kInt),
    F(latent_channels, kInt),
    F(train_frac, kDouble),
    F(val_frac, kDouble),
    F(codec_base_width, kInt),
    F(codec_steps, kInt),
    F(codec_lr, kDouble),
    F(codec_batch, kInt),
    F(vision_width, kInt),
    F(vision_steps, kInt),
    F(vision_lr, kDouble),
    F(d_ctx, kInt),
    F(text_len, kInt),
    F(n_pte, kInt),
    F(tt_layers, kInt),
    F(tt_heads, kInt),
    F(adapter_dropout, kDouble),
    F(unet_widths, kIntVec),
    F(unet_heads, kInt),
    F(temb_dim, kInt),
    F(temb_hidden, kInt),
    F(norm_groups, kInt),
    F(diffusion_T, kInt),
    F(beta_start, kDouble),
    F(beta_end, kDouble),
    F(train_steps, kInt),
    F(batch_size, kInt),
    F(lr, kDouble),
    F(weight_decay, kDouble),
    F(warmup_steps, kInt),
    F(uncond_prob, kDouble),
    F(text_stream_prob, kDouble),
    F(ddim_steps, kInt),
    F(guidance, kDouble),
    F(sketch_rate, kDouble),
    F(routing, kString),
    F(paper_lr, kDouble),
    F(paper_weight_decay, kDouble),
    F(paper_warmup_steps, kInt),
    F(paper_batch_size, kInt),
    F(paper_train_steps, kInt),
    F(paper_image_h, kInt),
    F(paper_image_w, kInt),
    F(paper_downsample_factor, kInt),
};

#undef F

template <typename T>
T* field_ptr(RunConfig& c, const Field& f) {
    return reinterpret_cast<T*>(reinterpret_cast<char*>(&c) + f.offset);
}
template <typename T>
const T* field_ptr(const RunConfig& c, const Field& f) {
    return reinterpret_cast<const T*>(reinterpret_cast<const char*>(&c) + f.offset);
}

}  // namespace

void RunConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (image_h <= 0 || image_w <= 0) fail("image size must be positive");
    if (downsample_factor <= 0 || image_h % downsample_factor || image_w % downsample_factor)
        fail("image size must be divisible by downsample_factor");
    if (latent_channels != 4) fail("latent_channels is fixed at 4");
    if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac >= 1)
        fail("train/val fractions must leave room for a test split");
    if (unet_widths.size() != 4) fail("unet_widths must list 4 levels");
    for (int w : unet_widths)
        if (w <= 0 || w % unet_heads || w % norm_groups)
            fail("unet widths must be positive multiples of unet_heads and norm_groups");
    if (d_ctx % tt_heads) fail("d_ctx must be divisible by tt_heads");
    if (diffusion_T < 1) fail("diffusion_T must be >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        fail("betas must satisfy 0 < beta_start <= beta_end < 1");
    if (ddim_steps < 1 || ddim_steps > diffusion_T) fail("ddim_steps must be in [1, diffusion_T]");
    if (sketch_rate < 0 || sketch_rate > 1) fail("sketch_rate must be in [0,1]");
    if (uncond_prob < 0 || uncond_prob >= 1) fail("uncond_prob must be in [0,1)");
    if (text_stream_prob < 0 || text_stream_prob > 1) fail("text_stream_prob must be in [0,1]");
    if (adapter_dropout < 0 || adapter_dropout >= 1) fail("adapter_dropout must be in [0,1)");
    if (batch_size < 1 || train_steps < 0 || warmup_steps < 0) fail("bad training sizes");
    if (text_len < 3) fail("text_len must fit start/end markers");
    RoutingTable::parse(routing);
    int h = latent_h(), w = latent_w();
    if ((h % 8) || (w % 8)) fail("latent dims must support 3 halvings (multiple of 8)");
}

std::string RunConfig::to_json() const {
    json j;
    for (const Field& f : kFields) {
        switch (f.kind) {
            case Field::kInt: j[f.name] = *field_ptr<int>(*this, f); break;
            case Field::kDouble: j[f.name] = *field_ptr<double>(*this, f); break;
            case Field::kU64: j[f.name] = *field_ptr<uint64_t>(*this, f); break;
            case Field::kString: j[f.name] = *field_ptr<std::string>(*this, f); break;
            case Field::kIntVec: j[f.name] = *field_ptr<std::vector<int>>(*this, f); break;
        }
    }
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const Field* match = nullptr;
        for (const Field& f : kFields)
            if (it.key() == f.name) {
                match = &f;
                break;
            }
        if (!match) throw ConfigError("unknown config key: " + it.key());
        try {
            switch (match->kind) {
                case Field::kInt: *field_ptr<int>(c, *match) = it.value().get<int>(); break;
                case Field::kDouble: *field_ptr<double>(c, *match) = it.value().get<double>(); break;
                case Field::kU64: *field_ptr<uint64_t>(c, *match) = it.value().get<uint64_t>(); break;
                case Field::kString:
                    *field_ptr<std::string>(c, *match) = it.value().get<std::string>();
                    break;
                case Field::kIntVec:
                    *field_ptr<std::vector<int>>(c, *match) = it.value().get<std::vector<int>>();
                    break;
            }
        } catch (const json::exception& e) {
            throw ConfigError("bad value for config key " + it.key() + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void RunConfig::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file: " + path);
    out << to_json() << "\n";
}

std::string RunConfig::hash() const {
    std::string s = to_json();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
    return buf;
}

}  // namespace stitch
