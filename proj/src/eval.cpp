#include "stitch/eval.hpp"

#include <fstream>
#include <thread>

#include <json.hpp>

#include "stitch/parallel.hpp"

namespace stitch {

using nlohmann::json;

EvalReport run_eval(const GarmentModel& model, const std::string& root,
                    const DatasetManifest& manifest, const EvalSettings& settings) {
    auto entries = manifest.split("test");
    if (settings.limit > 0 && (int)entries.size() > settings.limit)
        entries.resize((size_t)settings.limit);
    if (entries.empty()) throw std::invalid_argument("eval: empty test split");

    bool unpaired = settings.setting == "unpaired";
    if (unpaired)
        for (auto* e : entries)
            if (e->donor.empty())
                throw std::invalid_argument("eval: unpaired setting needs the derangement manifest");

    EvalReport report;
    report.rows.resize(entries.size());
    std::vector<std::vector<float>> real_desc(entries.size()), gen_desc(entries.size());

    int n_threads = std::max(1, settings.threads);
    std::atomic<size_t> next{0};
    auto worker = [&] {
        ThreadPool::set_inline_ops(true);
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= entries.size()) break;
            Sample person = read_sample(root, entries[i]->id);
            Sample donor = unpaired ? read_sample(root, entries[i]->donor) : person;

            SampleConditions conds = model.prepare_conditions(person, donor, settings.modalities);
            SamplerConfig scfg = settings.sampler;
            scfg.seed = settings.sampler.seed * 1000003ULL + i;
            Image out = sample(model.unet, model.codec, conds, scfg, model.schedule);

            EvalRow& row = report.rows[i];
            row.id = person.id;
            row.donor = donor.id;
            if (settings.metrics.count("pd"))
                row.pd = pose_distance(person.keypoints, detect_keypoints(out), person.inpaint_mask);
            if (settings.metrics.count("sd"))
                row.sd = sketch_distance(donor.sketch, out, person.garment_mask);
            if (settings.metrics.count("ts"))
                row.ts = texture_similarity(donor.texture, out, person.garment_mask);
            if (settings.metrics.count("cas"))
                row.cas = caption_agreement(donor.caption, out, person.inpaint_mask, person.keypoints);
            real_desc[i] = image_descriptor(person.image);
            gen_desc[i] = image_descriptor(out);
        }
        ThreadPool::set_inline_ops(false);
    };
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads - 1; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();

    auto accumulate = [](double& mean, int& n, int& excluded, const MetricValue& v) {
        if (v.defined) {
            mean += v.value;
            ++n;
        } else {
            ++excluded;
        }
    };
    for (auto& row : report.rows) {
        accumulate(report.pd_mean, report.pd_n, report.pd_excluded, row.pd);
        accumulate(report.sd_mean, report.sd_n, report.sd_excluded, row.sd);
        accumulate(report.ts_mean, report.ts_n, report.ts_excluded, row.ts);
        accumulate(report.cas_mean, report.cas_n, report.cas_excluded, row.cas);
    }
    if (report.pd_n) report.pd_mean /= report.pd_n;
    if (report.sd_n) report.sd_mean /= report.sd_n;
    if (report.ts_n) report.ts_mean /= report.ts_n;
    if (report.cas_n) report.cas_mean /= report.cas_n;

    if ((settings.metrics.count("fd") || settings.metrics.count("kid")) && entries.size() >= 2) {
        report.has_fd = true;
        auto real_stats = FeatureStats::from(real_desc);
        auto gen_stats = FeatureStats::from(gen_desc);
        report.fd = frechet_feature_distance(real_stats, gen_stats, &report.fd_regularized);
        report.kid = kernel_mmd(real_desc, gen_desc);
    }
    return report;
}

std::string EvalReport::to_json(const EvalSettings& settings, const RunConfig& cfg) const {
    json rows_json = json::array();
    auto metric_json = [](const MetricValue& v) {
        json j;
        j["defined"] = v.defined;
        if (v.defined) j["value"] = v.value;
        if (!v.flag.empty()) j["flag"] = v.flag;
        return j;
    };
    for (auto& r : rows) {
        rows_json.push_back({{"id", r.id},
                             {"donor", r.donor},
                             {"pd", metric_json(r.pd)},
                             {"sd", metric_json(r.sd)},
                             {"ts", metric_json(r.ts)},
                             {"cas", metric_json(r.cas)}});
    }
    json j;
    j["setting"] = settings.setting;
    j["modalities"] = {{"text", settings.modalities.text},
                       {"texture", settings.modalities.texture},
                       {"pose", settings.modalities.pose},
                       {"sketch", settings.modalities.sketch}};
    j["sampler"] = {{"steps", settings.sampler.steps},
                    {"guidance", settings.sampler.guidance},
                    {"sketch_rate", settings.sampler.sketch_rate},
                    {"routing", settings.sampler.routing.str()},
                    {"seed", settings.sampler.seed}};
    j["config"] = json::parse(cfg.to_json());
    j["aggregate"] = {{"n", rows.size()},
                      {"pd_mean", pd_mean},   {"pd_n", pd_n},   {"pd_excluded", pd_excluded},
                      {"sd_mean", sd_mean},   {"sd_n", sd_n},   {"sd_excluded", sd_excluded},
                      {"ts_mean", ts_mean},   {"ts_n", ts_n},   {"ts_excluded", ts_excluded},
                      {"cas_mean", cas_mean}, {"cas_n", cas_n}, {"cas_excluded", cas_excluded}};
    if (has_fd) {
        j["aggregate"]["fd"] = fd;
        j["aggregate"]["kid"] = kid;
        j["aggregate"]["fd_regularized"] = fd_regularized;
    }
    j["per_sample"] = rows_json;
    return j.dump(2);
}

void EvalReport::save(const std::string& path, const EvalSettings& settings,
                      const RunConfig& cfg) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write eval report: " + path);
    out << to_json(settings, cfg) << "\n";
}

const std::vector<std::string>& routing_ablation_tables() {
    static const std::vector<std::string> tables = {
        "xxxx",  // texture on all four groups
        "txxx",  // texture on groups 1..3
        "ttxx",  // texture on groups 2,3 (default split)
        "tttx",  // texture on group 3 only
        "tttt",  // text everywhere
        "xttt",  // texture on group 0 only
        "xxtt",  // texture on groups 0,1
        "xxxt",  // texture on groups 0..2
    };
    return tables;
}

std::vector<AblationRow> ablation_grid(const std::string& preset, const RunConfig& cfg) {
    std::vector<AblationRow> rows;
    EvalSettings base;
    base.setting = "unpaired";
    base.sampler = SamplerConfig::from_run(cfg);

    if (preset == "modalities") {
        struct M {
            const char* name;
            bool text, pose, sketch, texture;
        };
        for (M m : {M{"text", true, false, false, false}, M{"text+pose", true, true, false, false},
                    M{"text+pose+sketch", true, true, true, false},
                    M{"text+pose+sketch+texture", true, true, true, true}}) {
            AblationRow row;
            row.name = m.name;
            row.settings = base;
            row.settings.modalities = {m.text, m.texture, m.pose, m.sketch};
            rows.push_back(row);
        }
    } else if (preset == "sketch-rate") {
        for (double rate : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
            AblationRow row;
            row.name = "rho=" + std::to_string(rate).substr(0, 3);
            row.settings = base;
            row.settings.sampler.sketch_rate = rate;
            rows.push_back(row);
        }
    } else if (preset == "routing") {
        for (const std::string& table : routing_ablation_tables()) {
            AblationRow row;
            row.name = "routing=" + table;
            row.settings = base;
            row.settings.sampler.routing = RoutingTable::parse(table);
            rows.push_back(row);
        }
    } else if (preset == "uncond") {
        for (double p : {0.1, 0.2, 0.3}) {
            AblationRow row;
            row.name = "uncond=" + std::to_string(p).substr(0, 3);
            row.settings = base;
            row.needs_training = true;
            row.uncond_prob = p;
            rows.push_back(row);
        }
    } else {
        throw std::invalid_argument("unknown ablation preset: " + preset);
    }
    return rows;
}

}  // namespace stitch
