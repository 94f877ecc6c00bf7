#pragma once

#include <set>

#include "stitch/metrics.hpp"
#include "stitch/model.hpp"
#include "stitch/train.hpp"

namespace stitch {

struct EvalSettings {
    std::string setting = "paired";  // paired | unpaired
    GarmentModel::ConditionChoice modalities;
    SamplerConfig sampler;
    int limit = 0;  // 0 = full test split
    std::set<std::string> metrics = {"pd", "sd", "ts", "cas", "fd", "kid"};
    int threads = 2;
};

struct EvalRow {
    std::string id, donor;
    MetricValue pd, sd, ts, cas;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double pd_mean = 0, sd_mean = 0, ts_mean = 0, cas_mean = 0;
    int pd_n = 0, sd_n = 0, ts_n = 0, cas_n = 0;
    int pd_excluded = 0, sd_excluded = 0, ts_excluded = 0, cas_excluded = 0;
    double fd = 0, kid = 0;
    bool fd_regularized = false;
    bool has_fd = false;

    std::string to_json(const EvalSettings& settings, const RunConfig& cfg) const;
    void save(const std::string& path, const EvalSettings& settings, const RunConfig& cfg) const;
};

// Samples the model over the test split (person + paired/unpaired donor
// conditions) and scores every requested metric. Per-sample work runs on a
// small pool; sample seeds derive from (settings seed, sample index) so the
// result is order- and thread-count-independent.
EvalReport run_eval(const GarmentModel& model, const std::string& root,
                    const DatasetManifest& manifest, const EvalSettings& settings);

struct AblationRow {
    std::string name;
    EvalSettings settings;
    bool needs_training = false;
    double uncond_prob = 0;  // for the uncond preset
};

// The protocol grids: modalities, sketch-rate, routing (8 tables), uncond.
std::vector<AblationRow> ablation_grid(const std::string& preset, const RunConfig& cfg);

// Group->stream tables of the routing ablation, texture groups growing
// 4,3,2,1,0 then the inner-group variants.
const std::vector<std::string>& routing_ablation_tables();

}  // namespace stitch
