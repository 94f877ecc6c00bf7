// stitch: dataset generation, training, sampling and evaluation for the
// garment-inpainting latent diffusion pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "stitch/annotate.hpp"
#include "stitch/eval.hpp"
#include "stitch/model.hpp"
#include "stitch/parallel.hpp"
#include "stitch/train.hpp"
#include "stitch/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stitch;

namespace {

// exit codes: 0 ok, 2 usage/config, 3 missing file, 4 invalid routing,
// 5 corrupt checkpoint, 6 run directory busy, 7 training failure
enum ExitCode {
    kOk = 0,
    kUsage = 2,
    kMissingFile = 3,
    kBadRouting = 4,
    kBadCheckpoint = 5,
    kLocked = 6,
    kTrainingFailed = 7,
};

[[noreturn]] void fail(int code, const std::string& message) {
    json err = {{"error", {{"code", code}, {"message", message}}}};
    std::cerr << err.dump() << "\n";
    std::exit(code);
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) fail(kMissingFile, std::string(what) + " not found: " + path);
}

// A run directory is owned by one command at a time; a stale lock after a
// crash must be removed by hand.
struct RunLock {
    fs::path path;
    explicit RunLock(const fs::path& dir) : path(dir / ".lock") {
        fs::create_directories(dir);
        int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            fail(kLocked, "run directory is locked by another command (remove " + path.string() +
                              " if stale)");
        std::string pid = std::to_string((long)::getpid()) + "\n";
        ssize_t written = ::write(fd, pid.data(), pid.size());
        (void)written;
        ::close(fd);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path, ec);
    }
};

struct RunManifest {
    std::string command;
    json config_echo;
    uint64_t seed = 0;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void write(const fs::path& dir, const std::string& status) const {
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        json j = {{"command", command},
                  {"config", config_echo},
                  {"seed", seed},
                  {"git_describe", git_describe()},
                  {"wall_time_sec", wall},
                  {"status", status}};
        std::ofstream out(dir / "run_manifest.json");
        out << j.dump(2) << "\n";
    }
};

RunConfig load_config(const std::string& path) {
    try {
        return path.empty() ? RunConfig{} : RunConfig::load_file(path);
    } catch (const ConfigError& e) {
        fail(kUsage, e.what());
    }
}

std::string default_data_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    const char* env = std::getenv("STITCH_DATA_ROOT");
    if (env && *env) return env;
    fail(kUsage, "no dataset root: pass --data or set STITCH_DATA_ROOT");
}

std::unique_ptr<GarmentModel> load_model(const std::string& ckpt, bool force_config) {
    require_file(ckpt, "checkpoint");
    try {
        return GarmentModel::load(ckpt, force_config);
    } catch (const CheckpointError& e) {
        fail(kBadCheckpoint, e.what());
    } catch (const ConfigError& e) {
        fail(kUsage, e.what());
    }
}

std::vector<Image> texture_patches_of(const std::vector<Sample>& samples) {
    std::vector<Image> out;
    for (auto& s : samples) out.push_back(s.texture);
    return out;
}

std::vector<Image> images_of(const std::vector<Sample>& samples) {
    std::vector<Image> out;
    for (auto& s : samples) out.push_back(s.image);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"garment inpainting diffusion toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_flag, out_path, ckpt_path;
    bool force_config = false;

    // ---- datagen ----
    auto* datagen = app.add_subcommand("datagen", "generate the synthetic dataset");
    int dg_n = 1000;
    uint64_t dg_seed = 0;
    datagen->add_option("--n", dg_n, "number of samples");
    datagen->add_option("--seed", dg_seed, "master seed");
    datagen->add_option("--out", out_path, "dataset root directory")->required();
    datagen->add_option("--config", config_path, "run config JSON");

    // ---- annotate ----
    auto* annotate = app.add_subcommand("annotate", "noun-chunk and texture-window annotation");
    annotate->add_option("--data", data_flag, "dataset root");

    // ---- train-codec ----
    auto* traincodec = app.add_subcommand("train-codec", "train the latent codec");
    traincodec->add_option("--data", data_flag, "dataset root");
    traincodec->add_option("--config", config_path, "run config JSON");
    traincodec->add_option("--out", out_path, "output run directory")->required();

    // ---- pretrain-vision ----
    auto* trainvis = app.add_subcommand("pretrain-vision", "pretrain the texture patch encoder");
    trainvis->add_option("--data", data_flag, "dataset root");
    trainvis->add_option("--config", config_path, "run config JSON");
    trainvis->add_option("--out", out_path, "output run directory")->required();

    // ---- train ----
    auto* train = app.add_subcommand("train", "train the conditional denoiser");
    std::string codec_ckpt, vision_ckpt;
    int train_steps_override = -1;
    train->add_option("--data", data_flag, "dataset root");
    train->add_option("--config", config_path, "run config JSON");
    train->add_option("--codec", codec_ckpt, "codec checkpoint")->required();
    train->add_option("--vision", vision_ckpt, "vision checkpoint")->required();
    train->add_option("--steps", train_steps_override, "override train_steps");
    train->add_option("--out", out_path, "output run directory")->required();
    train->add_flag("--force-config", force_config, "load checkpoints across config hashes");

    // ---- sample ----
    auto* smp = app.add_subcommand("sample", "generate one inpainted image");
    std::string caption, texture_path, sketch_path, pose_path, person_id;
    double alpha = -1, sketch_rate = -1;
    int steps = -1;
    std::string routing;
    uint64_t sample_seed = 0;
    smp->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    smp->add_option("--data", data_flag, "dataset root (for the person record)");
    smp->add_option("--person", person_id, "person sample id")->required();
    smp->add_option("--caption", caption, "text condition");
    smp->add_option("--texture", texture_path, "texture patch PPM");
    smp->add_option("--sketch", sketch_path, "sketch PGM");
    smp->add_option("--pose", pose_path, "pose JSON (defaults to the person's)");
    smp->add_flag("--no-pose", "drop the pose condition");
    smp->add_option("--alpha", alpha, "guidance scale");
    smp->add_option("--steps", steps, "DDIM steps");
    smp->add_option("--sketch-rate", sketch_rate, "sketch conditioning rate");
    smp->add_option("--routing", routing, "cross-attention routing, e.g. \"tt xx\"");
    smp->add_option("--seed", sample_seed, "sampling seed");
    smp->add_option("--out", out_path, "output PPM path")->required();
    smp->add_flag("--force-config", force_config, "load checkpoints across config hashes");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "metric evaluation over the test split");
    std::string setting = "paired", metrics_flag = "pd,sd,ts,cas,fd,kid", modalities_flag;
    int limit = 0;
    uint64_t eval_seed = 0;
    eval->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    eval->add_option("--data", data_flag, "dataset root");
    eval->add_option("--setting", setting, "paired|unpaired")
        ->check(CLI::IsMember({"paired", "unpaired"}));
    eval->add_option("--metrics", metrics_flag, "comma list of pd,sd,ts,cas,fd,kid");
    eval->add_option("--modalities", modalities_flag, "comma list of text,pose,sketch,texture");
    eval->add_option("--limit", limit, "cap the number of test samples");
    eval->add_option("--routing", routing, "routing override");
    eval->add_option("--sketch-rate", sketch_rate, "sketch rate override");
    eval->add_option("--seed", eval_seed, "evaluation seed");
    eval->add_option("--out", out_path, "output run directory")->required();
    eval->add_flag("--force-config", force_config, "load checkpoints across config hashes");

    // ---- ablate ----
    auto* ablate = app.add_subcommand("ablate", "run a protocol preset");
    std::string preset;
    int ablate_limit = 0, ablate_steps = -1;
    bool dry_run = false;
    ablate->add_option("--preset", preset, "modalities|sketch-rate|routing|uncond")->required();
    ablate->add_option("--ckpt", ckpt_path, "model checkpoint (eval presets)");
    ablate->add_option("--data", data_flag, "dataset root");
    ablate->add_option("--config", config_path, "run config JSON");
    ablate->add_option("--limit", ablate_limit, "cap the number of test samples");
    ablate->add_option("--steps", ablate_steps, "training steps override (uncond preset)");
    ablate->add_option("--codec", codec_ckpt, "codec checkpoint (uncond preset)");
    ablate->add_option("--vision", vision_ckpt, "vision checkpoint (uncond preset)");
    ablate->add_flag("--dry-run", dry_run, "write the grid definition only");
    ablate->add_option("--out", out_path, "output run directory")->required();
    ablate->add_flag("--force-config", force_config, "load checkpoints across config hashes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::stringstream ss;
        ss << e.what();
        fail(kUsage, ss.str());
    }

    try {
        if (datagen->parsed()) {
            RunConfig cfg = load_config(config_path);
            ThreadPool::set_threads(cfg.threads);
            RunLock lock(out_path);
            RunManifest manifest{"datagen", json::parse(cfg.to_json()), dg_seed};
            GeneratorConfig gc;
            gc.h = cfg.image_h;
            gc.w = cfg.image_w;
            generate_dataset(out_path, dg_n, dg_seed, cfg.train_frac, cfg.val_frac, gc);
            Vocabulary::standard().save((fs::path(out_path) / "vocab.txt").string());
            manifest.write(out_path, "ok");
            return kOk;
        }

        if (annotate->parsed()) {
            std::string root = default_data_root(data_flag);
            require_file(root + "/manifest.jsonl", "dataset manifest");
            AnnotateReport rep = annotate_dataset(root);
            std::cout << "annotated " << rep.samples << " samples (" << rep.shortfalls
                      << " shortfalls, " << rep.fallback_patches << " fallback windows)\n";
            return kOk;
        }

        if (traincodec->parsed()) {
            RunConfig cfg = load_config(config_path);
            ThreadPool::set_threads(cfg.threads);
            std::string root = default_data_root(data_flag);
            require_file(root + "/manifest.jsonl", "dataset manifest");
            RunLock lock(out_path);
            RunManifest manifest{"train-codec", json::parse(cfg.to_json()), cfg.seed};
            DatasetManifest dm = DatasetManifest::load(root + "/manifest.jsonl");
            auto train_imgs = images_of(load_split(root, dm, "train"));
            auto val_imgs = images_of(load_split(root, dm, "val"));
            if (val_imgs.empty()) val_imgs = train_imgs;

            GarmentModel model(cfg);
            std::ofstream log(fs::path(out_path) / "train_log.jsonl");
            CodecTrainResult res = train_codec(model.codec, train_imgs, val_imgs, cfg.codec_steps,
                                               cfg.codec_batch, cfg.codec_lr, cfg.seed, &log);
            Checkpoint ck;
            ck.config_hash = cfg.hash();
            ck.meta["latent_scale"] = std::to_string(model.codec.latent_scale());
            ck.meta["val_psnr"] = std::to_string(res.final_val_psnr);
            ck.add_store(model.codec.params(), "codec.");
            ck.save((fs::path(out_path) / "codec.ckpt").string());
            std::cout << "codec val PSNR " << res.final_val_psnr << " dB (from "
                      << res.init_val_psnr << ")\n";
            manifest.write(out_path, "ok");
            return kOk;
        }

        if (trainvis->parsed()) {
            RunConfig cfg = load_config(config_path);
            ThreadPool::set_threads(cfg.threads);
            std::string root = default_data_root(data_flag);
            require_file(root + "/manifest.jsonl", "dataset manifest");
            RunLock lock(out_path);
            RunManifest manifest{"pretrain-vision", json::parse(cfg.to_json()), cfg.seed};
            DatasetManifest dm = DatasetManifest::load(root + "/manifest.jsonl");
            auto patches = texture_patches_of(load_split(root, dm, "train"));

            GarmentModel model(cfg);
            std::ofstream log(fs::path(out_path) / "train_log.jsonl");
            pretrain_vision(*model.vision, model.vision_params, patches, cfg.vision_steps, 32,
                            cfg.vision_lr, cfg.seed, &log);
            Checkpoint ck;
            ck.config_hash = cfg.hash();
            ck.add_store(model.vision_params, "vision.");
            ck.save((fs::path(out_path) / "vision.ckpt").string());
            manifest.write(out_path, "ok");
            return kOk;
        }

        if (train->parsed()) {
            RunConfig cfg = load_config(config_path);
            if (train_steps_override >= 0) cfg.train_steps = train_steps_override;
            ThreadPool::set_threads(cfg.threads);
            std::string root = default_data_root(data_flag);
            require_file(root + "/manifest.jsonl", "dataset manifest");
            require_file(codec_ckpt, "codec checkpoint");
            require_file(vision_ckpt, "vision checkpoint");
            RunLock lock(out_path);
            RunManifest manifest{"train", json::parse(cfg.to_json()), cfg.seed};

            GarmentModel model(cfg);
            try {
                model.load_codec(codec_ckpt, force_config);
                model.load_vision(vision_ckpt, force_config);
            } catch (const CheckpointError& e) {
                fail(kBadCheckpoint, e.what());
            }
            model.codec.freeze();
            model.vision_params.freeze();

            DatasetManifest dm = DatasetManifest::load(root + "/manifest.jsonl");
            auto train_samples = load_split(root, dm, "train");
            auto val_samples = load_split(root, dm, "val");
            std::vector<PreparedSample> train_prep, val_prep;
            for (auto& s : train_samples) train_prep.push_back(prepare_training_sample(model, s));
            for (auto& s : val_samples) val_prep.push_back(prepare_training_sample(model, s));

            std::ofstream log(fs::path(out_path) / "train_log.jsonl");
            DiffusionTrainResult res =
                train_diffusion(model, train_prep, val_prep, cfg.train_steps, &log);
            model.save((fs::path(out_path) / "model.ckpt").string());
            std::cout << "val loss " << res.init_val_loss << " -> " << res.final_val_loss << "\n";
            manifest.write(out_path, "ok");
            return kOk;
        }

        if (smp->parsed()) {
            if (!routing.empty()) {
                try {
                    RoutingTable::parse(routing);
                } catch (const ConfigError& e) {
                    fail(kBadRouting, e.what());
                }
            }
            auto model = load_model(ckpt_path, force_config);
            RunConfig cfg = model->cfg;
            std::string root = default_data_root(data_flag);
            require_file(root + "/" + person_id, "person sample");
            Sample person = read_sample(root, person_id);

            Sample donor = person;
            if (!caption.empty()) donor.caption = caption;
            if (!texture_path.empty()) {
                require_file(texture_path, "texture patch");
                donor.texture = read_ppm(texture_path);
            }
            if (!sketch_path.empty()) {
                require_file(sketch_path, "sketch");
                donor.sketch = read_pgm(sketch_path);
            }
            if (!pose_path.empty()) {
                require_file(pose_path, "pose");
                std::ifstream pf(pose_path);
                json pose = json::parse(pf);
                for (int i = 0; i < kNumKeypoints; ++i) {
                    person.keypoints[(size_t)i].x = pose.at((size_t)i).at(0).get<float>();
                    person.keypoints[(size_t)i].y = pose.at((size_t)i).at(1).get<float>();
                    person.keypoints[(size_t)i].confidence = pose.at((size_t)i).at(2).get<float>();
                }
            }

            GarmentModel::ConditionChoice choice;
            choice.text = !caption.empty();
            choice.texture = !texture_path.empty();
            choice.sketch = !sketch_path.empty();
            choice.pose = smp->count("--no-pose") == 0;

            SamplerConfig scfg = SamplerConfig::from_run(cfg);
            if (alpha >= 0) scfg.guidance = alpha;
            if (steps > 0) scfg.steps = steps;
            if (sketch_rate >= 0) scfg.sketch_rate = sketch_rate;
            if (!routing.empty()) scfg.routing = RoutingTable::parse(routing);
            scfg.seed = sample_seed;

            SampleConditions conds = model->prepare_conditions(person, donor, choice);
            Image out = sample(model->unet, model->codec, conds, scfg, model->schedule);
            write_ppm(out_path, out);
            return kOk;
        }

        if (eval->parsed()) {
            auto model = load_model(ckpt_path, force_config);
            std::string root = default_data_root(data_flag);
            require_file(root + "/manifest.jsonl", "dataset manifest");
            RunLock lock(out_path);
            RunManifest manifest{"eval", json::parse(model->cfg.to_json()), eval_seed};
            DatasetManifest dm = DatasetManifest::load(root + "/manifest.jsonl");

            EvalSettings settings;
            settings.setting = setting;
            settings.sampler = SamplerConfig::from_run(model->cfg);
            settings.sampler.seed = eval_seed;
            settings.limit = limit;
            if (sketch_rate >= 0) settings.sampler.sketch_rate = sketch_rate;
            if (!routing.empty()) {
                try {
                    settings.sampler.routing = RoutingTable::parse(routing);
                } catch (const ConfigError& e) {
                    fail(kBadRouting, e.what());
                }
            }
            settings.metrics.clear();
            std::stringstream ms(metrics_flag);
            std::string item;
            while (std::getline(ms, item, ',')) settings.metrics.insert(item);
            if (!modalities_flag.empty()) {
                settings.modalities = {false, false, false, false};
                std::stringstream mods(modalities_flag);
                while (std::getline(mods, item, ',')) {
                    if (item == "text") settings.modalities.text = true;
                    else if (item == "texture") settings.modalities.texture = true;
                    else if (item == "pose") settings.modalities.pose = true;
                    else if (item == "sketch") settings.modalities.sketch = true;
                    else fail(kUsage, "unknown modality: " + item);
                }
            }

            EvalReport report = run_eval(*model, root, dm, settings);
            report.save((fs::path(out_path) / "report.json").string(), settings, model->cfg);
            std::cout << "pd " << report.pd_mean << " sd " << report.sd_mean << " ts "
                      << report.ts_mean << " cas " << report.cas_mean << "\n";
            manifest.write(out_path, "ok");
            return kOk;
        }

        if (ablate->parsed()) {
            RunConfig cfg = load_config(config_path);
            std::vector<AblationRow> rows;
            try {
                rows = ablation_grid(preset, cfg);
            } catch (const std::invalid_argument& e) {
                fail(kUsage, e.what());
            }
            RunLock lock(out_path);
            RunManifest manifest{"ablate", json::parse(cfg.to_json()), cfg.seed};

            json grid = json::array();
            for (auto& row : rows) {
                grid.push_back({{"name", row.name},
                                {"setting", row.settings.setting},
                                {"modalities",
                                 {{"text", row.settings.modalities.text},
                                  {"texture", row.settings.modalities.texture},
                                  {"pose", row.settings.modalities.pose},
                                  {"sketch", row.settings.modalities.sketch}}},
                                {"sketch_rate", row.settings.sampler.sketch_rate},
                                {"routing", row.settings.sampler.routing.str()},
                                {"needs_training", row.needs_training},
                                {"uncond_prob", row.uncond_prob}});
            }
            std::ofstream gridf(fs::path(out_path) / "grid.json");
            gridf << grid.dump(2) << "\n";
            if (dry_run) {
                manifest.write(out_path, "ok");
                return kOk;
            }

            std::string root = default_data_root(data_flag);
            DatasetManifest dm = DatasetManifest::load(root + "/manifest.jsonl");
            json results = json::array();
            for (auto& row : rows) {
                EvalSettings settings = row.settings;
                settings.limit = ablate_limit;
                std::unique_ptr<GarmentModel> model;
                if (row.needs_training) {
                    require_file(codec_ckpt, "codec checkpoint");
                    require_file(vision_ckpt, "vision checkpoint");
                    RunConfig row_cfg = cfg;
                    row_cfg.uncond_prob = row.uncond_prob;
                    if (ablate_steps >= 0) row_cfg.train_steps = ablate_steps;
                    model = std::make_unique<GarmentModel>(row_cfg);
                    model->load_codec(codec_ckpt, true);
                    model->load_vision(vision_ckpt, true);
                    model->codec.freeze();
                    model->vision_params.freeze();
                    auto train_samples = load_split(root, dm, "train");
                    auto val_samples = load_split(root, dm, "val");
                    std::vector<PreparedSample> train_prep, val_prep;
                    for (auto& s : train_samples)
                        train_prep.push_back(prepare_training_sample(*model, s));
                    for (auto& s : val_samples) val_prep.push_back(prepare_training_sample(*model, s));
                    train_diffusion(*model, train_prep, val_prep, row_cfg.train_steps, nullptr);
                } else {
                    model = load_model(ckpt_path, force_config);
                }
                EvalReport rep = run_eval(*model, root, dm, settings);
                results.push_back({{"name", row.name},
                                   {"pd", rep.pd_mean},
                                   {"sd", rep.sd_mean},
                                   {"ts", rep.ts_mean},
                                   {"cas", rep.cas_mean},
                                   {"fd", rep.fd},
                                   {"kid", rep.kid}});
                std::cout << row.name << ": pd " << rep.pd_mean << " sd " << rep.sd_mean << " ts "
                          << rep.ts_mean << " cas " << rep.cas_mean << "\n";
            }
            std::ofstream resf(fs::path(out_path) / "results.json");
            resf << results.dump(2) << "\n";
            manifest.write(out_path, "ok");
            return kOk;
        }
    } catch (const TrainingError& e) {
        fail(kTrainingFailed, e.what());
    } catch (const CheckpointError& e) {
        fail(kBadCheckpoint, e.what());
    } catch (const ConfigError& e) {
        fail(kUsage, e.what());
    } catch (const std::exception& e) {
        fail(kUsage, e.what());
    }
    return kOk;
}
