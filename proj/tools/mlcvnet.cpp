// Command-line front end: synth, train, detect, eval, ablate, gradcheck, bench.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mlcvnet/ablation.hpp"
#include "mlcvnet/checkpoint.hpp"
#include "mlcvnet/config.hpp"
#include "mlcvnet/data.hpp"
#include "mlcvnet/detector.hpp"
#include "mlcvnet/eval.hpp"
#include "mlcvnet/gradcheck.hpp"
#include "mlcvnet/runtime.hpp"
#include "mlcvnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace mlcvnet;

namespace {

// Runtime failure that should exit with status 2 (as opposed to bad arguments).
struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

RunConfig read_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

std::vector<double> parse_thresholds(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        double v;
        if (!detail::parse_double(item, v) || !(v > 0.0 && v <= 1.0))
            throw std::invalid_argument("--iou: bad threshold '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw std::invalid_argument("--iou: no thresholds given");
    return out;
}

void write_jsonl(std::ofstream& os, const EpochMetrics& m) {
    os << to_json(m).dump() << '\n';
    os.flush();
}

std::string eval_table(const EvalResult& r, const std::vector<std::string>& names) {
    std::string s = "IoU    ";
    char buf[64];
    for (const auto& n : names) {
        std::snprintf(buf, sizeof buf, " %9s", n.c_str());
        s += buf;
    }
    s += "       mAP\n";
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
        std::snprintf(buf, sizeof buf, "%-7.2f", r.thresholds[t]);
        s += buf;
        for (std::size_t c = 0; c < names.size(); ++c) {
            if (std::isnan(r.ap[t][c])) std::snprintf(buf, sizeof buf, " %9s", "-");
            else std::snprintf(buf, sizeof buf, " %9.2f", 100.0 * r.ap[t][c]);
            s += buf;
        }
        std::snprintf(buf, sizeof buf, " %9.2f\n", 100.0 * r.map[t]);
        s += buf;
    }
    return s;
}

int cmd_synth(std::uint64_t seed, std::size_t count, const std::string& out, const std::string& config) {
    const auto cfg = read_config(config);
    const auto names = class_names(cfg.scene.classes);
    for (std::size_t i = 0; i < count; ++i) {
        const auto scene = generate_scene(seed + i, cfg.scene);
        save_scene(out, scene, names);
    }
    std::cout << "wrote " << count << " scenes to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& config, std::optional<std::uint64_t> seed,
              std::optional<std::size_t> epochs, const std::string& val, std::string log_path) {
    auto cfg = read_config(config);
    if (seed) {
        cfg.train.seed = *seed;
        cfg.model.init_seed = *seed;
    }
    if (epochs) cfg.train.epochs = *epochs;
    const auto scenes = load_scene_dir(data, cfg.model.class_names);
    if (scenes.empty()) throw std::invalid_argument("train: no scenes in " + data);
    std::vector<Scene> held_out;
    if (!val.empty()) held_out = load_scene_dir(val, cfg.model.class_names);
    if (log_path.empty()) log_path = out + ".metrics.jsonl";
    std::ofstream log(log_path);
    if (!log) throw Failure("cannot write " + log_path);

    Detector model(cfg.model);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = train(model, scenes, cfg.train, held_out, [&](const EpochMetrics& m) {
        write_jsonl(log, m);
        std::printf("epoch %3zu  loss %.4f  lr %.5f%s\n", m.epoch, m.total_loss, m.lr,
                    m.map25 ? (" mAP@0.25 " + std::to_string(*m.map25)).c_str() : "");
        std::fflush(stdout);
    });
    save_checkpoint(out, make_checkpoint(model));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (result.diverged) {
        std::cerr << "training diverged (" << result.divergence << "); wrote last good checkpoint to " << out << "\n";
        return 2;
    }
    std::printf("trained %zu epochs in %.1f s; checkpoint %s, metrics %s\n", cfg.train.epochs, secs, out.c_str(),
                log_path.c_str());
    return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& in, const std::string& out, std::optional<double> objectness,
               std::optional<double> nms) {
    Detector model = model_from_checkpoint(load_checkpoint(ckpt));
    const auto cloud = load_ply(in);
    DetectOptions opt;
    opt.objectness_threshold = objectness;
    opt.nms_iou = nms;
    const auto dets = model.detect(cloud, opt);
    save_detections_json(out, fs::path(in).stem().string(), dets, model.config().class_names);
    std::cout << dets.size() << " detections written to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& dets_dir, const std::string& gt_dir, const std::string& iou, const std::string& report,
             const std::string& config) {
    const auto thresholds = parse_thresholds(iou);
    const auto cfg = read_config(config);
    const auto& names = cfg.model.class_names;
    std::vector<SceneTruth> truths;
    for (const auto& f : json_files(gt_dir)) {
        auto s = load_scene_json(f, names);
        truths.push_back({s.scene_id, s.gt});
    }
    std::vector<SceneDetections> dets;
    for (const auto& f : json_files(dets_dir)) {
        auto d = load_detections_json(f, names);
        dets.push_back({d.scene_id, d.detections});
    }
    const auto result = evaluate(dets, truths, thresholds, names.size());
    std::ofstream os(report);
    if (!os) throw Failure("cannot write " + report);
    os << to_json(result, names).dump(2) << '\n';
    std::cout << eval_table(result, names);
    return 0;
}

// Held-out scenes: --val when given, otherwise the last fifth of --data.
std::pair<std::vector<Scene>, std::vector<Scene>> split_scenes(std::vector<Scene> scenes, const std::vector<Scene>& val) {
    if (!val.empty()) return {std::move(scenes), val};
    if (scenes.size() < 2) throw std::invalid_argument("ablate: need at least 2 scenes to hold some out");
    const std::size_t held = std::max<std::size_t>(1, scenes.size() / 5);
    std::vector<Scene> tail(scenes.end() - static_cast<std::ptrdiff_t>(held), scenes.end());
    scenes.resize(scenes.size() - held);
    return {std::move(scenes), std::move(tail)};
}

int cmd_ablate(const std::string& data, const std::string& out, const std::string& config,
               std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs, const std::string& val) {
    auto cfg = read_config(config);
    if (seed) {
        cfg.train.seed = *seed;
        cfg.model.init_seed = *seed;
    }
    if (epochs) cfg.train.epochs = *epochs;
    std::vector<Scene> val_scenes;
    if (!val.empty()) val_scenes = load_scene_dir(val, cfg.model.class_names);
    auto [train_set, held_out] = split_scenes(load_scene_dir(data, cfg.model.class_names), val_scenes);
    fs::create_directories(out);
    auto slug = [](std::string s) {
        for (auto& ch : s)
            if (ch == '+') ch = '_';
        return s;
    };
    std::ofstream log;
    const auto rows = run_ablation(
        cfg.model, cfg.train, train_set, held_out,
        [&](const AblationRow& row, Detector& model) {
            save_checkpoint(fs::path(out) / (slug(row.variant.name) + ".ckpt"), make_checkpoint(model));
            std::printf("%-14s mAP@0.25 %.4f  mAP@0.5 %.4f  (%.0f s)\n", row.variant.name.c_str(), row.map25, row.map50,
                        row.seconds);
            std::fflush(stdout);
        },
        [&](const AblationVariant& v, const EpochMetrics& m) {
            if (m.epoch == 1) log = std::ofstream(fs::path(out) / (slug(v.name) + ".metrics.jsonl"));
            write_jsonl(log, m);
        });
    {
        std::ofstream os(fs::path(out) / "ablation.json");
        os << ablation_json(rows).dump(2) << '\n';
    }
    const auto table = ablation_table(rows);
    {
        std::ofstream os(fs::path(out) / "ablation.txt");
        os << table;
    }
    std::cout << table;
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    bool ok = true;
    for (const auto& c : run_gradient_suite(seed)) {
        std::printf("%-5s %-22s max rel err %.3e  (tol %.0e)\n", c.passed() ? "ok" : "FAIL", c.name.c_str(), c.error,
                    c.tolerance);
        ok = ok && c.passed();
    }
    return ok ? 0 : 2;
}

template <class F>
double time_ms(F&& f, int reps) {
    f();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) f();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
}

int cmd_bench(std::uint64_t seed, const std::string& config) {
    const auto cfg = read_config(config);
    Detector model(cfg.model);
    const auto scene = generate_scene(seed, cfg.scene);
    Rng rng(seed);
    nlohmann::json out;
    {
        NoGradGuard no_grad;
        out["seed_extraction_ms"] = time_ms([&] { model.backbone().extract(scene.cloud, Mode::eval); }, 5);
        const std::size_t m = cfg.model.backbone.seed_count(), d = cfg.model.seed_width();
        const Tensor f = detail::uniform_tensor({m, d}, rng);
        CgnlBlock block(d, cfg.model.attention_groups, rng);
        out["attention_ms"] = time_ms([&] { block.forward(f); }, 20);
        out["detect_ms"] = time_ms([&] { model.detect(scene.cloud); }, 3);
    }
    {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<Detection> dets;
        for (int i = 0; i < 256; ++i)
            dets.push_back({OrientedBox3D::make({4 * u(rng), 4 * u(rng), 0.5}, {0.3 + u(rng), 0.3 + u(rng), 0.8},
                                                6.0 * u(rng)),
                            static_cast<std::size_t>(i % 3), u(rng)});
        out["iou_us"] = 1000.0 * time_ms([&] {
                            volatile double s = 0;
                            for (std::size_t i = 1; i < dets.size(); ++i) s = s + box_iou_3d(dets[i - 1].box, dets[i].box);
                        },
                                         20) /
                        static_cast<double>(dets.size() - 1);
        out["nms_256_ms"] = time_ms([&] { nms_3d(dets, 0.25); }, 20);
    }
    std::cout << out.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"MLCVNet-style 3D object detection on synthetic point clouds"};
    app.require_subcommand(1);

    std::string config;
    auto add_config = [&](CLI::App* c) { c->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile); };

    std::uint64_t synth_seed = 0;
    std::size_t synth_count = 0;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "generate synthetic scenes as PLY + JSON pairs");
    synth->add_option("--seed", synth_seed, "first scene seed")->required();
    synth->add_option("--count", synth_count, "number of scenes")->required();
    synth->add_option("--out", synth_out, "output directory")->required();
    add_config(synth);

    std::string data, out, val, log_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    auto* trn = app.add_subcommand("train", "train a detector; writes a checkpoint and a JSONL metric log");
    trn->add_option("--data", data, "scene directory")->required();
    trn->add_option("--out", out, "checkpoint path")->required();
    trn->add_option("--seed", seed, "seed for initialization and shuffling");
    trn->add_option("--epochs", epochs, "number of epochs");
    trn->add_option("--val", val, "held-out scene directory for periodic mAP@0.25");
    trn->add_option("--log", log_path, "metric log path (default: <out>.metrics.jsonl)");
    add_config(trn);

    std::string ckpt, in;
    std::optional<double> objectness, nms;
    auto* det = app.add_subcommand("detect", "run the detector on one PLY cloud");
    det->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    det->add_option("--in", in, "input PLY")->required()->check(CLI::ExistingFile);
    det->add_option("--out", out, "output detections JSON")->required();
    det->add_option("--objectness", objectness, "objectness threshold");
    det->add_option("--nms", nms, "NMS IoU threshold");

    std::string dets_dir, gt_dir, iou = "0.25,0.5", report;
    auto* ev = app.add_subcommand("eval", "mAP of a detections directory against ground truth");
    ev->add_option("--dets", dets_dir, "directory of detection JSON files")->required();
    ev->add_option("--gt", gt_dir, "directory of scene JSON files")->required();
    ev->add_option("--iou", iou, "comma-separated IoU thresholds");
    ev->add_option("--report", report, "report JSON path")->required();
    add_config(ev);

    auto* abl = app.add_subcommand("ablate", "train baseline, +PPC, +PPC+OOC and full variants and compare");
    abl->add_option("--data", data, "scene directory")->required();
    abl->add_option("--out", out, "output directory")->required();
    abl->add_option("--seed", seed, "seed for initialization and shuffling");
    abl->add_option("--epochs", epochs, "number of epochs");
    abl->add_option("--val", val, "held-out scene directory (default: last fifth of --data)");
    add_config(abl);

    std::uint64_t check_seed = 7;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable stage");
    gc->add_option("--seed", check_seed, "seed for the random probes");

    std::uint64_t bench_seed = 0;
    auto* bench = app.add_subcommand("bench", "time seed extraction, attention, IoU and NMS; prints JSON");
    bench->add_option("--seed", bench_seed, "scene seed");
    add_config(bench);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth) return cmd_synth(synth_seed, synth_count, synth_out, config);
        if (*trn) return cmd_train(data, out, config, seed, epochs, val, log_path);
        if (*det) return cmd_detect(ckpt, in, out, objectness, nms);
        if (*ev) return cmd_eval(dets_dir, gt_dir, iou, report, config);
        if (*abl) return cmd_ablate(data, out, config, seed, epochs, val);
        if (*gc) return cmd_gradcheck(check_seed);
        if (*bench) return cmd_bench(bench_seed, config);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
