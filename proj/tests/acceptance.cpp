// Acceptance run: one PASS/FAIL line per criterion. Arguments select
// criteria by number (default: all). Criteria 5 and 6 share one four-variant
// training run whose full variant is the end-to-end model.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "mlcvnet/ablation.hpp"
#include "mlcvnet/checkpoint.hpp"
#include "mlcvnet/gradcheck.hpp"
#include "mlcvnet/runtime.hpp"
#include "oracles.hpp"

using namespace mlcvnet;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kTrainScenes = 200;
constexpr std::size_t kHeldOutScenes = 50;
constexpr std::uint64_t kHeldOutSeed = 100000;

int failures = 0;

void report(int id, bool ok, const std::string& what) {
    std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", id, what.c_str());
    std::fflush(stdout);
    failures += !ok;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// --- 1 ---------------------------------------------------------------------

void gradient_suite() {
    const auto t0 = Clock::now();
    const auto cases = run_gradient_suite();
    const double secs = seconds_since(t0);
    bool ok = secs < 300.0;
    std::string detail;
    for (const auto& c : cases) {
        ok = ok && c.passed();
        detail += fmt(" %s=%.1e/%.0e", c.name.c_str(), c.error, c.tolerance);
    }
    report(1, ok, fmt("%zu finite-difference checks,%s; %.1f s (limit 300 s)", cases.size(), detail.c_str(), secs));
}

// --- 2 ---------------------------------------------------------------------

void attention_exactness() {
    Rng rng(2024);
    std::uniform_int_distribution<std::size_t> rows(1, 16), width(1, 32);
    double worst = 0.0;
    bool equivariant = true, identity = true;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = width(rng), r = rows(rng);
        std::vector<std::size_t> divisors;
        for (std::size_t g = 1; g <= d; ++g)
            if (d % g == 0) divisors.push_back(g);
        const std::size_t groups = divisors[static_cast<std::size_t>(trial) % divisors.size()];

        CgnlBlock fresh(d, groups, rng);
        const Tensor a = detail::uniform_tensor({r, d}, rng, -3.0, 3.0);
        identity = identity && fresh.forward(a).values() == a.values();

        CgnlBlock b(d, groups, rng);
        b.z() = detail::uniform_tensor({d, d}, rng);
        const auto want = oracle::dense_cgnl(oracle::to_mat(a), oracle::to_mat(b.theta()), oracle::to_mat(b.phi()),
                                             oracle::to_mat(b.g()), oracle::to_mat(b.z()), groups);
        const Tensor got = b.forward(a);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(got(i, j) - want[i][j]));

        std::vector<std::size_t> p(r);
        std::iota(p.begin(), p.end(), std::size_t{0});
        std::shuffle(p.begin(), p.end(), rng);
        equivariant = equivariant && b.forward(gather_rows(a, p)).values() == gather_rows(got, p).values();
    }
    report(2, worst < 1e-9 && equivariant && identity,
           fmt("50 instances: max |compact - dense| %.2e (limit 1e-9); permutation %s; zero-init identity %s", worst,
               equivariant ? "exact" : "BROKEN", identity ? "exact" : "BROKEN"));
}

// --- 3 ---------------------------------------------------------------------

void geometry_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(33);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto [a, b] = oracle::random_box_pair(rng);
        worst = std::max(worst, std::abs(box_iou_3d(a, b) - oracle::monte_carlo_iou(a, b, 1'000'000, rng)));
    }
    std::size_t fps_mismatch = 0;
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 300; ++trial) {
        const auto n = static_cast<std::size_t>(2 + trial % 63);
        Points p(static_cast<Eigen::Index>(n), 3);
        for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) = Vec3(u(rng), u(rng), u(rng)).transpose();
        if (trial % 5 == 0) p.row(p.rows() - 1) = p.row(0);  // duplicate point
        const std::size_t k = 1 + static_cast<std::size_t>(trial) % n, start = static_cast<std::size_t>(trial * 7) % n;
        fps_mismatch += farthest_point_sample(p, k, start) != oracle::brute_force_fps(p, k, start);
    }
    const double secs = seconds_since(t0);
    report(3, worst < 2e-3 && fps_mismatch == 0 && secs < 600.0,
           fmt("1000 pairs x 1e6 samples: max |iou - mc| %.2e (limit 2e-3); FPS mismatches %zu/300; %.0f s (limit 600 s)",
               worst, fps_mismatch, secs));
}

// --- 4 ---------------------------------------------------------------------

void ablation_identity() {
    auto full_cfg = ModelConfig::desk();
    auto base_cfg = full_cfg;
    base_cfg.use_ppc = base_cfg.use_ooc = base_cfg.use_gsc = false;
    Detector full(full_cfg), base(base_cfg);
    NoGradGuard no_grad;
    std::size_t identical = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto scene = generate_scene(7000 + s, SceneConfig{});
        const auto a = full.forward(scene.cloud, Mode::eval), b = base.forward(scene.cloud, Mode::eval);
        const auto da = full.detect(scene.cloud), db = base.detect(scene.cloud);
        bool same = a.proposals.values() == b.proposals.values() && a.centers.values() == b.centers.values() &&
                    da.size() == db.size();
        for (std::size_t i = 0; same && i < da.size(); ++i)
            same = da[i].score == db[i].score && da[i].class_id == db[i].class_id && da[i].box.center == db[i].box.center &&
                   da[i].box.size == db[i].box.size && da[i].box.yaw == db[i].box.yaw;
        identical += same;
    }
    report(4, identical == 10, fmt("%zu/10 scenes bit-identical between full (identity init) and baseline", identical));
}

// --- 5, 6 ------------------------------------------------------------------

std::vector<AblationRow> train_variants() {
    const SceneConfig sc;
    std::vector<Scene> train_set, held_out;
    for (std::size_t i = 0; i < kTrainScenes; ++i) train_set.push_back(generate_scene(i, sc));
    for (std::size_t i = 0; i < kHeldOutScenes; ++i) held_out.push_back(generate_scene(kHeldOutSeed + i, sc));
    TrainConfig tc;
    tc.map_every = 0;
    return run_ablation(ModelConfig::desk(), tc, train_set, held_out, {},
                        [](const AblationVariant& v, const EpochMetrics& m) {
                            std::printf("  %-14s epoch %2zu  loss %.4f\n", v.name.c_str(), m.epoch, m.total_loss);
                            std::fflush(stdout);
                        });
}

void end_to_end(const AblationRow& full) {
    const double ratio = full.first_loss > 0 ? full.final_loss / full.first_loss : INFINITY;
    report(5, !full.diverged && full.seconds < 3600.0 && ratio < 0.25 && full.map25 >= 0.75,
           fmt("%zu epochs in %.0f s (limit 3600 s); loss %.4f -> %.4f, ratio %.3f (limit 0.25); held-out mAP@0.25 %.4f "
               "(min 0.75)%s",
               full.log.size(), full.seconds, full.first_loss, full.final_loss, ratio, full.map25,
               full.diverged ? "; DIVERGED" : ""));
}

void ablation_trend(const std::vector<AblationRow>& rows) {
    std::printf("%s", ablation_table(rows).c_str());
    const auto& base = rows.front();
    const auto& full = rows.back();
    report(6, rows.size() == 4 && full.map25 >= base.map25 - 0.02,
           fmt("full mAP@0.25 %.4f vs baseline %.4f (allowed drop 0.02)", full.map25, base.map25));
}

// --- 7 ---------------------------------------------------------------------

void eval_harness(const std::vector<AblationRow>& rows) {
    double worst = 0.0;
    bool monotone = true;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto fx = oracle::noisy_fixture(seed);
        const auto r = evaluate(fx.dets, fx.truths, {0.25, 0.5}, 3);
        monotone = monotone && r.map[1] <= r.map[0];
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t c = 0; c < 3; ++c) {
                const double want = oracle::oracle_ap(fx.raw_dets, fx.raw_gts, c, r.thresholds[t]);
                if (std::isnan(want) != std::isnan(r.ap[t][c])) worst = INFINITY;
                else if (!std::isnan(want)) worst = std::max(worst, std::abs(want - r.ap[t][c]));
            }
    }
    // [FP, TP] in score order: precision 1/2 at full recall.
    const std::vector<SceneTruth> truth{{"s", {{OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0), 0}}}};
    const std::vector<SceneDetections> dets{
        {"s", {{OrientedBox3D::make({5, 0, 0}, {1, 1, 1}, 0), 0, 0.9}, {OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0), 0, 0.8}}}};
    const double hand = evaluate(dets, truth, {0.25}, 1).ap[0][0];
    worst = std::max(worst, std::abs(hand - 0.5));
    for (const auto& row : rows) monotone = monotone && row.map50 <= row.map25;
    report(7, worst < 1e-9 && monotone,
           fmt("20 fixtures + hand case: max |ap - oracle| %.2e (limit 1e-9); mAP@0.5 <= mAP@0.25 on %zu runs: %s", worst,
               20 + rows.size(), monotone ? "yes" : "NO"));
}

// --- 8 ---------------------------------------------------------------------

template <class E, class F>
bool throws(F&& f) {
    try {
        f();
    } catch (const E&) {
        return true;
    } catch (...) {
        return false;
    }
    return false;
}

void persistence() {
    std::vector<std::string> problems;
    const Detector model(ModelConfig::desk());
    const std::string bytes = encode_checkpoint(make_checkpoint(model));
    const Detector back = model_from_checkpoint(decode_checkpoint(bytes));
    const auto pa = model.parameters(), pb = back.parameters();
    bool same = pa.size() == pb.size();
    for (std::size_t i = 0; same && i < pa.size(); ++i) same = pa[i].tensor.values() == pb[i].tensor.values();
    if (!same || encode_checkpoint(make_checkpoint(back)) != bytes) problems.push_back("checkpoint not bit-exact");

    const auto scene = generate_scene(42, SceneConfig{});
    std::stringstream ply;
    write_ply(ply, scene.cloud);
    const double ply_err = (read_ply(ply).xyz - scene.cloud.xyz).cwiseAbs().maxCoeff();
    if (!(ply_err <= 1e-12)) problems.push_back(fmt("PLY error %.2e", ply_err));
    const auto names = class_names(default_object_classes());
    const auto js = scene_from_json(nlohmann::json::parse(scene_json(scene, names).dump()), names);
    double json_err = js.gt.size() == scene.gt.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < js.gt.size() && i < scene.gt.size(); ++i)
        json_err = std::max({json_err, (js.gt[i].box.center - scene.gt[i].box.center).cwiseAbs().maxCoeff(),
                             (js.gt[i].box.size - scene.gt[i].box.size).cwiseAbs().maxCoeff(),
                             std::abs(js.gt[i].box.yaw - scene.gt[i].box.yaw)});
    if (!(json_err <= 1e-12)) problems.push_back(fmt("JSON error %.2e", json_err));

    std::string bad = bytes;
    bad[0] = 'X';
    if (!throws<UnsupportedFormatError>([&] { decode_checkpoint(bad); })) problems.push_back("bad magic");
    bad = bytes;
    bad[4] = 7;
    if (!throws<UnsupportedFormatError>([&] { decode_checkpoint(bad); })) problems.push_back("bad version");
    if (!throws<CorruptCheckpointError>([&] { decode_checkpoint(bytes.substr(0, bytes.size() / 2)); }))
        problems.push_back("truncated checkpoint");
    if (!throws<CorruptCheckpointError>([&] { decode_checkpoint(bytes + "x"); })) problems.push_back("trailing bytes");
    std::size_t ply_line = 0;
    try {
        std::istringstream is("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                              "property float z\nend_header\n0 0 0\n");
        read_ply(is);
    } catch (const ParseError& e) {
        ply_line = e.line();
    }
    if (ply_line != 9) problems.push_back("truncated PLY not reported at line 9");
    if (!throws<ParseError>([&] {
            scene_from_json(nlohmann::json::parse(R"({"scene_id":"a","objects":[{"class":"chair","center":[0,0,0],"yaw":0}]})"),
                            names);
        }))
        problems.push_back("scene JSON without size accepted");

    std::string detail = fmt("checkpoint %zu bytes bit-exact, PLY err %.1e, JSON err %.1e, 6 corruption cases", bytes.size(),
                             ply_err, json_err);
    for (const auto& p : problems) detail += "; " + p;
    report(8, problems.empty(), detail);
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    std::set<int> want;
    for (int i = 1; i < argc; ++i) want.insert(std::atoi(argv[i]));
    const auto on = [&](int id) { return want.empty() || want.count(id) > 0; };

    try {
        if (on(1)) gradient_suite();
        if (on(2)) attention_exactness();
        if (on(3)) geometry_oracle();
        if (on(4)) ablation_identity();
        std::vector<AblationRow> rows;
        if (on(5) || on(6)) {
            rows = train_variants();
            if (on(5)) end_to_end(rows.back());
            if (on(6)) ablation_trend(rows);
        }
        if (on(7)) eval_harness(rows);
        if (on(8)) persistence();
    } catch (const std::exception& e) {
        std::printf("[FAIL] aborted: %s\n", e.what());
        return 2;
    }
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
