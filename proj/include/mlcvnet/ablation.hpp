#pragma once

// Four-variant context-module ablation: baseline, +PPC, +PPC+OOC, full.

#include <chrono>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "detector.hpp"
#include "eval.hpp"
#include "trainer.hpp"

namespace mlcvnet {

struct AblationVariant {
    std::string name;
    bool ppc = false, ooc = false, gsc = false;
};

inline std::vector<AblationVariant> ablation_variants() {
    return {{"baseline", false, false, false},
            {"+PPC", true, false, false},
            {"+PPC+OOC", true, true, false},
            {"+PPC+OOC+GSC", true, true, true}};
}

struct AblationRow {
    AblationVariant variant;
    double map25 = 0.0, map50 = 0.0;
    double first_loss = 0.0, final_loss = 0.0;
    double seconds = 0.0;
    bool diverged = false;
    std::vector<EpochMetrics> log;
};

/// Trains every variant from the same seeds; modules shared between variants
/// start from identical weights.
inline std::vector<AblationRow> run_ablation(
    const ModelConfig& base, const TrainConfig& train_cfg, std::span<const Scene> train_set,
    std::span<const Scene> held_out,
    const std::function<void(const AblationRow&, Detector&)>& on_variant = {},
    const std::function<void(const AblationVariant&, const EpochMetrics&)>& on_epoch = {}) {
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        ModelConfig cfg = base;
        cfg.use_ppc = v.ppc;
        cfg.use_ooc = v.ooc;
        cfg.use_gsc = v.gsc;
        Detector model(cfg);
        AblationRow row;
        row.variant = v;
        const auto t0 = std::chrono::steady_clock::now();
        auto result = train(model, train_set, train_cfg, {}, [&](const EpochMetrics& m) {
            if (on_epoch) on_epoch(v, m);
        });
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        row.diverged = result.diverged;
        row.log = result.log;
        if (!row.log.empty()) {
            row.first_loss = row.log.front().total_loss;
            row.final_loss = row.log.back().total_loss;
        }
        const auto res = evaluate(detect_all(model, held_out), truths_of(held_out), {0.25, 0.5}, cfg.num_classes());
        row.map25 = res.map[0];
        row.map50 = res.map[1];
        rows.push_back(row);
        if (on_variant) on_variant(rows.back(), model);
    }
    return rows;
}

inline nlohmann::json ablation_json(std::span<const AblationRow> rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
        out.push_back({{"variant", r.variant.name},
                       {"ppc", r.variant.ppc},
                       {"ooc", r.variant.ooc},
                       {"gsc", r.variant.gsc},
                       {"map25", r.map25},
                       {"map50", r.map50},
                       {"first_epoch_loss", r.first_loss},
                       {"final_loss", r.final_loss},
                       {"train_seconds", r.seconds},
                       {"diverged", r.diverged}});
    return {{"variants", out}};
}

/// Plain-text table: one row per variant with module check marks and mAP.
inline std::string ablation_table(std::span<const AblationRow> rows) {
    std::string s = "variant          PPC  OOC  GSC  mAP@0.25  mAP@0.5\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-16s %-4s %-4s %-4s %8.4f  %7.4f%s\n", r.variant.name.c_str(),
                      r.variant.ppc ? "x" : "", r.variant.ooc ? "x" : "", r.variant.gsc ? "x" : "", r.map25, r.map50,
                      r.diverged ? "  (diverged)" : "");
        s += buf;
    }
    return s;
}

}  // namespace mlcvnet
