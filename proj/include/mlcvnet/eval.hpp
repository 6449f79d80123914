#pragma once

// Average precision over rotated 3D boxes, pooled across scenes per class.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "geom.hpp"

namespace mlcvnet {

struct SceneDetections {
    std::string scene_id;
    std::vector<Detection> detections;
};

struct SceneTruth {
    std::string scene_id;
    std::vector<LabeledBox> gt;
};

namespace detail {
// Descending score; equal scores keep input order.
inline std::vector<std::size_t> score_order(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}
}  // namespace detail

/// TP flags aligned with `dets`. Detections are visited by descending score;
/// each takes the unmatched same-class gt of highest IoU (lowest index on
/// ties) and is a TP iff that IoU reaches the threshold.
inline std::vector<bool> match_detections(std::span<const Detection> dets, std::span<const LabeledBox> gts,
                                          double iou_threshold) {
    std::vector<double> scores;
    for (const auto& d : dets) scores.push_back(d.score);
    std::vector<bool> flags(dets.size(), false), used(gts.size(), false);
    for (std::size_t i : detail::score_order(scores)) {
        double best = -1.0;
        std::size_t best_j = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (used[j] || gts[j].class_id != dets[i].class_id) continue;
            const double iou = box_iou_3d(dets[i].box, gts[j].box);
            if (iou > best) {
                best = iou;
                best_j = j;
            }
        }
        if (best_j < gts.size() && best >= iou_threshold) {
            used[best_j] = true;
            flags[i] = true;
        }
    }
    return flags;
}

/// All-point interpolated AP. Returns 0 when num_gt is 0; callers exclude
/// such classes from the mean.
inline double average_precision(const std::vector<bool>& flags, std::span<const double> scores, std::size_t num_gt) {
    if (flags.size() != scores.size()) throw std::invalid_argument("average_precision: flags and scores differ in length");
    if (num_gt == 0) return 0.0;
    const auto order = detail::score_order(scores);
    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (flags[order[k]]) ++tp;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    }
    for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < recall.size(); ++k) {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    return ap;
}

struct MatchRecord {
    std::size_t scene = 0, detection = 0, class_id = 0;
    double score = 0.0;
    bool true_positive = false;
};

struct EvalResult {
    std::vector<double> thresholds;
    std::vector<std::size_t> num_gt;          // per class
    std::vector<std::vector<double>> ap;      // [threshold][class]; NaN when the class has no gt
    std::vector<double> map;                  // per threshold, over classes with gt
    std::vector<std::vector<MatchRecord>> matches;  // per threshold
};

/// Detections are matched within their scene, then pooled per class across
/// scenes. Scenes without a detection entry count as having none.
inline EvalResult evaluate(std::span<const SceneDetections> dets, std::span<const SceneTruth> truths,
                           std::vector<double> thresholds, std::size_t num_classes) {
    std::map<std::string, std::size_t> truth_index;
    for (std::size_t s = 0; s < truths.size(); ++s) {
        if (!truth_index.emplace(truths[s].scene_id, s).second)
            throw std::invalid_argument("evaluate: duplicate ground-truth scene " + truths[s].scene_id);
        for (const auto& g : truths[s].gt)
            if (g.class_id >= num_classes)
                throw std::invalid_argument("evaluate: unknown class id " + std::to_string(g.class_id));
    }
    std::vector<const SceneDetections*> by_scene(truths.size(), nullptr);
    for (const auto& d : dets) {
        auto it = truth_index.find(d.scene_id);
        if (it == truth_index.end()) throw std::invalid_argument("evaluate: detections for unknown scene " + d.scene_id);
        if (by_scene[it->second]) throw std::invalid_argument("evaluate: duplicate detections for scene " + d.scene_id);
        by_scene[it->second] = &d;
        for (const auto& det : d.detections)
            if (det.class_id >= num_classes)
                throw std::invalid_argument("evaluate: unknown class id " + std::to_string(det.class_id));
    }

    EvalResult r;
    r.thresholds = std::move(thresholds);
    r.num_gt.assign(num_classes, 0);
    for (const auto& t : truths)
        for (const auto& g : t.gt) ++r.num_gt[g.class_id];

    for (double th : r.thresholds) {
        std::vector<MatchRecord> records;
        for (std::size_t s = 0; s < truths.size(); ++s) {
            if (!by_scene[s]) continue;
            const auto& ds = by_scene[s]->detections;
            const auto flags = match_detections(ds, truths[s].gt, th);
            for (std::size_t i = 0; i < ds.size(); ++i)
                records.push_back({s, i, ds[i].class_id, ds[i].score, flags[i]});
        }
        std::vector<double> ap(num_classes, std::nan(""));
        double sum = 0.0;
        std::size_t counted = 0;
        for (std::size_t c = 0; c < num_classes; ++c) {
            if (r.num_gt[c] == 0) continue;
            std::vector<bool> flags;
            std::vector<double> scores;
            for (const auto& m : records)
                if (m.class_id == c) {
                    flags.push_back(m.true_positive);
                    scores.push_back(m.score);
                }
            ap[c] = average_precision(flags, scores, r.num_gt[c]);
            sum += ap[c];
            ++counted;
        }
        r.ap.push_back(std::move(ap));
        r.map.push_back(counted ? sum / static_cast<double>(counted) : 0.0);
        r.matches.push_back(std::move(records));
    }
    return r;
}

inline nlohmann::json to_json(const EvalResult& r, const std::vector<std::string>& class_names) {
    nlohmann::json thresholds = nlohmann::json::array();
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
        nlohmann::json per_class = nlohmann::json::object();
        for (std::size_t c = 0; c < r.num_gt.size(); ++c)
            per_class[class_names.at(c)] = std::isnan(r.ap[t][c]) ? nlohmann::json(nullptr) : nlohmann::json(r.ap[t][c]);
        thresholds.push_back({{"iou", r.thresholds[t]}, {"ap", per_class}, {"map", r.map[t]}});
    }
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t c = 0; c < r.num_gt.size(); ++c) counts[class_names.at(c)] = r.num_gt[c];
    return {{"num_gt", counts}, {"results", thresholds}};
}

}  // namespace mlcvnet
