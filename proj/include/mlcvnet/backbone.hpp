#pragma once

// PointNet++-style seed extractor: a stack of set-abstraction layers followed
// by feature-propagation layers back up to the seed level.

#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "geom.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace mlcvnet {

struct SALayerConfig {
    std::size_t num_centers = 0;
    double radius = 0.0;
    std::size_t max_samples = 0;
    std::vector<std::size_t> mlp;
};

struct BackboneConfig {
    std::size_t num_points = 2048;  // input is resampled to this size
    std::size_t min_points = 64;    // smaller clouds are rejected
    std::vector<SALayerConfig> sa;
    std::vector<std::vector<std::size_t>> fp;

    /// 2048 -> 1024 -> 512 -> 256 centers, two propagation layers back to 1024 seeds of width 256.
    static BackboneConfig votenet() {
        BackboneConfig c;
        c.num_points = 2048;
        c.sa = {{2048, 0.2, 64, {64, 64, 128}},
                {1024, 0.4, 32, {128, 128, 256}},
                {512, 0.8, 16, {128, 128, 256}},
                {256, 1.2, 16, {128, 128, 256}}};
        c.fp = {{256, 256}, {256, 256}};
        return c;
    }

    std::size_t seed_count() const { return sa.at(sa.size() - 1 - fp.size()).num_centers; }
    std::size_t seed_width() const { return fp.empty() ? sa.back().mlp.back() : fp.back().back(); }

    void validate() const {
        if (sa.empty()) throw std::invalid_argument("backbone: at least one set-abstraction layer required");
        if (fp.size() >= sa.size()) throw std::invalid_argument("backbone: more propagation than abstraction layers");
        if (sa.front().num_centers > num_points)
            throw std::invalid_argument("backbone: first layer samples more centers than input points");
        double prev_radius = 0.0;
        std::size_t prev_centers = num_points;
        for (const auto& l : sa) {
            if (l.mlp.empty() || l.max_samples == 0 || l.num_centers == 0)
                throw std::invalid_argument("backbone: empty set-abstraction layer");
            if (!(l.radius > prev_radius)) throw std::invalid_argument("backbone: radii must be positive and increasing");
            if (l.num_centers > prev_centers) throw std::invalid_argument("backbone: center counts must not grow");
            prev_radius = l.radius;
            prev_centers = l.num_centers;
        }
        for (const auto& w : fp)
            if (w.empty()) throw std::invalid_argument("backbone: empty propagation layer");
    }
};

struct SeedSet {
    Points xyz;                        // M x 3
    Tensor features;                   // M x D
    std::vector<std::size_t> indices;  // rows of the input cloud
};

class SetAbstraction {
public:
    struct Output {
        Points xyz;
        Tensor features;
        std::vector<std::size_t> picked;  // indices into the layer's input points
    };

    SetAbstraction() = default;
    SetAbstraction(SALayerConfig cfg, std::size_t in_features, Rng& rng)
        : cfg_(std::move(cfg)), mlp_(3 + in_features, cfg_.mlp, rng) {}

    /// FPS centers (start 0), ball-query groups, center-relative xyz ++ features,
    /// shared MLP, max-pool per group. `features` may be undefined.
    Output forward(const Points& xyz, const Tensor& features, Mode mode) {
        Output out;
        out.picked = farthest_point_sample(xyz, cfg_.num_centers, 0);
        out.xyz.resize(static_cast<Eigen::Index>(out.picked.size()), 3);
        for (std::size_t i = 0; i < out.picked.size(); ++i)
            out.xyz.row(static_cast<Eigen::Index>(i)) = xyz.row(static_cast<Eigen::Index>(out.picked[i]));
        const IndexMatrix groups = ball_query(xyz, out.xyz, cfg_.radius, cfg_.max_samples);
        out.features = group_and_pool(xyz, out.xyz, groups, features, mode);
        return out;
    }

    /// Grouping with caller-supplied membership (exposed for tests).
    Tensor group_and_pool(const Points& xyz, const Points& centers, const IndexMatrix& groups, const Tensor& features,
                          Mode mode) {
        const std::size_t rows = groups.rows * groups.cols;
        std::vector<double> rel(rows * 3);
        for (std::size_t c = 0; c < groups.rows; ++c)
            for (std::size_t j = 0; j < groups.cols; ++j) {
                const auto p = static_cast<Eigen::Index>(groups(c, j));
                for (Eigen::Index d = 0; d < 3; ++d)
                    rel[(c * groups.cols + j) * 3 + static_cast<std::size_t>(d)] =
                        xyz(p, d) - centers(static_cast<Eigen::Index>(c), d);
            }
        Tensor grouped({rows, 3}, std::move(rel));
        if (features.defined()) grouped = concat({grouped, gather_rows(features, groups.data)}, 1);
        Tensor h = mlp_.forward(grouped, mode);
        return max_reduce(reshape(h, {groups.rows, groups.cols, h.dim(1)}), 1);
    }

    const SALayerConfig& config() const { return cfg_; }
    SharedMlp& mlp() { return mlp_; }
    void collect(const std::string& prefix, ParamList& out) const { mlp_.collect(prefix + ".mlp", out); }

private:
    SALayerConfig cfg_;
    SharedMlp mlp_;
};

class FeaturePropagation {
public:
    FeaturePropagation() = default;
    FeaturePropagation(std::size_t in_features, const std::vector<std::size_t>& widths, Rng& rng)
        : mlp_(in_features, widths, rng) {}

    /// Interpolates coarse features onto `dst_xyz`, concatenates the skip
    /// features and applies the shared MLP.
    Tensor forward(const Points& dst_xyz, const Tensor& dst_features, const Points& src_xyz, const Tensor& src_features,
                   Mode mode) {
        const auto w = three_nn_weights(src_xyz, dst_xyz);
        Tensor up = weighted_gather(src_features, w.index, w.weight, w.k);
        if (dst_features.defined()) up = concat({up, dst_features}, 1);
        return mlp_.forward(up, mode);
    }

    void collect(const std::string& prefix, ParamList& out) const { mlp_.collect(prefix + ".mlp", out); }

private:
    SharedMlp mlp_;
};

/// Deterministic resample to exactly `n` rows: a seeded subset without
/// replacement when larger, all rows plus seeded repeats when smaller.
inline std::vector<std::size_t> resample_indices(std::size_t available, std::size_t n, std::uint64_t seed = 0) {
    std::vector<std::size_t> idx(available);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (available == n) return idx;
    std::mt19937_64 rng(seed);
    if (available > n) {
        for (std::size_t i = 0; i < n; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, available - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        idx.resize(n);
        return idx;
    }
    std::uniform_int_distribution<std::size_t> pick(0, available - 1);
    while (idx.size() < n) idx.push_back(pick(rng));
    return idx;
}

class Backbone {
public:
    Backbone() = default;
    Backbone(BackboneConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::size_t in = 0;
        std::vector<std::size_t> widths;
        for (const auto& l : cfg_.sa) {
            sa_.emplace_back(l, in, rng);
            in = l.mlp.back();
            widths.push_back(in);
        }
        // FP layer i lifts level (S - i) onto level (S - i - 1).
        std::size_t coarse = widths.back();
        for (std::size_t i = 0; i < cfg_.fp.size(); ++i) {
            const std::size_t skip = widths[widths.size() - 2 - i];
            fp_.emplace_back(coarse + skip, cfg_.fp[i], rng);
            coarse = cfg_.fp[i].back();
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    /// Seeds are the centers of abstraction level (S - F), with features lifted
    /// from the coarsest level; `indices` refer to rows of `cloud`.
    SeedSet extract(const PointCloud& cloud, Mode mode) {
        cloud.validate();
        if (cloud.size() < cfg_.min_points)
            throw std::invalid_argument("extract_seeds: cloud has " + std::to_string(cloud.size()) +
                                        " points, need at least " + std::to_string(cfg_.min_points));
        const auto rows = resample_indices(cloud.size(), cfg_.num_points);
        Points xyz(static_cast<Eigen::Index>(rows.size()), 3);
        for (std::size_t i = 0; i < rows.size(); ++i)
            xyz.row(static_cast<Eigen::Index>(i)) = cloud.xyz.row(static_cast<Eigen::Index>(rows[i]));

        std::vector<Points> level_xyz{xyz};
        std::vector<Tensor> level_feat{Tensor()};
        std::vector<std::vector<std::size_t>> level_src{rows};
        for (auto& layer : sa_) {
            auto out = layer.forward(level_xyz.back(), level_feat.back(), mode);
            std::vector<std::size_t> src(out.picked.size());
            for (std::size_t i = 0; i < src.size(); ++i) src[i] = level_src.back()[out.picked[i]];
            level_xyz.push_back(std::move(out.xyz));
            level_feat.push_back(std::move(out.features));
            level_src.push_back(std::move(src));
        }
        std::size_t level = sa_.size();
        Tensor feat = level_feat[level];
        for (auto& fp : fp_) {
            feat = fp.forward(level_xyz[level - 1], level_feat[level - 1], level_xyz[level], feat, mode);
            --level;
        }
        return {level_xyz[level], feat, level_src[level]};
    }

    std::vector<SetAbstraction>& set_abstractions() { return sa_; }

    void collect(const std::string& prefix, ParamList& out) const {
        for (std::size_t i = 0; i < sa_.size(); ++i) sa_[i].collect(prefix + ".sa" + std::to_string(i + 1), out);
        for (std::size_t i = 0; i < fp_.size(); ++i) fp_[i].collect(prefix + ".fp" + std::to_string(i + 1), out);
    }

private:
    BackboneConfig cfg_;
    std::vector<SetAbstraction> sa_;
    std::vector<FeaturePropagation> fp_;
};

}  // namespace mlcvnet
