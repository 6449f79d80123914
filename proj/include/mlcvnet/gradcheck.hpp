#pragma once

// Finite-difference checks for every differentiable stage of the detector on
// small shapes. Used by the `gradcheck` command and the test suite.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attention.hpp"
#include "backbone.hpp"
#include "detector.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace mlcvnet {

struct GradCheckCase {
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;
    bool passed() const { return error < tolerance; }
};

inline constexpr double kSmoothTolerance = 1e-4;   // compositions of smooth ops
inline constexpr double kMaxPoolTolerance = 1e-3;  // compositions through max-pooling

/// 16 seeds of width 8, 4 clusters of width 8: small enough to probe every tensor.
inline ModelConfig gradient_check_config() {
    ModelConfig c;
    c.backbone.num_points = 64;
    c.backbone.min_points = 8;
    c.backbone.sa = {{16, 0.5, 8, {8, 8}}, {8, 1.0, 4, {8, 8}}};
    c.backbone.fp = {{8}};
    c.num_heading_bins = 4;
    c.vote_hidden = {8};
    c.num_clusters = 4;
    c.cluster_radius = 0.5;
    c.cluster_samples = 4;
    c.cluster_mlp = {8, 8};
    c.gsc_hidden = {8};
    c.proposal_hidden = {8};
    c.attention_groups = 2;
    return c;
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

inline Tensor probe_sum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

inline void randomize(Tensor t, Rng& rng, double scale) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& x : t.data()) x = u(rng);
}

}  // namespace detail

/// Replaces the zero initializations (attention output maps, last fusion layer)
/// with small random values so that every parameter receives gradient.
inline void activate_identity_paths(Detector& model, Rng& rng) {
    const auto& cfg = model.config();
    if (cfg.use_ppc) detail::randomize(model.ppc().z(), rng, 0.3);
    if (cfg.use_ooc) detail::randomize(model.ooc().z(), rng, 0.3);
    if (cfg.use_gsc) {
        auto& last = model.gsc_mlp().layers().back();
        detail::randomize(last.weight, rng, 0.3);
        detail::randomize(last.bias, rng, 0.3);
    }
}

inline PointCloud random_cloud(std::size_t n, Rng& rng, double extent = 2.0) {
    std::uniform_real_distribution<double> u(0.0, extent);
    PointCloud c;
    c.xyz.resize(static_cast<Eigen::Index>(n), 3);
    for (Eigen::Index i = 0; i < c.xyz.rows(); ++i) c.xyz.row(i) = Vec3(u(rng), u(rng), 0.5 * u(rng)).transpose();
    return c;
}

inline std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed = 7) {
    std::vector<GradCheckCase> out;
    Rng rng(seed);
    GradCheckOptions opt;
    opt.floor = 1e-5;  // biases feeding batch norm have zero gradient; keep their roundoff out of the ratio
    const ModelConfig cfg = gradient_check_config();

    {
        Rng init(seed + 1);
        Backbone bb(cfg.backbone, init);
        const PointCloud cloud = random_cloud(cfg.backbone.num_points, rng);
        ParamList params;
        bb.collect("backbone", params);
        const Tensor w = detail::uniform_tensor({cfg.backbone.seed_count(), cfg.seed_width()}, rng);
        GradCheckOptions o = opt;
        o.max_probes_per_input = 8;
        const double err = grad_check([&] { return detail::probe_sum(bb.extract(cloud, Mode::train).features, w); },
                                      trainable(params), o);
        out.push_back({"backbone", err, kMaxPoolTolerance});
    }

    for (std::size_t groups : {1, 2, 4}) {
        Rng init(seed + 10 + groups);
        CgnlBlock block(8, groups, init);
        detail::randomize(block.z(), init, 0.5);
        const Tensor a = detail::uniform_tensor({6, 8}, rng);
        const Tensor w = detail::uniform_tensor({6, 8}, rng);
        const double err = grad_check([&] { return detail::probe_sum(block.forward(a), w); },
                                      {a, block.theta(), block.phi(), block.g(), block.z()}, opt);
        out.push_back({"cgnl groups=" + std::to_string(groups), err, kSmoothTolerance});
    }

    Detector model(cfg);
    activate_identity_paths(model, rng);
    const std::size_t m = cfg.backbone.seed_count(), d = cfg.seed_width(), k = cfg.num_clusters;
    const std::size_t dc = cfg.cluster_width();

    Points seed_xyz(static_cast<Eigen::Index>(m), 3);
    {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (Eigen::Index i = 0; i < seed_xyz.rows(); ++i) seed_xyz.row(i) = Vec3(u(rng), u(rng), u(rng)).transpose();
    }

    {
        const Tensor f = detail::uniform_tensor({m, d}, rng);
        const Tensor w = detail::uniform_tensor({m, 3 + d}, rng);
        ParamList params;
        model.vote_mlp().collect("vote", params);
        auto inputs = trainable(params);
        inputs.push_back(f);
        const double err = grad_check(
            [&] {
                auto v = model.vote(seed_xyz, f, Mode::train);
                return detail::probe_sum(concat({v.xyz, v.features}, 1), w);
            },
            inputs, opt);
        out.push_back({"vote mlp", err, kSmoothTolerance});
    }

    {
        VoteSet votes{Tensor({m, 3}, std::vector<double>(seed_xyz.data(), seed_xyz.data() + seed_xyz.size())),
                      detail::uniform_tensor({m, d}, rng), seed_xyz};
        const ClusterSet clusters = model.cluster_votes(votes);
        const Tensor w = detail::uniform_tensor({k, dc}, rng);
        ParamList params;
        model.cluster_mlp().collect("cluster", params);
        auto inputs = trainable(params);
        inputs.push_back(votes.xyz);
        inputs.push_back(votes.features);
        const double err = grad_check(
            [&] { return detail::probe_sum(model.cluster_encode(votes, clusters, Mode::train).features, w); }, inputs,
            opt);
        out.push_back({"cluster encoder", err, kMaxPoolTolerance});
    }

    {
        const Tensor p = detail::uniform_tensor({m, d}, rng);
        const Tensor c = detail::uniform_tensor({k, dc}, rng);
        const Tensor co = detail::uniform_tensor({k, dc}, rng);
        const Tensor w = detail::uniform_tensor({k, dc}, rng);
        ParamList params;
        model.gsc_mlp().collect("gsc", params);
        auto inputs = trainable(params);
        inputs.insert(inputs.end(), {p, c, co});
        const double err =
            grad_check([&] { return detail::probe_sum(model.gsc_apply(p, c, co, Mode::train), w); }, inputs, opt);
        out.push_back({"gsc fusion", err, kMaxPoolTolerance});
    }

    {
        const Tensor c = detail::uniform_tensor({k, dc}, rng);
        const Tensor w = detail::uniform_tensor({k, ProposalLayout(cfg).width()}, rng);
        ParamList params;
        model.proposal_mlp().collect("proposal", params);
        auto inputs = trainable(params);
        inputs.push_back(c);
        const double err = grad_check([&] { return detail::probe_sum(model.propose(c, Mode::train), w); }, inputs, opt);
        out.push_back({"proposal head", err, kSmoothTolerance});
    }

    {
        const Tensor c = detail::uniform_tensor({k, dc}, rng);
        const Tensor p = detail::uniform_tensor({m, d}, rng);
        const Tensor w = detail::uniform_tensor({k, ProposalLayout(cfg).width()}, rng);
        ParamList params;
        model.ooc().collect("ooc", params);
        model.gsc_mlp().collect("gsc", params);
        model.proposal_mlp().collect("proposal", params);
        auto inputs = trainable(params);
        inputs.push_back(c);
        const double err = grad_check(
            [&] {
                return detail::probe_sum(model.propose(model.gsc_apply(p, c, model.ooc_apply(c), Mode::train), Mode::train), w);
            },
            inputs, opt);
        out.push_back({"propose . gsc . ooc", err, kMaxPoolTolerance});
    }

    {
        const PointCloud cloud = random_cloud(cfg.backbone.num_points, rng, 1.5);
        const std::vector<LabeledBox> gt{{OrientedBox3D::make({0.5, 0.5, 0.3}, {0.6, 0.5, 0.6}, 0.3), 0},
                                         {OrientedBox3D::make({1.1, 1.0, 0.4}, {0.5, 0.5, 0.8}, -1.2), 1}};
        GradCheckOptions o = opt;
        o.max_probes_per_input = 2;
        const double err = grad_check(
            [&] {
                auto f = model.forward(cloud, Mode::train);
                return model.loss(f, gt).total;
            },
            trainable(model.parameters()), o);
        out.push_back({"full loss", err, kMaxPoolTolerance});
    }
    return out;
}

}  // namespace mlcvnet
