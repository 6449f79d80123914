#pragma once

// Detection head: patch-level attention (PPC) before voting, vote clustering,
// object-level attention (OOC) over cluster features, global scene context
// (GSC) fusion, proposal decoding and the training loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "backbone.hpp"
#include "classes.hpp"
#include "errors.hpp"
#include "geom.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace mlcvnet {

struct LossWeights {
    double vote = 1.0;
    double objectness = 0.5;
    double center = 1.0;
    double size = 0.1;
    double heading = 0.1;
    double semantic = 0.1;
};

struct ModelConfig {
    BackboneConfig backbone = BackboneConfig::votenet();
    std::vector<std::string> class_names = mlcvnet::class_names(default_object_classes());
    std::vector<Vec3> size_priors = mean_sizes(default_object_classes());
    std::vector<bool> half_turn_symmetric = symmetry_flags(default_object_classes());
    std::size_t num_heading_bins = 12;
    std::vector<std::size_t> vote_hidden{256, 256};  // final layer emits 3 + seed width
    std::size_t num_clusters = 256;
    double cluster_radius = 0.3;
    std::size_t cluster_samples = 16;
    std::vector<std::size_t> cluster_mlp{128, 128, 128};
    std::vector<std::size_t> gsc_hidden{128};  // final layer maps to the cluster width
    std::vector<std::size_t> proposal_hidden{128, 128};
    std::size_t attention_groups = 8;
    bool use_ppc = true;
    bool use_ooc = true;
    bool use_gsc = true;
    LossWeights loss_weights;
    double huber_beta = 0.1;
    double positive_radius = 0.3;
    double negative_radius = 0.6;
    double objectness_threshold = 0.5;
    double nms_iou = 0.25;
    std::uint64_t init_seed = 0;

    /// Full-size head on the full-size backbone (1024 seeds of width 256).
    static ModelConfig votenet() { return ModelConfig{}; }

    /// Desk-scale network that trains on a single CPU core in minutes:
    /// 2048 points, 128 seeds of width 96, 32 clusters of width 64.
    static ModelConfig desk() {
        ModelConfig c;
        c.backbone.num_points = 2048;
        c.backbone.sa = {{256, 0.2, 32, {32, 32, 64}},
                         {128, 0.4, 16, {48, 48, 96}},
                         {64, 0.8, 16, {64, 64, 96}},
                         {32, 1.2, 16, {64, 64, 96}}};
        c.backbone.fp = {{96, 96}, {96, 96}};
        c.vote_hidden = {96, 96};
        c.num_clusters = 32;
        c.cluster_mlp = {64, 64, 64};
        c.gsc_hidden = {64};
        c.proposal_hidden = {64, 64};
        return c;
    }

    std::size_t num_classes() const { return class_names.size(); }
    std::size_t num_size_classes() const { return size_priors.size(); }
    std::size_t seed_width() const { return backbone.seed_width(); }
    std::size_t cluster_width() const { return cluster_mlp.back(); }

    void validate() const {
        backbone.validate();
        if (class_names.size() < 2) throw std::invalid_argument("model: need at least 2 classes");
        if (size_priors.size() != class_names.size())
            throw std::invalid_argument("model: one size prior per class required");
        if (half_turn_symmetric.size() != class_names.size())
            throw std::invalid_argument("model: one symmetry flag per class required");
        for (const auto& p : size_priors)
            if (!((p.array() > 0.0).all())) throw std::invalid_argument("model: size priors must be positive");
        if (num_heading_bins < 1) throw std::invalid_argument("model: num_heading_bins must be >= 1");
        if (num_clusters < 1 || num_clusters > backbone.seed_count())
            throw std::invalid_argument("model: num_clusters must be in [1, seed count]");
        if (cluster_mlp.empty()) throw std::invalid_argument("model: cluster_mlp must be non-empty");
        if (use_ppc && seed_width() % attention_groups != 0)
            throw std::invalid_argument("model: attention_groups must divide the seed width");
        if (use_ooc && cluster_width() % attention_groups != 0)
            throw std::invalid_argument("model: attention_groups must divide the cluster width");
        if (!(positive_radius < negative_radius)) throw std::invalid_argument("model: positive radius must be < negative radius");
    }
};

/// Column ranges of one proposal row.
struct ProposalLayout {
    std::size_t heading_bins, size_classes, classes;

    explicit ProposalLayout(const ModelConfig& c)
        : heading_bins(c.num_heading_bins), size_classes(c.num_size_classes()), classes(c.num_classes()) {}

    std::size_t objectness() const { return 0; }  // 2 logits (background, object)
    std::size_t center() const { return 2; }      // 3 offsets
    std::size_t heading_logits() const { return 5; }
    std::size_t heading_residuals() const { return 5 + heading_bins; }
    std::size_t size_logits() const { return 5 + 2 * heading_bins; }
    std::size_t size_residuals() const { return size_logits() + size_classes; }  // S x 3, log scale
    std::size_t class_logits() const { return size_residuals() + 3 * size_classes; }
    std::size_t width() const { return class_logits() + classes; }
};

// ---------------------------------------------------------------------------
// Box parametrization
// ---------------------------------------------------------------------------

inline double heading_bin_width(std::size_t bins) { return 2.0 * std::numbers::pi / static_cast<double>(bins); }

/// Center of heading bin `b`, normalized to [-pi, pi).
inline double heading_bin_center(std::size_t b, std::size_t bins) {
    return normalize_yaw(static_cast<double>(b) * heading_bin_width(bins));
}

struct HeadingTarget {
    std::size_t bin = 0;
    double residual = 0.0;
};

inline HeadingTarget encode_heading(double yaw, std::size_t bins) {
    const double w = heading_bin_width(bins);
    double shifted = std::fmod(yaw + 0.5 * w, 2.0 * std::numbers::pi);
    if (shifted < 0.0) shifted += 2.0 * std::numbers::pi;
    auto bin = static_cast<std::size_t>(shifted / w);
    if (bin >= bins) bin = bins - 1;
    return {bin, shifted - (static_cast<double>(bin) * w + 0.5 * w)};
}

inline Vec3 encode_size(const Vec3& size, const Vec3& prior) { return (size.array() / prior.array()).log(); }

struct DecodedProposal {
    Detection detection;
    double objectness = 0.0;  // P(object)
};

namespace detail {
inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}
inline std::vector<double> softmax(std::span<const double> v) {
    const auto ls = log_softmax_rows(v, 1, v.size());
    std::vector<double> p(ls.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(ls[i]);
    return p;
}
}  // namespace detail

/// Turns one proposal row into a box: center = cluster center + offset, size
/// = prior[s*] * exp(residual[s*]), yaw = bin_center(h*) + residual[h*],
/// score = P(object) * P(class).
inline DecodedProposal decode(std::span<const double> row, const Vec3& cluster_center, const ModelConfig& cfg) {
    const ProposalLayout L(cfg);
    if (row.size() != L.width())
        throw std::invalid_argument("decode: proposal has " + std::to_string(row.size()) + " fields, expected " +
                                    std::to_string(L.width()));
    for (double v : row)
        if (!std::isfinite(v)) throw DecodeError("decode: proposal has non-finite fields");
    if (!cluster_center.allFinite()) throw DecodeError("decode: non-finite cluster center");

    const auto obj = detail::softmax(row.subspan(L.objectness(), 2));
    const Vec3 center = cluster_center + Vec3(row[L.center()], row[L.center() + 1], row[L.center() + 2]);

    const std::size_t h = detail::argmax(row.subspan(L.heading_logits(), L.heading_bins));
    const double yaw = normalize_yaw(heading_bin_center(h, L.heading_bins) + row[L.heading_residuals() + h]);

    const std::size_t s = detail::argmax(row.subspan(L.size_logits(), L.size_classes));
    const std::size_t r = L.size_residuals() + 3 * s;
    const Vec3 size = cfg.size_priors[s].array() * Vec3(row[r], row[r + 1], row[r + 2]).array().exp();

    const auto cls = detail::softmax(row.subspan(L.class_logits(), L.classes));
    const std::size_t c = detail::argmax(cls);

    DecodedProposal out;
    out.objectness = obj[1];
    out.detection.box = OrientedBox3D::make(center, size, yaw);
    out.detection.class_id = c;
    out.detection.score = std::clamp(obj[1] * cls[c], 0.0, 1.0);
    return out;
}

/// Inverse of decode for a ground-truth box: the proposal row whose decoding
/// reproduces `gt` at `cluster_center` with (near-)certain objectness and class.
inline std::vector<double> encode_proposal(const LabeledBox& gt, const Vec3& cluster_center, const ModelConfig& cfg,
                                           double confidence_logit = 20.0) {
    const ProposalLayout L(cfg);
    std::vector<double> row(L.width(), 0.0);
    row[L.objectness() + 1] = confidence_logit;
    for (int d = 0; d < 3; ++d) row[L.center() + static_cast<std::size_t>(d)] = gt.box.center[d] - cluster_center[d];
    const auto h = encode_heading(gt.box.yaw, L.heading_bins);
    row[L.heading_logits() + h.bin] = confidence_logit;
    row[L.heading_residuals() + h.bin] = h.residual;
    const std::size_t s = gt.class_id;
    row[L.size_logits() + s] = confidence_logit;
    const Vec3 res = encode_size(gt.box.size, cfg.size_priors[s]);
    for (int d = 0; d < 3; ++d) row[L.size_residuals() + 3 * s + static_cast<std::size_t>(d)] = res[d];
    row[L.class_logits() + gt.class_id] = confidence_logit;
    return row;
}

// ---------------------------------------------------------------------------
// Intermediate sets
// ---------------------------------------------------------------------------

struct VoteSet {
    Tensor xyz;       // M x 3, seed + offset
    Tensor features;  // M x D, seed features + offset
    Points seed_xyz;

    std::size_t size() const { return xyz.dim(0); }
    Points positions() const {
        Points p(static_cast<Eigen::Index>(size()), 3);
        std::copy(xyz.data().begin(), xyz.data().end(), p.data());
        return p;
    }
};

struct ClusterSet {
    std::vector<std::size_t> center_votes;  // FPS picks among votes
    Points centers;                         // K x 3
    IndexMatrix members;                    // K x n_max vote indices (ball-query padded)

    std::size_t size() const { return center_votes.size(); }
};

struct ForwardPass {
    SeedSet seeds;            // features before patch attention
    Tensor seed_context;      // features after patch attention
    VoteSet votes;
    ClusterSet clusters;
    Tensor cluster_features;  // before object attention
    Tensor cluster_context;   // after object attention
    Tensor fused;             // after scene-context fusion
    Tensor centers;           // K x 3, differentiable cluster centers
    Tensor proposals;         // K x layout width
};

struct LossBreakdown {
    Tensor total;
    // Weighted contributions; they add up to total.
    double vote = 0, objectness = 0, center = 0, size = 0, heading = 0, semantic = 0;
    std::size_t positives = 0, negatives = 0, voting_seeds = 0;

    double box() const { return center + size + heading; }
};

struct LossInputs {
    Points seed_xyz;
    Tensor vote_xyz;         // M x 3
    Tensor cluster_centers;  // K x 3
    Tensor proposals;        // K x width
};

/// Vote regression, objectness, center, size, heading and semantic terms.
/// Regression terms use smooth-L1 summed over coordinates and averaged over
/// the contributing seeds or positive clusters.
inline LossBreakdown compute_loss(const LossInputs& in, std::span<const LabeledBox> gt, const ModelConfig& cfg) {
    if (gt.empty()) throw std::invalid_argument("loss: at least one ground-truth box required");
    const ProposalLayout L(cfg);
    const double beta = cfg.huber_beta;
    const auto& w = cfg.loss_weights;
    LossBreakdown out;
    Tensor zero = Tensor::scalar(0.0);

    // (a) votes of seeds inside a box regress to that box's center.
    std::vector<std::size_t> voting;
    std::vector<double> vote_targets;
    {
        std::vector<std::vector<bool>> inside;
        for (const auto& g : gt) inside.push_back(points_in_box(in.seed_xyz, g.box));
        for (std::size_t i = 0; i < static_cast<std::size_t>(in.seed_xyz.rows()); ++i)
            for (std::size_t j = 0; j < gt.size(); ++j)
                if (inside[j][i]) {
                    voting.push_back(i);
                    for (int d = 0; d < 3; ++d) vote_targets.push_back(gt[j].box.center[d]);
                    break;
                }
    }
    out.voting_seeds = voting.size();
    Tensor vote_term = zero;
    if (!voting.empty()) {
        Tensor diff = sub(gather_rows(in.vote_xyz, voting), Tensor({voting.size(), 3}, vote_targets));
        vote_term = scale(sum(smooth_l1(diff, beta)), 1.0 / static_cast<double>(voting.size()));
    }

    // (b) objectness by distance from cluster center to the nearest gt center.
    const std::size_t k = in.cluster_centers.dim(0);
    std::vector<std::size_t> obj_label(k, 0), assigned(k, 0), positives;
    std::vector<double> obj_weight(k, 0.0), pos_weight(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        const Vec3 p(in.cluster_centers(c, 0), in.cluster_centers(c, 1), in.cluster_centers(c, 2));
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const double d = (p - gt[j].box.center).norm();
            if (d < best) {
                best = d;
                assigned[c] = j;
            }
        }
        if (best < cfg.positive_radius) {
            obj_label[c] = 1;
            obj_weight[c] = 1.0;
            pos_weight[c] = 1.0;
            positives.push_back(c);
        } else if (best > cfg.negative_radius) {
            obj_weight[c] = 1.0;
            ++out.negatives;
        }
    }
    out.positives = positives.size();
    Tensor obj_term = cross_entropy(slice_cols(in.proposals, L.objectness(), L.objectness() + 2), obj_label, obj_weight);

    // (c)-(f) on positive clusters.
    Tensor center_term = zero, size_term = zero, heading_term = zero, sem_term = zero;
    if (!positives.empty()) {
        const auto np = static_cast<double>(positives.size());
        std::vector<double> center_t, heading_res_t, size_res_t;
        std::vector<std::size_t> heading_bin_t(k, 0), class_t(k, 0), pos_bins, size_rows;
        for (std::size_t i = 0; i < positives.size(); ++i) {
            const std::size_t c = positives[i];
            const LabeledBox& g = gt[assigned[c]];
            for (int d = 0; d < 3; ++d) center_t.push_back(g.box.center[d]);
            const auto h = encode_heading(canonical_yaw(g.box.yaw, cfg.half_turn_symmetric[g.class_id]), L.heading_bins);
            heading_bin_t[c] = h.bin;
            pos_bins.push_back(h.bin);
            heading_res_t.push_back(h.residual);
            class_t[c] = g.class_id;
            size_rows.push_back(i * L.size_classes + g.class_id);
            const Vec3 r = encode_size(g.box.size, cfg.size_priors[g.class_id]);
            for (int d = 0; d < 3; ++d) size_res_t.push_back(r[d]);
        }
        const std::size_t P = positives.size();

        Tensor pred_center = add(gather_rows(in.cluster_centers, positives),
                                 gather_rows(slice_cols(in.proposals, L.center(), L.center() + 3), positives));
        center_term = scale(sum(smooth_l1(sub(pred_center, Tensor({P, 3}, center_t)), beta)), 1.0 / np);

        Tensor h_cls = cross_entropy(slice_cols(in.proposals, L.heading_logits(), L.heading_logits() + L.heading_bins),
                                     heading_bin_t, pos_weight);
        Tensor h_res = pick(gather_rows(slice_cols(in.proposals, L.heading_residuals(),
                                                   L.heading_residuals() + L.heading_bins),
                                        positives),
                            pos_bins);
        heading_term = add(h_cls, scale(sum(smooth_l1(sub(h_res, Tensor({P}, heading_res_t)), beta)), 1.0 / np));

        Tensor s_cls = cross_entropy(slice_cols(in.proposals, L.size_logits(), L.size_logits() + L.size_classes),
                                     class_t, pos_weight);
        Tensor s_all = gather_rows(slice_cols(in.proposals, L.size_residuals(), L.size_residuals() + 3 * L.size_classes),
                                   positives);
        Tensor s_res = gather_rows(reshape(s_all, {P * L.size_classes, 3}), size_rows);
        size_term = add(s_cls, scale(sum(smooth_l1(sub(s_res, Tensor({P, 3}, size_res_t)), beta)), 1.0 / np));

        sem_term = cross_entropy(slice_cols(in.proposals, L.class_logits(), L.class_logits() + L.classes), class_t,
                                 pos_weight);
    }

    out.vote = w.vote * vote_term.item();
    out.objectness = w.objectness * obj_term.item();
    out.center = w.center * center_term.item();
    out.size = w.size * size_term.item();
    out.heading = w.heading * heading_term.item();
    out.semantic = w.semantic * sem_term.item();
    out.total = add(add(add(scale(vote_term, w.vote), scale(obj_term, w.objectness)),
                        add(scale(center_term, w.center), scale(size_term, w.size))),
                    add(scale(heading_term, w.heading), scale(sem_term, w.semantic)));
    return out;
}

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

/// Independent stream per sub-module, so adding or removing one module never
/// changes the initialization of the others.
inline Rng module_rng(std::uint64_t seed, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag)};
    return Rng(seq);
}

struct DetectOptions {
    std::optional<double> objectness_threshold;  // config default when empty
    std::optional<double> nms_iou;
};

class Detector {
public:
    explicit Detector(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t d = cfg_.seed_width();
        const std::size_t dc = cfg_.cluster_width();
        auto rng = [&](std::uint64_t tag) { return module_rng(cfg_.init_seed, tag); };
        {
            auto r = rng(1);
            backbone_ = Backbone(cfg_.backbone, r);
        }
        if (cfg_.use_ppc) {
            auto r = rng(2);
            ppc_ = CgnlBlock(d, cfg_.attention_groups, r);
        }
        {
            auto r = rng(3);
            auto widths = cfg_.vote_hidden;
            widths.push_back(3 + d);
            vote_mlp_ = SharedMlp(d, widths, r, /*head=*/true);
        }
        {
            auto r = rng(4);
            cluster_mlp_ = SharedMlp(3 + d, cfg_.cluster_mlp, r);
        }
        if (cfg_.use_ooc) {
            auto r = rng(5);
            ooc_ = CgnlBlock(dc, cfg_.attention_groups, r);
        }
        if (cfg_.use_gsc) {
            auto r = rng(6);
            auto widths = cfg_.gsc_hidden;
            widths.push_back(dc);
            gsc_mlp_ = SharedMlp(dc + d, widths, r, /*head=*/true, /*batch_norm=*/false);
            auto& last = gsc_mlp_.layers().back();
            std::fill(last.weight.data().begin(), last.weight.data().end(), 0.0);
            std::fill(last.bias.data().begin(), last.bias.data().end(), 0.0);
        }
        {
            auto r = rng(7);
            auto widths = cfg_.proposal_hidden;
            widths.push_back(ProposalLayout(cfg_).width());
            proposal_mlp_ = SharedMlp(dc, widths, r, /*head=*/true);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    Backbone& backbone() { return backbone_; }
    CgnlBlock& ppc() { return ppc_; }
    CgnlBlock& ooc() { return ooc_; }
    SharedMlp& vote_mlp() { return vote_mlp_; }
    SharedMlp& cluster_mlp() { return cluster_mlp_; }
    SharedMlp& gsc_mlp() { return gsc_mlp_; }
    SharedMlp& proposal_mlp() { return proposal_mlp_; }

    /// Patch-to-patch context over seed features; identity when disabled.
    Tensor ppc_apply(const Tensor& features) const { return cfg_.use_ppc ? ppc_.forward(features) : features; }

    /// One vote per seed: shared MLP emits 3 xyz offsets then feature offsets.
    VoteSet vote(const Points& seed_xyz, const Tensor& features, Mode mode) {
        const std::size_t d = features.dim(1);
        Tensor out = vote_mlp_.forward(features, mode);
        Tensor base({static_cast<std::size_t>(seed_xyz.rows()), 3},
                    std::vector<double>(seed_xyz.data(), seed_xyz.data() + seed_xyz.size()));
        return {add(base, slice_cols(out, 0, 3)), add(features, slice_cols(out, 3, 3 + d)), seed_xyz};
    }

    ClusterSet cluster_votes(const VoteSet& votes) const {
        return cluster_points(votes.positions(), cfg_.num_clusters, cfg_.cluster_radius, cfg_.cluster_samples);
    }

    static ClusterSet cluster_points(const Points& positions, std::size_t k, double radius, std::size_t n_max) {
        if (k > static_cast<std::size_t>(positions.rows()))
            throw std::invalid_argument("cluster_votes: K exceeds the number of votes");
        ClusterSet c;
        c.center_votes = farthest_point_sample(positions, k, 0);
        c.centers.resize(static_cast<Eigen::Index>(k), 3);
        for (std::size_t i = 0; i < k; ++i)
            c.centers.row(static_cast<Eigen::Index>(i)) = positions.row(static_cast<Eigen::Index>(c.center_votes[i]));
        c.members = ball_query(positions, c.centers, radius, n_max);
        return c;
    }

    struct Encoded {
        Tensor features;  // K x D''
        Tensor centers;   // K x 3
    };

    /// Per member: (vote xyz - cluster center) ++ vote features -> shared MLP,
    /// then max over members.
    Encoded cluster_encode(const VoteSet& votes, const ClusterSet& clusters, Mode mode) {
        const std::size_t k = clusters.size(), n = clusters.members.cols;
        if (n == 0 || k == 0) throw std::invalid_argument("cluster_encode: empty cluster");
        Tensor centers = gather_rows(votes.xyz, clusters.center_votes);
        std::vector<std::size_t> owner(k * n);
        for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i / n;
        // Offsets in units of the grouping radius keep the MLP input O(1).
        Tensor rel = scale(sub(gather_rows(votes.xyz, clusters.members.data), gather_rows(centers, owner)),
                           1.0 / cfg_.cluster_radius);
        Tensor h = cluster_mlp_.forward(concat({rel, gather_rows(votes.features, clusters.members.data)}, 1), mode);
        return {max_reduce(reshape(h, {k, n, h.dim(1)}), 1), centers};
    }

    /// Object-to-object context; identity when disabled.
    Tensor ooc_apply(const Tensor& clusters) const { return cfg_.use_ooc ? ooc_.forward(clusters) : clusters; }

    /// C_new = MLP([max(C_pre); max(P_pre)]) + C_ooc, broadcast over rows.
    Tensor gsc_apply(const Tensor& patches_pre, const Tensor& clusters_pre, const Tensor& clusters_ooc, Mode mode) {
        if (!cfg_.use_gsc) return clusters_ooc;
        Tensor global = concat({max_reduce(clusters_pre, 0), max_reduce(patches_pre, 0)}, 0);
        Tensor fused = gsc_mlp_.forward(reshape(global, {1, global.numel()}), mode);
        return add(clusters_ooc, reshape(fused, {fused.numel()}));
    }

    Tensor propose(const Tensor& clusters, Mode mode) { return proposal_mlp_.forward(clusters, mode); }

    ForwardPass forward(const PointCloud& cloud, Mode mode) {
        ForwardPass f;
        f.seeds = backbone_.extract(cloud, mode);
        f.seed_context = ppc_apply(f.seeds.features);
        f.votes = vote(f.seeds.xyz, f.seed_context, mode);
        f.clusters = cluster_votes(f.votes);
        auto enc = cluster_encode(f.votes, f.clusters, mode);
        f.cluster_features = enc.features;
        f.centers = enc.centers;
        f.cluster_context = ooc_apply(f.cluster_features);
        f.fused = gsc_apply(f.seeds.features, f.cluster_features, f.cluster_context, mode);
        f.proposals = propose(f.fused, mode);
        return f;
    }

    LossBreakdown loss(const ForwardPass& f, std::span<const LabeledBox> gt) const {
        return compute_loss({f.seeds.xyz, f.votes.xyz, f.centers, f.proposals}, gt, cfg_);
    }

    std::vector<DecodedProposal> decode_all(const ForwardPass& f) const {
        std::vector<DecodedProposal> out;
        const std::size_t w = f.proposals.dim(1);
        for (std::size_t k = 0; k < f.proposals.dim(0); ++k) {
            const Vec3 c(f.centers(k, 0), f.centers(k, 1), f.centers(k, 2));
            out.push_back(decode(f.proposals.data().subspan(k * w, w), c, cfg_));
        }
        return out;
    }

    /// Full inference: floor normalization, forward, decode, objectness filter, NMS.
    std::vector<Detection> detect(const PointCloud& cloud, const DetectOptions& opt = {}) {
        NoGradGuard no_grad;
        PointCloud shifted = cloud;
        const double dz = floor_offset(cloud.xyz);
        shifted.xyz.col(2).array() += dz;
        const auto f = forward(shifted, Mode::eval);
        return postprocess(decode_all(f), -dz, opt);
    }

    std::vector<Detection> postprocess(const std::vector<DecodedProposal>& decoded, double z_shift,
                                       const DetectOptions& opt = {}) const {
        const double obj_th = opt.objectness_threshold.value_or(cfg_.objectness_threshold);
        const double nms_th = opt.nms_iou.value_or(cfg_.nms_iou);
        std::vector<Detection> candidates;
        for (const auto& d : decoded)
            if (d.objectness >= obj_th) candidates.push_back(d.detection);
        std::vector<Detection> out;
        for (std::size_t i : nms_3d(candidates, nms_th)) {
            Detection det = candidates[i];
            det.box.center.z() += z_shift;
            out.push_back(det);
        }
        return out;
    }

    ParamList parameters() const {
        ParamList out;
        backbone_.collect("backbone", out);
        if (cfg_.use_ppc) ppc_.collect("ppc", out);
        vote_mlp_.collect("vote", out);
        cluster_mlp_.collect("cluster", out);
        if (cfg_.use_ooc) ooc_.collect("ooc", out);
        if (cfg_.use_gsc) gsc_mlp_.collect("gsc", out);
        proposal_mlp_.collect("proposal", out);
        return out;
    }

private:
    ModelConfig cfg_;
    Backbone backbone_;
    CgnlBlock ppc_, ooc_;
    SharedMlp vote_mlp_, cluster_mlp_, gsc_mlp_, proposal_mlp_;
};

}  // namespace mlcvnet
