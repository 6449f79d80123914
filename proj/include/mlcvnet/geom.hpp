#pragma once

// Sampling, grouping, and oriented-box kernels. Everything here is a pure
// function of its arguments.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlcvnet {

using Vec3 = Eigen::Vector3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PointCloud {
    Points xyz;
    RowMatrix features;  // 0 columns when absent

    std::size_t size() const { return static_cast<std::size_t>(xyz.rows()); }

    void validate() const {
        if (xyz.rows() == 0) throw std::invalid_argument("point cloud is empty");
        if (!xyz.allFinite()) throw std::invalid_argument("point cloud has non-finite coordinates");
        if (features.cols() > 0 && features.rows() != xyz.rows())
            throw std::invalid_argument("point cloud features have " + std::to_string(features.rows()) +
                                        " rows for " + std::to_string(xyz.rows()) + " points");
    }
};

/// Wraps an angle into [-pi, pi).
inline double normalize_yaw(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double r = std::fmod(a + std::numbers::pi, two_pi);
    if (r < 0.0) r += two_pi;
    r -= std::numbers::pi;
    if (r >= std::numbers::pi) r -= two_pi;
    return r;
}

struct OrientedBox3D {
    Vec3 center = Vec3::Zero();
    Vec3 size = Vec3::Ones();  // full extents
    double yaw = 0.0;          // about +z, in [-pi, pi)

    static OrientedBox3D make(const Vec3& center, const Vec3& size, double yaw) {
        OrientedBox3D b{center, size, normalize_yaw(yaw)};
        b.validate();
        return b;
    }

    void validate() const {
        if (!center.allFinite() || !size.allFinite() || !std::isfinite(yaw))
            throw std::invalid_argument("box has non-finite fields");
        if ((size.array() <= 0.0).any()) throw std::invalid_argument("box size must be strictly positive");
    }

    double volume() const { return size.prod(); }

    /// Plan-view corners, counter-clockwise.
    std::array<Eigen::Vector2d, 4> corners_xy() const {
        const double c = std::cos(yaw), s = std::sin(yaw);
        const double hx = 0.5 * size.x(), hy = 0.5 * size.y();
        const std::array<Eigen::Vector2d, 4> local{{{-hx, -hy}, {hx, -hy}, {hx, hy}, {-hx, hy}}};
        std::array<Eigen::Vector2d, 4> out;
        for (std::size_t i = 0; i < 4; ++i)
            out[i] = {center.x() + c * local[i].x() - s * local[i].y(), center.y() + s * local[i].x() + c * local[i].y()};
        return out;
    }

    /// `p` expressed in the box frame (translated by -center, rotated by -yaw).
    Vec3 to_local(const Vec3& p) const {
        const double c = std::cos(yaw), s = std::sin(yaw);
        const Vec3 d = p - center;
        return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
    }
};

struct Detection {
    OrientedBox3D box;
    std::size_t class_id = 0;
    double score = 0.0;
};

/// Ground-truth annotation.
struct LabeledBox {
    OrientedBox3D box;
    std::size_t class_id = 0;
};

// ---------------------------------------------------------------------------
// Sampling and grouping
// ---------------------------------------------------------------------------

/// Greedy farthest-point sampling; ties go to the smallest index.
inline std::vector<std::size_t> farthest_point_sample(const Points& xyz, std::size_t k, std::size_t start = 0) {
    const auto n = static_cast<std::size_t>(xyz.rows());
    if (k < 1 || k > n)
        throw std::invalid_argument("farthest_point_sample: k=" + std::to_string(k) + " not in [1, " +
                                    std::to_string(n) + "]");
    if (start >= n) throw std::invalid_argument("farthest_point_sample: start index out of range");
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> out;
    out.reserve(k);
    std::size_t cur = start;
    for (std::size_t t = 0; t < k; ++t) {
        out.push_back(cur);
        if (t + 1 == k) break;
        const double cx = xyz(cur, 0), cy = xyz(cur, 1), cz = xyz(cur, 2);
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dx = xyz(i, 0) - cx, dy = xyz(i, 1) - cy, dz = xyz(i, 2) - cz;
            const double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 < min_d2[i]) min_d2[i] = d2;
            if (min_d2[i] > best_d) {
                best_d = min_d2[i];
                best = i;
            }
        }
        cur = best;
    }
    return out;
}

/// Row-major M x max_samples neighbor indices.
struct IndexMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<std::size_t> data;

    std::size_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const std::size_t> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// Per center: in-radius point indices in ascending order, truncated to
/// `max_samples`, padded with the first hit, or with the nearest point when the
/// ball is empty.
inline IndexMatrix ball_query(const Points& xyz, const Points& centers, double radius, std::size_t max_samples) {
    if (xyz.rows() == 0) throw std::invalid_argument("ball_query: empty cloud");
    if (!(radius > 0.0)) throw std::invalid_argument("ball_query: radius must be positive");
    if (max_samples < 1) throw std::invalid_argument("ball_query: max_samples must be >= 1");
    const auto n = static_cast<std::size_t>(xyz.rows());
    const auto m = static_cast<std::size_t>(centers.rows());
    const double r2 = radius * radius;
    IndexMatrix out{m, max_samples, std::vector<std::size_t>(m * max_samples)};
    for (std::size_t c = 0; c < m; ++c) {
        std::size_t* row = out.data.data() + c * max_samples;
        std::size_t found = 0, nearest = 0;
        double nearest_d2 = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n && found < max_samples; ++i) {
            const double dx = xyz(i, 0) - centers(c, 0), dy = xyz(i, 1) - centers(c, 1), dz = xyz(i, 2) - centers(c, 2);
            const double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 <= r2) row[found++] = i;
            if (d2 < nearest_d2) {
                nearest_d2 = d2;
                nearest = i;
            }
        }
        // An empty ball never exits the scan early, so `nearest` has seen every point.
        const std::size_t fill = found ? row[0] : nearest;
        std::fill(row + found, row + max_samples, fill);
    }
    return out;
}

struct InterpolationWeights {
    std::size_t k = 0;              // neighbors per destination (min(3, #src))
    std::vector<std::size_t> index;  // dst x k
    std::vector<double> weight;      // dst x k, rows sum to 1
};

inline constexpr double kInterpolationEps = 1e-8;

/// Inverse-distance weights 1/(d + eps) over the 3 nearest sources, normalized.
inline InterpolationWeights three_nn_weights(const Points& src, const Points& dst) {
    const auto ns = static_cast<std::size_t>(src.rows());
    if (ns == 0) throw std::invalid_argument("three_nn: no source points");
    const auto nd = static_cast<std::size_t>(dst.rows());
    InterpolationWeights w;
    w.k = std::min<std::size_t>(3, ns);
    w.index.resize(nd * w.k);
    w.weight.resize(nd * w.k);
    for (std::size_t d = 0; d < nd; ++d) {
        std::array<double, 3> best_d{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                                     std::numeric_limits<double>::infinity()};
        std::array<std::size_t, 3> best_i{0, 0, 0};
        for (std::size_t s = 0; s < ns; ++s) {
            const double d2 = (src.row(s) - dst.row(d)).squaredNorm();
            if (d2 >= best_d[w.k - 1]) continue;
            std::size_t pos = w.k - 1;
            while (pos > 0 && d2 < best_d[pos - 1]) {
                best_d[pos] = best_d[pos - 1];
                best_i[pos] = best_i[pos - 1];
                --pos;
            }
            best_d[pos] = d2;
            best_i[pos] = s;
        }
        double total = 0.0;
        for (std::size_t j = 0; j < w.k; ++j) {
            const double inv = 1.0 / (std::sqrt(best_d[j]) + kInterpolationEps);
            w.index[d * w.k + j] = best_i[j];
            w.weight[d * w.k + j] = inv;
            total += inv;
        }
        for (std::size_t j = 0; j < w.k; ++j) w.weight[d * w.k + j] /= total;
    }
    return w;
}

inline RowMatrix three_nn_interpolate(const Points& src_xyz, const RowMatrix& src_feat, const Points& dst_xyz) {
    if (src_feat.rows() != src_xyz.rows())
        throw std::invalid_argument("three_nn_interpolate: feature rows do not match source points");
    const auto w = three_nn_weights(src_xyz, dst_xyz);
    RowMatrix out = RowMatrix::Zero(dst_xyz.rows(), src_feat.cols());
    for (Eigen::Index d = 0; d < dst_xyz.rows(); ++d)
        for (std::size_t j = 0; j < w.k; ++j) {
            const auto i = static_cast<std::size_t>(d) * w.k + j;
            out.row(d) += w.weight[i] * src_feat.row(static_cast<Eigen::Index>(w.index[i]));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Box arithmetic
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kClipTolerance = 1e-9;

inline double cross2(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

inline double polygon_area(const std::vector<Eigen::Vector2d>& poly) {
    if (poly.size() < 3) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < poly.size(); ++i) acc += cross2(poly[i], poly[(i + 1) % poly.size()]);
    return 0.5 * std::abs(acc);
}

/// Sutherland–Hodgman: clips `subject` against every edge of the convex CCW `clip`.
inline std::vector<Eigen::Vector2d> clip_convex(std::vector<Eigen::Vector2d> subject,
                                               const std::array<Eigen::Vector2d, 4>& clip) {
    for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
        const Eigen::Vector2d a = clip[e];
        const Eigen::Vector2d edge = clip[(e + 1) % clip.size()] - a;
        const double scale = edge.norm();
        auto side = [&](const Eigen::Vector2d& p) { return cross2(edge, p - a) / scale; };
        std::vector<Eigen::Vector2d> out;
        out.reserve(subject.size() + 2);
        for (std::size_t i = 0; i < subject.size(); ++i) {
            const Eigen::Vector2d& p = subject[i];
            const Eigen::Vector2d& q = subject[(i + 1) % subject.size()];
            const double sp = side(p), sq = side(q);
            const bool pin = sp >= -kClipTolerance, qin = sq >= -kClipTolerance;
            if (pin) out.push_back(p);
            if (pin != qin && std::abs(sp - sq) > 0.0) {
                const double t = sp / (sp - sq);
                if (t > 0.0 && t < 1.0) out.push_back(p + t * (q - p));
            }
        }
        subject = std::move(out);
    }
    return subject;
}

inline bool box_less(const OrientedBox3D& a, const OrientedBox3D& b) {
    const std::array<double, 7> ka{a.center.x(), a.center.y(), a.center.z(), a.size.x(), a.size.y(), a.size.z(), a.yaw};
    const std::array<double, 7> kb{b.center.x(), b.center.y(), b.center.z(), b.size.x(), b.size.y(), b.size.z(), b.yaw};
    return ka < kb;
}

}  // namespace detail

/// Plan-view area of the intersection of the two yaw-rotated footprints.
inline double footprint_intersection_area(const OrientedBox3D& a, const OrientedBox3D& b) {
    const auto ca = a.corners_xy();
    const auto cb = b.corners_xy();
    return detail::polygon_area(detail::clip_convex({ca.begin(), ca.end()}, cb));
}

/// Volumetric IoU of two yaw-rotated boxes. Exactly symmetric: the pair is put
/// in a canonical order before clipping.
inline double box_iou_3d(const OrientedBox3D& a, const OrientedBox3D& b) {
    a.validate();
    b.validate();
    const bool swap = detail::box_less(b, a);
    const OrientedBox3D& p = swap ? b : a;
    const OrientedBox3D& q = swap ? a : b;
    const double z_lo = std::max(p.center.z() - 0.5 * p.size.z(), q.center.z() - 0.5 * q.size.z());
    const double z_hi = std::min(p.center.z() + 0.5 * p.size.z(), q.center.z() + 0.5 * q.size.z());
    const double dz = z_hi - z_lo;
    if (dz <= 0.0) return 0.0;
    const double inter = footprint_intersection_area(p, q) * dz;
    const double uni = p.volume() + q.volume() - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

/// Class-aware greedy NMS. Returns kept indices in descending score order
/// (ties: smaller index first). A detection is dropped when a kept detection
/// of the same class overlaps it with IoU > `iou_threshold`.
inline std::vector<std::size_t> nms_3d(std::span<const Detection> dets, double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return dets[i].score > dets[j].score; });
    std::vector<std::size_t> kept;
    for (std::size_t i : order) {
        bool suppressed = false;
        for (std::size_t k : kept)
            if (dets[k].class_id == dets[i].class_id && box_iou_3d(dets[k].box, dets[i].box) > iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(i);
    }
    return kept;
}

/// Closed-box containment test per point.
inline std::vector<bool> points_in_box(const Points& xyz, const OrientedBox3D& box) {
    box.validate();
    const Vec3 half = 0.5 * box.size;
    std::vector<bool> mask(static_cast<std::size_t>(xyz.rows()));
    for (Eigen::Index i = 0; i < xyz.rows(); ++i) {
        const Vec3 l = box.to_local(xyz.row(i).transpose());
        mask[static_cast<std::size_t>(i)] =
            std::abs(l.x()) <= half.x() && std::abs(l.y()) <= half.y() && std::abs(l.z()) <= half.z();
    }
    return mask;
}

inline std::size_t count_points_in_box(const Points& xyz, const OrientedBox3D& box) {
    const auto m = points_in_box(xyz, box);
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

/// Offset that puts the 1st percentile of z at 0 (add it to the cloud).
inline double floor_offset(const Points& xyz) {
    if (xyz.rows() == 0) throw std::invalid_argument("floor_offset: empty cloud");
    std::vector<double> z(static_cast<std::size_t>(xyz.rows()));
    for (Eigen::Index i = 0; i < xyz.rows(); ++i) z[static_cast<std::size_t>(i)] = xyz(i, 2);
    const auto k = static_cast<std::size_t>(0.01 * static_cast<double>(z.size() - 1));
    std::nth_element(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(k), z.end());
    return -z[k];
}

}  // namespace mlcvnet
