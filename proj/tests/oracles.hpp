#pragma once

// Independent reference computations used only by tests. None of these call
// into the library's geometry kernels.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <algorithm>
#include <string>

#include "mlcvnet/eval.hpp"
#include "mlcvnet/geom.hpp"
#include "mlcvnet/tensor.hpp"

namespace mlcvnet::oracle {

/// Greedy FPS by definition: each step recomputes every candidate's minimum
/// Euclidean distance to the selected prefix from scratch.
inline std::vector<std::size_t> brute_force_fps(const Points& xyz, std::size_t k, std::size_t start) {
    std::vector<std::size_t> sel{start};
    const auto n = static_cast<std::size_t>(xyz.rows());
    while (sel.size() < k) {
        double best = -1.0;
        std::size_t arg = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double dmin = std::numeric_limits<double>::infinity();
            for (std::size_t s : sel) {
                const double dx = xyz(i, 0) - xyz(s, 0), dy = xyz(i, 1) - xyz(s, 1), dz = xyz(i, 2) - xyz(s, 2);
                dmin = std::min(dmin, std::sqrt(dx * dx + dy * dy + dz * dz));
            }
            if (dmin > best) {
                best = dmin;
                arg = i;
            }
        }
        sel.push_back(arg);
    }
    return sel;
}

/// Stratified Monte-Carlo IoU: `samples` points (one per cell of a cubic grid,
/// jittered uniformly within the cell) fill box `a`; the fraction landing in
/// `b` estimates the intersection volume.
inline double monte_carlo_iou(const OrientedBox3D& a, const OrientedBox3D& b, std::size_t samples, std::mt19937_64& rng) {
    const auto g = static_cast<std::size_t>(std::llround(std::cbrt(static_cast<double>(samples))));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double ca = std::cos(a.yaw), sa = std::sin(a.yaw);
    const double cb = std::cos(b.yaw), sb = std::sin(b.yaw);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < g; ++i)
        for (std::size_t j = 0; j < g; ++j)
            for (std::size_t k = 0; k < g; ++k) {
                const double lx = ((static_cast<double>(i) + u(rng)) / static_cast<double>(g) - 0.5) * a.size.x();
                const double ly = ((static_cast<double>(j) + u(rng)) / static_cast<double>(g) - 0.5) * a.size.y();
                const double lz = ((static_cast<double>(k) + u(rng)) / static_cast<double>(g) - 0.5) * a.size.z();
                const double wx = a.center.x() + ca * lx - sa * ly;
                const double wy = a.center.y() + sa * lx + ca * ly;
                const double wz = a.center.z() + lz;
                const double dx = wx - b.center.x(), dy = wy - b.center.y(), dz = wz - b.center.z();
                const double bx = cb * dx + sb * dy, by = -sb * dx + cb * dy;
                if (std::abs(bx) <= 0.5 * b.size.x() && std::abs(by) <= 0.5 * b.size.y() &&
                    std::abs(dz) <= 0.5 * b.size.z())
                    ++hits;
            }
    const double va = a.size.prod(), vb = b.size.prod();
    const double inter = va * static_cast<double>(hits) / static_cast<double>(g * g * g);
    return inter / (va + vb - inter);
}

/// Random overlapping-ish box pair.
inline std::pair<OrientedBox3D, OrientedBox3D> random_box_pair(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> size(0.2, 2.0), yaw(-3.14159, 3.14159), pos(-3.0, 3.0), jitter(-0.6, 0.6);
    OrientedBox3D a = OrientedBox3D::make({pos(rng), pos(rng), pos(rng)}, {size(rng), size(rng), size(rng)}, yaw(rng));
    const Vec3 off(jitter(rng) * a.size.x(), jitter(rng) * a.size.y(), jitter(rng) * a.size.z());
    OrientedBox3D b = OrientedBox3D::make(a.center + off, {size(rng), size(rng), size(rng)}, yaw(rng));
    return {a, b};
}

// ---------------------------------------------------------------------------
// Non-local attention
// ---------------------------------------------------------------------------

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
    Mat m(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t(i, j);
    return m;
}

inline Mat matmul_ref(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j)
            for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

// Non-local response with the full (R*Dg) x (R*Dg) kernel matrix written out.
inline Mat dense_cgnl(const Mat& a, const Mat& theta, const Mat& phi, const Mat& g, const Mat& z, std::size_t groups) {
    const std::size_t rows = a.size(), d = a[0].size(), w = d / groups, n = rows * w;
    const Mat th = matmul_ref(a, theta), ph = matmul_ref(a, phi), gv = matmul_ref(a, g);
    Mat y(rows, std::vector<double>(d, 0.0));
    for (std::size_t k = 0; k < groups; ++k) {
        std::vector<double> tv(n), pv(n), vv(n);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                tv[r * w + c] = th[r][k * w + c];
                pv[r * w + c] = ph[r][k * w + c];
                vv[r * w + c] = gv[r][k * w + c];
            }
        std::vector<double> kernel(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) kernel[i * n + j] = tv[i] * pv[j];
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += kernel[i * n + j] * vv[j];
            y[i / w][k * w + i % w] = acc / static_cast<double>(n);
        }
    }
    Mat out = matmul_ref(y, z);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) out[r][c] += a[r][c];
    return out;
}

// ---------------------------------------------------------------------------
// Average precision (axis-aligned boxes only)
// ---------------------------------------------------------------------------

inline Detection fixture_det(Vec3 c, Vec3 s, std::size_t cls, double score) {
    return {OrientedBox3D::make(c, s, 0.0), cls, score};
}

inline LabeledBox fixture_gt(Vec3 c, Vec3 s, std::size_t cls) { return {OrientedBox3D::make(c, s, 0.0), cls}; }

inline double aabb_iou(const OrientedBox3D& a, const OrientedBox3D& b) {
    double inter = 1.0;
    for (int d = 0; d < 3; ++d) {
        const double lo = std::max(a.center[d] - a.size[d] / 2, b.center[d] - b.size[d] / 2);
        const double hi = std::min(a.center[d] + a.size[d] / 2, b.center[d] + b.size[d] / 2);
        inter *= std::max(0.0, hi - lo);
    }
    return inter / (a.size.prod() + b.size.prod() - inter);
}

struct OracleDet {
    std::size_t scene;
    Detection d;
};

// Per class: gather detections over all scenes, rank by score, and for each
// compute precision/recall after it; AP sums recall increments times the
// best precision at that recall or beyond.
inline double oracle_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<LabeledBox>>& gts,
                 std::size_t cls, double th) {
    std::vector<OracleDet> pool;
    std::size_t n_gt = 0;
    for (std::size_t s = 0; s < gts.size(); ++s) {
        for (const auto& g : gts[s]) n_gt += g.class_id == cls;
        for (const auto& d : dets[s])
            if (d.class_id == cls) pool.push_back({s, d});
    }
    if (n_gt == 0) return std::nan("");
    // Matching happens per scene in score order, same-class only.
    std::vector<std::vector<bool>> taken(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) taken[s].assign(gts[s].size(), false);
    std::sort(pool.begin(), pool.end(), [](const OracleDet& a, const OracleDet& b) { return a.d.score > b.d.score; });
    std::vector<int> tp(pool.size(), 0);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& g = gts[pool[i].scene];
        double best = -1;
        std::size_t arg = g.size();
        for (std::size_t j = 0; j < g.size(); ++j)
            if (!taken[pool[i].scene][j] && g[j].class_id == cls && aabb_iou(pool[i].d.box, g[j].box) > best) {
                best = aabb_iou(pool[i].d.box, g[j].box);
                arg = j;
            }
        if (arg < g.size() && best >= th) {
            taken[pool[i].scene][arg] = true;
            tp[i] = 1;
        }
    }
    std::vector<double> prec(pool.size()), rec(pool.size());
    int acc = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        acc += tp[i];
        prec[i] = acc / static_cast<double>(i + 1);
        rec[i] = acc / static_cast<double>(n_gt);
    }
    double ap = 0, prev = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (rec[i] <= prev) continue;
        double pmax = 0;
        for (std::size_t j = i; j < pool.size(); ++j) pmax = std::max(pmax, prec[j]);
        ap += (rec[i] - prev) * pmax;
        prev = rec[i];
    }
    return ap;
}

struct Dataset {
    std::vector<SceneDetections> dets;
    std::vector<SceneTruth> truths;
    std::vector<std::vector<Detection>> raw_dets;
    std::vector<std::vector<LabeledBox>> raw_gts;
};

// Ten scenes of axis-aligned boxes; each gt gets 0-2 jittered detections
// (occasionally with the wrong class) plus random false positives.
inline Dataset noisy_fixture(std::uint64_t seed, std::size_t classes = 3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1), pos(0, 8), sz(0.4, 1.5), jit(-0.25, 0.25);
    std::uniform_int_distribution<std::size_t> cls(0, classes - 1), cnt(0, 2), ngt(1, 5);
    Dataset out;
    for (int s = 0; s < 10; ++s) {
        std::vector<LabeledBox> g;
        std::vector<Detection> d;
        const std::size_t n = ngt(rng);
        for (std::size_t i = 0; i < n; ++i) g.push_back(fixture_gt({pos(rng), pos(rng), 0.5}, {sz(rng), sz(rng), sz(rng)}, cls(rng)));
        for (const auto& b : g) {
            const std::size_t k = cnt(rng);
            for (std::size_t i = 0; i < k; ++i) {
                const Vec3 c = b.box.center + Vec3(jit(rng), jit(rng), 0.5 * jit(rng));
                const Vec3 s2 = b.box.size.cwiseProduct(Vec3(1 + jit(rng), 1 + jit(rng), 1 + jit(rng)));
                d.push_back(fixture_det(c, s2, u(rng) < 0.15 ? cls(rng) : b.class_id, u(rng)));
            }
        }
        for (int i = 0; i < 2; ++i) d.push_back(fixture_det({pos(rng), pos(rng), 0.5}, {sz(rng), sz(rng), sz(rng)}, cls(rng), u(rng)));
        const std::string id = "s" + std::to_string(s);
        out.dets.push_back({id, d});
        out.truths.push_back({id, g});
        out.raw_dets.push_back(d);
        out.raw_gts.push_back(g);
    }
    return out;
}

}  // namespace mlcvnet::oracle
