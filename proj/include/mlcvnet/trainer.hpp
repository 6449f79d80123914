#pragma once

// Adam, step-decay schedule and the seeded training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "detector.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace mlcvnet {

class Adam {
public:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

    Adam() = default;
    explicit Adam(const std::vector<Tensor>& params) : params_(params) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    std::uint64_t steps() const { return step_; }
    const std::vector<Tensor>& params() const { return params_; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_steps(std::uint64_t s) { step_ = s; }

    /// One update from the accumulated grads. Every grad is checked first, so a
    /// rejected step leaves parameters and moments untouched.
    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].has_grad()) continue;
            for (double g : params_[i].grad())
                if (!std::isfinite(g)) throw NonFiniteGradientError("adam: non-finite gradient in parameter " + std::to_string(i));
        }
        ++step_;
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].has_grad()) continue;
            auto p = params_[i].data();
            const auto g = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
                v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
                const double mh = m[j] / c1, vh = v[j] / c2;
                p[j] -= lr * mh / (std::sqrt(vh) + kEps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t step_ = 0;
};

struct Schedule {
    double base_lr = 0.005;
    std::vector<std::size_t> decay_epochs{30, 45};
    std::vector<double> decay_rates{0.1, 0.1};

    void validate() const {
        if (!(base_lr > 0)) throw std::invalid_argument("schedule: base_lr must be positive");
        if (decay_epochs.size() != decay_rates.size())
            throw std::invalid_argument("schedule: decay_epochs and decay_rates differ in length");
        for (std::size_t i = 1; i < decay_epochs.size(); ++i)
            if (decay_epochs[i] <= decay_epochs[i - 1])
                throw std::invalid_argument("schedule: decay epochs must be strictly increasing");
        for (double r : decay_rates)
            if (!(r > 0 && r <= 1)) throw std::invalid_argument("schedule: decay rates must lie in (0, 1]");
    }

    /// Rate for 0-based `epoch`: base times every rate whose decay epoch has been reached.
    double lr_at(std::size_t epoch) const {
        double lr = base_lr;
        for (std::size_t i = 0; i < decay_epochs.size(); ++i)
            if (epoch >= decay_epochs[i]) lr *= decay_rates[i];
        return lr;
    }
};

struct TrainConfig {
    Schedule schedule;
    std::size_t epochs = 60;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    bool augment = true;
    std::size_t map_every = 10;  // held-out mAP@0.25 every N epochs and at the end; 0 disables

    void validate() const {
        schedule.validate();
        if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;  // 1-based
    double total_loss = 0, vote_loss = 0, objectness_loss = 0, box_loss = 0, cls_loss = 0;
    double lr = 0;
    std::optional<double> map25;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
    nlohmann::json j{{"epoch", m.epoch},         {"total_loss", m.total_loss},
                     {"vote_loss", m.vote_loss}, {"objectness_loss", m.objectness_loss},
                     {"box_loss", m.box_loss},   {"cls_loss", m.cls_loss},
                     {"lr", m.lr}};
    if (m.map25) j["map25"] = *m.map25;
    return j;
}

/// Rigid z-rotation plus optional mirror across the yz plane, applied to a
/// scene and its labels together.
struct Augmentation {
    bool flip_x = false;
    double rotation = 0.0;

    static Augmentation draw(std::mt19937_64& rng) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Augmentation a;
        a.flip_x = u(rng) < 0.5;
        a.rotation = -std::numbers::pi + 2.0 * std::numbers::pi * u(rng);
        return a;
    }

    Vec3 apply(Vec3 p) const {
        if (flip_x) p.x() = -p.x();
        const double c = std::cos(rotation), s = std::sin(rotation);
        return {c * p.x() - s * p.y(), s * p.x() + c * p.y(), p.z()};
    }

    // The mirror sends the box's x axis to angle pi - yaw, but that frame is
    // left-handed. Using -yaw describes the same box with a proper rotation and
    // keeps a chair's back on its local +y side.
    double apply_yaw(double yaw) const { return (flip_x ? -yaw : yaw) + rotation; }

    Scene apply(const Scene& in, const std::vector<bool>& half_turn_symmetric) const {
        Scene out = in;
        for (Eigen::Index i = 0; i < out.cloud.xyz.rows(); ++i) out.cloud.xyz.row(i) = apply(Vec3(in.cloud.xyz.row(i))).transpose();
        for (auto& g : out.gt)
            g.box = OrientedBox3D::make(apply(g.box.center), g.box.size,
                                        canonical_yaw(apply_yaw(g.box.yaw), half_turn_symmetric.at(g.class_id)));
        return out;
    }
};

/// Shifts the cloud so its floor sits at z = 0 (labels follow); returns the shift.
inline double align_floor(Scene& s) {
    const double dz = floor_offset(s.cloud.xyz);
    s.cloud.xyz.col(2).array() += dz;
    for (auto& g : s.gt) g.box.center.z() += dz;
    return dz;
}

inline std::vector<SceneDetections> detect_all(Detector& model, std::span<const Scene> scenes) {
    std::vector<SceneDetections> out;
    for (const auto& s : scenes) out.push_back({s.scene_id, model.detect(s.cloud)});
    return out;
}

inline std::vector<SceneTruth> truths_of(std::span<const Scene> scenes) {
    std::vector<SceneTruth> out;
    for (const auto& s : scenes) out.push_back({s.scene_id, s.gt});
    return out;
}

inline double held_out_map25(Detector& model, std::span<const Scene> scenes) {
    const auto res = evaluate(detect_all(model, scenes), truths_of(scenes), {0.25}, model.config().num_classes());
    return res.map.at(0);
}

struct TrainResult {
    std::vector<EpochMetrics> log;
    bool diverged = false;
    std::string divergence;  // what went wrong, when diverged
};

/// Copies of every parameter value (including normalization statistics).
inline std::vector<std::vector<double>> snapshot(const ParamList& params) {
    std::vector<std::vector<double>> out;
    for (const auto& p : params) out.push_back(p.tensor.values());
    return out;
}

inline void restore(const ParamList& params, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        std::copy(values[i].begin(), values[i].end(), t.data().begin());
    }
}

/// Deterministic in (model init, data, config). Each scene is one forward /
/// backward; grads accumulate over a batch of scenes and the summed loss is
/// scaled by 1 / batch. On a non-finite loss or gradient the parameters are
/// rolled back to the end of the last completed epoch and training stops.
inline TrainResult train(Detector& model, std::span<const Scene> scenes, const TrainConfig& cfg,
                         std::span<const Scene> held_out = {},
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    cfg.validate();
    if (scenes.empty()) throw std::invalid_argument("train: empty dataset");
    const ParamList params = model.parameters();
    Adam opt(trainable(params));
    std::mt19937_64 rng(cfg.seed);
    TrainResult result;
    auto last_good = snapshot(params);

    std::vector<Scene> aligned(scenes.begin(), scenes.end());
    for (auto& s : aligned) align_floor(s);

    std::vector<std::size_t> order(scenes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = cfg.schedule.lr_at(epoch);
        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = lr;
        try {
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg.batch_size);
                opt.zero_grad();
                for (std::size_t b = start; b < end; ++b) {
                    const Scene& base = aligned[order[b]];
                    const Scene scene = cfg.augment ? Augmentation::draw(rng).apply(base, model.config().half_turn_symmetric)
                                                    : base;
                    auto f = model.forward(scene.cloud, Mode::train);
                    auto loss = model.loss(f, scene.gt);
                    const double total = loss.total.item();
                    if (!std::isfinite(total)) throw NonFiniteGradientError("train: non-finite loss");
                    backward(scale(loss.total, 1.0 / static_cast<double>(end - start)));
                    m.total_loss += total;
                    m.vote_loss += loss.vote;
                    m.objectness_loss += loss.objectness;
                    m.box_loss += loss.box();
                    m.cls_loss += loss.semantic;
                }
                opt.step(lr);
            }
        } catch (const NonFiniteGradientError& e) {
            restore(params, last_good);
            result.diverged = true;
            result.divergence = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
            return result;
        }
        const double n = static_cast<double>(scenes.size());
        m.total_loss /= n;
        m.vote_loss /= n;
        m.objectness_loss /= n;
        m.box_loss /= n;
        m.cls_loss /= n;
        if (!held_out.empty() && cfg.map_every > 0 && ((epoch + 1) % cfg.map_every == 0 || epoch + 1 == cfg.epochs))
            m.map25 = held_out_map25(model, held_out);
        last_good = snapshot(params);
        result.log.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return result;
}

}  // namespace mlcvnet
