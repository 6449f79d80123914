#pragma once

// Object categories produced by the synthetic scene generator.

#include <numbers>
#include <string>
#include <vector>

#include "geom.hpp"

namespace mlcvnet {

enum class Primitive { table, chair, cabinet };

struct ObjectClassSpec {
    std::string name;
    Primitive shape = Primitive::table;
    Vec3 min_size = Vec3::Ones();  // full extents, including the annotation margin
    Vec3 max_size = Vec3::Ones();
    double probability = 1.0;
    /// Looks the same after a half turn; labels keep yaw in [-pi/2, pi/2).
    bool half_turn_symmetric = false;

    Vec3 mean_size() const { return 0.5 * (min_size + max_size); }
};

/// Label yaw for a class that looks the same after a half turn: [-pi/2, pi/2).
inline double canonical_yaw(double yaw, bool half_turn_symmetric) {
    yaw = normalize_yaw(yaw);
    if (!half_turn_symmetric) return yaw;
    if (yaw >= std::numbers::pi / 2) return normalize_yaw(yaw - std::numbers::pi);
    if (yaw < -std::numbers::pi / 2) return normalize_yaw(yaw + std::numbers::pi);
    return yaw;
}

inline std::vector<ObjectClassSpec> default_object_classes() {
    return {
        {"table", Primitive::table, {1.0, 0.6, 0.70}, {1.6, 1.0, 0.80}, 1.0 / 3.0, true},
        {"chair", Primitive::chair, {0.45, 0.45, 0.80}, {0.60, 0.60, 1.00}, 1.0 / 3.0, false},
        {"cabinet", Primitive::cabinet, {0.5, 0.4, 1.40}, {0.9, 0.6, 2.00}, 1.0 / 3.0, true},
    };
}

inline std::vector<Vec3> mean_sizes(const std::vector<ObjectClassSpec>& classes) {
    std::vector<Vec3> out;
    for (const auto& c : classes) out.push_back(c.mean_size());
    return out;
}

inline std::vector<bool> symmetry_flags(const std::vector<ObjectClassSpec>& classes) {
    std::vector<bool> out;
    for (const auto& c : classes) out.push_back(c.half_turn_symmetric);
    return out;
}

inline std::vector<std::string> class_names(const std::vector<ObjectClassSpec>& classes) {
    std::vector<std::string> out;
    for (const auto& c : classes) out.push_back(c.name);
    return out;
}

}  // namespace mlcvnet
