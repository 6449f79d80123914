#pragma once

// Synthetic indoor scenes and their on-disk formats (ASCII PLY clouds plus a
// JSON annotation file per scene).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "backbone.hpp"
#include "classes.hpp"
#include "errors.hpp"
#include "geom.hpp"

namespace mlcvnet {

struct SceneConfig {
    std::vector<ObjectClassSpec> classes = default_object_classes();
    double room_x = 4.0, room_y = 4.0;  // floor spans [-x/2, x/2] x [-y/2, y/2]
    std::size_t min_objects = 2, max_objects = 5;
    double floor_density = 60.0;    // points per square meter before resampling
    double surface_density = 500.0;  // object surface points per square meter
    double noise_sigma = 0.005;
    double margin = 0.015;  // geometry is inset this far inside its labeled box
    std::size_t max_dropouts = 2;
    double dropout_min_radius = 0.1, dropout_max_radius = 0.3;
    std::size_t num_points = 2048;
    std::size_t min_points_per_box = 32;
    std::size_t max_placement_attempts = 100;

    void validate() const {
        if (classes.size() < 2) throw std::invalid_argument("scene config: at least 2 object classes required");
        if (max_objects == 0) throw std::invalid_argument("scene config: zero objects configured");
        if (min_objects > max_objects) throw std::invalid_argument("scene config: min_objects > max_objects");
        if (!(room_x > 0 && room_y > 0)) throw std::invalid_argument("scene config: room must have positive extent");
        if (num_points == 0) throw std::invalid_argument("scene config: num_points must be positive");
        for (const auto& c : classes) {
            if (!(c.probability > 0)) throw std::invalid_argument("scene config: class probability must be positive");
            if (!((c.min_size.array() > 2 * margin).all() && (c.max_size.array() >= c.min_size.array()).all()))
                throw std::invalid_argument("scene config: bad size range for class " + c.name);
        }
    }
};

struct Scene {
    PointCloud cloud;
    std::vector<LabeledBox> gt;
    std::string scene_id;
    std::uint64_t rng_seed = 0;      // seed that produced this scene
    std::size_t regenerations = 0;  // placement failures before rng_seed succeeded
};

namespace detail {

// Axis-aligned solid in an object's local frame (z measured from the floor).
struct Cuboid {
    Vec3 lo, hi;
};

// Primitive geometry filling the local box [-s/2, s/2]^2 x [0, s.z], shrunk by m.
inline std::vector<Cuboid> primitive_parts(Primitive shape, const Vec3& s, double m) {
    const double x0 = -s.x() / 2 + m, x1 = s.x() / 2 - m;
    const double y0 = -s.y() / 2 + m, y1 = s.y() / 2 - m;
    const double z0 = m, z1 = s.z() - m;
    const double leg = 0.05, slab = 0.04;
    auto legs = [&](double top) {
        return std::vector<Cuboid>{{{x0, y0, z0}, {x0 + leg, y0 + leg, top}},
                                   {{x1 - leg, y0, z0}, {x1, y0 + leg, top}},
                                   {{x0, y1 - leg, z0}, {x0 + leg, y1, top}},
                                   {{x1 - leg, y1 - leg, z0}, {x1, y1, top}}};
    };
    switch (shape) {
        case Primitive::table: {
            auto parts = legs(z1 - slab);
            parts.push_back({{x0, y0, z1 - slab}, {x1, y1, z1}});
            return parts;
        }
        case Primitive::chair: {
            const double seat = z0 + 0.5 * (z1 - z0);
            auto parts = legs(seat - slab);
            parts.push_back({{x0, y0, seat - slab}, {x1, y1, seat}});
            parts.push_back({{x0, y1 - slab, seat}, {x1, y1, z1}});  // back rest on the +y side
            return parts;
        }
        case Primitive::cabinet:
            return {{{x0, y0, z0}, {x1, y1, z1}}};
    }
    return {};
}

inline void sample_cuboid_surface(const Cuboid& c, double density, std::mt19937_64& rng, std::vector<Vec3>& out) {
    const Vec3 e = c.hi - c.lo;
    const double areas[3] = {e.y() * e.z(), e.x() * e.z(), e.x() * e.y()};  // faces normal to x, y, z
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int axis = 0; axis < 3; ++axis)
        for (int side = 0; side < 2; ++side) {
            const auto n = static_cast<std::size_t>(std::ceil(areas[axis] * density));
            for (std::size_t i = 0; i < n; ++i) {
                Vec3 p = c.lo + Vec3(u(rng) * e.x(), u(rng) * e.y(), u(rng) * e.z());
                p[axis] = side ? c.hi[axis] : c.lo[axis];
                out.push_back(p);
            }
        }
}

inline bool footprint_inside_room(const OrientedBox3D& b, double rx, double ry) {
    for (const auto& c : b.corners_xy())
        if (std::abs(c.x()) > rx / 2 || std::abs(c.y()) > ry / 2) return false;
    return true;
}

// One attempt; empty optional-like result (false) on placement or visibility failure.
inline bool try_generate(std::uint64_t seed, const SceneConfig& cfg, Scene& scene) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> count(cfg.min_objects, cfg.max_objects);
    std::vector<double> weights;
    for (const auto& c : cfg.classes) weights.push_back(c.probability);
    std::discrete_distribution<std::size_t> pick_class(weights.begin(), weights.end());

    const std::size_t k = count(rng);
    std::vector<LabeledBox> gt;
    std::vector<Vec3> raw;
    for (std::size_t o = 0; o < k; ++o) {
        const std::size_t cls = pick_class(rng);
        const auto& spec = cfg.classes[cls];
        bool placed = false;
        for (std::size_t attempt = 0; attempt < cfg.max_placement_attempts && !placed; ++attempt) {
            Vec3 size;
            for (int d = 0; d < 3; ++d) size[d] = spec.min_size[d] + u(rng) * (spec.max_size[d] - spec.min_size[d]);
            const double yaw = -std::numbers::pi + 2.0 * std::numbers::pi * u(rng);
            const Vec3 center(cfg.room_x * (u(rng) - 0.5), cfg.room_y * (u(rng) - 0.5), size.z() / 2);
            auto box = OrientedBox3D::make(center, size, yaw);
            if (!footprint_inside_room(box, cfg.room_x, cfg.room_y)) continue;
            bool overlaps = false;
            for (const auto& g : gt) overlaps = overlaps || footprint_intersection_area(box, g.box) > 0.0;
            if (overlaps) continue;

            std::vector<Vec3> local;
            for (const auto& part : primitive_parts(spec.shape, size, cfg.margin))
                sample_cuboid_surface(part, cfg.surface_density, rng, local);
            const double c = std::cos(yaw), s = std::sin(yaw);
            for (const auto& p : local)
                raw.emplace_back(center.x() + c * p.x() - s * p.y(), center.y() + s * p.x() + c * p.y(), p.z());

            box.yaw = canonical_yaw(box.yaw, spec.half_turn_symmetric);
            gt.push_back({box, cls});
            placed = true;
        }
        if (!placed) return false;
    }

    const auto floor_n = static_cast<std::size_t>(std::ceil(cfg.room_x * cfg.room_y * cfg.floor_density));
    for (std::size_t i = 0; i < floor_n; ++i)
        raw.emplace_back(cfg.room_x * (u(rng) - 0.5), cfg.room_y * (u(rng) - 0.5), 0.0);

    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (auto& p : raw)
        for (int d = 0; d < 3; ++d) p[d] += noise(rng);

    std::uniform_int_distribution<std::size_t> dropouts(0, cfg.max_dropouts);
    const std::size_t nd = dropouts(rng);
    for (std::size_t i = 0; i < nd && !raw.empty(); ++i) {
        std::uniform_int_distribution<std::size_t> pick(0, raw.size() - 1);
        const Vec3 c = raw[pick(rng)];
        const double r = cfg.dropout_min_radius + u(rng) * (cfg.dropout_max_radius - cfg.dropout_min_radius);
        std::erase_if(raw, [&](const Vec3& p) { return (p - c).norm() < r; });
    }
    if (raw.empty()) return false;

    const auto rows = resample_indices(raw.size(), cfg.num_points, rng());
    scene.cloud.xyz.resize(static_cast<Eigen::Index>(rows.size()), 3);
    for (std::size_t i = 0; i < rows.size(); ++i) scene.cloud.xyz.row(static_cast<Eigen::Index>(i)) = raw[rows[i]];
    scene.cloud.features.resize(0, 0);
    for (const auto& g : gt)
        if (count_points_in_box(scene.cloud.xyz, g.box) < cfg.min_points_per_box) return false;
    scene.gt = std::move(gt);
    return true;
}

}  // namespace detail

inline std::string scene_name(std::uint64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05llu", static_cast<unsigned long long>(index));
    return buf;
}

/// Deterministic in (seed, config). An attempt whose objects cannot be placed
/// or end up with too few visible points is retried with seed + 1.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg, std::string scene_id = {}) {
    cfg.validate();
    Scene scene;
    scene.scene_id = scene_id.empty() ? scene_name(seed) : std::move(scene_id);
    for (std::size_t retry = 0; retry < 1000; ++retry) {
        if (detail::try_generate(seed + retry, cfg, scene)) {
            scene.rng_seed = seed + retry;
            scene.regenerations = retry;
            return scene;
        }
    }
    throw std::runtime_error("generate_scene: no valid scene after 1000 regenerations");
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline void write_ply(std::ostream& os, const PointCloud& cloud) {
    os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
       << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
    for (Eigen::Index i = 0; i < cloud.xyz.rows(); ++i)
        os << format_double(cloud.xyz(i, 0)) << ' ' << format_double(cloud.xyz(i, 1)) << ' '
           << format_double(cloud.xyz(i, 2)) << '\n';
}

namespace detail {
inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline bool parse_double(std::string_view s, double& v) {
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}
}  // namespace detail

/// ASCII PLY with a single vertex element whose first three properties are
/// x, y, z (float or double). Other properties are not supported.
inline PointCloud read_ply(std::istream& is) {
    std::string line;
    std::size_t ln = 0;
    auto next = [&](const char* expect) -> std::string& {
        if (!std::getline(is, line)) throw ParseError(std::string("ply: unexpected end of file, expected ") + expect, ln + 1);
        ++ln;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    };
    if (next("magic") != "ply") throw ParseError("ply: missing 'ply' magic", ln);
    std::size_t count = 0;
    bool have_format = false, have_element = false;
    std::vector<std::string> props;
    for (;;) {
        const auto tok = detail::split_ws(next("header line"));
        if (tok.empty()) throw ParseError("ply: empty header line", ln);
        if (tok[0] == "end_header") break;
        if (tok[0] == "comment" || tok[0] == "obj_info") continue;
        if (tok[0] == "format") {
            if (tok.size() != 3 || tok[1] != "ascii") throw ParseError("ply: only 'format ascii 1.0' is supported", ln);
            have_format = true;
        } else if (tok[0] == "element") {
            if (tok.size() != 3 || tok[1] != "vertex" || have_element)
                throw ParseError("ply: expected a single 'element vertex N'", ln);
            auto r = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), count);
            if (r.ec != std::errc() || r.ptr != tok[2].data() + tok[2].size())
                throw ParseError("ply: bad vertex count '" + std::string(tok[2]) + "'", ln);
            have_element = true;
        } else if (tok[0] == "property") {
            if (!have_element) throw ParseError("ply: property before element", ln);
            if (tok.size() != 3 || (tok[1] != "double" && tok[1] != "float"))
                throw ParseError("ply: unsupported property declaration", ln);
            props.emplace_back(tok[2]);
        } else {
            throw ParseError("ply: unknown header keyword '" + std::string(tok[0]) + "'", ln);
        }
    }
    if (!have_format) throw ParseError("ply: missing format line", ln);
    if (!have_element) throw ParseError("ply: missing vertex element", ln);
    if (props != std::vector<std::string>{"x", "y", "z"})
        throw ParseError("ply: vertex properties must be exactly x y z", ln);

    PointCloud cloud;
    cloud.xyz.resize(static_cast<Eigen::Index>(count), 3);
    for (std::size_t i = 0; i < count; ++i) {
        const auto tok = detail::split_ws(next("vertex"));
        if (tok.size() != 3)
            throw ParseError("ply: vertex " + std::to_string(i) + " has " + std::to_string(tok.size()) +
                                 " fields, expected 3",
                             ln);
        for (int d = 0; d < 3; ++d) {
            double v;
            if (!detail::parse_double(tok[static_cast<std::size_t>(d)], v))
                throw ParseError("ply: bad number '" + std::string(tok[static_cast<std::size_t>(d)]) + "'", ln);
            cloud.xyz(static_cast<Eigen::Index>(i), d) = v;
        }
    }
    while (std::getline(is, line)) {
        ++ln;
        if (!detail::split_ws(line).empty()) throw ParseError("ply: trailing content after vertex data", ln);
    }
    cloud.validate();
    return cloud;
}

inline void save_ply(const std::filesystem::path& path, const PointCloud& cloud) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_ply(os, cloud);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline PointCloud load_ply(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return read_ply(is);
}

// ---------------------------------------------------------------------------
// Scene annotations
// ---------------------------------------------------------------------------

inline nlohmann::json box_json(const OrientedBox3D& b) {
    return {{"center", {b.center.x(), b.center.y(), b.center.z()}},
            {"size", {b.size.x(), b.size.y(), b.size.z()}},
            {"yaw", b.yaw}};
}

inline nlohmann::json scene_json(const Scene& s, const std::vector<std::string>& class_names) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& g : s.gt) {
        auto o = box_json(g.box);
        o["class"] = class_names.at(g.class_id);
        objs.push_back(o);
    }
    return {{"scene_id", s.scene_id}, {"rng_seed", s.rng_seed}, {"regenerations", s.regenerations}, {"objects", objs}};
}

namespace detail {
inline const nlohmann::json& field(const nlohmann::json& j, const char* name, const std::string& where) {
    if (!j.is_object() || !j.contains(name)) throw ParseError(where + ": missing field \"" + name + "\"");
    return j.at(name);
}

inline Vec3 vec3_field(const nlohmann::json& j, const char* name, const std::string& where) {
    const auto& v = field(j, name, where);
    if (!v.is_array() || v.size() != 3) throw ParseError(where + ": field \"" + name + "\" must be an array of 3 numbers");
    Vec3 out;
    for (std::size_t d = 0; d < 3; ++d) {
        if (!v[d].is_number()) throw ParseError(where + ": field \"" + name + "\" must be an array of 3 numbers");
        out[static_cast<Eigen::Index>(d)] = v[d].get<double>();
    }
    return out;
}

inline double number_field(const nlohmann::json& j, const char* name, const std::string& where) {
    const auto& v = field(j, name, where);
    if (!v.is_number()) throw ParseError(where + ": field \"" + name + "\" must be a number");
    return v.get<double>();
}

inline std::size_t class_index(const std::string& name, const std::vector<std::string>& class_names,
                               const std::string& where) {
    auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) throw ParseError(where + ": unknown class \"" + name + "\"");
    return static_cast<std::size_t>(it - class_names.begin());
}

inline OrientedBox3D box_from_json(const nlohmann::json& o, const std::string& where) {
    const Vec3 c = vec3_field(o, "center", where), s = vec3_field(o, "size", where);
    const double yaw = number_field(o, "yaw", where);
    try {
        return OrientedBox3D::make(c, s, yaw);
    } catch (const std::invalid_argument& e) {
        throw ParseError(where + ": " + e.what());
    }
}

inline nlohmann::json parse_json_text(std::istream& is, const std::string& what) {
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(what + ": " + e.what());
    }
}
}  // namespace detail

/// Annotations only; the cloud is stored separately.
inline Scene scene_from_json(const nlohmann::json& j, const std::vector<std::string>& class_names) {
    Scene s;
    const auto& id = detail::field(j, "scene_id", "scene");
    if (!id.is_string()) throw ParseError("scene: field \"scene_id\" must be a string");
    s.scene_id = id.get<std::string>();
    for (const char* key : {"rng_seed", "regenerations"})
        if (j.contains(key) && !j.at(key).is_number_unsigned())
            throw ParseError(std::string("scene: field \"") + key + "\" must be a non-negative integer");
    if (j.contains("rng_seed")) s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    if (j.contains("regenerations")) s.regenerations = j.at("regenerations").get<std::size_t>();
    const auto& objs = detail::field(j, "objects", "scene");
    if (!objs.is_array()) throw ParseError("scene: field \"objects\" must be an array");
    for (std::size_t i = 0; i < objs.size(); ++i) {
        const std::string where = "scene objects[" + std::to_string(i) + "]";
        const auto& cls = detail::field(objs[i], "class", where);
        if (!cls.is_string()) throw ParseError(where + ": field \"class\" must be a string");
        s.gt.push_back({detail::box_from_json(objs[i], where), detail::class_index(cls.get<std::string>(), class_names, where)});
    }
    return s;
}

inline void save_scene_json(const std::filesystem::path& path, const Scene& s,
                            const std::vector<std::string>& class_names) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << scene_json(s, class_names).dump(2) << '\n';
}

inline Scene load_scene_json(const std::filesystem::path& path, const std::vector<std::string>& class_names) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return scene_from_json(detail::parse_json_text(is, path.string()), class_names);
}

// ---------------------------------------------------------------------------
// Detections: {scene_id, detections:[{class, score, center, size, yaw}]}
// ---------------------------------------------------------------------------

inline nlohmann::json detections_json(const std::string& scene_id, std::span<const Detection> dets,
                                      const std::vector<std::string>& class_names) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& d : dets) {
        auto o = box_json(d.box);
        o["class"] = class_names.at(d.class_id);
        o["score"] = d.score;
        list.push_back(o);
    }
    return {{"scene_id", scene_id}, {"detections", list}};
}

struct DetectionFile {
    std::string scene_id;
    std::vector<Detection> detections;
};

inline DetectionFile detections_from_json(const nlohmann::json& j, const std::vector<std::string>& class_names) {
    DetectionFile out;
    const auto& id = detail::field(j, "scene_id", "detections");
    if (!id.is_string()) throw ParseError("detections: field \"scene_id\" must be a string");
    out.scene_id = id.get<std::string>();
    const auto& list = detail::field(j, "detections", "detections");
    if (!list.is_array()) throw ParseError("detections: field \"detections\" must be an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string where = "detections[" + std::to_string(i) + "]";
        const auto& cls = detail::field(list[i], "class", where);
        if (!cls.is_string()) throw ParseError(where + ": field \"class\" must be a string");
        Detection d;
        d.box = detail::box_from_json(list[i], where);
        d.class_id = detail::class_index(cls.get<std::string>(), class_names, where);
        d.score = detail::number_field(list[i], "score", where);
        out.detections.push_back(d);
    }
    return out;
}

inline void save_detections_json(const std::filesystem::path& path, const std::string& scene_id,
                                 std::span<const Detection> dets, const std::vector<std::string>& class_names) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << detections_json(scene_id, dets, class_names).dump(2) << '\n';
}

inline DetectionFile load_detections_json(const std::filesystem::path& path, const std::vector<std::string>& class_names) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return detections_from_json(detail::parse_json_text(is, path.string()), class_names);
}

inline std::vector<std::filesystem::path> json_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
}

// ---------------------------------------------------------------------------
// Scene directories: <id>.ply + <id>.json pairs
// ---------------------------------------------------------------------------

inline void save_scene(const std::filesystem::path& dir, const Scene& s, const std::vector<std::string>& class_names) {
    std::filesystem::create_directories(dir);
    save_ply(dir / (s.scene_id + ".ply"), s.cloud);
    save_scene_json(dir / (s.scene_id + ".json"), s, class_names);
}

/// Every <id>.json in `dir` with its matching cloud, in lexicographic id order.
inline std::vector<Scene> load_scene_dir(const std::filesystem::path& dir, const std::vector<std::string>& class_names) {
    std::vector<Scene> out;
    for (const auto& f : json_files(dir)) {
        Scene s = load_scene_json(f, class_names);
        auto ply = f;
        ply.replace_extension(".ply");
        s.cloud = load_ply(ply);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace mlcvnet
