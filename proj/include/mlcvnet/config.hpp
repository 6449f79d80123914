#pragma once

// JSON form of the model, training and scene configurations. Readers are
// strict: an unknown key is an error that lists the valid ones.

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "detector.hpp"
#include "errors.hpp"
#include "trainer.hpp"

namespace mlcvnet {

using Json = nlohmann::json;

namespace detail {

template <class T>
inline T json_get(const Json& v, const std::string& where) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
                throw ConfigError(where + ": expected a non-negative integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(where + ": expected a number");
        }
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + ": wrong type");
    }
}

// Reads keys of one JSON object, remembering which were consumed.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    ObjectReader& get(const std::string& key, T& out) {
        valid_.insert(key);
        if (j_.contains(key)) out = json_get<T>(j_.at(key), path(key));
        return *this;
    }

    ObjectReader& get(const std::string& key, Vec3& out) {
        valid_.insert(key);
        if (j_.contains(key)) out = vec3(j_.at(key), path(key));
        return *this;
    }

    template <class F>
    ObjectReader& with(const std::string& key, F&& f) {
        valid_.insert(key);
        if (j_.contains(key)) f(j_.at(key), path(key));
        return *this;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!valid_.count(k)) {
                std::string list;
                for (const auto& name : valid_) list += (list.empty() ? "" : ", ") + name;
                throw ConfigError(where_ + ": unknown key \"" + k + "\" (valid keys: " + list + ")");
            }
    }

    static Vec3 vec3(const Json& v, const std::string& where) {
        if (!v.is_array() || v.size() != 3) throw ConfigError(where + ": expected an array of 3 numbers");
        return {json_get<double>(v[0], where), json_get<double>(v[1], where), json_get<double>(v[2], where)};
    }

private:
    std::string path(const std::string& key) const { return where_ + "." + key; }
    const Json& j_;
    std::string where_;
    std::set<std::string> valid_;
};

template <class T>
inline std::vector<T> json_list(const Json& v, const std::string& where) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array");
    std::vector<T> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(json_get<T>(v[i], where + "[" + std::to_string(i) + "]"));
    return out;
}

inline Json vec3_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

inline Json to_json(const ModelConfig& c) {
    Json sa = Json::array();
    for (const auto& l : c.backbone.sa)
        sa.push_back({{"num_centers", l.num_centers}, {"radius", l.radius}, {"max_samples", l.max_samples}, {"mlp", l.mlp}});
    Json priors = Json::array();
    for (const auto& p : c.size_priors) priors.push_back(detail::vec3_json(p));
    const auto& w = c.loss_weights;
    return {{"num_points", c.backbone.num_points},
            {"min_points", c.backbone.min_points},
            {"sa", sa},
            {"fp", c.backbone.fp},
            {"class_names", c.class_names},
            {"size_priors", priors},
            {"half_turn_symmetric", c.half_turn_symmetric},
            {"num_heading_bins", c.num_heading_bins},
            {"vote_hidden", c.vote_hidden},
            {"num_clusters", c.num_clusters},
            {"cluster_radius", c.cluster_radius},
            {"cluster_samples", c.cluster_samples},
            {"cluster_mlp", c.cluster_mlp},
            {"gsc_hidden", c.gsc_hidden},
            {"proposal_hidden", c.proposal_hidden},
            {"attention_groups", c.attention_groups},
            {"use_ppc", c.use_ppc},
            {"use_ooc", c.use_ooc},
            {"use_gsc", c.use_gsc},
            {"loss_weights",
             {{"vote", w.vote},
              {"objectness", w.objectness},
              {"center", w.center},
              {"size", w.size},
              {"heading", w.heading},
              {"semantic", w.semantic}}},
            {"huber_beta", c.huber_beta},
            {"positive_radius", c.positive_radius},
            {"negative_radius", c.negative_radius},
            {"objectness_threshold", c.objectness_threshold},
            {"nms_iou", c.nms_iou},
            {"init_seed", c.init_seed}};
}

/// Keys override `base` (the desk preset unless "preset" names another).
inline ModelConfig model_config_from_json(const Json& j, const std::string& where = "model") {
    ModelConfig c = ModelConfig::desk();
    if (j.is_object() && j.contains("preset")) {
        const auto name = detail::json_get<std::string>(j.at("preset"), where + ".preset");
        if (name == "votenet") c = ModelConfig::votenet();
        else if (name != "desk") throw ConfigError(where + ".preset: expected \"desk\" or \"votenet\"");
    }
    std::string preset;
    detail::ObjectReader r(j, where);
    r.get("preset", preset)
        .get("num_points", c.backbone.num_points)
        .get("min_points", c.backbone.min_points)
        .with("sa",
              [&](const Json& v, const std::string& w) {
                  if (!v.is_array()) throw ConfigError(w + ": expected an array");
                  c.backbone.sa.clear();
                  for (std::size_t i = 0; i < v.size(); ++i) {
                      SALayerConfig l;
                      detail::ObjectReader lr(v[i], w + "[" + std::to_string(i) + "]");
                      lr.get("num_centers", l.num_centers)
                          .get("radius", l.radius)
                          .get("max_samples", l.max_samples)
                          .with("mlp", [&](const Json& m, const std::string& mw) {
                              l.mlp = detail::json_list<std::size_t>(m, mw);
                          });
                      lr.finish();
                      c.backbone.sa.push_back(l);
                  }
              })
        .with("fp",
              [&](const Json& v, const std::string& w) {
                  if (!v.is_array()) throw ConfigError(w + ": expected an array");
                  c.backbone.fp.clear();
                  for (std::size_t i = 0; i < v.size(); ++i)
                      c.backbone.fp.push_back(detail::json_list<std::size_t>(v[i], w + "[" + std::to_string(i) + "]"));
              })
        .with("class_names", [&](const Json& v, const std::string& w) { c.class_names = detail::json_list<std::string>(v, w); })
        .with("size_priors",
              [&](const Json& v, const std::string& w) {
                  if (!v.is_array()) throw ConfigError(w + ": expected an array");
                  c.size_priors.clear();
                  for (std::size_t i = 0; i < v.size(); ++i)
                      c.size_priors.push_back(detail::ObjectReader::vec3(v[i], w + "[" + std::to_string(i) + "]"));
              })
        .with("half_turn_symmetric",
              [&](const Json& v, const std::string& w) { c.half_turn_symmetric = detail::json_list<bool>(v, w); })
        .get("num_heading_bins", c.num_heading_bins)
        .with("vote_hidden", [&](const Json& v, const std::string& w) { c.vote_hidden = detail::json_list<std::size_t>(v, w); })
        .get("num_clusters", c.num_clusters)
        .get("cluster_radius", c.cluster_radius)
        .get("cluster_samples", c.cluster_samples)
        .with("cluster_mlp", [&](const Json& v, const std::string& w) { c.cluster_mlp = detail::json_list<std::size_t>(v, w); })
        .with("gsc_hidden", [&](const Json& v, const std::string& w) { c.gsc_hidden = detail::json_list<std::size_t>(v, w); })
        .with("proposal_hidden",
              [&](const Json& v, const std::string& w) { c.proposal_hidden = detail::json_list<std::size_t>(v, w); })
        .get("attention_groups", c.attention_groups)
        .get("use_ppc", c.use_ppc)
        .get("use_ooc", c.use_ooc)
        .get("use_gsc", c.use_gsc)
        .with("loss_weights",
              [&](const Json& v, const std::string& w) {
                  auto& lw = c.loss_weights;
                  detail::ObjectReader lr(v, w);
                  lr.get("vote", lw.vote)
                      .get("objectness", lw.objectness)
                      .get("center", lw.center)
                      .get("size", lw.size)
                      .get("heading", lw.heading)
                      .get("semantic", lw.semantic);
                  lr.finish();
              })
        .get("huber_beta", c.huber_beta)
        .get("positive_radius", c.positive_radius)
        .get("negative_radius", c.negative_radius)
        .get("objectness_threshold", c.objectness_threshold)
        .get("nms_iou", c.nms_iou)
        .get("init_seed", c.init_seed);
    r.finish();
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline Json to_json(const TrainConfig& c) {
    return {{"base_lr", c.schedule.base_lr},
            {"decay_epochs", c.schedule.decay_epochs},
            {"decay_rates", c.schedule.decay_rates},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"augment", c.augment},
            {"map_every", c.map_every}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& where = "train") {
    TrainConfig c;
    detail::ObjectReader r(j, where);
    r.get("base_lr", c.schedule.base_lr)
        .with("decay_epochs",
              [&](const Json& v, const std::string& w) { c.schedule.decay_epochs = detail::json_list<std::size_t>(v, w); })
        .with("decay_rates",
              [&](const Json& v, const std::string& w) { c.schedule.decay_rates = detail::json_list<double>(v, w); })
        .get("epochs", c.epochs)
        .get("batch_size", c.batch_size)
        .get("seed", c.seed)
        .get("augment", c.augment)
        .get("map_every", c.map_every);
    r.finish();
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

inline const char* primitive_name(Primitive p) {
    switch (p) {
        case Primitive::table: return "table";
        case Primitive::chair: return "chair";
        case Primitive::cabinet: return "cabinet";
    }
    return "?";
}

inline Json to_json(const SceneConfig& c) {
    Json classes = Json::array();
    for (const auto& k : c.classes)
        classes.push_back({{"name", k.name},
                           {"shape", primitive_name(k.shape)},
                           {"min_size", detail::vec3_json(k.min_size)},
                           {"max_size", detail::vec3_json(k.max_size)},
                           {"probability", k.probability},
                           {"half_turn_symmetric", k.half_turn_symmetric}});
    return {{"classes", classes},
            {"room_x", c.room_x},
            {"room_y", c.room_y},
            {"min_objects", c.min_objects},
            {"max_objects", c.max_objects},
            {"floor_density", c.floor_density},
            {"surface_density", c.surface_density},
            {"noise_sigma", c.noise_sigma},
            {"margin", c.margin},
            {"max_dropouts", c.max_dropouts},
            {"dropout_min_radius", c.dropout_min_radius},
            {"dropout_max_radius", c.dropout_max_radius},
            {"num_points", c.num_points},
            {"min_points_per_box", c.min_points_per_box},
            {"max_placement_attempts", c.max_placement_attempts}};
}

inline SceneConfig scene_config_from_json(const Json& j, const std::string& where = "scene") {
    SceneConfig c;
    detail::ObjectReader r(j, where);
    r.with("classes",
           [&](const Json& v, const std::string& w) {
               if (!v.is_array()) throw ConfigError(w + ": expected an array");
               c.classes.clear();
               for (std::size_t i = 0; i < v.size(); ++i) {
                   ObjectClassSpec k;
                   std::string shape = "cabinet";
                   detail::ObjectReader kr(v[i], w + "[" + std::to_string(i) + "]");
                   kr.get("name", k.name)
                       .get("shape", shape)
                       .get("min_size", k.min_size)
                       .get("max_size", k.max_size)
                       .get("probability", k.probability)
                       .get("half_turn_symmetric", k.half_turn_symmetric);
                   kr.finish();
                   if (shape == "table") k.shape = Primitive::table;
                   else if (shape == "chair") k.shape = Primitive::chair;
                   else if (shape == "cabinet") k.shape = Primitive::cabinet;
                   else throw ConfigError(w + ": shape must be table, chair or cabinet");
                   c.classes.push_back(k);
               }
           })
        .get("room_x", c.room_x)
        .get("room_y", c.room_y)
        .get("min_objects", c.min_objects)
        .get("max_objects", c.max_objects)
        .get("floor_density", c.floor_density)
        .get("surface_density", c.surface_density)
        .get("noise_sigma", c.noise_sigma)
        .get("margin", c.margin)
        .get("max_dropouts", c.max_dropouts)
        .get("dropout_min_radius", c.dropout_min_radius)
        .get("dropout_max_radius", c.dropout_max_radius)
        .get("num_points", c.num_points)
        .get("min_points_per_box", c.min_points_per_box)
        .get("max_placement_attempts", c.max_placement_attempts);
    r.finish();
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return c;
}

/// Top-level config file: any subset of {"model", "train", "scene"}.
struct RunConfig {
    ModelConfig model = ModelConfig::desk();
    TrainConfig train;
    SceneConfig scene;
};

inline RunConfig run_config_from_json(const Json& j) {
    RunConfig c;
    detail::ObjectReader r(j, "config");
    r.with("model", [&](const Json& v, const std::string& w) { c.model = model_config_from_json(v, w); })
        .with("train", [&](const Json& v, const std::string& w) { c.train = train_config_from_json(v, w); })
        .with("scene", [&](const Json& v, const std::string& w) { c.scene = scene_config_from_json(v, w); });
    r.finish();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    Json j;
    try {
        j = Json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace mlcvnet
