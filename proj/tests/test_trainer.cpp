#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "mlcvnet/data.hpp"
#include "mlcvnet/gradcheck.hpp"
#include "mlcvnet/trainer.hpp"

using namespace mlcvnet;

namespace {

Tensor scalar_param(double v) { return Tensor({1}, {v}).set_requires_grad(); }

void set_grad(Tensor& t, double g) {
    t.grad_buffer()[0] = g;
}

ModelConfig toy_model() {
    auto c = gradient_check_config();
    c.backbone.num_points = 256;
    c.backbone.sa = {{64, 0.3, 8, {16, 16}}, {32, 0.6, 8, {16, 16}}, {16, 1.2, 8, {16, 16}}};
    c.backbone.fp = {{16}};
    c.num_clusters = 8;
    c.cluster_radius = 0.3;
    c.cluster_samples = 8;
    c.cluster_mlp = {16, 16};
    c.gsc_hidden = {16};
    c.proposal_hidden = {16};
    return c;
}

std::vector<Scene> toy_scenes(std::size_t n, std::uint64_t first = 0) {
    SceneConfig sc;
    sc.num_points = 512;
    std::vector<Scene> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(first + i, sc));
    return out;
}

TrainConfig toy_train(std::size_t epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 4;
    t.schedule.base_lr = 0.003;
    t.schedule.decay_epochs = {};
    t.schedule.decay_rates = {};
    t.map_every = 0;
    return t;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
    Tensor p = scalar_param(2.5);
    Adam opt({p});
    set_grad(p, 0.0);
    for (int i = 0; i < 5; ++i) opt.step(0.1);
    EXPECT_EQ(p.item(), 2.5);
}

TEST(Adam, FirstStepByHand) {
    Tensor p = scalar_param(1.0);
    Adam opt({p});
    set_grad(p, 1.0);
    opt.step(0.001);
    // m_hat = v_hat = 1 after bias correction.
    EXPECT_DOUBLE_EQ(p.item(), 1.0 - 0.001 / (1.0 + 1e-8));
    EXPECT_EQ(opt.steps(), 1u);
    EXPECT_DOUBLE_EQ(opt.first_moments()[0][0], 0.1);
    EXPECT_DOUBLE_EQ(opt.second_moments()[0][0], 0.001);
}

TEST(Adam, SecondStepByHand) {
    Tensor p = scalar_param(0.0);
    Adam opt({p});
    set_grad(p, 2.0);
    opt.step(0.01);
    set_grad(p, -1.0);
    opt.step(0.01);
    const double m = 0.9 * 0.2 + 0.1 * -1.0, v = 0.999 * 0.004 + 0.001 * 1.0;
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    const double first = -0.01 * 2.0 / (2.0 + 1e-8);  // m_hat 2, v_hat 4
    EXPECT_NEAR(p.item(), first - 0.01 * mh / (std::sqrt(vh) + 1e-8), 1e-15);
}

TEST(Adam, MinimizesQuadratic) {
    Tensor x = scalar_param(0.0);
    Adam opt({x});
    int steps = 0;
    for (; steps < 5000 && std::abs(x.item() - 3.0) >= 0.01; ++steps) {
        opt.zero_grad();
        backward(sum(mul(sub(x, Tensor({1}, {3.0})), sub(x, Tensor({1}, {3.0})))));
        opt.step(0.01);
    }
    EXPECT_LT(std::abs(x.item() - 3.0), 0.01);
    EXPECT_LT(steps, 5000);
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects) {
    Tensor a = scalar_param(1.0), b = scalar_param(2.0);
    Adam opt({a, b});
    set_grad(a, 0.5);
    set_grad(b, std::numeric_limits<double>::quiet_NaN());
    EXPECT_THROW(opt.step(0.1), NonFiniteGradientError);
    EXPECT_EQ(a.item(), 1.0);
    EXPECT_EQ(opt.steps(), 0u);
    EXPECT_EQ(opt.first_moments()[0][0], 0.0);
}

TEST(Schedule, DecaysAreExactProducts) {
    Schedule s;
    EXPECT_EQ(s.lr_at(0), 0.005);
    EXPECT_EQ(s.lr_at(29), 0.005);
    EXPECT_EQ(s.lr_at(30), 0.005 * 0.1);
    EXPECT_EQ(s.lr_at(44), 0.005 * 0.1);
    EXPECT_EQ(s.lr_at(45), 0.005 * 0.1 * 0.1);
    EXPECT_EQ(s.lr_at(1000), 0.005 * 0.1 * 0.1);
}

TEST(Schedule, Validation) {
    Schedule s;
    s.decay_epochs = {10, 10};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = Schedule{};
    s.decay_rates = {0.1, 1.5};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = Schedule{};
    s.decay_rates = {0.1};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = Schedule{};
    s.base_lr = 0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Augmentation, KeepsPointsInsideTheirBoxes) {
    std::mt19937_64 rng(4);
    const auto scene = toy_scenes(1, 40).front();
    const auto flags = symmetry_flags(default_object_classes());
    for (int i = 0; i < 10; ++i) {
        const auto aug = Augmentation::draw(rng);
        const auto out = aug.apply(scene, flags);
        ASSERT_EQ(out.gt.size(), scene.gt.size());
        for (std::size_t j = 0; j < scene.gt.size(); ++j) {
            const auto before = points_in_box(scene.cloud.xyz, scene.gt[j].box);
            const auto after = points_in_box(out.cloud.xyz, out.gt[j].box);
            std::size_t moved = 0;
            for (std::size_t k = 0; k < before.size(); ++k) moved += before[k] != after[k];
            EXPECT_LE(moved, 2u);  // only points on a face can flip through rounding
            EXPECT_EQ(out.gt[j].box.size, scene.gt[j].box.size);
            EXPECT_NEAR(out.gt[j].box.center.z(), scene.gt[j].box.center.z(), 1e-12);
        }
    }
}

TEST(Augmentation, MirroredChairKeepsBackOnLocalPositiveY) {
    const SceneConfig sc;
    const auto flags = symmetry_flags(sc.classes);
    const auto scene = generate_scene(8, sc);
    // Above the seat only the back rest has points.
    auto back_side = [&](const Scene& s) {
        double sum = 0.0;
        for (const auto& g : s.gt) {
            if (sc.classes[g.class_id].shape != Primitive::chair) continue;
            for (Eigen::Index i = 0; i < s.cloud.xyz.rows(); ++i) {
                const Vec3 p = s.cloud.xyz.row(i).transpose();
                const Vec3 l = g.box.to_local(p);
                const bool inside = std::abs(l.x()) <= g.box.size.x() / 2 && std::abs(l.y()) <= g.box.size.y() / 2 &&
                                    std::abs(l.z()) <= g.box.size.z() / 2;
                if (inside && l.z() > 0.2 * g.box.size.z()) sum += l.y();
            }
        }
        return sum;
    };
    ASSERT_GT(back_side(scene), 0.0);
    for (double rot : {0.0, 1.0, -2.5}) {
        Augmentation a;
        a.flip_x = true;
        a.rotation = rot;
        EXPECT_GT(back_side(a.apply(scene, flags)), 0.0) << rot;
    }
}

TEST(Train, ZeroEpochsLeavesInitialization) {
    Detector a(toy_model()), b(toy_model());
    const auto scenes = toy_scenes(2);
    const auto r = train(a, scenes, toy_train(0));
    EXPECT_TRUE(r.log.empty());
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values()) << pa[i].name;
}

TEST(Train, SameSeedGivesIdenticalLogsAndWeights) {
    const auto scenes = toy_scenes(4);
    Detector a(toy_model()), b(toy_model());
    const auto ra = train(a, scenes, toy_train(2));
    const auto rb = train(b, scenes, toy_train(2));
    ASSERT_EQ(ra.log.size(), 2u);
    for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(to_json(ra.log[e]), to_json(rb.log[e]));
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values()) << pa[i].name;
}

TEST(Train, LossFallsOverTwentyToyEpochs) {
    const auto scenes = toy_scenes(8);
    Detector model(toy_model());
    const auto r = train(model, scenes, toy_train(20));
    ASSERT_FALSE(r.diverged) << r.divergence;
    ASSERT_EQ(r.log.size(), 20u);
    EXPECT_LT(r.log.back().total_loss, r.log.front().total_loss);
}

TEST(Train, DivergenceRollsBackAndReports) {
    const auto scenes = toy_scenes(2);
    Detector model(toy_model());
    Tensor w = model.proposal_mlp().layers().back().weight;
    std::fill(w.data().begin(), w.data().end(), std::numeric_limits<double>::infinity());
    const auto before = snapshot(model.parameters());
    const auto r = train(model, scenes, toy_train(3));
    EXPECT_TRUE(r.diverged);
    EXPECT_NE(r.divergence.find("epoch 1"), std::string::npos);
    EXPECT_EQ(snapshot(model.parameters()), before);
}

TEST(Train, MetricsJsonCarriesMapOnlyWhenComputed) {
    const auto scenes = toy_scenes(2);
    const auto held = toy_scenes(1, 900);
    Detector model(toy_model());
    auto cfg = toy_train(2);
    cfg.map_every = 2;
    const auto r = train(model, scenes, cfg, held);
    ASSERT_EQ(r.log.size(), 2u);
    const auto j1 = to_json(r.log[0]), j2 = to_json(r.log[1]);
    for (const char* k : {"epoch", "total_loss", "vote_loss", "objectness_loss", "box_loss", "cls_loss", "lr"})
        EXPECT_TRUE(j1.contains(k)) << k;
    EXPECT_FALSE(j1.contains("map25"));
    EXPECT_TRUE(j2.contains("map25"));
}

TEST(Train, EmptyDatasetRejected) {
    Detector model(toy_model());
    EXPECT_THROW(train(model, std::vector<Scene>{}, toy_train(1)), std::invalid_argument);
}
