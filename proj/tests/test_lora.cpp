#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "usground/detector.hpp"
#include "usground/errors.hpp"
#include "usground/nn/lora.hpp"
#include "usground/synthetic.hpp"
#include "usground/training.hpp"

using namespace usground;
using namespace usground::nn;

namespace {

Matrix random_matrix(int r, int c, std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

double rel_diff(const Matrix &a, const Matrix &b) {
    return (a - b).norm() / std::max(1e-300, b.norm());
}

std::vector<Sample> tiny_samples(int canvas, std::size_t n, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.canvas = {canvas, canvas};
    cfg.min_lesion_area = 20.0;
    cfg.families = {LesionFamily::bright, LesionFamily::dark};
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto item = generate_item(cfg, seed, i);
        out.push_back(make_sample(item.image, item.mask, item.prompt, {canvas, canvas}));
    }
    return out;
}

}  // namespace

TEST(AdaptedLinear, HandComputedExample) {
    LoraAdapter a;
    a.rank = 1;
    a.alpha = 1.0;
    a.A = Matrix{{1.0, 0.0}};
    a.B = Matrix{{2.0}, {0.0}};
    const AdaptedLinear lin(Matrix::Identity(2, 2), {}, a);
    const Matrix y = lin.forward(Matrix{{1.0, 1.0}});
    EXPECT_DOUBLE_EQ(y(0, 0), 3.0);
    EXPECT_DOUBLE_EQ(y(0, 1), 1.0);
}

TEST(AdaptedLinear, ZeroInitIsNoOp) {
    std::mt19937_64 rng(1);
    const Matrix w = random_matrix(24, 40, rng);
    const Matrix b = random_matrix(1, 24, rng);
    const auto lin = wrap(w, 4, 8.0, 3, b);
    EXPECT_EQ(lin.adapter().A.rows(), 4);
    EXPECT_EQ(lin.adapter().B.norm(), 0.0);
    const Matrix x = random_matrix(16, 40, rng);
    EXPECT_LE(rel_diff(lin.forward(x), lin.base_forward(x)), 1e-6);
}

TEST(AdaptedLinear, MergedWeightMatchesAdaptedForward) {
    std::mt19937_64 rng(2);
    for (int rank : {1, 2, 4, 8}) {
        auto lin = wrap(random_matrix(12, 20, rng), rank, 2.0 * rank, 5);
        lin.adapter().B = random_matrix(12, rank, rng) * 0.1;
        const Matrix x = random_matrix(7, 20, rng);
        const Matrix merged = x * lin.merged_weight().transpose();
        EXPECT_LE(rel_diff(merged, lin.forward(x)), 1e-5) << rank;
    }
}

TEST(AdaptedLinear, InitStatistics) {
    const auto a = make_adapter("probe", 512, 256, 8, 16.0, 11);
    EXPECT_NEAR(a.A.mean(), 0.0, 0.002);
    const double sd = std::sqrt((a.A.array() - a.A.mean()).square().mean());
    EXPECT_NEAR(sd, 0.02, 0.002);
    // Same target and seed, same draw; different target, different draw.
    EXPECT_EQ(make_adapter("probe", 512, 256, 8, 16.0, 11).A, a.A);
    EXPECT_NE(make_adapter("other", 512, 256, 8, 16.0, 11).A, a.A);
}

TEST(AdaptedLinear, RankOutOfRangeIsConfigError) {
    const Matrix w = Matrix::Zero(6, 4);
    EXPECT_THROW(wrap(w, 0, 1.0, 0), ConfigError);
    EXPECT_THROW(wrap(w, 5, 1.0, 0), ConfigError);
    EXPECT_THROW(wrap(w, 2, 0.0, 0), ConfigError);
    EXPECT_NO_THROW(wrap(w, 4, 1.0, 0));
}

TEST(InjectionPlan, SingleLinearFraction) {
    Module m;
    std::mt19937_64 rng(0);
    m.add_linear("fc", 64, 64, rng);
    apply_plan(m, {{"fc"}, {}}, {4, 8.0, 0});
    EXPECT_NEAR(trainable_fraction(m), 512.0 / (4160.0 + 512.0), 1e-12);
    // Bias stays frozen.
    EXPECT_EQ(m.params().at("fc.bias").role, ParamRole::frozen);
    EXPECT_EQ(m.params().at("fc.lora_A").role, ParamRole::adapter);
}

TEST(InjectionPlan, UnresolvedNamesAreListed) {
    ToyDetector det(ToyDetectorConfig::micro(), 1);
    try {
        apply_plan(det.module(), {{"dec.9.nowhere", "enc.0.ffn.fc1"}, {"ghost_head"}}, {});
        FAIL() << "expected PlanError";
    } catch (const PlanError &e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("dec.9.nowhere"), std::string::npos);
        EXPECT_NE(msg.find("ghost_head"), std::string::npos);
        EXPECT_EQ(msg.find("enc.0.ffn.fc1"), std::string::npos);
    }
    EXPECT_TRUE(det.module().adapters().empty());
}

TEST(InjectionPlan, EmptyPlanFreezesEverything) {
    ToyDetector det(ToyDetectorConfig::micro(), 1);
    apply_plan(det.module(), {}, {});
    EXPECT_EQ(trainable_fraction(det.module()), 0.0);
    for (const auto *p : det.module().params().all()) EXPECT_EQ(p->role, ParamRole::frozen);
}

TEST(InjectionPlan, SecondApplicationIsStateError) {
    ToyDetector det(ToyDetectorConfig::micro(), 1);
    apply_plan(det.module(), det.default_plan(), {2, 4.0, 0});
    EXPECT_THROW(apply_plan(det.module(), det.default_plan(), {2, 4.0, 0}), StateError);
}

TEST(InjectionPlan, DefaultPlanAdaptsEveryDecoderLayer) {
    ToyDetector det({}, 1);
    const auto entries = apply_plan(det.module(), det.default_plan(), {4, 8.0, 0});
    for (int l = 0; l < det.config().decoder_layers; ++l) {
        const std::string prefix = "dec." + std::to_string(l) + ".";
        int adapted = 0;
        for (const auto &e : entries) {
            if (e.category == ParamRole::adapter && e.name.rfind(prefix, 0) == 0) ++adapted;
        }
        EXPECT_GT(adapted, 0) << prefix;
    }
    for (int l = 0; l < det.config().encoder_layers; ++l) {
        EXPECT_TRUE(det.module().adapters().count("enc." + std::to_string(l) + ".ffn.fc1"));
    }
    EXPECT_TRUE(det.module().adapters().count("text.ffn.fc1"));
    EXPECT_TRUE(det.module().adapters().count("text.attn.out_proj"));
    EXPECT_FALSE(det.module().adapters().count("backbone.patch_embed"));
    EXPECT_TRUE(det.module().adapters().count("feat_map"));

    // Audit partition: every parameter once, counts sum to the total.
    std::set<std::string> names;
    std::map<ParamRole, std::size_t> per_role;
    for (const auto &e : entries) {
        EXPECT_TRUE(names.insert(e.name).second) << e.name;
        per_role[e.category] += e.params;
    }
    EXPECT_EQ(per_role[ParamRole::frozen] + per_role[ParamRole::adapter] +
                  per_role[ParamRole::trainable],
              det.module().params().total_params());
    EXPECT_GT(per_role[ParamRole::trainable], 0u);
    EXPECT_LE(trainable_fraction(det.module()), 0.05);
    const std::string jsonl = audit_jsonl(entries);
    EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), static_cast<long>(entries.size()));
}

TEST(LoraDetector, ZeroInitAdaptersLeaveOutputsUnchanged) {
    ToyDetector det(ToyDetectorConfig::micro(), 4);
    const auto samples = tiny_samples(32, 3, 8);
    std::vector<DetectionOutput> before;
    for (const auto &s : samples) before.push_back(det.detect(s.image, det.tokenize(s.prompt)));
    apply_plan(det.module(), det.default_plan(), {2, 4.0, 9});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto after = det.detect(samples[i].image, det.tokenize(samples[i].prompt));
        EXPECT_LE(rel_diff(after.boxes, before[i].boxes), 1e-6);
        EXPECT_LE(rel_diff(after.logits, before[i].logits), 1e-6);
    }
}

TEST(LoraDetector, FreezePolicyAndMergeEquivalence) {
    ToyDetector det(ToyDetectorConfig::micro(), 4);
    apply_plan(det.module(), det.default_plan(), {2, 4.0, 9});
    std::map<std::string, Matrix> initial;
    for (const auto *p : det.module().params().all()) initial[p->name] = p->value;

    auto samples = tiny_samples(32, 6, 12);
    DetectorTask task(det, samples, {samples[0]});
    AdamW opt(5e-3, 1e-2);
    for (int step = 0; step < 50; ++step) {
        det.module().params().zero_grad();
        const std::size_t batch[] = {static_cast<std::size_t>(step % 6),
                                     static_cast<std::size_t>((step + 3) % 6)};
        task.accumulate_gradients(batch, static_cast<std::uint64_t>(step));
        opt.step(det.module().params());
    }
    bool adapters_moved = false;
    for (const auto *p : det.module().params().all()) {
        if (p->role == ParamRole::frozen) {
            ASSERT_TRUE(p->value == initial[p->name]) << p->name;
        } else if (p->role == ParamRole::adapter && p->value != initial[p->name]) {
            adapters_moved = true;
        }
    }
    EXPECT_TRUE(adapters_moved);

    std::vector<DetectionOutput> adapted;
    for (const auto &s : samples) adapted.push_back(det.detect(s.image, det.tokenize(s.prompt)));
    merge(det.module());
    EXPECT_TRUE(det.module().merged());
    EXPECT_TRUE(det.module().adapters().empty());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto out = det.detect(samples[i].image, det.tokenize(samples[i].prompt));
        EXPECT_LE(rel_diff(out.boxes, adapted[i].boxes), 1e-5);
        EXPECT_LE(rel_diff(out.logits, adapted[i].logits), 1e-5);
    }
    EXPECT_THROW(merge(det.module()), StateError);

    // Only the formerly fully-trainable heads still count.
    std::size_t head = 0;
    for (const auto *p : det.module().params().all()) {
        if (p->role != ParamRole::frozen) {
            EXPECT_TRUE(p->name.rfind("bbox_head.", 0) == 0 || p->name.rfind("enc_bbox_head.", 0) == 0)
                << p->name;
            head += p->numel();
        }
    }
    EXPECT_NEAR(trainable_fraction(det.module()),
                static_cast<double>(head) / det.module().params().total_params(), 1e-15);
}

TEST(LoraMerge, ZeroDeltaIsBitIdentical) {
    ToyDetector det(ToyDetectorConfig::micro(), 2);
    std::map<std::string, Matrix> base;
    for (const auto *p : det.module().params().all()) base[p->name] = p->value;
    apply_plan(det.module(), det.default_plan(), {2, 4.0, 1});
    merge(det.module());
    for (const auto *p : det.module().params().all()) {
        ASSERT_TRUE(p->value == base.at(p->name)) << p->name;
    }
}

TEST(LoraMerge, WithoutAdaptersIsStateError) {
    ToyDetector det(ToyDetectorConfig::micro(), 2);
    EXPECT_THROW(merge(det.module()), StateError);
}
