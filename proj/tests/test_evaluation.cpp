#include <cmath>
#include <memory>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "mocks.hpp"
#include "test_util.hpp"
#include "usground/errors.hpp"
#include "usground/evaluation.hpp"
#include "usground/synthetic.hpp"

using namespace usground;

namespace {

std::vector<Sample> synthetic_samples(std::size_t n, std::uint64_t seed, const std::string &dataset) {
    SynthConfig cfg;
    cfg.families = {LesionFamily::bright, LesionFamily::dark};
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto it = generate_item(cfg, seed, i);
        auto s = make_sample(it.image, it.mask, it.prompt, {128, 128});
        s.dataset = dataset;
        s.record_index = i;
        out.push_back(std::move(s));
    }
    return out;
}

Pipeline oracle_pipeline(const std::vector<Sample> &samples) {
    auto truth = std::make_shared<mocks::Truth>();
    for (const auto &s : samples) truth->add(s);
    return Pipeline(std::make_shared<mocks::OracleDetector>(truth, ImageSize{128, 128}),
                    std::make_shared<mocks::OracleMasker>(truth));
}

}  // namespace

TEST(Reporting, WorkedFormatting) {
    const auto ms = mean_std({1.0, 0.5});
    EXPECT_DOUBLE_EQ(ms.mean, 0.75);
    EXPECT_DOUBLE_EQ(ms.std, 0.25);
    EXPECT_EQ(format_full(100 * ms.mean, 100 * ms.std), "75.00±25.00");
    EXPECT_EQ(format_compact(91.74, 5.2), "91.74±5");
    EXPECT_EQ(format_compact(100.0, 0.0), "100.00±0");
    EXPECT_NEAR(spread_percent({0.9174, 0.8920}), 2.54, 1e-9);
}

TEST(Evaluate, OracleBackendsScorePerfectly) {
    const auto samples = synthetic_samples(20, 3, "synthetic");
    const auto pipe = oracle_pipeline(samples);
    const auto rep = evaluate_samples(pipe, samples);
    ASSERT_EQ(rep.rows.size(), 1u);
    EXPECT_EQ(rep.rows[0].dsc.mean, 1.0);
    EXPECT_EQ(rep.rows[0].dsc.std, 0.0);
    EXPECT_EQ(format_compact(100 * rep.rows[0].dsc.mean, 100 * rep.rows[0].dsc.std), "100.00±0");
    EXPECT_EQ(format_compact(100 * rep.rows[0].iou.mean, 100 * rep.rows[0].iou.std), "100.00±0");
}

TEST(Evaluate, MissedDetectionsScoreEmptyMask) {
    const auto samples = synthetic_samples(4, 5, "d");
    Pipeline pipe(std::make_shared<mocks::ScriptedDetector>(ImageSize{128, 128},
                                                            std::vector<BoxCxcywh>{{0.5, 0.5, 0.2, 0.2}},
                                                            std::vector<double>{-5.0}),
                  std::make_shared<mocks::BoxFillMasker>());
    const auto rep = evaluate_samples(pipe, samples);
    ASSERT_EQ(rep.samples.size(), 4u);
    for (const auto &s : rep.samples) {
        EXPECT_FALSE(s.detected);
        EXPECT_EQ(s.dsc, 0.0);
        EXPECT_EQ(s.iou, 0.0);
        EXPECT_NEAR(s.best_score, 1.0 / (1.0 + std::exp(5.0)), 1e-12);
    }
    EXPECT_THROW(evaluate_samples(pipe, {}), EvaluationError);
}

TEST(Evaluate, DumpReaggregatesExactly) {
    auto samples = synthetic_samples(12, 7, "alpha");
    for (auto &s : synthetic_samples(9, 8, "beta")) samples.push_back(std::move(s));
    Pipeline pipe(std::make_shared<mocks::ScriptedDetector>(
                      ImageSize{128, 128}, std::vector<BoxCxcywh>{{0.5, 0.5, 0.3, 0.3}}, std::vector<double>{4.0}),
                  std::make_shared<ToyMaskBackend>());
    const auto rep = evaluate_samples(pipe, samples);
    ASSERT_EQ(rep.rows.size(), 3u);
    EXPECT_EQ(rep.rows.back().key, "all");

    std::vector<SampleScore> parsed;
    std::istringstream in(rep.samples_jsonl());
    for (std::string line; std::getline(in, line);) {
        const auto j = nlohmann::json::parse(line);
        SampleScore s;
        s.dataset = j["dataset"];
        s.dsc = j["dsc"];
        s.iou = j["iou"];
        parsed.push_back(s);
    }
    const auto rows = aggregate(parsed, [](const SampleScore &s) { return s.dataset; });
    ASSERT_EQ(rows.size(), rep.rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].key, rep.rows[i].key);
        EXPECT_EQ(rows[i].count, rep.rows[i].count);
        EXPECT_NEAR(rows[i].dsc.mean, rep.rows[i].dsc.mean, 1e-9);
        EXPECT_NEAR(rows[i].dsc.std, rep.rows[i].dsc.std, 1e-9);
        EXPECT_NEAR(rows[i].iou.mean, rep.rows[i].iou.mean, 1e-9);
        EXPECT_NEAR(rows[i].iou.std, rep.rows[i].iou.std, 1e-9);
    }
    const auto j = rep.to_json();
    EXPECT_EQ(j["rows"].size(), 3u);
    EXPECT_NE(rep.table().find("alpha"), std::string::npos);
}

TEST(Evaluate, UnionEqualsCountWeightedCombination) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<SampleScore> scores;
    for (int i = 0; i < 37; ++i) {
        SampleScore s;
        s.dataset = i % 3 == 0 ? "a" : (i % 3 == 1 ? "b" : "c");
        s.dsc = u(rng);
        s.iou = s.dsc / (2 - s.dsc);
        scores.push_back(s);
    }
    const auto rows = aggregate(scores, [](const SampleScore &s) { return s.dataset; });
    ASSERT_EQ(rows.size(), 4u);
    double n = 0, mean = 0, second = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto &r = rows[i];
        n += static_cast<double>(r.count);
        mean += static_cast<double>(r.count) * r.dsc.mean;
        second += static_cast<double>(r.count) * (r.dsc.std * r.dsc.std + r.dsc.mean * r.dsc.mean);
    }
    mean /= n;
    const double pooled = std::sqrt(second / n - mean * mean);
    EXPECT_EQ(rows[3].count, 37u);
    EXPECT_NEAR(rows[3].dsc.mean, mean, 1e-12);
    EXPECT_NEAR(rows[3].dsc.std, pooled, 1e-9);
}

TEST(Evaluate, ManifestsUseTestSplitAndUnseenInFull) {
    test_util::TempDir dir;
    SynthConfig cfg;
    cfg.count = 10;
    cfg.name = "seen";
    auto seen = split(generate_synthetic(cfg, 3, dir.path() / "seen"), {}, 1);
    seen.base_dir = dir.path() / "seen";
    cfg.name = "unseen";
    cfg.role = DatasetRole::unseen;
    auto unseen = generate_synthetic(cfg, 4, dir.path() / "unseen");
    Pipeline pipe(std::make_shared<NullDetector>(), std::make_shared<NullMaskBackend>());
    const auto rep = evaluate(pipe, {seen, unseen});
    ASSERT_EQ(rep.rows.size(), 3u);
    EXPECT_EQ(rep.rows[0].count, 1u);
    EXPECT_EQ(rep.rows[1].count, 10u);
}

TEST(PromptSweep, DuplicatesAndSynonymsGiveIdenticalRows) {
    const auto samples = synthetic_samples(6, 9, "d");
    Pipeline pipe(std::make_shared<ToyDetector>(ToyDetectorConfig{}, 1), std::make_shared<ToyMaskBackend>());
    EvalOptions o;
    o.pipeline.threshold = 0.001;
    const auto rep = prompt_sweep(pipe, {"bright lesion", "bright lesion", "hyperechoic mass", "dark"}, samples, o);
    ASSERT_EQ(rep.rows.size(), 4u);
    EXPECT_EQ(rep.rows[0].dsc.mean, rep.rows[1].dsc.mean);
    EXPECT_EQ(rep.rows[0].iou.std, rep.rows[1].iou.std);
    EXPECT_EQ(rep.rows[0].dsc.mean, rep.rows[2].dsc.mean);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(rep.samples[i].dsc, rep.samples[12 + i].dsc);
    }
    std::vector<double> means;
    for (const auto &r : rep.rows) means.push_back(r.dsc.mean);
    EXPECT_NEAR(rep.dsc_spread, spread_percent(means), 1e-12);
}

TEST(Benchmark, NullBackendOverheadIsSmall) {
    Pipeline pipe(std::make_shared<NullDetector>(), std::make_shared<NullMaskBackend>());
    const GrayImage img(800, 800, 0.5f);
    const auto st = benchmark_runtime(pipe, img, "bright lesion", 10);
    EXPECT_EQ(st.runs, 10);
    EXPECT_EQ(st.invocations, 11);
    ASSERT_EQ(st.per_run_s.size(), 10u);
    EXPECT_LE(st.mean_s, 0.050);
    EXPECT_DOUBLE_EQ(st.reference_s, 0.33);
    EXPECT_THROW(benchmark_runtime(pipe, img, "x", 0), ConfigError);
}
