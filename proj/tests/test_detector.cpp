#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "usground/detector.hpp"
#include "usground/errors.hpp"
#include "usground/losses.hpp"
#include "usground/synthetic.hpp"
#include "usground/training.hpp"

using namespace usground;

namespace {

GrayImage noise_image(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    GrayImage img(size, size);
    for (auto &p : img.pixels()) p = u(rng);
    return img;
}

DetectionOutput scripted(std::vector<double> max_logits, int tokens = 2) {
    DetectionOutput out;
    const int n = static_cast<int>(max_logits.size());
    out.boxes.resize(n, 4);
    out.logits = Eigen::MatrixXd::Constant(n, tokens, -20.0);
    for (int q = 0; q < n; ++q) {
        out.boxes.row(q) << 0.5, 0.5, 0.25, 0.5;
        out.logits(q, q % tokens) = max_logits[static_cast<std::size_t>(q)];
    }
    return out;
}

double logit(double p) { return std::log(p / (1 - p)); }

}  // namespace

TEST(Tokenizer, WorkedExamples) {
    const auto vocab = Vocabulary::standard();
    const auto a = vocab.tokenize("bright lesion");
    ASSERT_EQ(a.ids.size(), 2u);
    EXPECT_NE(a.ids[0], Vocabulary::unk_id);
    EXPECT_NE(a.ids[1], Vocabulary::unk_id);
    EXPECT_EQ(vocab.tokenize("Bright  LESION!").ids, a.ids);
    const auto oov = vocab.tokenize("xylophone");
    ASSERT_EQ(oov.ids.size(), 1u);
    EXPECT_EQ(oov.ids[0], Vocabulary::unk_id);
    EXPECT_THROW(vocab.tokenize("   "), PromptError);
    EXPECT_THROW(vocab.tokenize(""), PromptError);
}

TEST(Tokenizer, SynonymsShareTokens) {
    const auto vocab = Vocabulary::standard();
    EXPECT_EQ(vocab.tokenize("hyperechoic mass").ids, vocab.tokenize("bright lesion").ids);
    EXPECT_EQ(vocab.tokenize("bright tumor").ids, vocab.tokenize("bright nodule").ids);
}

TEST(Tokenizer, PositiveTokensSkipFunctionWords) {
    const auto vocab = Vocabulary::standard();
    const auto t = vocab.tokenize("segment the bright lesion");
    const auto pos = vocab.positive_tokens(t);
    ASSERT_EQ(pos.size(), 4);
    EXPECT_EQ(pos(0), 0.0);
    EXPECT_EQ(pos(1), 0.0);
    EXPECT_EQ(pos(2), 1.0);
    EXPECT_EQ(pos(3), 1.0);
    // No content word: every known token is positive.
    const auto f = vocab.tokenize("the");
    EXPECT_EQ(vocab.positive_tokens(f)(0), 1.0);
}

TEST(Tokenizer, VocabularyJsonRoundTrip) {
    const auto vocab = Vocabulary::standard();
    const auto back = Vocabulary::from_json(vocab.to_json());
    EXPECT_EQ(back.words(), vocab.words());
    EXPECT_EQ(back.tokenize("renal mass").ids, vocab.tokenize("renal mass").ids);
}

TEST(ToyDetector, ShapesFiniteAndDeterministic) {
    ToyDetector det({}, 3);
    const auto img = noise_image(128, 1);
    for (const std::string prompt : {"bright lesion", "dark", "segment the dark kidney lesion"}) {
        const auto tok = det.tokenize(prompt);
        const auto a = det.detect(img, tok);
        EXPECT_EQ(a.boxes.rows(), det.config().queries);
        EXPECT_EQ(a.boxes.cols(), 4);
        EXPECT_EQ(a.logits.rows(), det.config().queries);
        EXPECT_EQ(a.logits.cols(), static_cast<Eigen::Index>(tok.ids.size()));
        EXPECT_TRUE(a.boxes.allFinite());
        EXPECT_TRUE(a.logits.allFinite());
        EXPECT_GE(a.boxes.minCoeff(), 0.0);
        EXPECT_LE(a.boxes.maxCoeff(), 1.0);
        const auto b = det.detect(img, tok);
        EXPECT_EQ(a.boxes, b.boxes);
        EXPECT_EQ(a.logits, b.logits);
    }
}

TEST(ToyDetector, RejectsWrongSizeAndBadPrompts) {
    ToyDetector det(ToyDetectorConfig::micro(), 0);
    EXPECT_THROW(det.detect(noise_image(31, 0), det.tokenize("lesion")), DimensionError);
    PromptTokens empty;
    EXPECT_THROW(det.detect(noise_image(32, 0), empty), PromptError);
    PromptTokens bad;
    bad.ids = {999};
    EXPECT_THROW(det.detect(noise_image(32, 0), bad), PromptError);
}

TEST(ToyDetector, SameSeedSameWeights) {
    ToyDetector a(ToyDetectorConfig::micro(), 5), b(ToyDetectorConfig::micro(), 5),
        c(ToyDetectorConfig::micro(), 6);
    const auto img = noise_image(32, 2);
    const auto tok = a.tokenize("bright lesion");
    EXPECT_EQ(a.detect(img, tok).boxes, b.detect(img, tok).boxes);
    EXPECT_NE(a.detect(img, tok).boxes, c.detect(img, tok).boxes);
}

TEST(ToyDetector, UnknownTokensScoreBelowThreshold) {
    ToyDetector det({}, 3);
    const auto out = det.detect(noise_image(128, 4), det.tokenize("xylophone quartz"));
    EXPECT_LT(best_score(out), 0.30);
}

TEST(SelectBoxes, WorkedExamples) {
    const auto tok = Vocabulary::standard().tokenize("bright lesion");
    const auto one = scripted({logit(0.9), logit(0.1), logit(0.1)});
    const auto kept = select_boxes(one, tok, {128, 128}, 0.3, 3);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].x_min, 48);
    EXPECT_EQ(kept[0].y_min, 32);
    EXPECT_EQ(kept[0].x_max, 80);
    EXPECT_EQ(kept[0].y_max, 96);
    EXPECT_NEAR(*kept[0].score, 0.9, 1e-12);
    EXPECT_EQ(*kept[0].phrase, "bright lesion");

    EXPECT_TRUE(select_boxes(scripted({20.0, 20.0}), tok, {128, 128}, 1.0, 3).empty());
    EXPECT_THROW(select_boxes(one, tok, {128, 128}, 0.0, 3), DomainError);
    EXPECT_THROW(select_boxes(one, tok, {128, 128}, 1.5, 3), DomainError);
}

TEST(SelectBoxes, MonotoneInThreshold) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 2.0);
    const auto tok = Vocabulary::standard().tokenize("bright lesion");
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> l(8);
        for (auto &v : l) v = n(rng);
        const auto out = scripted(l);
        std::size_t prev = 100;
        for (double th = 0.05; th <= 1.0; th += 0.05) {
            const auto kept = select_boxes(out, tok, {128, 128}, th, 8);
            EXPECT_LE(kept.size(), prev);
            prev = kept.size();
            for (std::size_t i = 1; i < kept.size(); ++i) EXPECT_GE(*kept[i - 1].score, *kept[i].score);
            for (const auto &b : kept) EXPECT_GE(*b.score, th);
        }
    }
}

TEST(SelectBoxes, TopKAndClipping) {
    auto out = scripted({3.0, 2.0, 1.0, 0.5});
    out.boxes.row(0) << 0.05, 0.05, 0.3, 0.3;
    const auto tok = Vocabulary::standard().tokenize("lesion");
    const auto kept = select_boxes(out, tok, {100, 200}, 0.3, 2);
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_EQ(kept[0].x_min, 0.0);
    EXPECT_EQ(kept[0].y_min, 0.0);
    EXPECT_NEAR(kept[0].x_max, 40.0, 1e-9);
    EXPECT_NEAR(kept[0].y_max, 20.0, 1e-9);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
    test_util::TempDir dir;
    ToyDetector det(ToyDetectorConfig::micro(), 7);
    nn::apply_plan(det.module(), det.default_plan(), {2, 4.0, 1});
    for (auto *p : det.module().params().all()) {
        if (p->name.find("lora_B") != std::string::npos) p->value.setConstant(0.01);
    }
    const auto img = noise_image(32, 3);
    const auto tok = det.tokenize("dark lesion");
    const auto before = det.detect(img, tok);
    const auto path = dir.path() / "det.safetensors";
    det.save(path, {{"note", "x"}});
    const auto back = ToyDetector::load(path);
    const auto after = back.detect(img, tok);
    EXPECT_EQ(before.boxes, after.boxes);
    EXPECT_EQ(before.logits, after.logits);
    EXPECT_EQ(back.module().adapters().size(), det.module().adapters().size());
    EXPECT_EQ(back.module().params().at("bbox_head.0.weight").role, nn::ParamRole::trainable);

    // The header is safetensors-shaped: u64 length then JSON.
    const auto bytes = test_util::read_bytes(path);
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    const auto header = nlohmann::json::parse(bytes.substr(8, n));
    EXPECT_EQ(header["bbox_head.0.weight"]["dtype"], "F64");
    EXPECT_TRUE(header.contains("__metadata__"));
}

TEST(Checkpoint, CorruptFilesAreCheckpointErrors) {
    test_util::TempDir dir;
    EXPECT_THROW(ToyDetector::load(dir.path() / "absent"), CheckpointError);
    std::ofstream(dir.path() / "short", std::ios::binary) << "abc";
    EXPECT_THROW(ToyDetector::load(dir.path() / "short"), CheckpointError);
    ToyDetector det(ToyDetectorConfig::micro(), 7);
    det.save(dir.path() / "ok");
    auto bytes = test_util::read_bytes(dir.path() / "ok");
    bytes.resize(bytes.size() - 16);
    std::ofstream(dir.path() / "cut", std::ios::binary) << bytes;
    EXPECT_THROW(ToyDetector::load(dir.path() / "cut"), CheckpointError);
}

TEST(Registry, ToyDescriptorAndUnknownName) {
    test_util::TempDir dir;
    ToyDetector det(ToyDetectorConfig::micro(), 7);
    det.save(dir.path() / "c");
    const auto made = make_detector("toy:" + (dir.path() / "c").string());
    EXPECT_EQ(made->name(), "toy");
    EXPECT_EQ(made->canvas(), (ImageSize{32, 32}));
    try {
        make_detector("nonesuch");
        FAIL() << "expected BackendError";
    } catch (const BackendError &e) {
        EXPECT_NE(std::string(e.what()).find("toy"), std::string::npos);
    }
    EXPECT_THROW(make_detector("toy:" + (dir.path() / "missing").string()), BackendError);
}

TEST(Registry, CustomBackendIsListed) {
    register_detector_backend("scripted-test", [](const std::string &) -> std::unique_ptr<Detector> {
        return std::make_unique<ToyDetector>(ToyDetectorConfig::micro(), 1);
    });
    const auto names = detector_backends();
    EXPECT_NE(std::find(names.begin(), names.end(), "scripted-test"), names.end());
    EXPECT_EQ(make_detector("scripted-test")->canvas().height, 32);
}

// Central differences of the detection loss against tape gradients on the
// micro configuration, with all parameters trainable and the zero-initialized
// heads perturbed so every path carries signal.
TEST(ToyDetector, GradientsMatchFiniteDifferences) {
    ToyDetector det(ToyDetectorConfig::micro(), 11);
    det.module().set_all_roles(nn::ParamRole::trainable);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto *p : det.module().params().all()) {
        if (p->name.find("bbox_head.2") != std::string::npos || p->name.find("sampling_offsets.weight") != std::string::npos ||
            p->name.find("attention_weights.weight") != std::string::npos) {
            for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = n(rng);
        }
    }
    SynthConfig sc;
    sc.canvas = {32, 32};
    sc.min_lesion_area = 20.0;
    const auto item = generate_item(sc, 2, 0);
    const auto sample = make_sample(item.image, item.mask, item.prompt, {32, 32});
    const auto tok = det.tokenize(sample.prompt);
    const auto gt = ground_truth(det, det.vocabulary(), sample);

    auto loss_at = [&](MatchResult *m) {
        const auto out = det.detect(sample.image, tok);
        const auto r = total_loss(out, {gt});
        if (m) *m = r.match;
        return r.total;
    };
    det.module().params().zero_grad();
    nn::Tape tape;
    const auto g = det.forward(tape, sample.image, tok);
    DetectionOutput out{g.boxes.value(), g.logits.value()};
    const auto r = total_loss(out, {gt});
    const std::pair<nn::Var, nn::Matrix> seeds[] = {{g.boxes, r.grad_boxes}, {g.logits, r.grad_logits}};
    tape.backward(seeds);

    std::vector<std::pair<nn::Parameter *, Eigen::Index>> coords;
    for (auto *p : det.module().params().all()) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            if (p->grad.size() && std::abs(p->grad.data()[i]) > 1e-8) coords.emplace_back(p, i);
        }
    }
    ASSERT_GE(coords.size(), 200u);
    std::shuffle(coords.begin(), coords.end(), rng);
    int agreed = 0;
    const double h = 1e-6;
    for (int k = 0; k < 200; ++k) {
        auto [p, i] = coords[static_cast<std::size_t>(k)];
        const double v = p->value.data()[i];
        p->value.data()[i] = v + h;
        const double up = loss_at(nullptr);
        p->value.data()[i] = v - h;
        const double dn = loss_at(nullptr);
        p->value.data()[i] = v;
        const double fd = (up - dn) / (2 * h);
        const double an = p->grad.data()[i];
        if (std::abs(fd - an) <= 1e-3 * std::max(std::abs(fd), std::abs(an))) ++agreed;
    }
    EXPECT_GE(agreed, 190);
}
