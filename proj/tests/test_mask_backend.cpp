#include <random>

#include <gtest/gtest.h>
#include <opencv2/imgproc.hpp>

#include "usground/errors.hpp"
#include "usground/mask_backend.hpp"
#include "usground/synthetic.hpp"

using namespace usground;

namespace {

BoundingBox box(double x0, double y0, double x1, double y1) {
    BoundingBox b;
    b.x_min = x0;
    b.y_min = y0;
    b.x_max = x1;
    b.y_max = y1;
    return b;
}

int components(const BinaryMask &m) {
    cv::Mat u8(m.height(), m.width(), CV_8U);
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c) u8.at<std::uint8_t>(r, c) = m.at(r, c) ? 1 : 0;
    cv::Mat labels;
    return cv::connectedComponents(u8, labels, 8) - 1;
}

}  // namespace

TEST(ToyMask, BrightSquareOnDarkBackground) {
    GrayImage img(64, 64, 0.1f);
    BinaryMask truth(64, 64);
    truth.fill_box(box(20, 22, 40, 42));
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c)
            if (truth.at(r, c)) img.at(r, c) = 0.9f;
    ToyMaskBackend backend;
    const auto mask = backend.segment_box({&img, box(20, 22, 40, 42), {}});
    EXPECT_EQ(mask.height(), 64);
    EXPECT_EQ(mask.width(), 64);
    EXPECT_GE(dsc(mask, truth), 0.95);
    const auto again = backend.segment_box({&img, box(20, 22, 40, 42), {}});
    EXPECT_TRUE(again == mask);
}

TEST(ToyMask, DarkObjectPolarity) {
    GrayImage img(64, 64, 0.7f);
    BinaryMask truth(64, 64);
    truth.fill_box(box(10, 10, 30, 26));
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c)
            if (truth.at(r, c)) img.at(r, c) = 0.2f;
    const auto mask = ToyMaskBackend().segment_box({&img, box(10, 10, 30, 26), {}});
    EXPECT_GE(dsc(mask, truth), 0.95);
}

TEST(ToyMask, UniformBackgroundGivesEmptyMask) {
    GrayImage img(48, 48, 0.4f);
    EXPECT_FALSE(ToyMaskBackend().segment_box({&img, box(5, 5, 30, 30), {}}).any());

    // Faint texture below the contrast floor also reads as "no object".
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(0.39f, 0.41f);
    for (auto &p : img.pixels()) p = u(rng);
    EXPECT_FALSE(ToyMaskBackend().segment_box({&img, box(5, 5, 30, 30), {}}).any());
}

TEST(ToyMask, InvalidBoxesArePromptErrors) {
    GrayImage img(32, 32, 0.5f);
    ToyMaskBackend backend;
    EXPECT_THROW(backend.segment_box({&img, box(5, 5, 5, 20), {}}), PromptError);
    EXPECT_THROW(backend.segment_box({&img, box(40, 40, 50, 50), {}}), PromptError);
    EXPECT_THROW(backend.segment_box({&img, box(-20, 0, -1, 10), {}}), PromptError);
    EXPECT_THROW(backend.segment_box({nullptr, box(0, 0, 10, 10), {}}), PromptError);
}

TEST(ToyMask, DilatedRectClipsToCanvas) {
    const auto r = dilated_rect(box(10, 20, 30, 40), 0.1, 100, 100);
    EXPECT_EQ(r.x0, 8);
    EXPECT_EQ(r.y0, 18);
    EXPECT_EQ(r.x1, 32);
    EXPECT_EQ(r.y1, 42);
    const auto c = dilated_rect(box(0, 0, 50, 50), 0.1, 52, 52);
    EXPECT_EQ(c.x0, 0);
    EXPECT_EQ(c.x1, 52);
}

TEST(ToyMask, SingleComponentInsideDilatedBox) {
    SynthConfig cfg;
    cfg.families = {LesionFamily::bright, LesionFamily::dark};
    ToyMaskBackend backend;
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> jitter(-6.0, 6.0);
    for (std::size_t i = 0; i < 80; ++i) {
        const auto item = generate_item(cfg, 31, i);
        auto b = mask_to_tight_box(item.mask);
        b.x_min = std::max(0.0, b.x_min + jitter(rng));
        b.y_min = std::max(0.0, b.y_min + jitter(rng));
        b.x_max = std::min(128.0, std::max(b.x_min + 2, b.x_max + jitter(rng)));
        b.y_max = std::min(128.0, std::max(b.y_min + 2, b.y_max + jitter(rng)));
        const auto mask = backend.segment_box({&item.image, b, {}});
        ASSERT_EQ(mask.height(), item.image.height());
        if (!mask.any()) continue;
        EXPECT_EQ(components(mask), 1) << i;
        const auto r = dilated_rect(b, 0.1, 128, 128);
        for (int y = 0; y < 128; ++y)
            for (int x = 0; x < 128; ++x)
                if (mask.at(y, x)) ASSERT_TRUE(x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1);
    }
}

TEST(ToyMask, GroundTruthBoxesGiveHighOverlap) {
    SynthConfig cfg;
    cfg.families = {LesionFamily::bright, LesionFamily::dark};
    ToyMaskBackend backend;
    double total = 0.0;
    const int n = 100;
    for (int i = 0; i < n; ++i) {
        const auto item = generate_item(cfg, 5, static_cast<std::size_t>(i));
        total += dsc(backend.segment_box({&item.image, mask_to_tight_box(item.mask), {}}), item.mask);
    }
    EXPECT_GE(total / n, 0.85);
}

TEST(MaskRegistry, KnownAndUnknownNames) {
    EXPECT_EQ(make_mask_backend("toy")->name(), "toy");
    try {
        make_mask_backend("sam-xl");
        FAIL() << "expected BackendError";
    } catch (const BackendError &e) {
        EXPECT_NE(std::string(e.what()).find("toy"), std::string::npos);
    }
}
