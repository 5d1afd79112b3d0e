#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"
#include "usground/dataset.hpp"
#include "usground/errors.hpp"
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

DatasetManifest manifest_of(std::size_t n, DatasetRole role = DatasetRole::seen) {
    DatasetManifest m;
    m.name = "d";
    m.role = role;
    for (std::size_t i = 0; i < n; ++i) {
        m.samples.push_back({"img" + std::to_string(i) + ".png", "m" + std::to_string(i) + ".png",
                             "lesion", std::nullopt});
    }
    return m;
}

std::array<std::size_t, 3> sizes(const DatasetManifest &m) {
    return {m.count(Split::train), m.count(Split::val), m.count(Split::test)};
}

Sample rect_sample(int h, int w, BoundingBox b) {
    GrayImage img(h, w, 0.2f);
    BinaryMask mask(h, w);
    mask.fill_box(b);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (mask.at(r, c)) img.at(r, c) = 0.8f;
    return make_sample(img, mask, "bright lesion", {h, w});
}

}  // namespace

TEST(Rescale, WorkedExample) {
    const auto b = rescale_box(box(20, 10, 40, 30), {100, 200}, {800, 800});
    EXPECT_TRUE(b.same_geometry(box(80, 80, 160, 240)));
    const auto same = rescale_box(box(3, 4, 50, 60), {800, 800}, {800, 800});
    EXPECT_TRUE(same.same_geometry(box(3, 4, 50, 60)));
}

TEST(Manifest, JsonRoundTrip) {
    auto m = manifest_of(3);
    m.organ = "breast";
    m.samples[1].split = Split::val;
    const auto back = manifest_from_json(manifest_to_json(m));
    EXPECT_EQ(back.name, m.name);
    EXPECT_EQ(back.organ, "breast");
    ASSERT_EQ(back.samples.size(), 3u);
    EXPECT_EQ(back.samples[1].split, Split::val);
    EXPECT_FALSE(back.samples[0].split.has_value());
}

TEST(Manifest, MalformedInputIsIngestionError) {
    EXPECT_THROW(manifest_from_json("{not json"), IngestionError);
    EXPECT_THROW(manifest_from_json(R"({"name": 3})"), IngestionError);
}

TEST(Split, WorkedSizes) {
    EXPECT_EQ(sizes(split(manifest_of(10), {}, 1)), (std::array<std::size_t, 3>{7, 2, 1}));

    // Published sizes for n = 810 are 566/161/83; the rounding rule behind
    // them is unknown, so train and val are held to within one record.
    const auto s = sizes(split(manifest_of(810), {}, 1));
    EXPECT_NEAR(static_cast<double>(s[0]), 566.0, 1.0);
    EXPECT_NEAR(static_cast<double>(s[1]), 161.0, 1.0);
    EXPECT_EQ(s[0] + s[1] + s[2], 810u);

    EXPECT_EQ(sizes(split(manifest_of(296, DatasetRole::unseen), {}, 1)),
              (std::array<std::size_t, 3>{0, 0, 296}));
}

TEST(Split, IsDeterministicPartition) {
    for (std::size_t n : {1u, 2u, 3u, 17u, 100u, 333u}) {
        const auto a = split(manifest_of(n), {}, 42);
        const auto b = split(manifest_of(n), {}, 42);
        std::size_t total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ASSERT_TRUE(a.samples[i].split.has_value());
            ASSERT_EQ(a.samples[i].split, b.samples[i].split);
        }
        for (auto which : {Split::train, Split::val, Split::test}) {
            total += split_indices(a, which).size();
        }
        EXPECT_EQ(total, n);
        const auto s = sizes(a);
        EXPECT_EQ(s[0], static_cast<std::size_t>(std::floor(0.7 * n + 0.5)));
    }
}

TEST(Split, AlreadySplitNeedsOverride) {
    const auto once = split(manifest_of(20), {}, 1);
    EXPECT_THROW(split(once, {}, 2), StateError);
    EXPECT_NO_THROW(split(once, {}, 2, true));
}

TEST(Split, UnseenNeverFeedsTraining) {
    const auto m = split(manifest_of(30, DatasetRole::unseen), {}, 1);
    EXPECT_THROW(split_indices(m, Split::train), StateError);
    EXPECT_THROW(split_indices(m, Split::val), StateError);
    EXPECT_EQ(split_indices(m, Split::test).size(), 30u);
}

TEST(Ingest, RescalesBoxesAndSkipsEmptyMasks) {
    test_util::TempDir dir;
    DatasetManifest m;
    m.name = "tiny";
    m.base_dir = dir.path();
    GrayImage img(100, 200, 0.1f);
    BinaryMask mask(100, 200);
    mask.fill_box(box(20, 10, 40, 30));
    save_image(dir.path() / "a.png", img);
    save_mask(dir.path() / "a_mask.png", mask);
    save_mask(dir.path() / "b_mask.png", BinaryMask(100, 200));
    m.samples.push_back({"a.png", "a_mask.png", "benign", std::nullopt});
    m.samples.push_back({"a.png", "b_mask.png", "benign", std::nullopt});

    IngestStats stats;
    const auto samples = ingest_all(m, {800, 800}, std::nullopt, &stats);
    EXPECT_EQ(stats.emitted, 1u);
    EXPECT_EQ(stats.skipped_empty, 1u);
    ASSERT_EQ(samples.size(), 1u);
    EXPECT_TRUE(samples[0].box.same_geometry(box(80, 80, 160, 240)));
    EXPECT_EQ(samples[0].image.height(), 800);
    EXPECT_EQ(samples[0].original_size, (ImageSize{100, 200}));
    EXPECT_EQ(samples[0].prompt, "benign");
}

TEST(Ingest, ErrorsCarryContext) {
    test_util::TempDir dir;
    DatasetManifest m;
    m.name = "bad";
    m.base_dir = dir.path();
    m.samples.push_back({"missing.png", "missing_mask.png", "x", std::nullopt});
    try {
        ingest_all(m, {64, 64});
        FAIL() << "expected IngestionError";
    } catch (const IngestionError &e) {
        EXPECT_NE(std::string(e.what()).find("missing.png"), std::string::npos);
    }

    save_image(dir.path() / "i.png", GrayImage(10, 12));
    BinaryMask mk(10, 10);
    mk.set(2, 2);
    save_mask(dir.path() / "k.png", mk);
    m.samples = {{"i.png", "k.png", "x", std::nullopt}};
    EXPECT_THROW(ingest_all(m, {64, 64}), RecordError);
}

TEST(Ingest, ResampleThenBoxAgreesWithBoxThenRescale) {
    SynthConfig cfg;
    cfg.canvas = {96, 160};
    for (std::size_t i = 0; i < 40; ++i) {
        const auto item = generate_item(cfg, 9, i);
        const auto s = make_sample(item.image, item.mask, item.prompt, {128, 128});
        const auto direct = mask_to_tight_box(s.mask);
        EXPECT_NEAR(direct.x_min, s.box.x_min, 1.0);
        EXPECT_NEAR(direct.y_min, s.box.y_min, 1.0);
        EXPECT_NEAR(direct.x_max, s.box.x_max, 1.0);
        EXPECT_NEAR(direct.y_max, s.box.y_max, 1.0);
    }
}

TEST(Augment, FlipWorkedExample) {
    auto s = rect_sample(800, 800, box(80, 80, 160, 240));
    const auto f = hflip(s);
    EXPECT_TRUE(f.box.same_geometry(box(640, 80, 720, 240)));
    EXPECT_TRUE(mask_to_tight_box(f.mask).same_geometry(f.box));
    EXPECT_TRUE(hflip(f).image == s.image);
}

TEST(Augment, CropShiftsBoxByOrigin) {
    auto s = rect_sample(64, 64, box(20, 24, 40, 36));
    const auto c = crop(s, 10, 8, 40, 40);
    EXPECT_TRUE(c.box.same_geometry(box(10, 16, 30, 28)));
    for (int r = 0; r < 40; ++r)
        for (int k = 0; k < 40; ++k) ASSERT_EQ(c.mask.at(r, k), s.mask.at(r + 8, k + 10));
    EXPECT_THROW(crop(s, 40, 40, 40, 40), DimensionError);
}

TEST(Augment, IdentityDrawLeavesSampleUnchanged) {
    AugmentConfig none;
    none.p_flip = none.p_scale = none.p_pad = none.p_crop = none.p_erase = 0.0;
    const auto s = rect_sample(64, 64, box(10, 12, 30, 40));
    const auto a = augment(s, 5, none);
    EXPECT_TRUE(a.image == s.image);
    EXPECT_TRUE(a.mask == s.mask);
    EXPECT_TRUE(a.box.same_geometry(s.box));
}

TEST(Augment, PreservesMaskBoxConsistency) {
    SynthConfig cfg;
    AugmentConfig all;
    all.p_flip = all.p_scale = all.p_pad = all.p_crop = all.p_erase = 0.7;
    for (std::size_t i = 0; i < 60; ++i) {
        const auto item = generate_item(cfg, 4, i);
        const auto s = make_sample(item.image, item.mask, item.prompt, {128, 128});
        const auto a = augment(s, 1000 + i, all);
        ASSERT_EQ(a.image.height(), 128);
        ASSERT_EQ(a.image.width(), 128);
        ASSERT_TRUE(a.mask.any());
        ASSERT_NO_THROW(validate_box(a.box));
        // Nearest-neighbour mask resampling moves edges by at most a pixel
        // per resize, and a draw resizes at most three times.
        const auto t = mask_to_tight_box(a.mask);
        EXPECT_NEAR(t.x_min, a.box.x_min, 3.0) << i;
        EXPECT_NEAR(t.y_min, a.box.y_min, 3.0) << i;
        EXPECT_NEAR(t.x_max, a.box.x_max, 3.0) << i;
        EXPECT_NEAR(t.y_max, a.box.y_max, 3.0) << i;
        // Same seed, same draw.
        const auto again = augment(s, 1000 + i, all);
        ASSERT_TRUE(again.image == a.image);
    }
}

TEST(Augment, EraseTouchesImageOnly) {
    const auto s = rect_sample(32, 32, box(4, 4, 12, 12));
    const auto e = erase(s, 0, 0, 8, 8, 0.5f);
    EXPECT_TRUE(e.mask == s.mask);
    EXPECT_TRUE(e.box.same_geometry(s.box));
    EXPECT_EQ(e.image.at(0, 0), 0.5f);
    EXPECT_EQ(e.image.at(20, 20), s.image.at(20, 20));
}

TEST(Synthetic, DeterministicFilesAndContract) {
    test_util::TempDir a, b;
    SynthConfig cfg;
    cfg.count = 12;
    cfg.min_lesion_area = 120.0;
    cfg.families = {LesionFamily::bright, LesionFamily::dark};
    const auto ma = generate_synthetic(cfg, 77, a.path());
    generate_synthetic(cfg, 77, b.path());
    ASSERT_EQ(ma.samples.size(), 12u);
    for (const auto &rec : ma.samples) {
        EXPECT_EQ(test_util::read_bytes(a.path() / rec.image_path),
                  test_util::read_bytes(b.path() / rec.image_path));
        EXPECT_EQ(test_util::read_bytes(a.path() / rec.mask_path),
                  test_util::read_bytes(b.path() / rec.mask_path));
        const auto mask = load_mask(a.path() / rec.mask_path);
        ASSERT_TRUE(mask.any());
        EXPECT_GE(mask_to_tight_box(mask).area(), cfg.min_lesion_area);
    }
    EXPECT_EQ(test_util::read_bytes(a.path() / "manifest.json"),
              test_util::read_bytes(b.path() / "manifest.json"));
}

TEST(Synthetic, FullSizeSetIsNonEmpty) {
    SynthConfig cfg;
    for (std::size_t i = 0; i < 500; ++i) {
        const auto item = generate_item(cfg, 1, i);
        ASSERT_TRUE(item.mask.any());
        ASSERT_GE(mask_to_tight_box(item.mask).area(), cfg.min_lesion_area);
    }
}
