#include "usground/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "usground/errors.hpp"

namespace usground {

using nlohmann::json;

std::string to_string(DatasetRole role) { return role == DatasetRole::seen ? "seen" : "unseen"; }

std::string to_string(Split split) {
    switch (split) {
    case Split::train:
        return "train";
    case Split::val:
        return "val";
    case Split::test:
        return "test";
    }
    return "test";
}

DatasetRole parse_role(const std::string &text) {
    if (text == "seen") return DatasetRole::seen;
    if (text == "unseen") return DatasetRole::unseen;
    throw ConfigError(fmt::format("unknown dataset role '{}'", text));
}

Split parse_split(const std::string &text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    if (text == "test") return Split::test;
    throw ConfigError(fmt::format("unknown split '{}'", text));
}

bool DatasetManifest::is_split() const {
    return std::any_of(samples.begin(), samples.end(),
                       [](const SampleRecord &r) { return r.split.has_value(); });
}

std::size_t DatasetManifest::count(Split split) const {
    return static_cast<std::size_t>(std::count_if(
        samples.begin(), samples.end(), [&](const SampleRecord &r) { return r.split == split; }));
}

std::string manifest_to_json(const DatasetManifest &manifest) {
    json doc;
    doc["name"] = manifest.name;
    doc["organ"] = manifest.organ;
    doc["role"] = to_string(manifest.role);
    doc["samples"] = json::array();
    for (const auto &r : manifest.samples) {
        json rec{{"image", r.image_path}, {"mask", r.mask_path}, {"prompt", r.prompt}};
        if (r.split) {
            rec["split"] = to_string(*r.split);
        }
        doc["samples"].push_back(std::move(rec));
    }
    return doc.dump(2);
}

DatasetManifest manifest_from_json(const std::string &text, std::filesystem::path base_dir) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception &e) {
        throw IngestionError(fmt::format("manifest is not valid JSON: {}", e.what()));
    }
    DatasetManifest m;
    try {
        m.name = doc.at("name").get<std::string>();
        m.organ = doc.at("organ").get<std::string>();
        m.role = parse_role(doc.at("role").get<std::string>());
        for (const auto &rec : doc.at("samples")) {
            SampleRecord r;
            r.image_path = rec.at("image").get<std::string>();
            r.mask_path = rec.at("mask").get<std::string>();
            r.prompt = rec.at("prompt").get<std::string>();
            if (r.prompt.find_first_not_of(" \t\r\n") == std::string::npos) {
                throw RecordError(fmt::format("record '{}' has an empty prompt", r.image_path));
            }
            if (rec.contains("split") && !rec.at("split").is_null()) {
                r.split = parse_split(rec.at("split").get<std::string>());
            }
            m.samples.push_back(std::move(r));
        }
    } catch (const json::exception &e) {
        throw IngestionError(fmt::format("manifest schema violation: {}", e.what()));
    }
    m.base_dir = std::move(base_dir);
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw IngestionError(fmt::format("cannot open manifest {}", path.string()));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return manifest_from_json(ss.str(), path.parent_path());
}

void save_manifest(const std::filesystem::path &path, const DatasetManifest &manifest) {
    std::ofstream out(path);
    if (!out) {
        throw IoError(fmt::format("cannot write manifest {}", path.string()));
    }
    out << manifest_to_json(manifest) << '\n';
}

BoundingBox rescale_box(const BoundingBox &box, ImageSize from, ImageSize to) {
    const double sx = static_cast<double>(to.width) / from.width;
    const double sy = static_cast<double>(to.height) / from.height;
    BoundingBox out = box;
    out.x_min = box.x_min * sx;
    out.x_max = box.x_max * sx;
    out.y_min = box.y_min * sy;
    out.y_max = box.y_max * sy;
    return out;
}

Sample make_sample(const GrayImage &image, const BinaryMask &mask, std::string prompt,
                   ImageSize target) {
    if (image.height() != mask.height() || image.width() != mask.width()) {
        throw RecordError(fmt::format("image {}x{} and mask {}x{} differ", image.height(),
                                      image.width(), mask.height(), mask.width()));
    }
    const ImageSize original{image.height(), image.width()};
    Sample s;
    s.box = rescale_box(mask_to_tight_box(mask), original, target);
    s.image = resize_image(image, target.height, target.width);
    s.mask = resize_mask(mask, target.height, target.width);
    s.prompt = std::move(prompt);
    s.original_size = original;
    return s;
}

IngestStats ingest(const DatasetManifest &manifest, ImageSize target,
                   const std::function<void(Sample &&)> &sink, std::optional<Split> only) {
    if (target.height <= 0 || target.width <= 0) {
        throw ConfigError("target size must be positive");
    }
    IngestStats stats;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
        const auto &rec = manifest.samples[i];
        if (only && rec.split != only) {
            continue;
        }
        const GrayImage image = load_image(manifest.base_dir / rec.image_path);
        const BinaryMask mask = load_mask(manifest.base_dir / rec.mask_path);
        if (!mask.any()) {
            spdlog::warn("{}: skipping record {} ({}): mask has no foreground", manifest.name, i,
                         rec.mask_path);
            ++stats.skipped_empty;
            continue;
        }
        Sample s;
        try {
            s = make_sample(image, mask, rec.prompt, target);
        } catch (const RecordError &e) {
            throw RecordError(fmt::format("{}: {}", rec.image_path, e.what()));
        }
        s.dataset = manifest.name;
        s.record_index = i;
        sink(std::move(s));
        ++stats.emitted;
    }
    return stats;
}

std::vector<Sample> ingest_all(const DatasetManifest &manifest, ImageSize target,
                               std::optional<Split> only, IngestStats *stats) {
    std::vector<Sample> out;
    const auto st = ingest(manifest, target, [&](Sample &&s) { out.push_back(std::move(s)); }, only);
    if (stats) {
        *stats = st;
    }
    return out;
}

DatasetManifest split(const DatasetManifest &manifest, SplitFractions fractions, std::uint64_t seed,
                      bool override_existing) {
    if (manifest.is_split() && !override_existing) {
        throw StateError(fmt::format("manifest '{}' is already split", manifest.name));
    }
    const double total = fractions.train + fractions.val + fractions.test;
    if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0 ||
        std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split fractions must be non-negative and sum to 1");
    }
    DatasetManifest out = manifest;
    const std::size_t n = out.samples.size();
    if (out.role == DatasetRole::unseen) {
        for (auto &r : out.samples) {
            r.split = Split::test;
        }
        return out;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const auto round_half_up = [](double v) {
        return static_cast<std::size_t>(std::floor(v + 0.5 + 1e-9));
    };
    const std::size_t n_train = std::min(n, round_half_up(fractions.train * n));
    const std::size_t n_val = std::min(n - n_train, round_half_up(fractions.val * n));
    for (std::size_t k = 0; k < n; ++k) {
        Split s = Split::test;
        if (k < n_train) {
            s = Split::train;
        } else if (k < n_train + n_val) {
            s = Split::val;
        }
        out.samples[order[k]].split = s;
    }
    return out;
}

std::vector<std::size_t> split_indices(const DatasetManifest &manifest, Split which) {
    if (manifest.role == DatasetRole::unseen && which != Split::test) {
        throw StateError(fmt::format("unseen dataset '{}' cannot supply {} samples", manifest.name,
                                     to_string(which)));
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
        if (manifest.samples[i].split == which) {
            out.push_back(i);
        }
    }
    return out;
}

Sample hflip(const Sample &sample) {
    Sample out = sample;
    const int w = sample.image.width();
    for (int r = 0; r < sample.image.height(); ++r) {
        for (int c = 0; c < w; ++c) {
            out.image.at(r, c) = sample.image.at(r, w - 1 - c);
            out.mask.set(r, c, sample.mask.at(r, w - 1 - c));
        }
    }
    out.box.x_min = w - sample.box.x_max;
    out.box.x_max = w - sample.box.x_min;
    return out;
}

Sample crop(const Sample &sample, int x0, int y0, int width, int height) {
    if (width <= 0 || height <= 0 || x0 < 0 || y0 < 0 || x0 + width > sample.image.width() ||
        y0 + height > sample.image.height()) {
        throw DimensionError(fmt::format("crop ({}, {}, {}x{}) outside {}x{} canvas", x0, y0, width,
                                         height, sample.image.width(), sample.image.height()));
    }
    Sample out = sample;
    out.image = GrayImage(height, width);
    out.mask = BinaryMask(height, width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            out.image.at(r, c) = sample.image.at(r + y0, c + x0);
            out.mask.set(r, c, sample.mask.at(r + y0, c + x0));
        }
    }
    out.box.x_min = std::clamp(sample.box.x_min - x0, 0.0, static_cast<double>(width));
    out.box.x_max = std::clamp(sample.box.x_max - x0, 0.0, static_cast<double>(width));
    out.box.y_min = std::clamp(sample.box.y_min - y0, 0.0, static_cast<double>(height));
    out.box.y_max = std::clamp(sample.box.y_max - y0, 0.0, static_cast<double>(height));
    return out;
}

Sample pad(const Sample &sample, int left, int top, int right, int bottom, float fill) {
    if (left < 0 || top < 0 || right < 0 || bottom < 0) {
        throw DimensionError("padding must be non-negative");
    }
    const int h = sample.image.height() + top + bottom;
    const int w = sample.image.width() + left + right;
    Sample out = sample;
    out.image = GrayImage(h, w, fill);
    out.mask = BinaryMask(h, w);
    for (int r = 0; r < sample.image.height(); ++r) {
        for (int c = 0; c < sample.image.width(); ++c) {
            out.image.at(r + top, c + left) = sample.image.at(r, c);
            out.mask.set(r + top, c + left, sample.mask.at(r, c));
        }
    }
    out.box.x_min += left;
    out.box.x_max += left;
    out.box.y_min += top;
    out.box.y_max += top;
    return out;
}

Sample resize_sample(const Sample &sample, ImageSize size) {
    Sample out = sample;
    const ImageSize from{sample.image.height(), sample.image.width()};
    out.image = resize_image(sample.image, size.height, size.width);
    out.mask = resize_mask(sample.mask, size.height, size.width);
    out.box = rescale_box(sample.box, from, size);
    return out;
}

Sample erase(const Sample &sample, int x0, int y0, int width, int height, float fill) {
    Sample out = sample;
    const int r1 = std::min(sample.image.height(), y0 + height);
    const int c1 = std::min(sample.image.width(), x0 + width);
    for (int r = std::max(0, y0); r < r1; ++r) {
        for (int c = std::max(0, x0); c < c1; ++c) {
            out.image.at(r, c) = fill;
        }
    }
    return out;
}

namespace {

class Draw {
public:
    explicit Draw(std::uint64_t seed) : rng_(seed) {}

    bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng_);
    }
    int integer(int lo, int hi) {  // inclusive
        return std::uniform_int_distribution<int>(lo, hi)(rng_);
    }

private:
    std::mt19937_64 rng_;
};

float mean_intensity(const GrayImage &image) {
    const auto px = image.pixels();
    if (px.empty()) {
        return 0.0f;
    }
    return static_cast<float>(std::accumulate(px.begin(), px.end(), 0.0) /
                              static_cast<double>(px.size()));
}

// Integer window [lo, hi] of crop origins along one axis that keep the box inside.
bool origin_range(double box_min, double box_max, int window, int canvas, int &lo, int &hi) {
    lo = std::max(0, static_cast<int>(std::ceil(box_max)) - window);
    hi = std::min(static_cast<int>(std::floor(box_min)), canvas - window);
    return lo <= hi;
}

std::optional<Sample> try_scale_jitter(const Sample &s, Draw &draw, const AugmentConfig &cfg) {
    const ImageSize canvas{s.image.height(), s.image.width()};
    const double f = draw.uniform(cfg.scale_min, cfg.scale_max);
    const ImageSize scaled{std::max(1, static_cast<int>(std::lround(canvas.height * f))),
                           std::max(1, static_cast<int>(std::lround(canvas.width * f)))};
    Sample r = resize_sample(s, scaled);
    if (scaled.width < canvas.width || scaled.height < canvas.height) {
        const int dx = std::max(0, canvas.width - scaled.width);
        const int dy = std::max(0, canvas.height - scaled.height);
        const int left = draw.integer(0, dx);
        const int top = draw.integer(0, dy);
        r = pad(r, left, top, dx - left, dy - top, 0.0f);
    }
    if (r.image.width() > canvas.width || r.image.height() > canvas.height) {
        int xlo = 0, xhi = 0, ylo = 0, yhi = 0;
        if (!origin_range(r.box.x_min, r.box.x_max, canvas.width, r.image.width(), xlo, xhi) ||
            !origin_range(r.box.y_min, r.box.y_max, canvas.height, r.image.height(), ylo, yhi)) {
            return std::nullopt;
        }
        r = crop(r, draw.integer(xlo, xhi), draw.integer(ylo, yhi), canvas.width, canvas.height);
    }
    return r;
}

std::optional<Sample> try_crop(const Sample &s, Draw &draw, const AugmentConfig &cfg) {
    const ImageSize canvas{s.image.height(), s.image.width()};
    const int w = static_cast<int>(std::lround(canvas.width * draw.uniform(cfg.min_crop_fraction, 1.0)));
    const int h = static_cast<int>(std::lround(canvas.height * draw.uniform(cfg.min_crop_fraction, 1.0)));
    int xlo = 0, xhi = 0, ylo = 0, yhi = 0;
    if (!origin_range(s.box.x_min, s.box.x_max, w, canvas.width, xlo, xhi) ||
        !origin_range(s.box.y_min, s.box.y_max, h, canvas.height, ylo, yhi)) {
        return std::nullopt;
    }
    return resize_sample(crop(s, draw.integer(xlo, xhi), draw.integer(ylo, yhi), w, h), canvas);
}

Sample do_pad(const Sample &s, Draw &draw, const AugmentConfig &cfg) {
    const ImageSize canvas{s.image.height(), s.image.width()};
    const int mx = static_cast<int>(canvas.width * cfg.max_pad_fraction);
    const int my = static_cast<int>(canvas.height * cfg.max_pad_fraction);
    const Sample p = pad(s, draw.integer(0, mx), draw.integer(0, my), draw.integer(0, mx),
                         draw.integer(0, my), 0.0f);
    return resize_sample(p, canvas);
}

std::optional<Sample> try_erase(const Sample &s, Draw &draw, const AugmentConfig &cfg) {
    const int cw = s.image.width();
    const int ch = s.image.height();
    const double area = draw.uniform(0.02, cfg.max_erase_fraction) * cw * ch;
    const double aspect = draw.uniform(0.3, 3.3);
    const int w = std::clamp(static_cast<int>(std::sqrt(area * aspect)), 1, cw);
    const int h = std::clamp(static_cast<int>(std::sqrt(area / aspect)), 1, ch);
    const int x0 = draw.integer(0, cw - w);
    const int y0 = draw.integer(0, ch - h);
    std::size_t covered = 0;
    for (int r = y0; r < y0 + h; ++r) {
        for (int c = x0; c < x0 + w; ++c) {
            covered += s.mask.at(r, c) ? 1 : 0;
        }
    }
    const std::size_t fg = s.mask.count();
    if (fg > 0 && static_cast<double>(covered) > cfg.max_foreground_erased * static_cast<double>(fg)) {
        return std::nullopt;
    }
    return erase(s, x0, y0, w, h, mean_intensity(s.image));
}

template <typename Attempt>
Sample with_retries(const Sample &s, int cap, Attempt &&attempt) {
    for (int k = 0; k < cap; ++k) {
        if (auto r = attempt()) {
            return std::move(*r);
        }
    }
    return s;
}

}  // namespace

Sample augment(const Sample &sample, std::uint64_t seed, const AugmentConfig &cfg) {
    Draw draw(seed);
    Sample s = sample;
    if (draw.chance(cfg.p_flip)) {
        s = hflip(s);
    }
    if (draw.chance(cfg.p_scale)) {
        s = with_retries(s, cfg.retry_cap, [&] { return try_scale_jitter(s, draw, cfg); });
    }
    if (draw.chance(cfg.p_pad)) {
        s = do_pad(s, draw, cfg);
    }
    if (draw.chance(cfg.p_crop)) {
        s = with_retries(s, cfg.retry_cap, [&] { return try_crop(s, draw, cfg); });
    }
    if (draw.chance(cfg.p_erase)) {
        s = with_retries(s, cfg.retry_cap, [&] { return try_erase(s, draw, cfg); });
    }
    return s;
}

}  // namespace usground
