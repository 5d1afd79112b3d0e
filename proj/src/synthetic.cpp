#include "usground/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "usground/errors.hpp"

namespace usground {

std::string to_string(LesionFamily family) {
    return family == LesionFamily::bright ? "bright" : "dark";
}

std::string to_string(DomainVariant variant) { return variant == DomainVariant::A ? "A" : "B"; }

LesionFamily parse_family(const std::string &text) {
    if (text == "bright") return LesionFamily::bright;
    if (text == "dark") return LesionFamily::dark;
    throw ConfigError(fmt::format("unknown lesion family '{}'", text));
}

DomainVariant parse_variant(const std::string &text) {
    if (text == "A" || text == "a") return DomainVariant::A;
    if (text == "B" || text == "b") return DomainVariant::B;
    throw ConfigError(fmt::format("unknown domain variant '{}'", text));
}

std::string family_prompt(LesionFamily family) { return to_string(family) + " lesion"; }

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

struct DomainStyle {
    double speckle_looks;    // gamma shape of the speckle field
    double speckle_blur;     // grain size (gaussian sigma, pixels)
    double attenuation;      // exp(-a * depth) gain
    double bright_gain;
    double dark_gain;
};

DomainStyle style_for(DomainVariant v) {
    if (v == DomainVariant::A) {
        return {4.0, 0.6, 0.0, 2.1, 0.28};
    }
    return {1.6, 1.4, 1.0, 2.2, 0.3};
}

using Rng = std::mt19937_64;

double uni(Rng &rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

cv::Mat speckle_field(int h, int w, const DomainStyle &style, Rng &rng) {
    std::gamma_distribution<double> gamma(style.speckle_looks, 1.0 / style.speckle_looks);
    cv::Mat f(h, w, CV_64F);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            f.at<double>(r, c) = gamma(rng);
        }
    }
    if (style.speckle_blur > 0.0) {
        cv::GaussianBlur(f, f, cv::Size(0, 0), style.speckle_blur);
        // Blurring shrinks the variance; rescale around the unit mean.
        cv::Scalar mean, stddev;
        cv::meanStdDev(f, mean, stddev);
        const double target = 1.0 / std::sqrt(style.speckle_looks);
        if (stddev[0] > 1e-12) {
            f = (f - mean[0]) * (target / stddev[0]) + 1.0;
        }
        cv::max(f, 0.05, f);
    }
    return f;
}

// Smooth tissue echogenicity: base level plus a few broad gaussian bumps.
cv::Mat tissue_map(int h, int w, const DomainStyle &style, Rng &rng) {
    cv::Mat t(h, w, CV_64F, cv::Scalar(uni(rng, 0.33, 0.42)));
    const int bumps = 3;
    for (int k = 0; k < bumps; ++k) {
        const double cy = uni(rng, 0, h);
        const double cx = uni(rng, 0, w);
        const double s = uni(rng, 0.2, 0.45) * std::min(h, w);
        const double amp = uni(rng, -0.06, 0.06);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const double d2 = ((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2 * s * s);
                t.at<double>(r, c) += amp * std::exp(-d2);
            }
        }
    }
    if (style.attenuation > 0.0) {
        for (int r = 0; r < h; ++r) {
            const double gain = 1.35 * std::exp(-style.attenuation * r / h);
            t.row(r) *= gain;
        }
    }
    return t;
}

BinaryMask lesion_shape(int h, int w, Rng &rng) {
    const double scale = std::min(h, w) / 128.0;
    const double r_min = 8.0 * scale;
    const double r_max = 22.0 * scale;
    const double margin = r_max + 2.0;
    const double cx = uni(rng, margin, w - margin);
    const double cy = uni(rng, margin, h - margin);
    BinaryMask m(h, w);
    if (uni(rng, 0.0, 1.0) < 0.5) {
        const double a = uni(rng, r_min, r_max);
        const double b = uni(rng, r_min, r_max);
        const double th = uni(rng, 0.0, std::numbers::pi);
        const double ct = std::cos(th);
        const double st = std::sin(th);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const double dx = c + 0.5 - cx;
                const double dy = r + 0.5 - cy;
                const double u = dx * ct + dy * st;
                const double v = -dx * st + dy * ct;
                if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) {
                    m.set(r, c);
                }
            }
        }
    } else {
        // Star-convex polygon.
        const int n = std::uniform_int_distribution<int>(6, 10)(rng);
        const double base = uni(rng, r_min, r_max);
        const double phase = uni(rng, 0.0, 2 * std::numbers::pi);
        std::vector<cv::Point> pts;
        for (int k = 0; k < n; ++k) {
            const double ang = phase + 2 * std::numbers::pi * k / n;
            const double rad = base * uni(rng, 0.7, 1.0);
            pts.emplace_back(static_cast<int>(std::lround(cx + rad * std::cos(ang))),
                             static_cast<int>(std::lround(cy + rad * std::sin(ang))));
        }
        cv::Mat poly(h, w, CV_8UC1, cv::Scalar(0));
        cv::fillPoly(poly, std::vector<std::vector<cv::Point>>{pts}, cv::Scalar(1));
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                if (poly.at<std::uint8_t>(r, c)) {
                    m.set(r, c);
                }
            }
        }
    }
    return m;
}

}  // namespace

SyntheticItem generate_item(const SynthConfig &config, std::uint64_t seed, std::size_t index) {
    if (config.canvas.height < 32 || config.canvas.width < 32) {
        throw ConfigError("synthetic canvas must be at least 32x32");
    }
    if (config.families.empty()) {
        throw ConfigError("synthetic config needs at least one lesion family");
    }
    Rng rng(splitmix64(seed ^ splitmix64(index + 1)));
    const DomainStyle style = style_for(config.variant);
    const int h = config.canvas.height;
    const int w = config.canvas.width;

    SyntheticItem item;
    const auto fam_idx = std::uniform_int_distribution<std::size_t>(0, config.families.size() - 1)(rng);
    item.family = config.families[fam_idx];
    item.prompt = family_prompt(item.family);

    for (int attempt = 0;; ++attempt) {
        item.mask = lesion_shape(h, w, rng);
        if (item.mask.any() && mask_to_tight_box(item.mask).area() >= config.min_lesion_area) {
            break;
        }
        if (attempt > 100) {
            throw ConfigError("cannot satisfy min_lesion_area on this canvas");
        }
    }

    cv::Mat t = tissue_map(h, w, style, rng);
    const double gain = item.family == LesionFamily::bright ? style.bright_gain : style.dark_gain;
    // Slightly soft lesion boundary.
    cv::Mat lesion(h, w, CV_64F, cv::Scalar(0.0));
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            lesion.at<double>(r, c) = item.mask.at(r, c) ? 1.0 : 0.0;
        }
    }
    cv::GaussianBlur(lesion, lesion, cv::Size(0, 0), 0.8);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const double l = lesion.at<double>(r, c);
            t.at<double>(r, c) *= (1.0 - l) + l * gain;
        }
    }
    const cv::Mat s = speckle_field(h, w, style, rng);
    item.image = GrayImage(h, w);
    std::normal_distribution<double> thermal(0.0, 0.01);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const double v = t.at<double>(r, c) * s.at<double>(r, c) + thermal(rng);
            item.image.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    // Quantize like the on-disk 8-bit encoding so in-memory and file paths agree.
    for (auto &p : item.image.pixels()) {
        p = static_cast<float>(std::lround(p * 255.0f)) / 255.0f;
    }
    return item;
}

DatasetManifest generate_synthetic(const SynthConfig &config, std::uint64_t seed,
                                   const std::filesystem::path &out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    std::filesystem::create_directories(out_dir / "masks", ec);
    if (ec) {
        throw IoError(fmt::format("cannot create {}: {}", out_dir.string(), ec.message()));
    }
    DatasetManifest manifest;
    manifest.name = config.name;
    manifest.organ = config.organ;
    manifest.role = config.role;
    manifest.base_dir = out_dir;
    for (std::size_t i = 0; i < config.count; ++i) {
        const SyntheticItem item = generate_item(config, seed, i);
        SampleRecord rec;
        rec.image_path = fmt::format("images/img_{:05d}.png", i);
        rec.mask_path = fmt::format("masks/mask_{:05d}.png", i);
        rec.prompt = item.prompt;
        save_image(out_dir / rec.image_path, item.image);
        save_mask(out_dir / rec.mask_path, item.mask);
        manifest.samples.push_back(std::move(rec));
    }
    save_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

}  // namespace usground
