#include "usground/mask_backend.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "usground/errors.hpp"

namespace usground {

PixelRect dilated_rect(const BoundingBox &box, double dilation, int height, int width) {
    if (!std::isfinite(box.x_min) || !std::isfinite(box.x_max) || !std::isfinite(box.y_min) ||
        !std::isfinite(box.y_max) || box.is_degenerate()) {
        throw PromptError("box prompt has zero area");
    }
    const double dx = dilation * box.width();
    const double dy = dilation * box.height();
    PixelRect r;
    r.x0 = std::max(0, static_cast<int>(std::floor(box.x_min - dx)));
    r.y0 = std::max(0, static_cast<int>(std::floor(box.y_min - dy)));
    r.x1 = std::min(width, static_cast<int>(std::ceil(box.x_max + dx)));
    r.y1 = std::min(height, static_cast<int>(std::ceil(box.y_max + dy)));
    if (box.x_max <= 0 || box.y_max <= 0 || box.x_min >= width || box.y_min >= height || r.empty()) {
        throw PromptError("box prompt lies outside the image");
    }
    return r;
}

BinaryMask ToyMaskBackend::segment_box(const MaskRequest &req) const {
    if (req.image == nullptr || req.image->empty()) {
        throw PromptError("mask request carries no image");
    }
    const GrayImage &img = *req.image;
    const PixelRect r = dilated_rect(req.box, req.options.dilation, img.height(), img.width());
    BinaryMask out(img.height(), img.width());
    const int h = r.y1 - r.y0;
    const int w = r.x1 - r.x0;

    cv::Mat roi(h, w, CV_32F);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) roi.at<float>(y, x) = img.at(r.y0 + y, r.x0 + x);
    }
    if (req.options.smoothing_sigma > 0) {
        cv::GaussianBlur(roi, roi, cv::Size(0, 0), req.options.smoothing_sigma, 0, cv::BORDER_REFLECT);
    }
    double lo = 0, hi = 0;
    cv::minMaxLoc(roi, &lo, &hi);
    if (hi - lo < 1e-6) return out;

    cv::Mat u8;
    roi.convertTo(u8, CV_8U, 255.0 / (hi - lo), -lo * 255.0 / (hi - lo));
    cv::Mat above;
    cv::threshold(u8, above, 0, 1, cv::THRESH_BINARY | cv::THRESH_OTSU);

    // Class means in the original intensity scale.
    const double n_hi = cv::countNonZero(above);
    const double n_lo = static_cast<double>(h) * w - n_hi;
    if (n_hi == 0 || n_lo == 0) return out;
    const double m_hi = cv::mean(roi, above)[0];
    const double m_lo = cv::mean(roi, above == 0)[0];
    if (m_hi - m_lo < req.options.min_contrast) return out;

    // The object is whichever class occupies less of the box border.
    double border_hi = 0;
    int border_n = 0;
    for (int x = 0; x < w; ++x) {
        border_hi += above.at<std::uint8_t>(0, x) + above.at<std::uint8_t>(h - 1, x);
        border_n += 2;
    }
    for (int y = 1; y + 1 < h; ++y) {
        border_hi += above.at<std::uint8_t>(y, 0) + above.at<std::uint8_t>(y, w - 1);
        border_n += 2;
    }
    cv::Mat fg = border_hi / border_n <= 0.5 ? above : (above == 0) / 255;

    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(fg, labels, stats, centroids, 8, CV_32S);
    int best = 0;
    int best_area = 0;
    for (int i = 1; i < n; ++i) {
        const int area = stats.at<int>(i, cv::CC_STAT_AREA);
        if (area > best_area) {
            best_area = area;
            best = i;
        }
    }
    if (best == 0) return out;
    cv::Mat comp = labels == best;  // 0 / 255

    if (req.options.fill_holes) {
        // Background reachable from outside the component stays background.
        cv::Mat padded;
        cv::copyMakeBorder(comp, padded, 1, 1, 1, 1, cv::BORDER_CONSTANT, cv::Scalar(0));
        cv::floodFill(padded, cv::Point(0, 0), cv::Scalar(128));
        cv::Mat inner = padded(cv::Rect(1, 1, w, h));
        comp = (inner != 128);
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (comp.at<std::uint8_t>(y, x)) out.set(r.y0 + y, r.x0 + x);
        }
    }
    return out;
}

namespace {

struct Registry {
    std::mutex mu;
    std::map<std::string, MaskFactory> factories;
};

Registry &registry() {
    static Registry r;
    static std::once_flag once;
    std::call_once(once, [] {
        r.factories["toy"] = [](const std::string &) -> std::unique_ptr<MaskBackend> {
            return std::make_unique<ToyMaskBackend>();
        };
    });
    return r;
}

}  // namespace

void register_mask_backend(const std::string &name, MaskFactory factory) {
    auto &r = registry();
    std::lock_guard lock(r.mu);
    r.factories[name] = std::move(factory);
}

std::vector<std::string> mask_backends() {
    auto &r = registry();
    std::lock_guard lock(r.mu);
    std::vector<std::string> out;
    for (const auto &[k, v] : r.factories) out.push_back(k);
    return out;
}

std::unique_ptr<MaskBackend> make_mask_backend(const std::string &descriptor) {
    const auto colon = descriptor.find(':');
    const std::string name = descriptor.substr(0, colon);
    const std::string arg = colon == std::string::npos ? std::string() : descriptor.substr(colon + 1);
    MaskFactory f;
    {
        auto &r = registry();
        std::lock_guard lock(r.mu);
        auto it = r.factories.find(name);
        if (it == r.factories.end()) {
            std::vector<std::string> names;
            for (const auto &[k, v] : r.factories) names.push_back(k);
            throw BackendError(fmt::format("unknown mask backend '{}'; available: {}", name, fmt::join(names, ", ")));
        }
        f = it->second;
    }
    return f(arg);
}

}  // namespace usground
