#include "usground/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground {

BoxCxcywh to_cxcywh(const BoundingBox &box, int canvas_width, int canvas_height) {
    const double w = canvas_width;
    const double h = canvas_height;
    return {(box.x_min + box.x_max) / (2.0 * w), (box.y_min + box.y_max) / (2.0 * h),
            box.width() / w, box.height() / h};
}

BoundingBox from_cxcywh(const BoxCxcywh &box, int canvas_width, int canvas_height) {
    const double w = canvas_width;
    const double h = canvas_height;
    BoundingBox out;
    out.x_min = (box[0] - 0.5 * box[2]) * w;
    out.y_min = (box[1] - 0.5 * box[3]) * h;
    out.x_max = (box[0] + 0.5 * box[2]) * w;
    out.y_max = (box[1] + 0.5 * box[3]) * h;
    return out;
}

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
    if (height < 0 || width < 0) {
        throw DimensionError(fmt::format("negative mask shape {}x{}", height, width));
    }
    bits_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0);
}

std::size_t BinaryMask::count() const {
    return std::accumulate(bits_.begin(), bits_.end(), std::size_t{0});
}

bool BinaryMask::any() const {
    return std::any_of(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b != 0; });
}

void BinaryMask::fill_box(const BoundingBox &box) {
    const int c0 = std::clamp(static_cast<int>(std::ceil(box.x_min - 0.5)), 0, width_);
    const int r0 = std::clamp(static_cast<int>(std::ceil(box.y_min - 0.5)), 0, height_);
    const int c1 = std::clamp(static_cast<int>(std::ceil(box.x_max - 0.5)), 0, width_);
    const int r1 = std::clamp(static_cast<int>(std::ceil(box.y_max - 0.5)), 0, height_);
    for (int r = r0; r < r1; ++r) {
        std::fill_n(bits_.begin() + static_cast<std::ptrdiff_t>(index(r, c0)), c1 - c0, 1);
    }
}

BinaryMask BinaryMask::operator|(const BinaryMask &other) const {
    if (height_ != other.height_ || width_ != other.width_) {
        throw DimensionError("mask union over different shapes");
    }
    BinaryMask out = *this;
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        out.bits_[i] = static_cast<std::uint8_t>(bits_[i] | other.bits_[i]);
    }
    return out;
}

namespace {

struct OverlapCounts {
    std::size_t intersection = 0;
    std::size_t p = 0;
    std::size_t g = 0;
};

OverlapCounts count_overlap(const BinaryMask &p, const BinaryMask &g) {
    if (p.height() != g.height() || p.width() != g.width()) {
        throw DimensionError(fmt::format("mask shapes differ: {}x{} vs {}x{}", p.height(),
                                         p.width(), g.height(), g.width()));
    }
    const auto pb = p.bits();
    const auto gb = g.bits();
    OverlapCounts c;
    // Bytes are 0/1, so products and sums count directly.
    c.intersection = std::transform_reduce(pb.begin(), pb.end(), gb.begin(), std::size_t{0},
                                           std::plus<>{}, [](std::uint8_t a, std::uint8_t b) {
                                               return static_cast<std::size_t>(a & b);
                                           });
    c.p = std::accumulate(pb.begin(), pb.end(), std::size_t{0});
    c.g = std::accumulate(gb.begin(), gb.end(), std::size_t{0});
    return c;
}

}  // namespace

double iou(const BinaryMask &p, const BinaryMask &g) {
    const auto c = count_overlap(p, g);
    const std::size_t uni = c.p + c.g - c.intersection;
    if (uni == 0) {
        return 1.0;
    }
    return static_cast<double>(c.intersection) / static_cast<double>(uni);
}

double dsc(const BinaryMask &p, const BinaryMask &g) {
    const auto c = count_overlap(p, g);
    if (c.p + c.g == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.p + c.g);
}

void validate_box(const BoundingBox &box) {
    if (!std::isfinite(box.x_min) || !std::isfinite(box.y_min) || !std::isfinite(box.x_max) ||
        !std::isfinite(box.y_max)) {
        throw DomainError("box has non-finite coordinates");
    }
    if (box.is_degenerate()) {
        throw DomainError(fmt::format("degenerate box ({}, {}, {}, {})", box.x_min, box.y_min,
                                      box.x_max, box.y_max));
    }
    if (box.score && (*box.score < 0.0 || *box.score > 1.0)) {
        throw DomainError(fmt::format("box score {} outside [0,1]", *box.score));
    }
}

double box_iou(const BoundingBox &a, const BoundingBox &b) {
    validate_box(a);
    validate_box(b);
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

BoundingBox mask_to_tight_box(const BinaryMask &m) {
    int r_min = m.height();
    int r_max = -1;
    int c_min = m.width();
    int c_max = -1;
    const auto bits = m.bits();
    for (int r = 0; r < m.height(); ++r) {
        const auto row = bits.subspan(static_cast<std::size_t>(r) * m.width(), m.width());
        const auto first = std::find(row.begin(), row.end(), std::uint8_t{1});
        if (first == row.end()) {
            continue;
        }
        const auto last = std::find(row.rbegin(), row.rend(), std::uint8_t{1});
        r_min = std::min(r_min, r);
        r_max = r;
        c_min = std::min(c_min, static_cast<int>(first - row.begin()));
        c_max = std::max(c_max, static_cast<int>(row.rend() - last) - 1);
    }
    if (r_max < 0) {
        throw EmptyAnnotationError("mask has no foreground pixels");
    }
    BoundingBox box;
    box.x_min = c_min;
    box.y_min = r_min;
    box.x_max = c_max + 1;
    box.y_max = r_max + 1;
    return box;
}

}  // namespace usground
