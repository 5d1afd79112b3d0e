#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace usground {

// Axis-aligned box in continuous pixel coordinates, origin top-left.
// Half-open convention: pixel (r, c) occupies [c, c+1) x [r, r+1), so a box
// spanning pixel columns c0..c1 has x_min = c0 and x_max = c1 + 1 and its
// width equals the pixel count.
struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;
    std::optional<double> score;
    std::optional<std::string> phrase;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool is_degenerate() const { return !(x_min < x_max && y_min < y_max); }

    bool same_geometry(const BoundingBox &o) const {
        return x_min == o.x_min && y_min == o.y_min && x_max == o.x_max && y_max == o.y_max;
    }
};

// Normalized center-x, center-y, width, height, each in [0,1].
using BoxCxcywh = std::array<double, 4>;

BoxCxcywh to_cxcywh(const BoundingBox &box, int canvas_width, int canvas_height);
BoundingBox from_cxcywh(const BoxCxcywh &box, int canvas_width, int canvas_height);

// Dense single-channel binary mask, row-major, one byte per pixel (0 or 1).
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width);

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return bits_.size(); }
    bool empty_canvas() const { return bits_.empty(); }

    bool at(int row, int col) const { return bits_[index(row, col)] != 0; }
    void set(int row, int col, bool on = true) { bits_[index(row, col)] = on ? 1 : 0; }

    std::span<const std::uint8_t> bits() const { return bits_; }
    std::span<std::uint8_t> bits() { return bits_; }

    std::size_t count() const;
    bool any() const;

    void fill_box(const BoundingBox &box);
    BinaryMask operator|(const BinaryMask &other) const;
    bool operator==(const BinaryMask &other) const = default;

private:
    std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(col);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> bits_;
};

// Overlap metrics. Both return 1.0 when both masks are empty.
double iou(const BinaryMask &p, const BinaryMask &g);
double dsc(const BinaryMask &p, const BinaryMask &g);

double box_iou(const BoundingBox &a, const BoundingBox &b);

// Smallest half-open box containing every foreground pixel.
// Throws EmptyAnnotationError on an empty mask.
BoundingBox mask_to_tight_box(const BinaryMask &m);

void validate_box(const BoundingBox &box);

}  // namespace usground
