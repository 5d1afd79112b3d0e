#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "usground/geometry.hpp"
#include "usground/image.hpp"

namespace usground {

struct MaskOptions {
    // Each side of the box moves out by this fraction of the box extent.
    double dilation = 0.10;
    bool fill_holes = true;
    double smoothing_sigma = 1.0;  // pixels, before thresholding
    // Two-class splits whose class means differ by less than this (in
    // intensity units) are treated as "no object".
    double min_contrast = 0.04;
};

struct MaskRequest {
    const GrayImage *image = nullptr;
    BoundingBox box;
    MaskOptions options;
};

class MaskBackend {
public:
    virtual ~MaskBackend() = default;
    virtual std::string name() const = 0;
    // Returns a mask the size of the image. Zero-area boxes and boxes that
    // miss the canvas raise PromptError.
    virtual BinaryMask segment_box(const MaskRequest &request) const = 0;
};

// Otsu split inside the dilated box, polarity from the box border, largest
// 8-connected component, holes filled.
class ToyMaskBackend final : public MaskBackend {
public:
    std::string name() const override { return "toy"; }
    BinaryMask segment_box(const MaskRequest &request) const override;
};

// Box clipped to the canvas after dilation, in integer pixel bounds
// [x0, x1) x [y0, y1).
struct PixelRect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool empty() const { return x1 <= x0 || y1 <= y0; }
};
PixelRect dilated_rect(const BoundingBox &box, double dilation, int height, int width);

using MaskFactory = std::function<std::unique_ptr<MaskBackend>(const std::string &argument)>;
void register_mask_backend(const std::string &name, MaskFactory factory);
std::vector<std::string> mask_backends();
std::unique_ptr<MaskBackend> make_mask_backend(const std::string &descriptor);

}  // namespace usground
