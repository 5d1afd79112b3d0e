#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "usground/geometry.hpp"

namespace usground {

// Single-channel intensity grid, values nominally in [0,1], row-major.
class GrayImage {
public:
    GrayImage() = default;
    GrayImage(int height, int width, float fill = 0.0f);

    int height() const { return height_; }
    int width() const { return width_; }
    bool empty() const { return pixels_.empty(); }

    float at(int row, int col) const { return pixels_[index(row, col)]; }
    float &at(int row, int col) { return pixels_[index(row, col)]; }

    std::span<const float> pixels() const { return pixels_; }
    std::span<float> pixels() { return pixels_; }

    bool operator==(const GrayImage &other) const = default;

private:
    std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(col);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<float> pixels_;
};

// File I/O (any format OpenCV decodes; color inputs are converted to gray).
GrayImage load_image(const std::filesystem::path &path);
BinaryMask load_mask(const std::filesystem::path &path);
void save_image(const std::filesystem::path &path, const GrayImage &image);
void save_mask(const std::filesystem::path &path, const BinaryMask &mask);

// In-memory codecs used by the HTTP surface.
GrayImage decode_image(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const GrayImage &image);
std::vector<std::uint8_t> encode_mask_png(const BinaryMask &mask);
BinaryMask decode_mask(std::span<const std::uint8_t> bytes);

// Bilinear for intensities; pixel-center nearest for masks.
GrayImage resize_image(const GrayImage &image, int height, int width);
BinaryMask resize_mask(const BinaryMask &mask, int height, int width);

}  // namespace usground
