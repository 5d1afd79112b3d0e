#include "usground/image.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "usground/errors.hpp"

namespace usground {

GrayImage::GrayImage(int height, int width, float fill) : height_(height), width_(width) {
    if (height < 0 || width < 0) {
        throw DimensionError(fmt::format("negative image shape {}x{}", height, width));
    }
    pixels_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

namespace {

cv::Mat to_mat_u8(const GrayImage &image) {
    cv::Mat out(image.height(), image.width(), CV_8UC1);
    for (int r = 0; r < image.height(); ++r) {
        auto *row = out.ptr<std::uint8_t>(r);
        for (int c = 0; c < image.width(); ++c) {
            const float v = std::clamp(image.at(r, c), 0.0f, 1.0f);
            row[c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
    return out;
}

GrayImage from_mat(const cv::Mat &mat) {
    cv::Mat gray;
    if (mat.channels() == 3) {
        cv::cvtColor(mat, gray, cv::COLOR_BGR2GRAY);
    } else if (mat.channels() == 4) {
        cv::cvtColor(mat, gray, cv::COLOR_BGRA2GRAY);
    } else {
        gray = mat;
    }
    cv::Mat f;
    double scale = 1.0 / 255.0;
    if (gray.depth() == CV_16U) {
        scale = 1.0 / 65535.0;
    } else if (gray.depth() == CV_32F || gray.depth() == CV_64F) {
        scale = 1.0;
    }
    gray.convertTo(f, CV_32F, scale);
    GrayImage out(f.rows, f.cols);
    for (int r = 0; r < f.rows; ++r) {
        const auto *row = f.ptr<float>(r);
        std::copy(row, row + f.cols, out.pixels().begin() + static_cast<std::ptrdiff_t>(r) * f.cols);
    }
    return out;
}

cv::Mat mask_to_mat(const BinaryMask &mask) {
    cv::Mat out(mask.height(), mask.width(), CV_8UC1);
    const auto bits = mask.bits();
    for (int r = 0; r < mask.height(); ++r) {
        auto *row = out.ptr<std::uint8_t>(r);
        for (int c = 0; c < mask.width(); ++c) {
            row[c] = bits[static_cast<std::size_t>(r) * mask.width() + c] ? 255 : 0;
        }
    }
    return out;
}

BinaryMask mask_from_mat(const cv::Mat &mat) {
    cv::Mat gray;
    if (mat.channels() > 1) {
        cv::extractChannel(mat, gray, 0);
    } else {
        gray = mat;
    }
    BinaryMask out(gray.rows, gray.cols);
    auto bits = out.bits();
    for (int r = 0; r < gray.rows; ++r) {
        for (int c = 0; c < gray.cols; ++c) {
            const bool on = gray.depth() == CV_16U ? gray.at<std::uint16_t>(r, c) != 0
                                                   : gray.at<std::uint8_t>(r, c) != 0;
            bits[static_cast<std::size_t>(r) * gray.cols + c] = on ? 1 : 0;
        }
    }
    return out;
}

void write_or_throw(const std::filesystem::path &path, const cv::Mat &mat) {
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), mat);
    } catch (const cv::Exception &e) {
        throw IoError(fmt::format("cannot write {}: {}", path.string(), e.what()));
    }
    if (!ok) {
        throw IoError(fmt::format("cannot write {}", path.string()));
    }
}

std::vector<std::uint8_t> encode_or_throw(const cv::Mat &mat) {
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", mat, buf)) {
        throw IoError("png encoding failed");
    }
    return buf;
}

}  // namespace

GrayImage load_image(const std::filesystem::path &path) {
    const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
    if (mat.empty()) {
        throw IngestionError(fmt::format("cannot read image {}", path.string()));
    }
    return from_mat(mat);
}

BinaryMask load_mask(const std::filesystem::path &path) {
    const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty()) {
        throw IngestionError(fmt::format("cannot read mask {}", path.string()));
    }
    return mask_from_mat(mat);
}

void save_image(const std::filesystem::path &path, const GrayImage &image) {
    write_or_throw(path, to_mat_u8(image));
}

void save_mask(const std::filesystem::path &path, const BinaryMask &mask) {
    write_or_throw(path, mask_to_mat(mask));
}

GrayImage decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) {
        throw IngestionError("empty image payload");
    }
    const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1,
                      const_cast<std::uint8_t *>(bytes.data()));
    cv::Mat mat;
    try {
        mat = cv::imdecode(buf, cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
    } catch (const cv::Exception &) {
        mat.release();
    }
    if (mat.empty()) {
        throw IngestionError("image payload does not decode");
    }
    return from_mat(mat);
}

std::vector<std::uint8_t> encode_png(const GrayImage &image) {
    return encode_or_throw(to_mat_u8(image));
}

std::vector<std::uint8_t> encode_mask_png(const BinaryMask &mask) {
    return encode_or_throw(mask_to_mat(mask));
}

BinaryMask decode_mask(std::span<const std::uint8_t> bytes) {
    const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1,
                      const_cast<std::uint8_t *>(bytes.data()));
    const cv::Mat mat = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
    if (mat.empty()) {
        throw IngestionError("mask payload does not decode");
    }
    return mask_from_mat(mat);
}

GrayImage resize_image(const GrayImage &image, int height, int width) {
    if (image.height() == height && image.width() == width) {
        return image;
    }
    const cv::Mat src(image.height(), image.width(), CV_32FC1,
                      const_cast<float *>(image.pixels().data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    return from_mat(dst);
}

BinaryMask resize_mask(const BinaryMask &mask, int height, int width) {
    if (mask.height() == height && mask.width() == width) {
        return mask;
    }
    const cv::Mat src(mask.height(), mask.width(), CV_8UC1,
                      const_cast<std::uint8_t *>(mask.bits().data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_NEAREST_EXACT);
    return mask_from_mat(dst);
}

}  // namespace usground
