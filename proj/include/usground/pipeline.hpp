#pragma once

#include <memory>
#include <string>
#include <vector>

#include "usground/detector.hpp"
#include "usground/mask_backend.hpp"

namespace usground {

enum class SelectMode { best, all };
std::string to_string(SelectMode mode);
SelectMode parse_mode(const std::string &text);

struct PipelineOptions {
    double threshold = 0.30;
    int top_k = 3;
    SelectMode mode = SelectMode::best;
    MaskOptions mask;
};

struct PipelineResult {
    std::vector<BoundingBox> boxes;  // kept boxes, pixel coords of the input image
    BinaryMask mask;                 // input image size; empty when nothing was kept
    double best_score = 0.0;         // highest query score, kept or not
    bool detected = false;
    double detect_ms = 0.0;
    double segment_ms = 0.0;
    double total_ms = 0.0;
};

// prompt -> boxes -> mask. Images of any size are resized to the detector
// canvas for detection; boxes and masks refer to the original image.
class Pipeline {
public:
    Pipeline(std::shared_ptr<const Detector> detector, std::shared_ptr<const MaskBackend> masker);

    PipelineResult run(const GrayImage &image, const std::string &prompt,
                       const PipelineOptions &options = {}) const;
    PipelineResult run(const GrayImage &image, const PromptTokens &prompt,
                       const PipelineOptions &options = {}) const;

    const Detector &detector() const { return *detector_; }
    const MaskBackend &masker() const { return *masker_; }

private:
    std::shared_ptr<const Detector> detector_;
    std::shared_ptr<const MaskBackend> masker_;
};

// Zero-work backends for measuring harness overhead: the detector emits one
// fixed centered box, the masker returns an empty mask.
class NullDetector final : public Detector {
public:
    explicit NullDetector(ImageSize canvas = {128, 128}) : canvas_(canvas) {}
    std::string name() const override { return "null"; }
    ImageSize canvas() const override { return canvas_; }
    PromptTokens tokenize(const std::string &text) const override;
    DetectionOutput detect(const GrayImage &image, const PromptTokens &prompt) const override;

private:
    ImageSize canvas_;
};

class NullMaskBackend final : public MaskBackend {
public:
    std::string name() const override { return "null"; }
    BinaryMask segment_box(const MaskRequest &request) const override;
};

}  // namespace usground
