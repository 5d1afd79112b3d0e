#include "usground/pipeline.hpp"

#include <chrono>

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground {

std::string to_string(SelectMode mode) { return mode == SelectMode::best ? "best" : "all"; }

SelectMode parse_mode(const std::string &text) {
    if (text == "best") return SelectMode::best;
    if (text == "all") return SelectMode::all;
    throw ConfigError(fmt::format("unknown mode '{}' (expected best or all)", text));
}

Pipeline::Pipeline(std::shared_ptr<const Detector> detector, std::shared_ptr<const MaskBackend> masker)
    : detector_(std::move(detector)), masker_(std::move(masker)) {
    if (!detector_ || !masker_) {
        throw BackendError("pipeline needs both a detector and a mask backend");
    }
}

PipelineResult Pipeline::run(const GrayImage &image, const std::string &prompt,
                             const PipelineOptions &options) const {
    return run(image, detector_->tokenize(prompt), options);
}

PipelineResult Pipeline::run(const GrayImage &image, const PromptTokens &prompt,
                             const PipelineOptions &options) const {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    if (image.empty()) {
        throw DimensionError("empty image");
    }
    const ImageSize canvas = detector_->canvas();
    const ImageSize size{image.height(), image.width()};
    PipelineResult r;
    DetectionOutput out = size == canvas ? detector_->detect(image, prompt)
                                         : detector_->detect(resize_image(image, canvas.height, canvas.width), prompt);
    r.boxes = select_boxes(out, prompt, size, options.threshold, options.top_k);
    r.best_score = best_score(out);
    const auto t1 = clock::now();

    r.mask = BinaryMask(size.height, size.width);
    r.detected = !r.boxes.empty();
    if (r.detected) {
        const std::size_t n = options.mode == SelectMode::best ? 1 : r.boxes.size();
        if (options.mode == SelectMode::best) r.boxes.resize(1);
        for (std::size_t i = 0; i < n; ++i) {
            MaskRequest req{&image, r.boxes[i], options.mask};
            r.mask = r.mask | masker_->segment_box(req);
        }
    }
    const auto t2 = clock::now();
    r.detect_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    r.segment_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    r.total_ms = std::chrono::duration<double, std::milli>(t2 - t0).count();
    return r;
}

PromptTokens NullDetector::tokenize(const std::string &text) const {
    PromptTokens t;
    t.text = text;
    for (auto &w : split_words(text)) {
        t.ids.push_back(1);
        t.words.push_back(std::move(w));
    }
    if (t.ids.empty()) throw PromptError("prompt is empty");
    return t;
}

DetectionOutput NullDetector::detect(const GrayImage &, const PromptTokens &prompt) const {
    DetectionOutput out;
    out.boxes.resize(1, 4);
    out.boxes << 0.5, 0.5, 0.5, 0.5;
    out.logits = Eigen::MatrixXd::Constant(1, static_cast<Eigen::Index>(prompt.ids.size()), 5.0);
    return out;
}

BinaryMask NullMaskBackend::segment_box(const MaskRequest &request) const {
    return BinaryMask(request.image->height(), request.image->width());
}

}  // namespace usground
