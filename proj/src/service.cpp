#include "usground/service.hpp"

#include <chrono>
#include <cstdlib>
#include <mutex>

#include <fmt/format.h>
#include <httplib.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "usground/errors.hpp"

namespace usground {

std::string base64_encode(const std::vector<std::uint8_t> &bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char *>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string &text) {
    if (text.size() % 4 != 0) {
        throw DomainError("base64 length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char *>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw DomainError("invalid base64");
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

int port_from_env(int fallback) {
    if (const char *p = std::getenv("USGROUND_PORT")) {
        try {
            const int v = std::stoi(p);
            if (v > 0 && v < 65536) return v;
        } catch (const std::exception &) {
        }
        throw ConfigError(fmt::format("USGROUND_PORT='{}' is not a valid port", p));
    }
    return fallback;
}

HttpResult error_result(int status, const std::string &error, const std::string &detail,
                        const nlohmann::json &extra) {
    nlohmann::json j{{"error", error}, {"detail", detail}};
    if (extra.is_object()) {
        for (const auto &[k, v] : extra.items()) j[k] = v;
    }
    return {status, j.dump()};
}

SegmentService::SegmentService(ServiceConfig config) : config_(std::move(config)) {}

SegmentService::~SegmentService() { stop(); }

void SegmentService::load(std::shared_ptr<const Pipeline> pipeline, std::string checkpoint_id) {
    std::unique_lock lock(gate_);
    pipeline_ = std::move(pipeline);
    checkpoint_id_ = std::move(checkpoint_id);
}

void SegmentService::unload() {
    std::unique_lock lock(gate_);
    pipeline_.reset();
    checkpoint_id_.clear();
}

bool SegmentService::loaded() const {
    std::shared_lock lock(gate_);
    return pipeline_ != nullptr;
}

HttpResult SegmentService::health() const {
    std::shared_lock lock(gate_);
    nlohmann::json backends = nlohmann::json::array();
    if (pipeline_) {
        backends.push_back(pipeline_->detector().name());
        backends.push_back(pipeline_->masker().name());
    }
    return {200, nlohmann::json{{"status", "ok"}, {"backends", backends}}.dump()};
}

HttpResult SegmentService::segment(const SegmentRequest &req) const {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    std::shared_lock lock(gate_);
    if (!pipeline_) {
        return error_result(503, "backend_unavailable", "no model is loaded");
    }
    if (!req.prompt || req.prompt->find_first_not_of(" \t\r\n") == std::string::npos) {
        return error_result(400, "prompt", "prompt is empty");
    }
    PipelineOptions opts = config_.defaults;
    if (req.threshold && !req.threshold->empty()) {
        try {
            std::size_t used = 0;
            opts.threshold = std::stod(*req.threshold, &used);
            if (used != req.threshold->size()) throw std::invalid_argument("trailing");
        } catch (const std::exception &) {
            return error_result(400, "threshold", fmt::format("threshold '{}' is not a number", *req.threshold));
        }
        if (!(opts.threshold > 0.0 && opts.threshold <= 1.0)) {
            return error_result(400, "threshold", "threshold must lie in (0, 1]");
        }
    }
    if (req.mode && !req.mode->empty()) {
        try {
            opts.mode = parse_mode(*req.mode);
        } catch (const Error &e) {
            return error_result(400, "mode", e.what());
        }
    }
    GrayImage image;
    try {
        image = decode_image(std::span(reinterpret_cast<const std::uint8_t *>(req.image.data()), req.image.size()));
    } catch (const Error &e) {
        return error_result(400, "image", e.what());
    }
    PipelineResult r;
    try {
        r = pipeline_->run(image, *req.prompt, opts);
    } catch (const PromptError &e) {
        return error_result(400, "prompt", e.what());
    } catch (const Error &e) {
        return error_result(500, e.kind(), e.what());
    }
    if (!r.detected) {
        return error_result(422, "no_detection",
                            fmt::format("no box scored at least {:.2f}", opts.threshold),
                            {{"best_score", r.best_score}});
    }
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto &b : r.boxes) {
        boxes.push_back({{"x_min", b.x_min},
                         {"y_min", b.y_min},
                         {"x_max", b.x_max},
                         {"y_max", b.y_max},
                         {"score", b.score.value_or(0.0)},
                         {"phrase", b.phrase.value_or("")}});
    }
    nlohmann::json j;
    j["boxes"] = boxes;
    j["mask"] = base64_encode(encode_mask_png(r.mask));
    j["width"] = r.mask.width();
    j["height"] = r.mask.height();
    j["mode"] = to_string(opts.mode);
    j["threshold"] = opts.threshold;
    j["model_info"] = {{"detector", pipeline_->detector().name()},
                       {"mask_backend", pipeline_->masker().name()},
                       {"checkpoint", checkpoint_id_}};
    const double total = std::chrono::duration<double, std::milli>(clock::now() - start).count();
    if (config_.report_timing) {
        j["timing_ms"] = {{"detect", r.detect_ms}, {"segment", r.segment_ms}, {"total", std::max(total, r.detect_ms + r.segment_ms)}};
    } else {
        j["timing_ms"] = {{"detect", 0.0}, {"segment", 0.0}, {"total", 0.0}};
    }
    return {200, j.dump()};
}

void SegmentService::mount(httplib::Server &server) {
    server.Get("/api/health", [this](const httplib::Request &, httplib::Response &res) {
        const HttpResult r = health();
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
    server.Post("/api/segment", [this](const httplib::Request &req, httplib::Response &res) {
        SegmentRequest sr;
        if (req.has_file("image")) sr.image = req.get_file_value("image").content;
        if (req.has_file("prompt")) sr.prompt = req.get_file_value("prompt").content;
        if (req.has_file("threshold")) sr.threshold = req.get_file_value("threshold").content;
        if (req.has_file("mode")) sr.mode = req.get_file_value("mode").content;
        HttpResult r;
        if (!req.is_multipart_form_data()) {
            r = error_result(400, "request", "expected multipart/form-data");
        } else if (sr.image.empty()) {
            r = error_result(400, "image", "missing image field");
        } else {
            r = segment(sr);
        }
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
    server.set_exception_handler([](const httplib::Request &, httplib::Response &res, std::exception_ptr ep) {
        std::string detail = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception &e) {
            detail = e.what();
        } catch (...) {
        }
        const HttpResult r = error_result(500, "internal", detail);
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
    server.set_error_handler([](const httplib::Request &, httplib::Response &res) {
        if (!res.body.empty()) return;
        const HttpResult r = error_result(res.status, "http", fmt::format("status {}", res.status));
        res.set_content(r.body, "application/json");
    });
}

void SegmentService::serve() {
    server_ = std::make_unique<httplib::Server>();
    server_->set_payload_max_length(64u << 20);
    mount(*server_);
    int port = 0;
    if (config_.port == 0) {
        port = server_->bind_to_any_port(config_.host);
    } else if (server_->bind_to_port(config_.host, config_.port)) {
        port = config_.port;
    }
    if (port <= 0) {
        throw IoError(fmt::format("cannot bind {}:{}", config_.host, config_.port));
    }
    bound_port_ = port;
    spdlog::info("serving on {}:{}", config_.host, port);
    server_->listen_after_bind();
}

void SegmentService::stop() {
    if (server_) server_->stop();
}

}  // namespace usground
