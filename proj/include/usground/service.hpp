#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usground/pipeline.hpp"

namespace httplib {
class Server;
}

namespace usground {

std::string base64_encode(const std::vector<std::uint8_t> &bytes);
std::vector<std::uint8_t> base64_decode(const std::string &text);

struct ServiceConfig {
    std::string host = "0.0.0.0";
    int port = 8750;
    PipelineOptions defaults;
    // When false every timing field is reported as 0, making responses for
    // identical requests byte-identical.
    bool report_timing = true;
};

// Port from the USGROUND_PORT environment variable, else `fallback`.
int port_from_env(int fallback = 8750);

struct HttpResult {
    int status = 200;
    std::string body;  // JSON
};

// Request handling independent of the transport. The loaded pipeline can
// be swapped while serving; a swap waits for in-flight requests.
class SegmentService {
public:
    explicit SegmentService(ServiceConfig config = {});
    ~SegmentService();

    void load(std::shared_ptr<const Pipeline> pipeline, std::string checkpoint_id = {});
    void unload();
    bool loaded() const;

    struct SegmentRequest {
        std::string image;  // encoded image bytes
        std::optional<std::string> prompt;
        std::optional<std::string> threshold;
        std::optional<std::string> mode;
    };
    HttpResult segment(const SegmentRequest &request) const;
    HttpResult health() const;

    // Registers GET /api/health and POST /api/segment.
    void mount(httplib::Server &server);
    // Blocks until stop(). Throws IoError when the port cannot be bound.
    void serve();
    void stop();
    // 0 until the listening socket is bound.
    int bound_port() const { return bound_port_.load(); }

    const ServiceConfig &config() const { return config_; }

private:
    ServiceConfig config_;
    mutable std::shared_mutex gate_;
    std::shared_ptr<const Pipeline> pipeline_;
    std::string checkpoint_id_;
    std::unique_ptr<httplib::Server> server_;
    std::atomic<int> bound_port_{0};
};

HttpResult error_result(int status, const std::string &error, const std::string &detail,
                        const nlohmann::json &extra = {});

}  // namespace usground
