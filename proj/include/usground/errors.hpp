#pragma once

#include <stdexcept>
#include <string>

namespace usground {

// Base of every error raised by the library. kind() is a short stable token
// used in CLI diagnostics and service error bodies.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string &detail)
        : std::runtime_error(detail), kind_(std::move(kind)) {}

    const std::string &kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define USGROUND_DEFINE_ERROR(Name, token)                                   \
    class Name : public Error {                                              \
    public:                                                                  \
        explicit Name(const std::string &detail) : Error(token, detail) {}  \
    }

USGROUND_DEFINE_ERROR(DimensionError, "dimension");
USGROUND_DEFINE_ERROR(DomainError, "domain");
USGROUND_DEFINE_ERROR(EmptyAnnotationError, "empty_annotation");
USGROUND_DEFINE_ERROR(IngestionError, "ingestion");
USGROUND_DEFINE_ERROR(RecordError, "record");
USGROUND_DEFINE_ERROR(StateError, "state");
USGROUND_DEFINE_ERROR(ConfigError, "config");
USGROUND_DEFINE_ERROR(PlanError, "plan");
USGROUND_DEFINE_ERROR(PromptError, "prompt");
USGROUND_DEFINE_ERROR(BackendError, "backend");
USGROUND_DEFINE_ERROR(CapacityError, "capacity");
USGROUND_DEFINE_ERROR(NumericError, "numeric");
USGROUND_DEFINE_ERROR(EvaluationError, "evaluation");
USGROUND_DEFINE_ERROR(DivergenceError, "divergence");
USGROUND_DEFINE_ERROR(IoError, "io");
USGROUND_DEFINE_ERROR(CheckpointError, "checkpoint");

#undef USGROUND_DEFINE_ERROR

}  // namespace usground
