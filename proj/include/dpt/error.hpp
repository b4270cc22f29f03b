#pragma once

#include <stdexcept>
#include <string>

namespace dpt {

// Error categories surface as distinct exit codes in the CLI.
enum class ErrorKind {
    kInvalidArgument = 2,
    kDimension = 3,
    kNumeric = 4,
    kIo = 5,
    kConfig = 6,
    kMissingArtifact = 7,
    kConfigMismatch = 8,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }
    const char* category() const noexcept;

private:
    ErrorKind kind_;
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& w) : Error(ErrorKind::kInvalidArgument, w) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error(ErrorKind::kDimension, w) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& w) : Error(ErrorKind::kNumeric, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfig, w) {}
};
struct MissingArtifact : Error {
    explicit MissingArtifact(const std::string& w) : Error(ErrorKind::kMissingArtifact, w) {}
};
struct ConfigMismatch : Error {
    explicit ConfigMismatch(const std::string& w) : Error(ErrorKind::kConfigMismatch, w) {}
};

inline const char* Error::category() const noexcept {
    switch (kind_) {
        case ErrorKind::kInvalidArgument: return "invalid-argument";
        case ErrorKind::kDimension: return "dimension";
        case ErrorKind::kNumeric: return "numeric";
        case ErrorKind::kIo: return "io";
        case ErrorKind::kConfig: return "config";
        case ErrorKind::kMissingArtifact: return "missing-artifact";
        case ErrorKind::kConfigMismatch: return "config-mismatch";
    }
    return "unknown";
}

}  // namespace dpt
