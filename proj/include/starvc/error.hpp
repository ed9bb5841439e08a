#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace starvc {

// Error categories double as CLI exit codes.
enum class ErrorKind {
    usage = 1,
    data = 2,
    numeric = 3,
    format = 4,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string code, const std::string& message)
        : std::runtime_error(message), kind_(kind), code_(std::move(code)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& code() const noexcept { return code_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
    std::string code_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& m) : Error(ErrorKind::data, "E_DIM", m) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& m) : Error(ErrorKind::data, "E_INDEX", m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::usage, "E_CONFIG", m) {}
};
struct InputError : Error {
    explicit InputError(const std::string& m) : Error(ErrorKind::data, "E_INPUT", m) {}
};
struct DataError : Error {
    explicit DataError(const std::string& m) : Error(ErrorKind::data, "E_DATA", m) {}
};
struct StateError : Error {
    explicit StateError(const std::string& m) : Error(ErrorKind::data, "E_STATE", m) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error(ErrorKind::usage, "E_CONTRACT", m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, "E_NUMERIC", m) {}
};
struct DegenerateBatchError : Error {
    explicit DegenerateBatchError(const std::string& m) : Error(ErrorKind::data, "E_DEGENERATE", m) {}
};
struct DeterminismError : Error {
    explicit DeterminismError(const std::string& m) : Error(ErrorKind::numeric, "E_NONDETERMINISTIC", m) {}
};
struct GridFormatError : Error {
    explicit GridFormatError(const std::string& m) : Error(ErrorKind::format, "E_GRID", m) {}
};
struct CapacityError : Error {
    explicit CapacityError(const std::string& m) : Error(ErrorKind::data, "E_CAPACITY", m) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error(ErrorKind::format, "E_FORMAT", m) {}
};
struct TrainingError : Error {
    explicit TrainingError(const std::string& m) : Error(ErrorKind::numeric, "E_DIVERGED", m) {}
};
struct CalibrationError : Error {
    explicit CalibrationError(const std::string& m) : Error(ErrorKind::data, "E_CALIBRATION", m) {}
};
struct MetricError : Error {
    explicit MetricError(const std::string& m) : Error(ErrorKind::data, "E_METRIC", m) {}
};
struct ArtifactMissingError : Error {
    explicit ArtifactMissingError(const std::string& m) : Error(ErrorKind::data, "E_MISSING_ARTIFACT", m) {}
};

}  // namespace starvc
