#pragma once

#include <stdexcept>
#include <string>

namespace hadnet {

/// Error categories map onto process exit codes in the CLI.
enum class ErrorCategory { Config = 2, Data = 3, Checkpoint = 4, Io = 5, Shape = 6 };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& what) : std::runtime_error(what), category_(cat) {}
    ErrorCategory category() const noexcept { return category_; }
    int exit_code() const noexcept { return static_cast<int>(category_); }

private:
    ErrorCategory category_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorCategory::Config, w) {}
};
struct DataError : Error {
    explicit DataError(const std::string& w) : Error(ErrorCategory::Data, w) {}
};
struct CheckpointError : Error {
    explicit CheckpointError(const std::string& w) : Error(ErrorCategory::Checkpoint, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorCategory::Io, w) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& w) : Error(ErrorCategory::Shape, w) {}
};

}  // namespace hadnet
