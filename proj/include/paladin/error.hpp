#pragma once

#include <stdexcept>
#include <string>

namespace paladin {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind { config = 2, data = 3, training = 4, io = 5 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct TrainError : Error {
    explicit TrainError(const std::string& what) : Error(ErrorKind::training, what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

struct ContextOverflowError : DataError {
    explicit ContextOverflowError(const std::string& what) : DataError(what) {}
};

struct CheckpointError : IoError {
    explicit CheckpointError(const std::string& what) : IoError(what) {}
};

struct CheckpointVersionError : CheckpointError {
    explicit CheckpointVersionError(const std::string& what) : CheckpointError(what) {}
};

struct CheckpointTruncatedError : CheckpointError {
    explicit CheckpointTruncatedError(const std::string& what) : CheckpointError(what) {}
};

struct ShapeMismatchError : CheckpointError {
    explicit ShapeMismatchError(const std::string& what) : CheckpointError(what) {}
};

} // namespace paladin
