#pragma once

#include <stdexcept>
#include <string>

namespace widecorrect {

// Precondition violations on in-memory arguments (bad shapes, out-of-range
// parameters, invalid configs).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Anything read from disk that is missing, truncated or malformed.
class DataError : public std::runtime_error {
public:
    DataError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(path) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

}  // namespace widecorrect
