#pragma once

#include <stdexcept>
#include <string>

namespace nlmf {

// Bad or missing user-supplied data (files, profiles, image metadata).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// A numerical procedure failed (estimation without enough support, NaN gradients).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace nlmf
