#pragma once

#include <stdexcept>
#include <string>

namespace kt {

// Exit-code contract: 0 success, 2 configuration, 3 I/O or format, 4 numeric.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
    static constexpr int exit_code = 2;
};

struct shape_error : config_error {
    explicit shape_error(const std::string& msg) : config_error(msg) {}
};

struct usage_error : config_error {
    explicit usage_error(const std::string& msg) : config_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
    static constexpr int exit_code = 3;
};

struct format_error : io_error {
    explicit format_error(const std::string& msg) : io_error(msg) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
    static constexpr int exit_code = 4;
};

}  // namespace kt
