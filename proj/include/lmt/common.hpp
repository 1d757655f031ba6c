#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape &s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape &s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << "]";
    return os.str();
}

// Error taxonomy shared across modules. CLI maps these to exit codes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string &m) : std::runtime_error("shape error: " + m) {}
};
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string &m) : std::runtime_error("index error: " + m) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string &m) : std::runtime_error("contract error: " + m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string &m) : std::runtime_error("numeric error: " + m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string &m) : std::runtime_error("config error: " + m) {}
};
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string &m) : std::runtime_error("checkpoint error: " + m) {}
};

}  // namespace lmt
