#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kan {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Base error for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension / shape disagreements between operands.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Out-of-range indices (labels, class ids, flat offsets).
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
};

// Caller violated a documented precondition.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (checkpoints, IDX payloads, images).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Missing or unreadable/unwritable paths.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Bad run configuration (unknown keys, unparsable values).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

inline Index shape_numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

template <typename... Args>
std::string format_msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

template <typename E = Error, typename... Args>
void require(bool cond, Args&&... args) {
    if (!cond) throw E(format_msg(std::forward<Args>(args)...));
}

}  // namespace kan
