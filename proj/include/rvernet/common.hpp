// Error types and small utilities shared across the library.
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rvernet {

// Usage / validation problems: bad config, malformed inputs, missing files.
// The CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or axis mismatch between tensors. Exit code 3 when it escapes.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failures at runtime (NaN loss, divergence). Exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void concat_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void concat_into(std::ostringstream& os, A&& a, Rest&&... rest) {
    os << std::forward<A>(a);
    concat_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string strcat_msg(Args&&... args) {
    std::ostringstream os;
    detail::concat_into(os, std::forward<Args>(args)...);
    return os.str();
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

}  // namespace rvernet

#define RV_CHECK_DIM(cond, ...) \
    do { if (!(cond)) throw ::rvernet::DimensionError(::rvernet::strcat_msg(__VA_ARGS__)); } while (0)
#define RV_CHECK_CFG(cond, ...) \
    do { if (!(cond)) throw ::rvernet::ConfigError(::rvernet::strcat_msg(__VA_ARGS__)); } while (0)
