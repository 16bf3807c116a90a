#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace qtm {

// Error classes map to CLI exit codes: ConfigError -> 2, everything else
// runtime -> 3. Verification failures are reported, not thrown.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <class A, class... Rest>
void cat_into(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    cat_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    detail::cat_into(os, args...);
    return os.str();
}

template <class Err = ContractError, class... Args>
void require(bool cond, const Args&... msg_parts) {
    if (!cond) throw Err(cat(msg_parts...));
}

}  // namespace qtm
