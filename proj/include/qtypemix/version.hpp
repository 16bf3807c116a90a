#pragma once

namespace qtm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace qtm
