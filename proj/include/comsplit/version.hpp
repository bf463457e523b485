#pragma once

namespace comsplit {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace comsplit
