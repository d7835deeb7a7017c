#pragma once

namespace casecohort {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace casecohort
