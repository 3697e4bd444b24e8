#pragma once

namespace contrastsurv {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace contrastsurv
