#pragma once

namespace pvera {
inline constexpr const char* kVersion = "0.1.0";
}
