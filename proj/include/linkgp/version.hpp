#pragma once

namespace linkgp {
inline constexpr const char* kVersion = "0.1.0";
}
