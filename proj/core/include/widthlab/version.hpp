#pragma once

namespace widthlab {

inline constexpr const char* kToolVersion = "0.1.0";

// Binary container versions. Bump on any layout change.
inline constexpr unsigned kCheckpointVersion = 1;  // "WLCK"
inline constexpr unsigned kTokenFileVersion = 1;   // "WLTK"

}  // namespace widthlab
