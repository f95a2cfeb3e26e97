#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace manipshield {

// Judgment cues annotators record for a manipulated region. The first six
// are high-level (semantic) cues, the last six low-level (visual) ones.
inline constexpr std::size_t kNumCues = 12;
inline constexpr std::array<std::string_view, kNumCues> kCueNames = {
    "shape",   "structure", "relation", "text",   "pose",   "expression",
    "texture", "blur",      "noise",    "light",  "detail", "color"};

inline constexpr bool is_high_level_cue(std::size_t index) { return index < 6; }

inline std::optional<std::size_t> cue_index(std::string_view name) {
  for (std::size_t i = 0; i < kCueNames.size(); ++i) {
    if (kCueNames[i] == name) return i;
  }
  return std::nullopt;
}

}  // namespace manipshield
