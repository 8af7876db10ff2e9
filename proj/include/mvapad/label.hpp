#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace mvapad {

/// Class index order used by every classifier head: bonafide = 0, attack = 1.
enum class Label : int { bonafide = 0, attack = 1 };

inline constexpr int class_index(Label label) { return static_cast<int>(label); }

inline std::string to_string(Label label) { return label == Label::attack ? "attack" : "bonafide"; }

inline std::optional<Label> parse_label(std::string_view text) {
  if (text == "bonafide") return Label::bonafide;
  if (text == "attack") return Label::attack;
  return std::nullopt;
}

}  // namespace mvapad
