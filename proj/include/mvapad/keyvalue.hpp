#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mvapad {

/// Flat `key = value` text: one pair per line, `#` starts a comment line,
/// blank lines ignored, surrounding whitespace trimmed.
struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

std::vector<KeyValue> parse_key_values(const std::string& text, const std::string& source = "<text>");

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

// Strict scalar parsers; throw FormatError naming `what`.
std::size_t parse_size(std::string_view text, const std::string& what);
std::uint64_t parse_u64(std::string_view text, const std::string& what);
double parse_double(std::string_view text, const std::string& what);
std::vector<std::size_t> parse_size_list(std::string_view text, const std::string& what);

/// Shortest text that parses back to the same double.
std::string format_double(double value);

std::string read_text_file(const std::string& path);

}  // namespace mvapad
