#pragma once

#include <cstddef>
#include <string>

namespace msinet {

// Shortest text that parses back to the identical value.
std::string format_number(double v);
std::string format_number(float v);

// Whole-token parses; throw ParseError(where, line, ...) on malformed input.
double parse_double(const std::string& tok, const std::string& where, std::size_t line);
float parse_float(const std::string& tok, const std::string& where, std::size_t line);

}  // namespace msinet
