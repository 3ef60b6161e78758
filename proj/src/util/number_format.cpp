#include "util/number_format.hpp"

#include <charconv>
#include <system_error>

#include "msinet/error.hpp"

namespace msinet {

namespace {

template <typename F>
std::string format_impl(F v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw InternalError("number formatting failed");
  return std::string(buf, p);
}

template <typename F>
F parse_impl(const std::string& tok, const std::string& where, std::size_t line) {
  F v{};
  const char* end = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(tok.data(), end, v);
  if (tok.empty() || ec != std::errc() || p != end) throw ParseError(where, line, "bad number '" + tok + "'");
  return v;
}

}  // namespace

std::string format_number(double v) { return format_impl(v); }
std::string format_number(float v) { return format_impl(v); }

double parse_double(const std::string& tok, const std::string& where, std::size_t line) {
  return parse_impl<double>(tok, where, line);
}

float parse_float(const std::string& tok, const std::string& where, std::size_t line) {
  return parse_impl<float>(tok, where, line);
}

}  // namespace msinet
