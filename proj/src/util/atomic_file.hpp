#pragma once

#include <string>

namespace msinet {

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written file.
void write_file_atomic(const std::string& path, const std::string& contents);

// Whole file as bytes; throws ParseError when it cannot be opened.
std::string read_file(const std::string& path);

}  // namespace msinet
