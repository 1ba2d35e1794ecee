#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace joel {

// Seconds since the Unix epoch, UTC.
using Timestamp = std::int64_t;

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Accepts "YYYY-MM-DDTHH:MM:SSZ", "YYYY-MM-DD HH:MM:SS", "YYYY-MM-DD" or an
// integer number of epoch seconds. Throws FormatError.
Timestamp parse_timestamp(std::string_view text);
std::string format_timestamp(Timestamp ts);

// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

std::vector<std::string> split(std::string_view text, char sep);
std::string join(const std::vector<std::string>& parts, char sep);

}  // namespace joel
