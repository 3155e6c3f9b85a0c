#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace cbd::detail {

struct CsvRecord {
  std::vector<std::string> fields;
  bool malformed = false;  // unterminated quote or stray quote
};

// RFC 4180 reader: quoted fields may contain delimiters, doubled quotes and
// newlines. A leading UTF-8 BOM is skipped. Empty physical lines are dropped.
std::vector<CsvRecord> parse_delimited(std::string_view data, char delim);

}  // namespace cbd::detail
