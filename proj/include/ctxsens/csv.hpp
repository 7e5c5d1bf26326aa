#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace ctxsens::csv {

// RFC 4180 field. `quoted` distinguishes `""` (empty string) from an empty
// unquoted field, which the corpus schema reads as null.
struct Field {
  std::string value;
  bool quoted = false;
};

struct Row {
  std::vector<Field> fields;
  std::size_t line = 0;  // 1-based line on which the record starts
};

// Parses a whole document. Accepts CRLF or LF record separators and quoted
// fields spanning lines. Throws ValidationError with a line number on
// malformed quoting.
std::vector<Row> parse(std::string_view text);

std::string quote(std::string_view value);

// Quotes only when the value contains a separator, quote or line break.
std::string escape_if_needed(std::string_view value);

}  // namespace ctxsens::csv
