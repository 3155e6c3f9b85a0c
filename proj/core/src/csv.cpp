#include "detail/csv.hpp"

namespace cbd::detail {

std::vector<CsvRecord> parse_delimited(std::string_view data, char delim) {
  if (data.starts_with("\xEF\xBB\xBF")) data.remove_prefix(3);

  std::vector<CsvRecord> out;
  CsvRecord rec;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool any_content = false;

  auto end_field = [&] {
    rec.fields.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_record = [&] {
    end_field();
    if (any_content || rec.fields.size() > 1 || !rec.fields.front().empty()) {
      out.push_back(std::move(rec));
    }
    rec = CsvRecord{};
    any_content = false;
  };

  for (std::size_t i = 0; i < data.size(); ++i) {
    char c = data[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      if (field.empty() && !field_was_quoted) {
        in_quotes = true;
        field_was_quoted = true;
        any_content = true;
      } else {
        rec.malformed = true;
        field.push_back(c);
      }
    } else if (c == delim) {
      any_content = true;
      end_field();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < data.size() && data[i + 1] == '\n') ++i;
      end_record();
    } else {
      if (field_was_quoted) rec.malformed = true;
      field.push_back(c);
      any_content = true;
    }
  }
  if (in_quotes) rec.malformed = true;
  if (any_content || !field.empty() || !rec.fields.empty()) end_record();
  return out;
}

}  // namespace cbd::detail
