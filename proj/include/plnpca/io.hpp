#ifndef PLNPCA_IO_HPP
#define PLNPCA_IO_HPP

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

/**
 * @file io.hpp
 * @brief Delimited text tables: comma or tab separated, RFC 4180 quoting.
 */

namespace plnpca {

/**
 * A parsed delimited file. `header` is the first record, `rows` the others.
 */
struct TextTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    char delimiter = ',';
};

namespace internal {

/// Tab if the first line has more unquoted tabs than unquoted commas, else comma.
inline char detect_delimiter(std::string_view text) {
    std::size_t tabs = 0, commas = 0;
    bool quoted = false;
    for (char c : text) {
        if (c == '"') {
            quoted = !quoted;
        } else if (!quoted && (c == '\n' || c == '\r')) {
            break;
        } else if (!quoted && c == '\t') {
            ++tabs;
        } else if (!quoted && c == ',') {
            ++commas;
        }
    }
    return tabs > commas ? '\t' : ',';
}

inline std::vector<std::vector<std::string>> parse_records(std::string_view text, char delim,
                                                           const std::string& source) {
    std::vector<std::vector<std::string>> out;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false;
    bool was_quoted = false;
    bool any = false;
    std::size_t line = 1;

    auto end_field = [&] {
        record.push_back(std::move(field));
        field.clear();
        was_quoted = false;
    };
    auto end_record = [&] {
        end_field();
        bool blank = record.size() == 1 && record[0].empty();
        if (!blank) {
            out.push_back(std::move(record));
        }
        record.clear();
        any = false;
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') {
                    ++line;
                }
                field.push_back(c);
            }
            continue;
        }
        if (c == '"') {
            if (!field.empty() || was_quoted) {
                throw IoError(source + ":" + std::to_string(line) + ": quote inside an unquoted field");
            }
            quoted = true;
            was_quoted = true;
            any = true;
        } else if (c == delim) {
            end_field();
            any = true;
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
                ++i;
            }
            end_record();
            ++line;
        } else {
            if (was_quoted) {
                throw IoError(source + ":" + std::to_string(line) + ": text after a closing quote");
            }
            field.push_back(c);
            any = true;
        }
    }
    if (quoted) {
        throw IoError(source + ": unterminated quoted field");
    }
    if (any || !field.empty()) {
        end_record();
    }
    return out;
}

} // namespace internal

/**
 * Parse delimited text; a UTF-8 byte order mark is skipped. Every record must
 * have as many fields as the header.
 */
inline TextTable parse_table(std::string_view text, const std::string& source = "<memory>") {
    if (text.substr(0, 3) == "\xEF\xBB\xBF") {
        text.remove_prefix(3);
    }
    TextTable out;
    out.delimiter = internal::detect_delimiter(text);
    auto records = internal::parse_records(text, out.delimiter, source);
    if (records.empty()) {
        throw IoError(source + ": empty table");
    }
    out.header = std::move(records.front());
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != out.header.size()) {
            throw IoError(source + ": record " + std::to_string(r + 1) + " has " + std::to_string(records[r].size()) +
                          " fields, header has " + std::to_string(out.header.size()));
        }
        out.rows.push_back(std::move(records[r]));
    }
    return out;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

inline TextTable read_table(const std::filesystem::path& path) { return parse_table(read_text(path), path.string()); }

/// 17 significant digits, enough for an exact round trip.
inline std::string format_number(double value) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

/// Parse a whole field as a double; false when the field is not a number.
inline bool parse_number(std::string_view text, double& value) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) {
        text.remove_prefix(1);
    }
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t')) {
        text.remove_suffix(1);
    }
    if (!text.empty() && text.front() == '+') {
        text.remove_prefix(1);
    }
    if (text.empty()) {
        return false;
    }
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    return ec == std::errc() && ptr == text.data() + text.size();
}

inline std::string quote_field(const std::string& field) {
    if (field.find_first_of(",\"\r\n\t") == std::string::npos) {
        return field;
    }
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') {
            out.push_back('"');
        }
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

inline std::string format_csv(const std::vector<std::string>& header,
                              const std::vector<std::vector<std::string>>& rows) {
    std::string text;
    auto append = [&](const std::vector<std::string>& record) {
        for (std::size_t k = 0; k < record.size(); ++k) {
            if (k > 0) {
                text.push_back(',');
            }
            text += quote_field(record[k]);
        }
        text.push_back('\n');
    };
    append(header);
    for (const auto& row : rows) {
        append(row);
    }
    return text;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    write_text(path, format_csv(header, rows));
}

/**
 * Matrix with a leading name column. `row_label` heads the name column.
 * Entries flagged zero in `mask` (if given) are written as `NA`.
 */
inline void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& values,
                             const std::string& row_label, const std::vector<std::string>& row_names,
                             const std::vector<std::string>& col_names, const Eigen::MatrixXd* mask = nullptr) {
    if (row_names.size() != static_cast<std::size_t>(values.rows()) ||
        col_names.size() != static_cast<std::size_t>(values.cols())) {
        throw DimensionError("names do not match the matrix written to " + path.string());
    }
    std::vector<std::string> header{row_label};
    header.insert(header.end(), col_names.begin(), col_names.end());
    std::vector<std::vector<std::string>> rows;
    rows.reserve(row_names.size());
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        std::vector<std::string> row{row_names[static_cast<std::size_t>(i)]};
        for (Eigen::Index j = 0; j < values.cols(); ++j) {
            bool missing = mask && (*mask)(i, j) == 0;
            row.push_back(missing ? "NA" : format_number(values(i, j)));
        }
        rows.push_back(std::move(row));
    }
    write_csv(path, header, rows);
}

/**
 * Numeric body of a table with a leading name column.
 * Fields that are empty or `NA` become NaN.
 */
inline Eigen::MatrixXd table_values(const TextTable& table, const std::string& source) {
    const auto n = static_cast<Eigen::Index>(table.rows.size());
    const auto p = static_cast<Eigen::Index>(table.header.size()) - 1;
    if (p < 0) {
        throw IoError(source + ": no columns");
    }
    Eigen::MatrixXd out(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) {
            const std::string& field = table.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j + 1)];
            if (field.empty() || field == "NA") {
                out(i, j) = std::numeric_limits<double>::quiet_NaN();
            } else if (!parse_number(field, out(i, j))) {
                throw IoError(source + ": row " + std::to_string(i + 2) + ", column '" +
                              table.header[static_cast<std::size_t>(j + 1)] + "': '" + field + "' is not a number");
            }
        }
    }
    return out;
}

} // namespace plnpca

#endif
