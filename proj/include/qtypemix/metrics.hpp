#pragma once

#include <charconv>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qtypemix/common.hpp"

namespace qtm {

// shortest round-trip decimal form; deterministic across runs
inline std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// Append-only CSV, flushed after every row so any prefix parses.
class CsvWriter {
  public:
    CsvWriter() = default;
    CsvWriter(const std::string& path, const std::vector<std::string>& columns)
        : columns_(columns) {
        out_.open(path, std::ios::trunc);
        require<IoError>(out_.good(), "cannot open csv for writing: ", path);
        for (std::size_t i = 0; i < columns.size(); ++i)
            out_ << (i ? "," : "") << columns[i];
        out_ << "\n";
        out_.flush();
    }

    void row(const std::vector<double>& values) {
        require<IoError>(values.size() == columns_.size(), "csv row has ", values.size(),
                         " fields, header has ", columns_.size());
        for (std::size_t i = 0; i < values.size(); ++i)
            out_ << (i ? "," : "") << format_number(values[i]);
        out_ << "\n";
        out_.flush();
    }

  private:
    std::vector<std::string> columns_;
    std::ofstream out_;
};

// Append-only JSON-lines event log.
class JsonlWriter {
  public:
    JsonlWriter() = default;
    explicit JsonlWriter(const std::string& path) {
        out_.open(path, std::ios::trunc);
        require<IoError>(out_.good(), "cannot open jsonl for writing: ", path);
    }

    void event(const std::string& kind, nlohmann::json fields) {
        fields["event"] = kind;
        out_ << fields.dump() << "\n";
        out_.flush();
    }

  private:
    std::ofstream out_;
};

}  // namespace qtm
