#pragma once

#include "rainbow/config.hpp"
#include "rainbow/errors.hpp"

#include <string>
#include <vector>

namespace rainbow {

// CSV table with a named header row. Written atomically per table; every
// column name carries its unit where one applies (e.g. "wall_time_s").
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void add_row(std::vector<std::string> cells);
    void add_row(const std::vector<double>& cells);

    const std::vector<std::string>& columns() const { return columns_; }
    std::size_t rows() const { return rows_.size(); }
    const std::vector<std::string>& row(std::size_t i) const { return rows_[i]; }

    void save(const std::string& path) const;
    static CsvTable load(const std::string& path);

    /// Column index by name; throws ReportError.
    std::size_t column(const std::string& name) const;
    double value(std::size_t row, const std::string& col) const;

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
};

/// Experiment output bundle: CSV tables plus a manifest sufficient to re-run
/// bit-identically (config echo, library version, seeds, wall time, verdicts).
struct Report {
    std::string directory;
    KeyValueConfig manifest;

    void write_manifest() const;
    static KeyValueConfig read_manifest(const std::string& dir);
};

/// Formats a double with enough digits to round-trip (used by all CSV writers
/// so reruns are byte-identical).
std::string format_double(double v);

} // namespace rainbow
