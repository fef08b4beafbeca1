#include "rainbow/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace rainbow {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void CsvTable::add_row(std::vector<std::string> cells) {
    if (cells.size() != columns_.size())
        throw ReportError("csv: row has " + std::to_string(cells.size()) + " cells, expected " +
                          std::to_string(columns_.size()));
    rows_.push_back(std::move(cells));
}

void CsvTable::add_row(const std::vector<double>& cells) {
    std::vector<std::string> s;
    s.reserve(cells.size());
    for (double v : cells) s.push_back(format_double(v));
    add_row(std::move(s));
}

void CsvTable::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ReportError("csv: cannot write " + path);
    for (std::size_t j = 0; j < columns_.size(); ++j)
        out << (j ? "," : "") << columns_[j];
    out << "\n";
    for (const auto& row : rows_) {
        for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
        out << "\n";
    }
}

CsvTable CsvTable::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ReportError("csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ReportError("csv: " + path + " is empty");
    auto split = [](const std::string& s) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ss(s);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!s.empty() && s.back() == ',') cells.push_back("");
        return cells;
    };
    if (!line.empty() && line.back() == '\r') line.pop_back();
    CsvTable table(split(line));
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split(line);
        if (cells.size() != table.columns_.size())
            throw ReportError("csv: " + path + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(table.columns_.size()) + " columns, got " +
                              std::to_string(cells.size()));
        table.rows_.push_back(std::move(cells));
    }
    return table;
}

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t j = 0; j < columns_.size(); ++j)
        if (columns_[j] == name) return j;
    throw ReportError("csv: no column named '" + name + "'");
}

double CsvTable::value(std::size_t row, const std::string& col) const {
    const std::string& cell = rows_.at(row).at(column(col));
    try {
        return std::stod(cell);
    } catch (const std::exception&) {
        throw ReportError("csv: cell '" + cell + "' in column '" + col + "' is not numeric");
    }
}

void Report::write_manifest() const {
    std::filesystem::create_directories(directory);
    manifest.save(directory + "/manifest.txt");
}

KeyValueConfig Report::read_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.txt";
    if (!std::filesystem::exists(path))
        throw ReportError("report: missing manifest in " + dir);
    return KeyValueConfig::parse_file(path);
}

} // namespace rainbow
