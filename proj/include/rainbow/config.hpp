#pragma once

#include "rainbow/errors.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace rainbow {

// Structured-text configuration: `key = value` lines grouped under
// `[section]` headers, `#` comments. Keys are flattened to "section.key".
// The same format serves as the manifest format, so configs round-trip
// into reports unchanged.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse_file(const std::string& path);
    static KeyValueConfig parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;

    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;

    double get_double(const std::string& key) const;
    double get_double_or(const std::string& key, double fallback) const;

    bool get_bool_or(const std::string& key, bool fallback) const;

    /// Comma-separated integer list.
    std::vector<std::int64_t> get_int_list(const std::string& key) const;
    std::vector<std::int64_t> get_int_list_or(const std::string& key,
                                              std::vector<std::int64_t> fallback) const;
    std::vector<double> get_double_list(const std::string& key) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set_int(const std::string& key, std::int64_t v) { values_[key] = std::to_string(v); }
    void set_double(const std::string& key, double v);

    /// Canonical serialization: sections sorted, keys sorted within sections.
    /// Used for config echoes and content hashing.
    std::string canonical() const;

    /// FNV-1a hash of the canonical form, as 16 hex digits.
    std::string content_hash(const std::string& salt = "") const;

    void save(const std::string& path) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace rainbow
