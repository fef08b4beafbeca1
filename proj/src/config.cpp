#include "rainbow/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace rainbow {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
}

KeyValueConfig KeyValueConfig::parse_string(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw FormatError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw FormatError(origin + ":" + std::to_string(lineno) + ": empty section name");
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        cfg.values_[key] = value;
    }
    return cfg;
}

const std::string& KeyValueConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: missing key '" + key + "'");
    return it->second;
}

std::string KeyValueConfig::get_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t pos = 0;
        std::int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
    }
}

std::int64_t KeyValueConfig::get_int_or(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
    }
}

double KeyValueConfig::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<std::int64_t> KeyValueConfig::get_int_list(const std::string& key) const {
    const std::string& v = get(key);
    std::vector<std::int64_t> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' has a non-integer item: '" + item + "'");
        }
    }
    return out;
}

std::vector<std::int64_t> KeyValueConfig::get_int_list_or(const std::string& key,
                                                          std::vector<std::int64_t> fallback) const {
    return has(key) ? get_int_list(key) : fallback;
}

std::vector<double> KeyValueConfig::get_double_list(const std::string& key) const {
    const std::string& v = get(key);
    std::vector<double> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' has a non-numeric item: '" + item + "'");
        }
    }
    return out;
}

void KeyValueConfig::set_double(const std::string& key, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    values_[key] = buf;
}

std::string KeyValueConfig::canonical() const {
    // Unsectioned keys first, then sections in sorted order (std::map keeps
    // keys sorted, which groups section prefixes).
    std::ostringstream out;
    for (const auto& [key, value] : values_) {
        if (key.find('.') == std::string::npos) out << key << " = " << value << "\n";
    }
    std::string section;
    for (const auto& [key, value] : values_) {
        std::size_t dot = key.find('.');
        if (dot == std::string::npos) continue;
        std::string sec = key.substr(0, dot);
        if (sec != section) {
            section = sec;
            out << "[" << section << "]\n";
        }
        out << key.substr(dot + 1) << " = " << value << "\n";
    }
    return out.str();
}

std::string KeyValueConfig::content_hash(const std::string& salt) const {
    const std::string text = canonical() + salt;
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void KeyValueConfig::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("config: cannot write " + path);
    out << canonical();
}

} // namespace rainbow
