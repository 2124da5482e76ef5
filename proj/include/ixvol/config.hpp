#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace ixvol {

// Key/value run configuration with [section] headers. Lines starting with
// '#' or ';' are comments. Values are scalars, strings or comma lists.
class IniConfig {
public:
    static IniConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
        IniConfig cfg;
        cfg.origin_ = origin;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed[0] == '#' || trimmed[0] == ';') continue;
            if (trimmed.front() == '[') {
                if (trimmed.back() != ']' || trimmed.size() < 3) {
                    throw config_error(origin + ":" + std::to_string(lineno) + ": malformed section header");
                }
                section = trim(trimmed.substr(1, trimmed.size() - 2));
                cfg.sections_[section];
                continue;
            }
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) {
                throw config_error(origin + ":" + std::to_string(lineno) + ": expected key = value");
            }
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) {
                throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            cfg.sections_[section][key] = value;
        }
        return cfg;
    }

    static IniConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("config file not found: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_string(buf.str(), path);
    }

    bool has(const std::string& section, const std::string& key) const {
        const auto sit = sections_.find(section);
        return sit != sections_.end() && sit->second.count(key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key) const {
        const auto sit = sections_.find(section);
        if (sit == sections_.end() || !sit->second.count(key)) {
            throw config_error(qualify(section, key) + ": missing required field");
        }
        return sit->second.at(key);
    }

    std::string get_string_or(const std::string& section, const std::string& key,
                              const std::string& fallback) const {
        return has(section, key) ? get_string(section, key) : fallback;
    }

    double get_double(const std::string& section, const std::string& key) const {
        return to_double(get_string(section, key), section, key);
    }

    double get_double_or(const std::string& section, const std::string& key, double fallback) const {
        return has(section, key) ? get_double(section, key) : fallback;
    }

    std::int64_t get_int(const std::string& section, const std::string& key) const {
        const std::string raw = get_string(section, key);
        try {
            std::size_t pos = 0;
            const std::int64_t v = std::stoll(raw, &pos);
            if (pos != raw.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error(qualify(section, key) + ": '" + raw + "' is not an integer");
        }
    }

    std::int64_t get_int_or(const std::string& section, const std::string& key,
                            std::int64_t fallback) const {
        return has(section, key) ? get_int(section, key) : fallback;
    }

    std::uint64_t get_u64(const std::string& section, const std::string& key) const {
        const std::string raw = get_string(section, key);
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(raw, &pos);
            if (pos != raw.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error(qualify(section, key) + ": '" + raw + "' is not an unsigned integer");
        }
    }

    bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        const std::string raw = get_string(section, key);
        if (raw == "true" || raw == "1" || raw == "yes") return true;
        if (raw == "false" || raw == "0" || raw == "no") return false;
        throw config_error(qualify(section, key) + ": '" + raw + "' is not a boolean");
    }

    std::vector<double> get_list(const std::string& section, const std::string& key) const {
        const std::string raw = get_string(section, key);
        std::vector<double> out;
        std::string cur;
        std::istringstream in(raw);
        while (std::getline(in, cur, ',')) {
            out.push_back(to_double(trim(cur), section, key));
        }
        if (out.empty()) throw config_error(qualify(section, key) + ": empty list");
        return out;
    }

    std::vector<std::int64_t> get_int_list(const std::string& section, const std::string& key) const {
        const auto doubles = get_list(section, key);
        std::vector<std::int64_t> out;
        for (double d : doubles) {
            const auto v = static_cast<std::int64_t>(d);
            if (static_cast<double>(v) != d) {
                throw config_error(qualify(section, key) + ": expected integers");
            }
            out.push_back(v);
        }
        return out;
    }

    const std::string& origin() const { return origin_; }

private:
    static std::string trim(const std::string& s) {
        const auto from = s.find_first_not_of(" \t\r\n");
        if (from == std::string::npos) return "";
        const auto to = s.find_last_not_of(" \t\r\n");
        return s.substr(from, to - from + 1);
    }

    static std::string qualify(const std::string& section, const std::string& key) {
        return "[" + section + "] " + key;
    }

    static double to_double(const std::string& raw, const std::string& section,
                            const std::string& key) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(raw, &pos);
            if (pos != raw.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error(qualify(section, key) + ": '" + raw + "' is not a number");
        }
    }

    std::string origin_;
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

} // namespace ixvol
