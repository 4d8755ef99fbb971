#pragma once

// Flat key = value experiment configs and the CSV writer used by every
// experiment. A '#' starts a comment. Values are read on demand with typed
// getters; list values are separated by spaces or commas.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace ttm {

class Config {
public:
    Config() = default;

    static Config parse(std::istream& in) {
        Config c;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            if (c.values_.count(key)) throw ConfigError("config: duplicate key '" + key + "'");
            c.values_[key] = trim(line.substr(eq + 1));
        }
        return c;
    }

    static Config parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config '" + path + "'");
        return parse(in);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& def) const {
        used_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? def : it->second;
    }

    std::string require_string(const std::string& key) const {
        if (!has(key)) throw ConfigError("config: missing key '" + key + "'");
        return get_string(key, "");
    }

    double get_double(const std::string& key, double def) const {
        if (!has(key)) {
            used_.insert(key);
            return def;
        }
        return to_double(key, get_string(key, ""));
    }

    long long get_int(const std::string& key, long long def) const {
        if (!has(key)) {
            used_.insert(key);
            return def;
        }
        const std::string v = get_string(key, "");
        try {
            std::size_t used = 0;
            long long r = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
        }
    }

    bool get_bool(const std::string& key, bool def) const {
        if (!has(key)) {
            used_.insert(key);
            return def;
        }
        const std::string v = get_string(key, "");
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
    }

    std::vector<double> get_doubles(const std::string& key, std::vector<double> def) const {
        if (!has(key)) {
            used_.insert(key);
            return def;
        }
        std::vector<double> out;
        for (const auto& tok : split(get_string(key, ""))) out.push_back(to_double(key, tok));
        return out;
    }

    std::vector<int> get_ints(const std::string& key, std::vector<int> def) const {
        std::vector<double> d = get_doubles(key, std::vector<double>(def.begin(), def.end()));
        std::vector<int> out;
        for (double v : d) {
            if (v != static_cast<int>(v)) throw ConfigError("config: key '" + key + "' expects integers");
            out.push_back(static_cast<int>(v));
        }
        return out;
    }

    std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> def) const {
        if (!has(key)) {
            used_.insert(key);
            return def;
        }
        return split(get_string(key, ""));
    }

    /// Keys present in the file but never read.
    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    /// Canonical text: sorted key=value lines.
    std::string canonical() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
        return s;
    }

    /// FNV-1a 64-bit hash of the canonical text.
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    std::string hash_hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
        return buf;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split(std::string v) {
        std::replace(v.begin(), v.end(), ',', ' ');
        std::istringstream in(v);
        std::vector<std::string> out;
        std::string tok;
        while (in >> tok) out.push_back(tok);
        return out;
    }

    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            double r = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
        }
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form of a double; identical bytes for identical values.
inline std::string fmt_double(double v) {
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// CSV table with '#' metadata lines, a header row and rows of cells.
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void meta(const std::string& key, const std::string& value) { meta_.emplace_back(key, value); }

    class Row {
    public:
        Row& operator<<(const std::string& s) {
            cells_.push_back(s);
            return *this;
        }
        Row& operator<<(const char* s) { return *this << std::string(s); }
        Row& operator<<(double v) { return *this << fmt_double(v); }
        Row& operator<<(int v) { return *this << std::to_string(v); }
        Row& operator<<(long long v) { return *this << std::to_string(v); }
        Row& operator<<(std::size_t v) { return *this << std::to_string(v); }
        const std::vector<std::string>& cells() const { return cells_; }

    private:
        std::vector<std::string> cells_;
    };

    Row& row() {
        rows_.emplace_back();
        return rows_.back();
    }

    std::size_t size() const { return rows_.size(); }
    const std::vector<std::string>& columns() const { return columns_; }

    void write(std::ostream& os) const {
        for (const auto& [k, v] : meta_) os << "# " << k << "=" << v << "\n";
        for (std::size_t i = 0; i < columns_.size(); ++i) os << (i ? "," : "") << columns_[i];
        os << "\n";
        for (const auto& r : rows_) {
            if (r.cells().size() != columns_.size())
                throw ShapeError("CsvTable: row has " + std::to_string(r.cells().size()) + " cells, expected " +
                                 std::to_string(columns_.size()));
            for (std::size_t i = 0; i < r.cells().size(); ++i) os << (i ? "," : "") << r.cells()[i];
            os << "\n";
        }
    }

    std::string str() const {
        std::ostringstream os;
        write(os);
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open output '" + path + "'");
        write(os);
        if (!os) throw std::runtime_error("write failed for '" + path + "'");
    }

private:
    std::vector<std::string> columns_;
    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<Row> rows_;
};

} // namespace ttm
