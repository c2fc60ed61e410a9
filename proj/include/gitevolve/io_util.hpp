// Small text I/O helpers: tab splitting, exact float formatting, checksums.

#pragma once

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gitevolve/error.hpp"

namespace gitevolve::io {

inline std::vector<std::string_view> split(std::string_view line, char sep = '\t') {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    for (;;) {
        const std::size_t next = line.find(sep, pos);
        if (next == std::string_view::npos) {
            out.push_back(line.substr(pos));
            return out;
        }
        out.push_back(line.substr(pos, next - pos));
        pos = next + 1;
    }
}

inline std::string_view strip_cr(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
}

inline bool parse_int64(std::string_view s, std::int64_t& out) {
    if (s.empty()) return false;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && ptr == end;
}

/// Accepts decimal and hex-float notation.
inline bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    const std::string buf(s);
    char* end = nullptr;
    errno = 0;
    out = std::strtod(buf.c_str(), &end);
    return end == buf.c_str() + buf.size() && errno != ERANGE;
}

inline double parse_double_or_throw(std::string_view s, std::string_view what) {
    double v = 0.0;
    if (!parse_double(s, v)) throw DataError("cannot parse " + std::string(what) + ": '" + std::string(s) + "'");
    return v;
}

inline std::int64_t parse_int_or_throw(std::string_view s, std::string_view what) {
    std::int64_t v = 0;
    if (!parse_int64(s, v)) throw DataError("cannot parse " + std::string(what) + ": '" + std::string(s) + "'");
    return v;
}

/// Hex-float text; parses back bit-exactly with strtod.
inline std::string hexfloat(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

/// Shortest decimal that still round-trips (17 significant digits).
inline std::string exact_decimal(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Fixed-precision decimal for human-facing reports.
inline std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write failed: " + path);
}

inline std::string file_checksum(const std::string& path) { return hex64(fnv1a(read_file(path))); }

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    return in;
}

}  // namespace gitevolve::io
