#pragma once

// Flat `key = value` configuration files. One assignment per line, `#` starts
// a comment, later assignments of the same key win.

#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <string>
#include <string_view>

#include "tlstm/error.hpp"

namespace tlstm {

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in) {
    KeyValues out;
    std::string line;
    std::size_t line_no = 0;
    auto trim = [](std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    };
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view v = line;
        if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
        v = trim(v);
        if (v.empty()) continue;
        const auto eq = v.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        const auto key = trim(v.substr(0, eq));
        const auto value = trim(v.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        out[std::string(key)] = std::string(value);
    }
    return out;
}

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto* end = text.data() + text.size();
    const auto [p, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc{} || p != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(v)) throw ConfigError("config key '" + key + "': value must be finite");
    return v;
}

} // namespace detail

/// Reads known keys out of a KeyValues map, rejecting leftovers in finish().
class ConfigReader {
public:
    explicit ConfigReader(KeyValues kv) : kv_(std::move(kv)) {}

    template <typename T>
    void read(const std::string& key, T& target) {
        const auto it = kv_.find(key);
        if (it == kv_.end()) return;
        if constexpr (std::is_same_v<T, std::string>) target = it->second;
        else if constexpr (std::is_same_v<T, bool>) {
            if (it->second == "true" || it->second == "1") target = true;
            else if (it->second == "false" || it->second == "0") target = false;
            else throw ConfigError("config key '" + key + "': expected true/false");
        } else target = detail::parse_number<T>(key, it->second);
        kv_.erase(it);
    }

    void finish() const {
        if (!kv_.empty()) throw ConfigError("unknown config key '" + kv_.begin()->first + "'");
    }

private:
    KeyValues kv_;
};

} // namespace tlstm
