// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Flat "key = value" text with '#' comments, used for scene specs and run configs.

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "fgs/errors.hpp"

namespace fgs {

class KeyValues {
public:
    static KeyValues parse(const std::string& text, const std::string& origin = "<text>") {
        KeyValues kv;
        std::istringstream is(text);
        std::string line;
        int number = 0;
        while (std::getline(is, line)) {
            ++number;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw InvalidArgument(origin + ":" + std::to_string(number) + ": expected key = value");
            }
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw InvalidArgument(origin + ":" + std::to_string(number) + ": empty key");
            kv.values_[key] = trim(line.substr(eq + 1));
        }
        return kv;
    }

    static KeyValues load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw InvalidArgument("cannot open " + path.string());
        std::stringstream ss;
        ss << is.rdbuf();
        return parse(ss.str(), path.string());
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    [[nodiscard]] bool contains(const std::string& key) const { return values_.contains(key); }
    [[nodiscard]] const std::map<std::string, std::string>& entries() const { return values_; }

    [[nodiscard]] std::string get(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    [[nodiscard]] double get(const std::string& key, double fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_number<double>(key, it->second);
    }

    [[nodiscard]] int get(const std::string& key, int fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_number<int>(key, it->second);
    }

    [[nodiscard]] std::uint64_t get(const std::string& key, std::uint64_t fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_number<std::uint64_t>(key, it->second);
    }

    [[nodiscard]] bool get(const std::string& key, bool fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw InvalidArgument("key '" + key + "': expected a boolean, got '" + v + "'");
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    template <typename T>
    static T parse_number(const std::string& key, const std::string& text) {
        T value{};
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
        if (ec != std::errc() || ptr != text.data() + text.size()) {
            throw InvalidArgument("key '" + key + "': cannot parse '" + text + "'");
        }
        return value;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace fgs
