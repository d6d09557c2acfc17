#pragma once

#include <cctype>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace anonopt {

inline std::string to_lower(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Byte offsets of whitespace runs, treating the common Unicode space
// characters (NBSP, en/em spaces, line/paragraph separators, ideographic
// space) as separators in addition to ASCII whitespace. Returns the number
// of bytes consumed if position i starts whitespace, else 0.
inline size_t whitespace_run_at(const std::string& s, size_t i) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    if (std::isspace(c)) return 1;
    if (c == 0xC2 && i + 1 < s.size() && static_cast<unsigned char>(s[i + 1]) == 0xA0)
        return 2; // U+00A0
    if (c == 0xE2 && i + 2 < s.size()) {
        const unsigned char b1 = static_cast<unsigned char>(s[i + 1]);
        const unsigned char b2 = static_cast<unsigned char>(s[i + 2]);
        if (b1 == 0x80 && ((b2 >= 0x80 && b2 <= 0x8A) || b2 == 0xA8 || b2 == 0xA9 || b2 == 0xAF))
            return 3; // U+2000..U+200A, U+2028, U+2029, U+202F
        if (b1 == 0x81 && b2 == 0x9F) return 3; // U+205F
    }
    if (c == 0xE3 && i + 2 < s.size() &&
        static_cast<unsigned char>(s[i + 1]) == 0x80 &&
        static_cast<unsigned char>(s[i + 2]) == 0x80)
        return 3; // U+3000
    return 0;
}

inline std::vector<std::string> split_whitespace(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (size_t i = 0; i < s.size();) {
        const size_t run = whitespace_run_at(s, i);
        if (run > 0) {
            if (!cur.empty()) { out.push_back(cur); cur.clear(); }
            i += run;
        } else {
            cur.push_back(s[i]);
            ++i;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::string strip_edge_punct(const std::string& tok) {
    size_t b = 0, e = tok.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
    return tok.substr(b, e - b);
}

// Metric tokenization: case-fold, split on whitespace, strip edge punctuation.
inline std::vector<std::string> tokenize(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& raw : split_whitespace(s)) {
        std::string t = strip_edge_punct(to_lower(raw));
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

// Case-fold and collapse whitespace runs to single spaces.
inline std::string normalize_whitespace(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (size_t i = 0; i < s.size();) {
        const size_t run = whitespace_run_at(s, i);
        if (run > 0) {
            pending_space = !out.empty();
            i += run;
        } else {
            if (pending_space) { out.push_back(' '); pending_space = false; }
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i]))));
            ++i;
        }
    }
    return out;
}

// Person-name normalization for the re-identification comparison: case-fold,
// drop honorifics, strip punctuation, collapse whitespace.
inline std::string normalize_name(const std::string& name) {
    static const std::set<std::string> honorifics = {
        "mr", "mrs", "ms", "miss", "dr", "prof", "sir", "dame", "lord", "lady"};
    std::string joined;
    for (const auto& raw : split_whitespace(name)) {
        std::string t = strip_edge_punct(to_lower(raw));
        if (t.empty() || honorifics.count(t)) continue;
        if (!joined.empty()) joined.push_back(' ');
        joined += t;
    }
    return joined;
}

inline bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

// Replaces each "{key}" with vars.at(key); unknown placeholders are kept.
inline std::string render_template(const std::string& tpl,
                                   const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tpl.size());
    for (size_t i = 0; i < tpl.size();) {
        if (tpl[i] == '{') {
            const size_t close = tpl.find('}', i);
            if (close != std::string::npos) {
                const std::string key = tpl.substr(i + 1, close - i - 1);
                auto it = vars.find(key);
                if (it != vars.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tpl[i]);
        ++i;
    }
    return out;
}

inline std::string format_double(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return std::string(buf);
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

} // namespace anonopt
