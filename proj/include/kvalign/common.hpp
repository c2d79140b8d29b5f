#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvalign {

// Error taxonomy. Every failure mode maps onto one of these so callers
// (and the CLI) can report a stable one-line diagnostic.
struct dim_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct vocab_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct compat_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct grammar_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); i++) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

inline std::string join_ws(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); i++) {
        if (i) out += " ";
        out += words[i];
    }
    return out;
}

// FNV-1a, used for parameter-stream naming and checkpoint content hashes.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; i++) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; i--) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace kvalign
