#include "bolmo/kv.h"

#include "bolmo/errors.h"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace bolmo {

namespace {

std::string_view trim(std::string_view s) {
    const auto ws = " \t\r";
    const size_t b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

} // namespace

KvMap parse_kv(std::string_view text) {
    KvMap kv;
    size_t line_no = 0;
    while (!text.empty()) {
        const size_t nl = text.find('\n');
        std::string_view line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty() || line.front() == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key(trim(line.substr(0, eq)));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (!kv.emplace(key, std::string(trim(line.substr(eq + 1)))).second)
            throw ConfigError("config key repeated: " + key);
    }
    return kv;
}

KvMap read_kv_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_kv(ss.str());
}

std::string format_kv(const KvMap & kv) {
    std::string out;
    for (const auto & [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

void kv_parse(const std::string & key, const std::string & s, int64_t & out) {
    size_t used = 0;
    try {
        out = std::stoll(s, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw ConfigError("bad integer for " + key + ": " + s);
}

void kv_parse(const std::string & key, const std::string & s, uint64_t & out) {
    size_t used = 0;
    try {
        if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
        out = std::stoull(s, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw ConfigError("bad unsigned integer for " + key + ": " + s);
}

void kv_parse(const std::string & key, const std::string & s, double & out) {
    size_t used = 0;
    try {
        out = std::stod(s, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw ConfigError("bad number for " + key + ": " + s);
}

void kv_parse(const std::string & key, const std::string & s, bool & out) {
    if (s == "true" || s == "1") out = true;
    else if (s == "false" || s == "0") out = false;
    else throw ConfigError("bad boolean for " + key + ": " + s);
}

void kv_parse(const std::string &, const std::string & s, std::string & out) { out = s; }

std::string kv_format(int64_t v) { return std::to_string(v); }
std::string kv_format(uint64_t v) { return std::to_string(v); }
std::string kv_format(bool v) { return v ? "true" : "false"; }
std::string kv_format(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

} // namespace bolmo
