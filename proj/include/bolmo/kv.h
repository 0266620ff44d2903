#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace bolmo {

using KvMap = std::map<std::string, std::string>;

// Flat "key = value" lines; blank lines and lines starting with '#' are
// skipped. Throws ConfigError on a malformed line or a repeated key.
KvMap parse_kv(std::string_view text);
// Throws InputError when the file cannot be read.
KvMap read_kv_file(const std::string & path);
std::string format_kv(const KvMap & kv);

void kv_parse(const std::string & key, const std::string & s, int64_t & out);
void kv_parse(const std::string & key, const std::string & s, uint64_t & out);
void kv_parse(const std::string & key, const std::string & s, double & out);
void kv_parse(const std::string & key, const std::string & s, bool & out);
void kv_parse(const std::string & key, const std::string & s, std::string & out);

std::string kv_format(int64_t v);
std::string kv_format(uint64_t v);
std::string kv_format(double v); // round-trips exactly
std::string kv_format(bool v);
inline std::string kv_format(const std::string & v) { return v; }

} // namespace bolmo
