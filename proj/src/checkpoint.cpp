#include "bolmo/checkpoint.h"

#include "bolmo/errors.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace bolmo {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'B', 'O', 'L', 'M', 'O', 'C', 'K', 'P'};
constexpr uint8_t kDtypeF64 = 1;

template <class T>
void put(std::string & out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_blob(std::string & out, std::string_view s) {
    put<uint64_t>(out, s.size());
    out.append(s);
}

struct Reader {
    std::string_view data;
    size_t at = 0;

    void need(size_t n) const {
        if (n > data.size() - at) throw FormatError("checkpoint truncated at byte " + std::to_string(at));
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data.data() + at, sizeof(T));
        at += sizeof(T);
        return v;
    }
    std::string_view bytes(size_t n) {
        need(n);
        auto s = data.substr(at, n);
        at += n;
        return s;
    }
    std::string_view blob() { return bytes(static_cast<size_t>(get<uint64_t>())); }
};

} // namespace

uint64_t fnv1a64(std::string_view data) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string serialize_checkpoint(const Checkpoint & ck) {
    KvMap header = config_to_kv(ck.config);
    for (const auto & [k, v] : ck.meta) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw InputError("checkpoint: metadata may not contain '=' in keys or newlines: " + k);
        header["meta." + k] = v;
    }
    std::string out(kMagic, sizeof(kMagic));
    put<uint32_t>(out, kCheckpointVersion);
    put_blob(out, format_kv(header));
    put_blob(out, ck.vocab ? ck.vocab->serialize() : std::string());
    put<uint64_t>(out, ck.params.size());
    for (const auto & [name, t] : ck.params) {
        put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        put<uint8_t>(out, kDtypeF64);
        put<uint32_t>(out, static_cast<uint32_t>(t.rank()));
        for (int64_t d : t.shape()) put<uint64_t>(out, static_cast<uint64_t>(d));
        out.append(reinterpret_cast<const char *>(t.data()), static_cast<size_t>(t.numel()) * sizeof(double));
    }
    put<uint64_t>(out, fnv1a64(out));
    return out;
}

Checkpoint deserialize_checkpoint(std::string_view data) {
    Reader r{data};
    if (r.bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic)))
        throw FormatError("not a checkpoint (bad magic)");
    const uint32_t version = r.get<uint32_t>();
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    if (data.size() < sizeof(kMagic) + 4 + 8) throw FormatError("checkpoint truncated");
    const size_t body = data.size() - 8;
    uint64_t stored;
    std::memcpy(&stored, data.data() + body, 8);
    if (fnv1a64(data.substr(0, body)) != stored) throw ChecksumError("checkpoint checksum mismatch");
    r.data = data.substr(0, body);

    Checkpoint ck;
    const KvMap header = parse_kv(r.blob());
    KvMap model;
    for (const auto & [k, v] : header) {
        if (starts_with(k, "meta.")) ck.meta[k.substr(5)] = v;
        else model[k] = v;
    }
    ck.config = config_from_kv(model);
    const std::string_view vocab = r.blob();
    if (!vocab.empty()) ck.vocab = SubwordVocab::deserialize(vocab);
    const uint64_t count = r.get<uint64_t>();
    for (uint64_t i = 0; i < count; ++i) {
        const std::string name(r.bytes(r.get<uint32_t>()));
        if (r.get<uint8_t>() != kDtypeF64) throw FormatError("checkpoint: unsupported dtype for " + name);
        const uint32_t rank = r.get<uint32_t>();
        if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
        Shape shape;
        for (uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int64_t>(r.get<uint64_t>()));
        const int64_t n = shape_numel(shape);
        if (n < 0 || static_cast<uint64_t>(n) > (r.data.size() - r.at) / sizeof(double))
            throw FormatError("checkpoint truncated in " + name);
        std::vector<double> values(static_cast<size_t>(n));
        std::memcpy(values.data(), r.bytes(values.size() * sizeof(double)).data(), values.size() * sizeof(double));
        if (ck.params.contains(name)) throw FormatError("checkpoint: duplicate tensor " + name);
        ck.params.set(name, Tensor(std::move(shape), std::move(values)));
    }
    if (r.at != r.data.size()) throw FormatError("checkpoint: trailing bytes");
    return ck;
}

void save_checkpoint(const std::string & path, const Checkpoint & ck) {
    const std::string data = serialize_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint: " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw InputError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

} // namespace bolmo
