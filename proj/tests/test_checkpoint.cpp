#include <doctest.h>

#include "bolmo/checkpoint.h"
#include "bolmo/errors.h"
#include "bolmo/kv.h"
#include "bolmo/training.h"
#include "fixtures.h"
#include "test_util.h"

#include <cstring>
#include <limits>

using namespace bolmo;
using bolmo::testing::jitter;
using bolmo::testing::read_file;
using bolmo::testing::TempDir;
using bolmo::testing::tiny_config;

namespace {

Checkpoint sample_checkpoint(uint64_t seed) {
    Checkpoint ck;
    ck.config = tiny_config();
    ck.config.causal_boundary = true;
    ck.config.mlstm.input_gate_bias_init = -0.1 / 3.0;
    ck.params = jitter(init_bolmo(ck.config, seed), seed + 1);
    ck.params.set("global.extra", Tensor({2, 1, 3}, std::vector<double>{1e-300, -0.0, 3.5, 1e300, -7.25, 0.1}));
    ck.meta = {{"kind", "bolmo"}, {"note", "a b c"}};
    ck.vocab = train_bpe({utf8_to_bytes("ab ab abc"), utf8_to_bytes("caf\xc3\xa9")}, 262);
    return ck;
}

} // namespace

TEST_CASE("kv text") {
    const KvMap kv = parse_kv("# comment\n a.b = 1 \n\nc=x y\r\n");
    CHECK(kv.at("a.b") == "1");
    CHECK(kv.at("c") == "x y");
    CHECK(parse_kv(format_kv(kv)) == kv);
    CHECK_THROWS_AS(parse_kv("novalue\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv("a=1\na=2\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv("=1\n"), ConfigError);
    double d = 0;
    for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17}) {
        kv_parse("k", kv_format(v), d);
        CHECK(d == v);
    }
    int64_t i = 0;
    CHECK_THROWS_AS(kv_parse("k", "1.5", i), ConfigError);
    uint64_t u = 0;
    CHECK_THROWS_AS(kv_parse("k", "-1", u), ConfigError);
    bool b = false;
    CHECK_THROWS_AS(kv_parse("k", "yes", b), ConfigError);
}

TEST_CASE("config kv round trips") {
    ModelConfig c = tiny_config();
    c.boundary_threshold = 0.3;
    CHECK(config_from_kv(config_to_kv(c)) == c);
    CHECK_THROWS_AS(config_from_kv({{"model.nope", "1"}}), ConfigError);

    TrainConfig t;
    t.steps = 17;
    t.lr = 1.0 / 7.0;
    t.weights.boundary = 2.5;
    t.optim.grad_clip = 0.25;
    const TrainConfig back = train_config_from_kv(train_config_to_kv(t));
    CHECK(back.steps == 17);
    CHECK(back.lr == t.lr);
    CHECK(back.weights.boundary == 2.5);
    CHECK(back.optim.grad_clip == 0.25);
    CHECK_THROWS_AS(train_config_from_kv({{"train.nope", "1"}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_kv({{"train.tau", "0"}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_kv({{"train.lambda_ce", "-1"}}), ConfigError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    for (uint64_t seed : {1, 2, 3}) {
        const Checkpoint ck = sample_checkpoint(seed);
        const std::string bytes = serialize_checkpoint(ck);
        const Checkpoint back = deserialize_checkpoint(bytes);
        CHECK(back.config == ck.config);
        CHECK(back.meta == ck.meta);
        REQUIRE(back.vocab.has_value());
        CHECK(*back.vocab == *ck.vocab);
        REQUIRE(back.params.size() == ck.params.size());
        for (const auto & [name, t] : ck.params) CHECK(bit_equal(back.params.get(name), t));
        CHECK(std::signbit(back.params.get("global.extra")[1]));
        CHECK(serialize_checkpoint(back) == bytes);
    }
    Checkpoint bare;
    bare.params.set("x", Tensor::scalar(2.0));
    const Checkpoint b = deserialize_checkpoint(serialize_checkpoint(bare));
    CHECK(!b.vocab.has_value());
    CHECK(b.params.get("x").item() == 2.0);
}

TEST_CASE("checkpoint errors") {
    const std::string bytes = serialize_checkpoint(sample_checkpoint(4));
    // every payload byte is covered by the checksum
    for (size_t pos : {size_t{20}, bytes.size() / 2, bytes.size() - 9, bytes.size() - 1}) {
        std::string bad = bytes;
        bad[pos] = static_cast<char>(bad[pos] ^ 0x40);
        CHECK_THROWS_AS(deserialize_checkpoint(bad), ChecksumError);
    }
    std::string v2 = bytes;
    const uint32_t two = 2;
    std::memcpy(v2.data() + 8, &two, 4);
    CHECK_THROWS_AS(deserialize_checkpoint(v2), VersionError);
    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(magic), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 10)), FormatError);

    TempDir dir("ckpt");
    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.ckpt")), NotFoundError);
    save_checkpoint(dir.file("a.ckpt"), sample_checkpoint(5));
    CHECK(read_file(dir.file("a.ckpt")) == serialize_checkpoint(sample_checkpoint(5)));
    CHECK(load_checkpoint(dir.file("a.ckpt")).params == sample_checkpoint(5).params);
}

TEST_CASE("fnv1a reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}
