#include <doctest.h>

#include "bolmo/checkpoint.h"
#include "bolmo/cli.h"
#include "bolmo/data.h"
#include "bolmo/errors.h"
#include "bolmo/training.h"
#include "test_util.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace bolmo;
using bolmo::testing::read_file;
using bolmo::testing::TempDir;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "bolmo");
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

const char * kSmallConfig = R"(model.d = 16
model.decoder_layers = 1
model.mlstm.heads = 2
model.mlstm.qk_dim = 4
model.mlstm.v_dim = 4
model.global.layers = 1
model.global.heads = 2
model.global.head_dim = 8
model.global.ffn_hidden = 32
model.n_probe = 1
data.vocab_size = 280
train.batch_bytes = 256
train.max_bytes = 96
)";

// A small teacher + corpus shared by the tests in this file.
struct Workspace {
    TempDir dir{"cli"};
    std::string cfg, corpus, teacher;
    Workspace() {
        cfg = dir.write("small.cfg", kSmallConfig);
        corpus = dir.file("c.jsonl");
        teacher = dir.file("t.ckpt");
        REQUIRE(run_cli({"gen-corpus", "--docs", "60", "--out", corpus, "--seed", "3"}).code == 0);
        const Result r = run_cli({"train-teacher", "--corpus", corpus, "--out", teacher, "--steps", "5",
                                  "--config", cfg});
        REQUIRE_MESSAGE(r.code == 0, r.err);
    }
};

Workspace & workspace() {
    static Workspace ws;
    return ws;
}

} // namespace

TEST_CASE("cli: exit codes") {
    Workspace & ws = workspace();
    CHECK(run_cli({}).code == cli::kUsage);
    CHECK(run_cli({"nope"}).code == cli::kUsage);
    CHECK(run_cli({"eval-bpb", "--model", ws.teacher, "--corpus", ws.corpus, "--bogus"}).code == cli::kUsage);
    CHECK(run_cli({"eval-bpb", "--model", ws.dir.file("missing.ckpt"), "--corpus", ws.corpus}).code ==
          cli::kMissingCheckpoint);
    const std::string bad = ws.dir.write("bad.cfg", "model.d = -3\n");
    CHECK(run_cli({"gen-corpus", "--out", ws.dir.file("x.jsonl"), "--config", bad}).code == cli::kInvalidConfig);
    const std::string unknown = ws.dir.write("unknown.cfg", "other.key = 1\n");
    CHECK(run_cli({"gen-corpus", "--out", ws.dir.file("x.jsonl"), "--config", unknown}).code == cli::kInvalidConfig);
    CHECK(run_cli({"gen-corpus", "--out", ws.dir.file("x.jsonl"), "--config", ws.dir.file("none.cfg")}).code ==
          cli::kInvalidConfig);
    // a teacher checkpoint is not a byte-level model
    const Result wrong = run_cli({"eval-bpb", "--model", ws.teacher, "--corpus", ws.corpus});
    CHECK(wrong.code == cli::kFailure);
    CHECK(wrong.err.find("not a bolmo checkpoint") != std::string::npos);
    CHECK(run_cli({"stage1", "--teacher", ws.teacher, "--corpus", ws.dir.file("none.txt"), "--out",
                   ws.dir.file("o.ckpt")})
              .code == cli::kFailure);
    CHECK(run_cli({"--help"}).code == cli::kOk);
}

TEST_CASE("cli: stage1 with zero steps saves the byteified init") {
    Workspace & ws = workspace();
    const std::string out = ws.dir.file("s0.ckpt");
    REQUIRE(run_cli({"stage1", "--teacher", ws.teacher, "--corpus", ws.corpus, "--out", out, "--steps", "0",
                     "--seed", "5"})
                .code == 0);
    const Checkpoint teacher = load_checkpoint(ws.teacher);
    const Checkpoint ck = load_checkpoint(out);
    CHECK(ck.params == byteify(teacher.params, teacher.config, 5));
    CHECK(ck.config == teacher.config);
    CHECK(*ck.vocab == *teacher.vocab);

    // untrained model sits near the uniform ceiling of 9 bits per byte
    const Result r = run_cli({"eval-bpb", "--model", out, "--corpus", ws.corpus});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(std::abs(j["bits_per_byte"].get<double>() - 9.0) < 0.2);

    // the reported number is the training module's CE over the same split
    const Corpus corpus = load_corpus({ws.corpus}, 0.1, 0);
    const auto docs = encode_corpus(corpus.heldout, *ck.vocab, TrainConfig{}.max_bytes);
    CHECK(j["bits_per_byte"].get<double>() == evaluate(ck.params, docs, ck.config).bits_per_byte);
}

TEST_CASE("cli: stage1 metrics are reproducible under a seed") {
    Workspace & ws = workspace();
    auto run_once = [&](const std::string & tag, const std::string & seed) {
        const std::string m = ws.dir.file("m" + tag + ".jsonl");
        const Result r = run_cli({"stage1", "--teacher", ws.teacher, "--corpus", ws.corpus, "--out",
                                  ws.dir.file("s" + tag + ".ckpt"), "--steps", "4", "--seed", seed, "--metrics", m,
                                  "--config", ws.cfg});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        return read_file(m);
    };
    const std::string a = run_once("a", "7"), b = run_once("b", "7"), c = run_once("c", "8");
    CHECK(!a.empty());
    CHECK(a == b);
    CHECK(a != c);
    CHECK(read_file(ws.dir.file("sa.ckpt")) == read_file(ws.dir.file("sb.ckpt")));
    std::istringstream lines(a);
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j["step"].get<int>() == n++);
        for (const char * k : {"total", "l_boundary", "l_encoder", "l_distill", "l_ce", "boundary_accuracy",
                               "compression", "lr_local", "lr_global"})
            CHECK(j.contains(k));
    }
    CHECK(n == 4);
}

TEST_CASE("cli: stage2, generate, merge, spectrum, boundary-dump") {
    Workspace & ws = workspace();
    const std::string s1 = ws.dir.file("g1.ckpt"), s2 = ws.dir.file("g2.ckpt");
    REQUIRE(run_cli({"stage1", "--teacher", ws.teacher, "--corpus", ws.corpus, "--out", s1, "--steps", "2",
                     "--config", ws.cfg})
                .code == 0);
    const Result st2 = run_cli({"stage2", "--model", s1, "--corpus", ws.corpus, "--out", s2, "--steps", "2",
                                "--merge-strategy", "bpe", "--target-compression", "8", "--config", ws.cfg});
    REQUIRE_MESSAGE(st2.code == 0, st2.err);
    CHECK(load_checkpoint(s2).meta.at("merge_strategy") == "bpe");
    CHECK(run_cli({"stage2", "--model", s1, "--corpus", ws.corpus, "--out", s2, "--steps", "1",
                   "--merge-strategy", "xent", "--target-compression", "8"})
              .code == cli::kInvalidConfig);
    CHECK(run_cli({"stage2", "--model", s1, "--corpus", ws.corpus, "--out", ws.dir.file("g3.ckpt"), "--steps", "1",
                   "--merge-strategy", "xent", "--target-compression", "8", "--teacher", ws.teacher})
              .code == 0);

    const std::string o1 = ws.dir.file("g1.bin"), o2 = ws.dir.file("g2.bin");
    for (const auto & o : {o1, o2})
        REQUIRE(run_cli({"generate", "--model", s2, "--prompt", "the ", "--max-bytes", "24", "--temperature", "0",
                         "--out", o})
                    .code == 0);
    CHECK(read_file(o1) == read_file(o2));
    CHECK(read_file(o1).size() <= 24);
    const Result to_stdout = run_cli({"generate", "--model", s2, "--max-bytes", "5", "--temperature", "0"});
    CHECK(to_stdout.code == 0);
    CHECK(to_stdout.out.size() <= 5);

    const std::string merged = ws.dir.file("merged.ckpt");
    const Result m = run_cli({"merge", "--model", s1, "--base", ws.teacher, "--posttrained", ws.teacher, "--out", merged});
    REQUIRE(m.code == 0);
    CHECK(load_checkpoint(merged).params == load_checkpoint(s1).params);

    const Result sp = run_cli({"spectrum", "--model", ws.teacher});
    CHECK(sp.code == 0);
    CHECK(sp.out.rfind("index\tsigma\tratio\tcumulative\n", 0) == 0);
    CHECK(run_cli({"spectrum", "--model", ws.teacher, "--tensor", "nope"}).code == cli::kFailure);

    const Result bd = run_cli({"boundary-dump", "--model", s1, "--corpus", ws.corpus, "--limit", "2"});
    REQUIRE(bd.code == 0);
    std::istringstream lines(bd.out);
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        const std::string text = j["text"].get<std::string>(), mask = j["mask"].get<std::string>();
        CHECK(mask.size() == text.size());
        CHECK(static_cast<size_t>(std::count(mask.begin(), mask.end(), '1')) == j["predicted"].size());
        CHECK(mask.back() == '1');
        if (std::all_of(text.begin(), text.end(), [](char ch) { return static_cast<unsigned char>(ch) < 0x80; })) {
            for (const char * key : {"predicted", "subword"}) {
                std::string joined;
                for (const auto & piece : j[key]) joined += piece.get<std::string>();
                CHECK(joined == text);
            }
        }
        ++n;
    }
    CHECK(n == 2);
}

TEST_CASE("cli: run config") {
    cli::RunConfig rc;
    rc.vocab_size = 300;
    rc.sampler.top_p = 0.9;
    rc.merge_strategy = "entropy";
    rc.train.steps = 12;
    rc.model.d = 64;
    const cli::RunConfig back = cli::run_config_from_kv(cli::run_config_to_kv(rc));
    CHECK(back.vocab_size == 300);
    CHECK(back.sampler.top_p == 0.9);
    CHECK(back.merge_strategy == "entropy");
    CHECK(back.train.steps == 12);
    CHECK(back.model == rc.model);
    CHECK_THROWS_AS(cli::run_config_from_kv({{"merge.strategy", "bogus"}}), ConfigError);
    CHECK_THROWS_AS(cli::run_config_from_kv({{"sample.top_p", "0"}}), ConfigError);
    CHECK_THROWS_AS(cli::run_config_from_kv({{"data.nope", "1"}}), ConfigError);
}
