#include "bolmo/cli.h"

#include "bolmo/checkpoint.h"
#include "bolmo/data.h"
#include "bolmo/errors.h"
#include "bolmo/merge_tools.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>

namespace bolmo::cli {

namespace {

template <class C, class F>
void visit_run_fields(C & rc, F && f) {
    f("data.vocab_size", rc.vocab_size);
    f("data.heldout_fraction", rc.heldout_fraction);
    f("sample.temperature", rc.sampler.temperature);
    f("sample.top_p", rc.sampler.top_p);
    f("sample.patch_cap", rc.patch_cap);
    f("merge.strategy", rc.merge_strategy);
    f("merge.target_compression", rc.target_compression);
}

const char * const kSections[] = {"model.", "train.", "data.", "sample.", "merge."};

} // namespace

KvMap run_config_to_kv(const RunConfig & rc) {
    KvMap kv = config_to_kv(rc.model);
    for (const auto & [k, v] : train_config_to_kv(rc.train)) kv[k] = v;
    RunConfig copy = rc;
    visit_run_fields(copy, [&](const char * k, auto & v) { kv[k] = kv_format(v); });
    return kv;
}

RunConfig run_config_from_kv(const KvMap & kv, RunConfig base) {
    for (const auto & [k, v] : kv) {
        bool ok = false;
        for (const char * s : kSections) ok |= starts_with(k, s);
        if (!ok) throw ConfigError("unknown config key: " + k);
    }
    base.model = config_from_kv(kv, base.model);
    base.model.validate();
    base.train = train_config_from_kv(kv, base.train);
    std::map<std::string, bool> known;
    visit_run_fields(base, [&](const char * k, auto & v) {
        known[k] = true;
        auto it = kv.find(k);
        if (it != kv.end()) kv_parse(k, it->second, v);
    });
    for (const auto & [k, v] : kv)
        if ((starts_with(k, "data.") || starts_with(k, "sample.") || starts_with(k, "merge.")) && !known.count(k))
            throw ConfigError("unknown config key: " + k);
    if (base.vocab_size < SubwordVocab::kFirstMerge) throw ConfigError("data.vocab_size must be at least 257");
    if (!(base.heldout_fraction >= 0.0 && base.heldout_fraction < 1.0))
        throw ConfigError("data.heldout_fraction must lie in [0, 1)");
    if (base.sampler.temperature < 0.0) throw ConfigError("sample.temperature must be non-negative");
    if (!(base.sampler.top_p > 0.0 && base.sampler.top_p <= 1.0)) throw ConfigError("sample.top_p must lie in (0, 1]");
    if (base.patch_cap < 1) throw ConfigError("sample.patch_cap must be positive");
    parse_merge_kind(base.merge_strategy);
    return base;
}

TrainConfig teacher_train_defaults() {
    TrainConfig t;
    t.steps = 300;
    t.lr = 3e-3;
    t.batch_bytes = 1024;
    t.warmup_steps = 30;
    return t;
}

namespace {

struct Common {
    std::string config;
    uint64_t seed = 0;
};

void add_common(CLI::App * sub, Common & c) {
    sub->add_option("--config", c.config, "key=value config file");
    sub->add_option("--seed", c.seed, "random seed");
}

RunConfig load_config(const Common & common, RunConfig base) {
    if (common.config.empty()) return run_config_from_kv({}, std::move(base));
    KvMap kv;
    try {
        kv = read_kv_file(common.config);
    } catch (const InputError & e) {
        throw ConfigError(e.what());
    }
    return run_config_from_kv(kv, std::move(base));
}

// Model config from a checkpoint with local-only overrides from the file.
ModelConfig override_local(const ModelConfig & ckpt, const Common & common) {
    if (common.config.empty()) return ckpt;
    KvMap kv;
    try {
        kv = read_kv_file(common.config);
    } catch (const InputError & e) {
        throw ConfigError(e.what());
    }
    RunConfig base;
    base.model = ckpt;
    const ModelConfig c = run_config_from_kv(kv, base).model;
    if (c.d != ckpt.d || !(c.global == ckpt.global) || c.subword_vocab != ckpt.subword_vocab ||
        c.norm_eps != ckpt.norm_eps || c.n_probe != ckpt.n_probe)
        throw ConfigError("config may not change the dimensions shared with the checkpoint's global model");
    return c;
}

std::unique_ptr<std::ofstream> open_out(const std::string & path) {
    if (path.empty()) return nullptr;
    auto f = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
    if (!*f) throw InputError("cannot write " + path);
    return f;
}

const SubwordVocab & vocab_of(const Checkpoint & ck, const std::string & path) {
    if (!ck.vocab) throw FormatError("checkpoint carries no vocabulary: " + path);
    return *ck.vocab;
}

void require_kind(const Checkpoint & ck, const std::string & kind, const std::string & path) {
    auto it = ck.meta.find("kind");
    if (it == ck.meta.end() || it->second != kind)
        throw InputError(path + " is not a " + kind + " checkpoint");
}

std::string json_line(const nlohmann::ordered_json & j) {
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::string text_of(std::span<const uint8_t> b) { return std::string(b.begin(), b.end()); }

std::vector<std::string> patch_strings(std::span<const uint8_t> bytes, const BoundaryMask & mask) {
    std::vector<std::string> out;
    size_t at = 0;
    for (int64_t len : mask.patch_lengths()) {
        out.push_back(text_of(bytes.subspan(at, static_cast<size_t>(len))));
        at += static_cast<size_t>(len);
    }
    return out;
}

struct TrainArgs {
    std::vector<std::string> corpus;
    std::string out, metrics;
    int64_t steps = -1;
};

void add_train_args(CLI::App * sub, TrainArgs & a) {
    sub->add_option("--corpus", a.corpus, "corpus files (.txt, .jsonl, .manifest)")->required();
    sub->add_option("--out", a.out, "output checkpoint")->required();
    sub->add_option("--metrics", a.metrics, "per-step JSONL metrics file");
    sub->add_option("--steps", a.steps, "training steps");
}

void apply_steps(TrainConfig & t, int64_t steps) {
    if (steps < -1) throw ConfigError("--steps must be non-negative");
    if (steps >= 0) {
        t.steps = steps;
        t.warmup_steps = std::min(t.warmup_steps, steps);
    }
}

} // namespace

int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err) {
    CLI::App app{"Byte-level latent tokenizer LM toolkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "show help for every subcommand");

    // gen-corpus
    Common gc_common;
    std::string gc_kind = "base", gc_out;
    int64_t gc_docs = 1000;
    auto * gen_corpus = app.add_subcommand("gen-corpus", "write a synthetic JSONL corpus");
    add_common(gen_corpus, gc_common);
    gen_corpus->add_option("--kind", gc_kind, "base | finetune | compound");
    gen_corpus->add_option("--docs", gc_docs, "number of documents");
    gen_corpus->add_option("--out", gc_out, "output .jsonl")->required();

    // train-teacher
    Common tt_common;
    TrainArgs tt;
    int64_t tt_vocab = -1;
    std::string tt_init;
    auto * train_teacher_cmd = app.add_subcommand("train-teacher", "train the subword teacher LM");
    add_common(train_teacher_cmd, tt_common);
    add_train_args(train_teacher_cmd, tt);
    train_teacher_cmd->add_option("--vocab-size", tt_vocab, "BPE vocabulary size");
    train_teacher_cmd->add_option("--init", tt_init, "continue from a teacher checkpoint (reuses its vocabulary)");
    bool tt_global_only = false;
    train_teacher_cmd->add_flag("--global-only", tt_global_only, "update only the transformer layers");

    // stage1
    Common s1_common;
    TrainArgs s1;
    std::string s1_teacher;
    bool s1_fresh = false;
    auto * stage1 = app.add_subcommand("stage1", "byteify a teacher and distill the local models");
    add_common(stage1, s1_common);
    add_train_args(stage1, s1);
    stage1->add_option("--teacher", s1_teacher, "teacher checkpoint")->required();
    stage1->add_flag("--fresh-subword", s1_fresh, "do not copy the teacher embeddings into the suffix table");

    // stage2
    Common s2_common;
    TrainArgs s2;
    std::string s2_model, s2_teacher, s2_strategy;
    double s2_target = -1.0;
    auto * stage2 = app.add_subcommand("stage2", "end-to-end training with boundary supervision");
    add_common(stage2, s2_common);
    add_train_args(stage2, s2);
    stage2->add_option("--model", s2_model, "stage-1 checkpoint")->required();
    stage2->add_option("--teacher", s2_teacher, "scoring LM for entropy / xent merges");
    stage2->add_option("--merge-strategy", s2_strategy, "subword | bpe | entropy | xent");
    stage2->add_option("--target-compression", s2_target, "target bytes per patch");

    // generate
    Common ge_common;
    std::string ge_model, ge_prompt, ge_out;
    int64_t ge_max = 256;
    double ge_temp = -1.0, ge_top_p = -1.0;
    auto * gen = app.add_subcommand("generate", "sample bytes from a model");
    add_common(gen, ge_common);
    gen->add_option("--model", ge_model, "checkpoint")->required();
    gen->add_option("--prompt", ge_prompt, "prompt text");
    gen->add_option("--max-bytes", ge_max, "maximum generated bytes");
    gen->add_option("--temperature", ge_temp, "sampling temperature (0 = greedy)");
    gen->add_option("--top-p", ge_top_p, "nucleus mass");
    gen->add_option("--out", ge_out, "output file (default: stdout)");

    // eval-bpb
    Common ev_common;
    std::string ev_model, ev_pool = "predicted", ev_split = "heldout";
    std::vector<std::string> ev_corpus;
    auto * eval = app.add_subcommand("eval-bpb", "bits per byte, boundary error and compression");
    add_common(eval, ev_common);
    eval->add_option("--model", ev_model, "checkpoint")->required();
    eval->add_option("--corpus", ev_corpus, "corpus files")->required();
    eval->add_option("--pool", ev_pool, "predicted | teacher");
    eval->add_option("--split", ev_split, "heldout | train");

    // merge
    Common me_common;
    std::string me_model, me_base, me_post, me_out;
    auto * merge = app.add_subcommand("merge", "task arithmetic on the global model");
    add_common(merge, me_common);
    merge->add_option("--model", me_model, "byteified checkpoint")->required();
    merge->add_option("--base", me_base, "base teacher checkpoint")->required();
    merge->add_option("--posttrained", me_post, "post-trained teacher checkpoint")->required();
    merge->add_option("--out", me_out, "output checkpoint")->required();

    // spectrum
    Common sp_common;
    std::string sp_model, sp_tensor;
    auto * spectrum = app.add_subcommand("spectrum", "explained variance of a matrix's singular values");
    add_common(spectrum, sp_common);
    spectrum->add_option("--model", sp_model, "checkpoint")->required();
    spectrum->add_option("--tensor", sp_tensor, "tensor name (default: the subword embedding table)");

    // boundary-dump
    Common bd_common;
    std::string bd_model, bd_out, bd_split = "heldout";
    std::vector<std::string> bd_corpus;
    int64_t bd_limit = 20;
    auto * dump = app.add_subcommand("boundary-dump", "emit predicted and subword patches per document");
    add_common(dump, bd_common);
    dump->add_option("--model", bd_model, "checkpoint")->required();
    dump->add_option("--corpus", bd_corpus, "corpus files")->required();
    dump->add_option("--split", bd_split, "heldout | train");
    dump->add_option("--limit", bd_limit, "maximum documents");
    dump->add_option("--out", bd_out, "output file (default: stdout)");

    std::vector<const char *> argv;
    for (const auto & a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError & e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    auto split_of = [](const Corpus & corpus, const std::string & split) -> const std::vector<ByteSeq> & {
        if (split == "heldout") {
            if (corpus.heldout.empty()) throw InputError("corpus has no held-out documents");
            return corpus.heldout;
        }
        if (split == "train") return corpus.train;
        throw ConfigError("--split must be heldout or train");
    };

    try {
        if (*gen_corpus) {
            load_config(gc_common, {});
            if (gc_docs <= 0) throw ConfigError("--docs must be positive");
            write_jsonl(gc_out, synthetic_corpus(parse_synthetic_kind(gc_kind), gc_docs, gc_common.seed));
            out << json_line({{"docs", gc_docs}, {"out", gc_out}}) << "\n";
        } else if (*train_teacher_cmd) {
            RunConfig rc;
            rc.train = teacher_train_defaults();
            rc = load_config(tt_common, rc);
            if (tt_vocab >= 0) rc.vocab_size = tt_vocab;
            apply_steps(rc.train, tt.steps);
            rc.train.seed = tt_common.seed;
            const Corpus corpus = load_corpus(tt.corpus, rc.heldout_fraction, tt_common.seed);
            Checkpoint ck;
            ParamStore init;
            if (!tt_init.empty()) {
                Checkpoint base = load_checkpoint(tt_init);
                require_kind(base, "teacher", tt_init);
                ck.vocab = vocab_of(base, tt_init);
                ck.config = override_local(base.config, tt_common);
                init = std::move(base.params);
            } else {
                ck.vocab = train_bpe(corpus.train, static_cast<int32_t>(rc.vocab_size));
                if (ck.vocab->truncated())
                    err << "warning: BPE stopped at " << ck.vocab->size() << " tokens (requested " << rc.vocab_size
                        << ")\n";
                ck.config = rc.model;
                ck.config.subword_vocab = ck.vocab->size();
                ck.config.validate();
                init = init_teacher(ck.config, tt_common.seed);
            }
            const auto docs = encode_corpus(corpus.train, *ck.vocab, rc.train.max_bytes);
            auto metrics = open_out(tt.metrics);
            ParamFilter filter = tt_global_only ? ParamFilter(is_global_param) : ParamFilter();
            ck.params = train_teacher(std::move(init), docs, ck.config, rc.train, metrics.get(), filter);
            ck.meta = {{"kind", "teacher"}, {"seed", kv_format(tt_common.seed)}, {"steps", kv_format(rc.train.steps)}};
            save_checkpoint(tt.out, ck);
            nlohmann::ordered_json j{{"out", tt.out}, {"vocab", ck.vocab->size()}};
            if (!corpus.heldout.empty()) {
                const TeacherEval te = evaluate_teacher(
                    ck.params, encode_corpus(corpus.heldout, *ck.vocab, rc.train.max_bytes), ck.config);
                j["heldout_nats_per_token"] = te.nats_per_token;
                j["heldout_bits_per_byte"] = te.nats_per_byte / std::log(2.0);
            }
            out << json_line(j) << "\n";
        } else if (*stage1) {
            RunConfig rc = load_config(s1_common, {});
            apply_steps(rc.train, s1.steps);
            rc.train.seed = s1_common.seed;
            rc.train.stage = 1;
            const Checkpoint teacher = load_checkpoint(s1_teacher);
            require_kind(teacher, "teacher", s1_teacher);
            const SubwordVocab & vocab = vocab_of(teacher, s1_teacher);
            const ModelConfig c = override_local(teacher.config, s1_common);
            const Corpus corpus = load_corpus(s1.corpus, rc.heldout_fraction, s1_common.seed);
            const auto docs = encode_corpus(corpus.train, vocab, rc.train.max_bytes);
            auto metrics = open_out(s1.metrics);
            Checkpoint ck;
            ck.config = c;
            ck.vocab = vocab;
            ck.params = run_stage1(byteify(teacher.params, c, s1_common.seed, s1_fresh), teacher.params, docs, c,
                                   rc.train, metrics.get());
            ck.meta = {{"kind", "bolmo"}, {"stage", "1"}, {"seed", kv_format(s1_common.seed)},
                       {"steps", kv_format(rc.train.steps)}};
            save_checkpoint(s1.out, ck);
            out << json_line({{"out", s1.out}, {"steps", rc.train.steps}}) << "\n";
        } else if (*stage2) {
            RunConfig rc = load_config(s2_common, {});
            if (!s2_strategy.empty()) rc.merge_strategy = s2_strategy;
            if (s2_target >= 0.0) rc.target_compression = s2_target;
            apply_steps(rc.train, s2.steps);
            rc.train.seed = s2_common.seed;
            rc.train.stage = 2;
            const Checkpoint model = load_checkpoint(s2_model);
            require_kind(model, "bolmo", s2_model);
            const SubwordVocab & vocab = vocab_of(model, s2_model);
            const ModelConfig c = override_local(model.config, s2_common);
            MergeStrategy strategy{parse_merge_kind(rc.merge_strategy), rc.target_compression, nullptr};
            std::optional<Checkpoint> teacher;
            std::unique_ptr<TeacherScorer> scorer;
            if (strategy.kind == MergeKind::Entropy || strategy.kind == MergeKind::CrossEntropy) {
                if (s2_teacher.empty()) throw ConfigError("entropy and xent merges need --teacher");
                teacher = load_checkpoint(s2_teacher);
                require_kind(*teacher, "teacher", s2_teacher);
                scorer = std::make_unique<TeacherScorer>(teacher->params, vocab, teacher->config);
                strategy.aux = scorer.get();
            }
            const Corpus corpus = load_corpus(s2.corpus, rc.heldout_fraction, s2_common.seed);
            const auto docs = encode_corpus(corpus.train, vocab, rc.train.max_bytes, strategy);
            auto metrics = open_out(s2.metrics);
            Checkpoint ck;
            ck.config = c;
            ck.vocab = vocab;
            ck.params = run_stage2(model.params, docs, c, rc.train, metrics.get());
            ck.meta = {{"kind", "bolmo"}, {"stage", "2"}, {"seed", kv_format(s2_common.seed)},
                       {"steps", kv_format(rc.train.steps)}, {"merge_strategy", merge_kind_name(strategy.kind)},
                       {"target_compression", kv_format(rc.target_compression)}};
            save_checkpoint(s2.out, ck);
            out << json_line({{"out", s2.out}, {"steps", rc.train.steps}}) << "\n";
        } else if (*gen) {
            RunConfig rc = load_config(ge_common, {});
            if (ge_temp >= 0.0) rc.sampler.temperature = ge_temp;
            if (ge_top_p >= 0.0) rc.sampler.top_p = ge_top_p;
            rc.sampler.seed = ge_common.seed;
            run_config_from_kv({}, rc);
            const Checkpoint model = load_checkpoint(ge_model);
            require_kind(model, "bolmo", ge_model);
            const SubwordVocab & vocab = vocab_of(model, ge_model);
            const SuffixIndex index(vocab);
            const ByteSeq prompt = ge_prompt.empty() ? ByteSeq{} : utf8_to_bytes(ge_prompt);
            const ByteSeq bytes = generate(model.params, index, prompt, ge_max, model.config, rc.sampler,
                                           DecodeOptions{rc.patch_cap, kEotByte});
            auto file = open_out(ge_out);
            std::ostream & os = file ? *file : out;
            os.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        } else if (*eval) {
            RunConfig rc = load_config(ev_common, {});
            const Checkpoint model = load_checkpoint(ev_model);
            require_kind(model, "bolmo", ev_model);
            const SubwordVocab & vocab = vocab_of(model, ev_model);
            if (ev_pool != "predicted" && ev_pool != "teacher") throw ConfigError("--pool must be predicted or teacher");
            const Corpus corpus = load_corpus(ev_corpus, rc.heldout_fraction, ev_common.seed);
            const auto docs = encode_corpus(split_of(corpus, ev_split), vocab, rc.train.max_bytes);
            const EvalResult r = evaluate(model.params, docs, model.config,
                                          ev_pool == "teacher" ? PoolMask::Teacher : PoolMask::Predicted);
            out << json_line({{"bits_per_byte", r.bits_per_byte},
                              {"boundary_error", r.boundary_error},
                              {"boundary_accuracy", 1.0 - r.boundary_error},
                              {"compression", r.compression},
                              {"positions", r.positions},
                              {"split", ev_split},
                              {"pool", ev_pool}})
                << "\n";
        } else if (*merge) {
            load_config(me_common, {});
            Checkpoint model = load_checkpoint(me_model);
            require_kind(model, "bolmo", me_model);
            const Checkpoint base = load_checkpoint(me_base);
            const Checkpoint post = load_checkpoint(me_post);
            require_kind(base, "teacher", me_base);
            require_kind(post, "teacher", me_post);
            model.params = task_arithmetic_merge(model.params, base.params, post.params);
            model.meta["merged_from"] = me_post;
            save_checkpoint(me_out, model);
            out << json_line({{"out", me_out}, {"delta_tensors", weight_delta(base.params, post.params).size()}})
                << "\n";
        } else if (*spectrum) {
            load_config(sp_common, {});
            const Checkpoint model = load_checkpoint(sp_model);
            std::string name = sp_tensor;
            if (name.empty()) name = model.params.contains("subword_embed.weight") ? "subword_embed.weight" : "tok_embed.weight";
            if (!model.params.contains(name)) throw InputError("no tensor named " + name);
            const Tensor & t = model.params.get(name);
            write_spectrum(out, spectrum_report(t.reshaped({t.rows(), t.cols()})));
        } else if (*dump) {
            RunConfig rc = load_config(bd_common, {});
            const Checkpoint model = load_checkpoint(bd_model);
            require_kind(model, "bolmo", bd_model);
            const SubwordVocab & vocab = vocab_of(model, bd_model);
            const SuffixIndex index(vocab);
            const Corpus corpus = load_corpus(bd_corpus, rc.heldout_fraction, bd_common.seed);
            const auto & docs = split_of(corpus, bd_split);
            auto file = open_out(bd_out);
            std::ostream & os = file ? *file : out;
            int64_t n = 0;
            for (const auto & content : docs) {
                if (n++ >= bd_limit) break;
                const EncodedDoc d = encode_document(content, vocab, index);
                Graph g;
                ParamBinder b(g, model.params);
                const auto layout = SeqLayout::single(static_cast<int64_t>(d.bytes.size()));
                const ForwardOut o = forward_full(b, d.bytes, d.suffix_ids, layout, model.config);
                const size_t n_content = d.bytes.size() - 2;
                auto content_mask = [&](const BoundaryMask & m) {
                    std::vector<uint8_t> f(m.flags().begin() + 1, m.flags().end() - 1);
                    f.back() = 1;
                    return BoundaryMask(std::move(f));
                };
                const BoundaryMask pred = content_mask(o.mask), sub = content_mask(d.teacher_mask);
                std::string bits;
                for (size_t i = 0; i < n_content; ++i) bits += pred[i] ? '1' : '0';
                os << json_line({{"text", text_of(content)},
                                 {"mask", bits},
                                 {"predicted", patch_strings(content, pred)},
                                 {"subword", patch_strings(content, sub)}})
                   << "\n";
            }
        }
    } catch (const ConfigError & e) {
        err << "config error: " << e.what() << "\n";
        return kInvalidConfig;
    } catch (const NotFoundError & e) {
        err << "error: " << e.what() << "\n";
        return kMissingCheckpoint;
    } catch (const std::exception & e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

} // namespace bolmo::cli
