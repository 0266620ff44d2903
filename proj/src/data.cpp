#include "bolmo/data.h"

#include "bolmo/errors.h"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace bolmo {

namespace {

int64_t total_bytes(const std::vector<ByteSeq> & docs) {
    int64_t n = 0;
    for (const auto & d : docs) n += static_cast<int64_t>(d.size());
    return n;
}

void check_document(const ByteSeq & doc, const std::string & where) {
    if (doc.empty()) throw InputError(where + ": empty document");
    if (!is_valid_utf8(doc)) throw InputError(where + ": invalid UTF-8");
    if (std::find(doc.begin(), doc.end(), kEotByte) != doc.end())
        throw InputError(where + ": document contains the end-of-text byte");
}

std::string read_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool ends_with(const std::string & s, const std::string & suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

} // namespace

int64_t Corpus::train_bytes() const { return total_bytes(train); }
int64_t Corpus::heldout_bytes() const { return total_bytes(heldout); }

std::vector<ByteSeq> read_documents(const std::string & path) {
    std::vector<ByteSeq> out;
    const std::string text = read_file(path);
    if (ends_with(path, ".jsonl")) {
        std::istringstream lines(text);
        std::string line;
        int64_t lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const std::string where = path + ":" + std::to_string(lineno);
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception & e) {
                throw InputError(where + ": " + e.what());
            }
            if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string())
                throw InputError(where + ": record lacks a string \"text\" field");
            const std::string s = rec["text"].get<std::string>();
            out.push_back(utf8_to_bytes(s));
            check_document(out.back(), where);
        }
    } else {
        out.push_back(utf8_to_bytes(text));
        check_document(out.back(), path);
    }
    return out;
}

Corpus load_corpus(const std::vector<std::string> & paths, double heldout_fraction, uint64_t seed) {
    if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) throw ConfigError("heldout fraction must be in [0, 1)");
    Corpus c;
    std::vector<ByteSeq> untagged;
    auto add_path = [&](const std::string & p, const std::string & tag) {
        auto docs = read_documents(p);
        auto & dst = tag == "train" ? c.train : tag == "heldout" ? c.heldout : untagged;
        for (auto & d : docs) dst.push_back(std::move(d));
    };
    for (const auto & path : paths) {
        if (!ends_with(path, ".manifest")) {
            add_path(path, "");
            continue;
        }
        std::istringstream lines(read_file(path));
        const auto dir = std::filesystem::path(path).parent_path();
        std::string line;
        while (std::getline(lines, line)) {
            std::istringstream ls(line);
            std::string a, b;
            if (!(ls >> a)) continue;
            std::string tag;
            if ((a == "train" || a == "heldout") && (ls >> b)) {
                tag = a;
                a = b;
            }
            const auto p = std::filesystem::path(a);
            add_path((p.is_absolute() ? p : dir / p).string(), tag);
        }
    }
    std::mt19937_64 rng(seed);
    std::vector<size_t> order(untagged.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_held = static_cast<size_t>(heldout_fraction * static_cast<double>(untagged.size()) + 0.5);
    for (size_t i = 0; i < order.size(); ++i) (i < n_held ? c.heldout : c.train).push_back(std::move(untagged[order[i]]));
    if (c.train.empty()) throw InputError("corpus has no training documents");
    return c;
}

void write_jsonl(const std::string & path, const std::vector<ByteSeq> & docs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path);
    for (const auto & d : docs) out << nlohmann::json{{"text", std::string(d.begin(), d.end())}}.dump() << "\n";
    if (!out) throw InputError("write failed: " + path);
}

// ---------------------------------------------------------------- synthetic

SyntheticKind parse_synthetic_kind(const std::string & s) {
    if (s == "base") return SyntheticKind::Base;
    if (s == "finetune") return SyntheticKind::Finetune;
    if (s == "compound") return SyntheticKind::Compound;
    throw ConfigError("unknown synthetic corpus kind: " + s);
}

namespace {

const std::vector<std::string> kSubjects{"the cat", "the dog", "a bird", "the old man", "my sister", "the farmer",
                                         "a child", "the teacher", "our neighbor", "the king"};
const std::vector<std::string> kVerbs{"sees", "likes", "finds", "takes", "watches", "follows", "carries", "wants"};
const std::vector<std::string> kObjects{"the ball", "a red apple", "the small box", "a blue hat", "the garden gate",
                                        "some bread", "the river stone", "a long rope", "the green chair",
                                        "an old book"};
const std::vector<std::string> kPlaces{"in the garden", "near the river", "under the tree", "at the market",
                                       "on the hill", "by the house", "at the caf\xc3\xa9"};
const std::vector<std::string> kTimes{"today", "at night", "in the morning", "every day"};
const std::vector<std::string> kStates{"happy", "tired", "hungry", "quiet", "busy"};

const std::vector<std::string> kRoots{"play", "work", "help", "walk", "talk", "paint", "read", "teach",
                                      "sing", "build", "farm", "jump", "cook", "clean", "look", "turn"};
const std::vector<std::string> kSuffixes{"", "s", "er", "ers", "ed", "ing"};

struct Pick {
    std::mt19937_64 & rng;
    const std::string & operator()(const std::vector<std::string> & v) {
        return v[std::uniform_int_distribution<size_t>(0, v.size() - 1)(rng)];
    }
    int64_t range(int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }
};

std::string capitalize(std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

std::string base_sentence(Pick & pick) {
    const std::string & s = pick(kSubjects);
    const int64_t form = pick.range(0, 3);
    if (form == 3) return s + " is " + pick(kStates) + ".";
    const std::string & v = pick(kVerbs);
    const std::string & o = pick(kObjects);
    if (form == 0) return s + " " + v + " " + o + ".";
    if (form == 1) return s + " " + v + " " + o + " " + pick(kPlaces) + ".";
    return pick(kTimes) + ", " + s + " " + v + " " + o + ".";
}

std::string verb_base(const std::string & v) {
    if (v == "watches") return "watch";
    if (v == "carries") return "carry";
    return v.substr(0, v.size() - 1);
}

std::string finetune_exchange(Pick & pick) {
    const std::string & s = pick(kSubjects);
    switch (pick.range(0, 2)) {
    case 0: {
        const std::string & p = pick(kPlaces);
        return "q: where is " + s + "? a: " + s + " is " + p + ".";
    }
    case 1: {
        const std::string & v = pick(kVerbs);
        const std::string & o = pick(kObjects);
        return "q: what does " + s + " " + verb_base(v) + "? a: " + s + " " + v + " " + o + ".";
    }
    default: {
        const std::string & st = pick(kStates);
        return "q: how is " + s + "? a: " + s + " is " + st + ".";
    }
    }
}

std::string compound_sentence(Pick & pick) {
    std::string out = pick.range(0, 1) ? "the" : "a";
    const int64_t n = pick.range(3, 6);
    for (int64_t i = 0; i < n; ++i) {
        const std::string & root = pick(kRoots);
        out += " " + root + pick(kSuffixes);
    }
    return out + ".";
}

} // namespace

std::vector<ByteSeq> synthetic_corpus(SyntheticKind kind, int64_t docs, uint64_t seed) {
    if (docs < 0) throw ConfigError("synthetic_corpus: negative document count");
    std::mt19937_64 rng(seed);
    Pick pick{rng};
    std::vector<ByteSeq> out;
    out.reserve(static_cast<size_t>(docs));
    for (int64_t d = 0; d < docs; ++d) {
        std::string text;
        const int64_t n = pick.range(2, 5);
        for (int64_t i = 0; i < n; ++i) {
            if (i) text += " ";
            switch (kind) {
            case SyntheticKind::Base: text += capitalize(base_sentence(pick)); break;
            case SyntheticKind::Finetune: text += finetune_exchange(pick); break;
            case SyntheticKind::Compound: text += compound_sentence(pick); break;
            }
        }
        out.push_back(utf8_to_bytes(text));
    }
    return out;
}

// ---------------------------------------------------------------- encoding

std::vector<ByteSeq> split_content(std::span<const uint8_t> content, const SubwordVocab & vocab,
                                   int64_t max_content) {
    if (max_content < 1) throw ConfigError("split_content: limit must be positive");
    std::vector<ByteSeq> out;
    ByteSeq cur;
    for (auto chunk : pre_tokenize(content, vocab.split_before_space())) {
        if (!cur.empty() && static_cast<int64_t>(cur.size() + chunk.size()) > max_content) {
            out.push_back(std::move(cur));
            cur.clear();
        }
        for (size_t i = 0; i < chunk.size(); ++i) {
            if (static_cast<int64_t>(cur.size()) == max_content) {
                out.push_back(std::move(cur));
                cur.clear();
            }
            cur.push_back(chunk[i]);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

EncodedDoc encode_document(std::span<const uint8_t> content, const SubwordVocab & vocab, const SuffixIndex & index,
                           const MergeStrategy & strategy) {
    if (content.empty()) throw InputError("encode_document: empty content");
    if (std::find(content.begin(), content.end(), kEotByte) != content.end())
        throw InputError("encode_document: content contains the end-of-text byte");
    EncodedDoc d;
    d.bytes.reserve(content.size() + 2);
    d.bytes.push_back(kBosByte);
    d.bytes.insert(d.bytes.end(), content.begin(), content.end());
    d.bytes.push_back(kEotByte);
    d.suffix_ids = document_suffix_ids(index, d.bytes);

    const auto toks = vocab.encode(content);
    d.tokens.reserve(toks.size() + 2);
    d.tokens.push_back(SubwordVocab::kBos);
    d.tokens.insert(d.tokens.end(), toks.begin(), toks.end());
    d.tokens.push_back(kEotByte);

    auto wrap = [&](const BoundaryMask & inner) {
        std::vector<uint8_t> f;
        f.reserve(content.size() + 2);
        f.push_back(1);
        for (uint8_t b : inner.flags()) f.push_back(b);
        f.push_back(1);
        return BoundaryMask(std::move(f));
    };
    const BoundaryMask sub = boundary_mask_from_tokens(vocab, toks);
    d.teacher_mask = wrap(sub);
    d.supervision = strategy.kind == MergeKind::Subword ? d.teacher_mask : wrap(supervision_mask(strategy, vocab, content));
    return d;
}

std::vector<EncodedDoc> encode_corpus(const std::vector<ByteSeq> & docs, const SubwordVocab & vocab,
                                      int64_t max_bytes, const MergeStrategy & strategy) {
    if (max_bytes < 3) throw ConfigError("max bytes per example must be at least 3");
    const SuffixIndex index(vocab);
    std::vector<EncodedDoc> out;
    for (const auto & doc : docs)
        for (const auto & piece : split_content(doc, vocab, max_bytes - 2))
            out.push_back(encode_document(piece, vocab, index, strategy));
    return out;
}

PackedBatch pack(const std::vector<const EncodedDoc *> & docs) {
    if (docs.empty()) throw InputError("pack: no documents");
    PackedBatch b;
    std::vector<int64_t> lens, tlens;
    std::vector<uint8_t> tm, sm;
    for (const EncodedDoc * d : docs) {
        b.bytes.insert(b.bytes.end(), d->bytes.begin(), d->bytes.end());
        b.suffix_ids.insert(b.suffix_ids.end(), d->suffix_ids.begin(), d->suffix_ids.end());
        b.tokens.insert(b.tokens.end(), d->tokens.begin(), d->tokens.end());
        tm.insert(tm.end(), d->teacher_mask.flags().begin(), d->teacher_mask.flags().end());
        sm.insert(sm.end(), d->supervision.flags().begin(), d->supervision.flags().end());
        lens.push_back(static_cast<int64_t>(d->bytes.size()));
        tlens.push_back(static_cast<int64_t>(d->tokens.size()));
    }
    b.layout = SeqLayout::from_lengths(lens);
    b.token_layout = SeqLayout::from_lengths(tlens);
    b.teacher_mask = BoundaryMask(std::move(tm));
    b.supervision = BoundaryMask(std::move(sm));
    return b;
}

BatchSampler::BatchSampler(const std::vector<EncodedDoc> & docs, int64_t batch_bytes, uint64_t seed)
    : docs_(docs), batch_bytes_(batch_bytes), rng_(seed) {
    if (docs.empty()) throw InputError("BatchSampler: no documents");
    if (batch_bytes < 1) throw ConfigError("batch bytes must be positive");
    order_.resize(docs.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng_);
}

PackedBatch BatchSampler::next() {
    std::vector<const EncodedDoc *> picked;
    int64_t bytes = 0;
    while (true) {
        if (cursor_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        const EncodedDoc & d = docs_[order_[cursor_]];
        const auto n = static_cast<int64_t>(d.bytes.size());
        if (!picked.empty() && bytes + n > batch_bytes_) break;
        picked.push_back(&d);
        bytes += n;
        ++cursor_;
        if (bytes >= batch_bytes_) break;
    }
    return pack(picked);
}

std::vector<PackedBatch> sequential_batches(const std::vector<EncodedDoc> & docs, int64_t batch_bytes) {
    std::vector<PackedBatch> out;
    std::vector<const EncodedDoc *> cur;
    int64_t bytes = 0;
    for (const auto & d : docs) {
        const auto n = static_cast<int64_t>(d.bytes.size());
        if (!cur.empty() && bytes + n > batch_bytes) {
            out.push_back(pack(cur));
            cur.clear();
            bytes = 0;
        }
        cur.push_back(&d);
        bytes += n;
    }
    if (!cur.empty()) out.push_back(pack(cur));
    return out;
}

} // namespace bolmo
