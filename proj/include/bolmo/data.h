#pragma once

#include "bolmo/boundary_supervision.h"
#include "bolmo/model.h"
#include "bolmo/tokenizer.h"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace bolmo {

// ---------------------------------------------------------------- corpus

struct Corpus {
    std::vector<ByteSeq> train;
    std::vector<ByteSeq> heldout;
    int64_t train_bytes() const;
    int64_t heldout_bytes() const;
};

// Reads documents from .txt files (one document per file) and .jsonl files
// (one record per line, document in the "text" field). A manifest file
// (.manifest) lists one path per line, optionally prefixed with "train " or
// "heldout "; untagged documents are split by `heldout_fraction` with a
// seeded shuffle. Throws InputError on unreadable files, invalid UTF-8 or
// documents containing the end-of-text byte.
Corpus load_corpus(const std::vector<std::string> & paths, double heldout_fraction, uint64_t seed);
std::vector<ByteSeq> read_documents(const std::string & path);

void write_jsonl(const std::string & path, const std::vector<ByteSeq> & docs);

enum class SyntheticKind { Base, Finetune, Compound };
SyntheticKind parse_synthetic_kind(const std::string & s);

// Deterministic toy text with a small word inventory. Base is short
// narrative sentences; Finetune is a question/answer register over the same
// words; Compound is dominated by words that are prefixes of other words.
std::vector<ByteSeq> synthetic_corpus(SyntheticKind kind, int64_t docs, uint64_t seed);

// ---------------------------------------------------------------- encoding

// A document laid out as [BOS byte] content [EOT byte]; the teacher sees
// [BOS] tokens(content) [EOT] and patch i of teacher_mask is token i.
struct EncodedDoc {
    ByteSeq bytes;
    std::vector<TokenId> suffix_ids;
    std::vector<TokenId> tokens;
    BoundaryMask teacher_mask;
    BoundaryMask supervision;
};

// Splits content at pre-token boundaries into pieces of at most max_content
// bytes (a single over-long pre-token is cut).
std::vector<ByteSeq> split_content(std::span<const uint8_t> content, const SubwordVocab & vocab,
                                   int64_t max_content);

EncodedDoc encode_document(std::span<const uint8_t> content, const SubwordVocab & vocab, const SuffixIndex & index,
                           const MergeStrategy & strategy = {});
std::vector<EncodedDoc> encode_corpus(const std::vector<ByteSeq> & docs, const SubwordVocab & vocab,
                                      int64_t max_bytes, const MergeStrategy & strategy = {});

struct PackedBatch {
    ByteSeq bytes;
    std::vector<TokenId> suffix_ids;
    std::vector<TokenId> tokens;
    SeqLayout layout;       // over bytes
    SeqLayout token_layout; // over teacher tokens
    BoundaryMask teacher_mask;
    BoundaryMask supervision;
};

PackedBatch pack(const std::vector<const EncodedDoc *> & docs);

// Draws documents in a seeded shuffled order, filling each batch up to
// `batch_bytes` (always at least one document).
class BatchSampler {
public:
    BatchSampler(const std::vector<EncodedDoc> & docs, int64_t batch_bytes, uint64_t seed);
    PackedBatch next();

private:
    const std::vector<EncodedDoc> & docs_;
    int64_t batch_bytes_;
    std::mt19937_64 rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

// Consecutive batches covering every document once, in order.
std::vector<PackedBatch> sequential_batches(const std::vector<EncodedDoc> & docs, int64_t batch_bytes);

} // namespace bolmo
