#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bolmo {

using ByteSeq = std::vector<uint8_t>;
using TokenId = int32_t;

// Exact byte image of valid, non-empty UTF-8 text; throws InputError otherwise.
ByteSeq utf8_to_bytes(std::string_view text);
bool is_valid_utf8(std::span<const uint8_t> bytes);

// One flag per byte; flag i is set iff a patch ends at byte i.
class BoundaryMask {
public:
    BoundaryMask() = default;
    explicit BoundaryMask(std::vector<uint8_t> flags);
    static BoundaryMask from_patch_lengths(const std::vector<int64_t> & lengths);
    static BoundaryMask all_true(size_t n);

    size_t size() const { return flags_.size(); }
    bool empty() const { return flags_.empty(); }
    bool operator[](size_t i) const { return flags_[i] != 0; }
    void set(size_t i, bool v) { flags_[i] = v ? 1 : 0; }
    const std::vector<uint8_t> & flags() const { return flags_; }

    int64_t count() const;
    std::vector<int64_t> patch_lengths() const;
    // End position of every patch, in order.
    std::vector<int64_t> patch_ends() const;
    // True iff every set flag here is also set in `other`.
    bool subset_of(const BoundaryMask & other) const;

    bool operator==(const BoundaryMask & other) const = default;

private:
    std::vector<uint8_t> flags_;
};

struct BpeMerge {
    TokenId left = -1;
    TokenId right = -1;
    TokenId result = -1;
};

// Byte-level BPE vocabulary.
//
// Ids 0..255 are the single bytes, id 256 is the BOS special (no byte
// string), and ids from 257 on are merges in rank order. With
// split_before_space set, a space byte always starts a new pre-token, so no
// token other than a single space contains a space that is not its first byte.
class SubwordVocab {
public:
    static constexpr TokenId kBos = 256;
    static constexpr TokenId kFirstMerge = 257;

    // The 256 single-byte tokens plus BOS.
    static SubwordVocab byte_level(bool split_before_space = true);

    int32_t size() const { return static_cast<int32_t>(tokens_.size()); }
    bool is_special(TokenId id) const { return id == kBos; }
    const std::string & bytes_of(TokenId id) const;
    std::optional<TokenId> find(std::string_view bytes) const;
    const std::vector<BpeMerge> & merges() const { return merges_; }
    // Rank of merging (left, right), or -1 if no such merge exists.
    int32_t merge_rank(TokenId left, TokenId right) const;
    size_t max_token_bytes() const { return max_len_; }
    bool split_before_space() const { return split_before_space_; }
    // Set when training could not reach the requested size.
    bool truncated() const { return truncated_; }

    // Appends the merge (left, right); returns the new token id.
    TokenId add_merge(TokenId left, TokenId right);

    std::vector<TokenId> encode(std::span<const uint8_t> bytes) const;
    ByteSeq decode(std::span<const TokenId> ids) const;

    // Flat text format: a header line, then one line per token:
    // id <TAB> hex-bytes <TAB> merge rank <TAB> left id <TAB> right id
    // (rank/left/right are -1 for single bytes; BOS is written as "<bos>").
    std::string serialize() const;
    static SubwordVocab deserialize(std::string_view text);
    void save(const std::string & path) const;
    static SubwordVocab load(const std::string & path);

    bool operator==(const SubwordVocab & other) const;

private:
    friend SubwordVocab train_bpe(const std::vector<ByteSeq> &, int32_t, bool, int64_t);

    void encode_chunk(std::span<const uint8_t> chunk, std::vector<TokenId> & out) const;
    static uint64_t pair_key(TokenId l, TokenId r) {
        return (static_cast<uint64_t>(static_cast<uint32_t>(l)) << 32) | static_cast<uint32_t>(r);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> lookup_;
    std::vector<BpeMerge> merges_;
    std::unordered_map<uint64_t, int32_t> rank_;
    size_t max_len_ = 1;
    bool split_before_space_ = true;
    bool truncated_ = false;
};

// Splits bytes into pre-tokens: each space starts a new chunk.
std::vector<std::span<const uint8_t>> pre_tokenize(std::span<const uint8_t> bytes, bool split_before_space);

// Corpus-level BPE: repeatedly merges the most frequent adjacent pair (counted
// over all adjacent positions, replaced left to right without overlap). Ties
// go to the lower left id, then the lower right id. A pair whose
// concatenation already names a token is skipped. Stops early, setting
// truncated(), once no pair occurs at least min_count times.
//
// vocab_size counts every id including BOS, so vocab_size - 257 merges are
// requested; 256 and 257 both yield the byte-level vocabulary.
SubwordVocab train_bpe(const std::vector<ByteSeq> & corpus, int32_t vocab_size, bool split_before_space = true,
                       int64_t min_count = 2);

// flags[i] set iff byte i ends a token of vocab.encode(x).
BoundaryMask subword_boundary_mask(const SubwordVocab & vocab, std::span<const uint8_t> x);
BoundaryMask boundary_mask_from_tokens(const SubwordVocab & vocab, std::span<const TokenId> tokens);

// Reversed-token trie answering "which token is the longest suffix of x[..=i]".
class SuffixIndex {
public:
    explicit SuffixIndex(const SubwordVocab & vocab);

    // Longest vocabulary token whose bytes end x[..=i]. Lookback never
    // leaves x, so callers pass a single document.
    TokenId longest_suffix_token(std::span<const uint8_t> x, size_t i) const;
    // Convenience: the lookup at every position.
    std::vector<TokenId> suffix_ids(std::span<const uint8_t> x) const;

private:
    struct Node {
        TokenId token = -1;
        std::vector<std::pair<uint8_t, int32_t>> children;
    };
    int32_t child(int32_t node, uint8_t b) const;
    std::vector<Node> nodes_;
};

std::string to_hex(std::string_view bytes);
std::string from_hex(std::string_view hex);

} // namespace bolmo
