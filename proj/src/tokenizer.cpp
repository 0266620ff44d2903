#include "bolmo/tokenizer.h"

#include "bolmo/errors.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

namespace bolmo {

// ---------------------------------------------------------------- utf-8

bool is_valid_utf8(std::span<const uint8_t> s) {
    size_t i = 0;
    while (i < s.size()) {
        const uint8_t c = s[i];
        size_t len;
        uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > s.size()) return false;
        for (size_t k = 1; k < len; ++k) {
            if ((s[i + k] & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (s[i + k] & 0x3F);
        }
        static constexpr uint32_t min_cp[5] = {0, 0, 0x80, 0x800, 0x10000};
        if (cp < min_cp[len]) return false;                // overlong
        if (cp > 0x10FFFF) return false;
        if (cp >= 0xD800 && cp <= 0xDFFF) return false;    // surrogate
        i += len;
    }
    return true;
}

ByteSeq utf8_to_bytes(std::string_view text) {
    if (text.empty()) throw InputError("utf8_to_bytes: empty input");
    ByteSeq out(text.begin(), text.end());
    if (!is_valid_utf8(out)) throw InputError("utf8_to_bytes: invalid UTF-8");
    return out;
}

// ---------------------------------------------------------------- masks

BoundaryMask::BoundaryMask(std::vector<uint8_t> flags) : flags_(std::move(flags)) {
    for (auto & f : flags_) f = f ? 1 : 0;
}

BoundaryMask BoundaryMask::from_patch_lengths(const std::vector<int64_t> & lengths) {
    std::vector<uint8_t> f;
    for (int64_t len : lengths) {
        if (len <= 0) throw InputError("BoundaryMask: patch length must be positive");
        f.insert(f.end(), static_cast<size_t>(len - 1), 0);
        f.push_back(1);
    }
    return BoundaryMask(std::move(f));
}

BoundaryMask BoundaryMask::all_true(size_t n) { return BoundaryMask(std::vector<uint8_t>(n, 1)); }

int64_t BoundaryMask::count() const { return std::count(flags_.begin(), flags_.end(), uint8_t{1}); }

std::vector<int64_t> BoundaryMask::patch_ends() const {
    std::vector<int64_t> ends;
    for (size_t i = 0; i < flags_.size(); ++i)
        if (flags_[i]) ends.push_back(static_cast<int64_t>(i));
    return ends;
}

std::vector<int64_t> BoundaryMask::patch_lengths() const {
    std::vector<int64_t> out;
    int64_t start = 0;
    for (size_t i = 0; i < flags_.size(); ++i) {
        if (flags_[i]) {
            out.push_back(static_cast<int64_t>(i) + 1 - start);
            start = static_cast<int64_t>(i) + 1;
        }
    }
    return out;
}

bool BoundaryMask::subset_of(const BoundaryMask & other) const {
    if (other.size() != size()) return false;
    for (size_t i = 0; i < flags_.size(); ++i)
        if (flags_[i] && !other.flags_[i]) return false;
    return true;
}

// ---------------------------------------------------------------- hex

std::string to_hex(std::string_view bytes) {
    static const char * digits = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (unsigned char c : bytes) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 15]);
    }
    return out;
}

std::string from_hex(std::string_view hex) {
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw FormatError("bad hex digit");
    };
    if (hex.size() % 2) throw FormatError("odd-length hex string");
    std::string out;
    for (size_t i = 0; i < hex.size(); i += 2) out.push_back(static_cast<char>(nib(hex[i]) * 16 + nib(hex[i + 1])));
    return out;
}

// ---------------------------------------------------------------- vocab

SubwordVocab SubwordVocab::byte_level(bool split_before_space) {
    SubwordVocab v;
    v.split_before_space_ = split_before_space;
    for (int b = 0; b < 256; ++b) {
        v.tokens_.emplace_back(1, static_cast<char>(b));
        v.lookup_.emplace(v.tokens_.back(), b);
    }
    v.tokens_.emplace_back(); // BOS
    return v;
}

const std::string & SubwordVocab::bytes_of(TokenId id) const {
    if (id < 0 || id >= size()) throw InputError("token id out of range: " + std::to_string(id));
    return tokens_[id];
}

std::optional<TokenId> SubwordVocab::find(std::string_view bytes) const {
    auto it = lookup_.find(std::string(bytes));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

int32_t SubwordVocab::merge_rank(TokenId left, TokenId right) const {
    auto it = rank_.find(pair_key(left, right));
    return it == rank_.end() ? -1 : it->second;
}

TokenId SubwordVocab::add_merge(TokenId left, TokenId right) {
    if (left < 0 || left >= size() || right < 0 || right >= size() || is_special(left) || is_special(right))
        throw InputError("add_merge: invalid operand id");
    std::string s = tokens_[left] + tokens_[right];
    if (lookup_.count(s)) throw InputError("add_merge: token already exists: " + to_hex(s));
    const TokenId id = size();
    rank_.emplace(pair_key(left, right), static_cast<int32_t>(merges_.size()));
    merges_.push_back({left, right, id});
    max_len_ = std::max(max_len_, s.size());
    lookup_.emplace(s, id);
    tokens_.push_back(std::move(s));
    return id;
}

void SubwordVocab::encode_chunk(std::span<const uint8_t> chunk, std::vector<TokenId> & out) const {
    std::vector<TokenId> sym(chunk.begin(), chunk.end());
    while (sym.size() > 1) {
        int32_t best = -1;
        for (size_t i = 0; i + 1 < sym.size(); ++i) {
            const int32_t r = merge_rank(sym[i], sym[i + 1]);
            if (r >= 0 && (best < 0 || r < best)) best = r;
        }
        if (best < 0) break;
        const BpeMerge & m = merges_[best];
        size_t w = 0;
        for (size_t i = 0; i < sym.size();) {
            if (i + 1 < sym.size() && sym[i] == m.left && sym[i + 1] == m.right) {
                sym[w++] = m.result;
                i += 2;
            } else {
                sym[w++] = sym[i++];
            }
        }
        sym.resize(w);
    }
    out.insert(out.end(), sym.begin(), sym.end());
}

std::vector<TokenId> SubwordVocab::encode(std::span<const uint8_t> bytes) const {
    std::vector<TokenId> out;
    for (auto chunk : pre_tokenize(bytes, split_before_space_)) encode_chunk(chunk, out);
    return out;
}

ByteSeq SubwordVocab::decode(std::span<const TokenId> ids) const {
    ByteSeq out;
    for (TokenId id : ids) {
        const std::string & s = bytes_of(id);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

std::string SubwordVocab::serialize() const {
    std::ostringstream os;
    os << "bolmo-vocab 1 size " << size() << " split_before_space " << (split_before_space_ ? 1 : 0) << " truncated "
       << (truncated_ ? 1 : 0) << "\n";
    for (TokenId id = 0; id < size(); ++id) {
        os << id << '\t' << (is_special(id) ? std::string("<bos>") : to_hex(tokens_[id]));
        if (id >= kFirstMerge) {
            const BpeMerge & m = merges_[id - kFirstMerge];
            os << '\t' << (id - kFirstMerge) << '\t' << m.left << '\t' << m.right;
        } else {
            os << "\t-1\t-1\t-1";
        }
        os << '\n';
    }
    return os.str();
}

SubwordVocab SubwordVocab::deserialize(std::string_view text) {
    std::istringstream is{std::string(text)};
    std::string magic, k1, k2, k3;
    int version = 0, n = 0, split = 0, trunc = 0;
    if (!(is >> magic >> version >> k1 >> n >> k2 >> split >> k3 >> trunc) || magic != "bolmo-vocab" || k1 != "size" ||
        k2 != "split_before_space" || k3 != "truncated")
        throw FormatError("vocab: bad header");
    if (version != 1) throw FormatError("vocab: unsupported version " + std::to_string(version));
    if (n < kFirstMerge) throw FormatError("vocab: size too small");
    SubwordVocab v = byte_level(split != 0);
    v.truncated_ = trunc != 0;
    for (int line = 0; line < n; ++line) {
        long long id, rank, left, right;
        std::string hex;
        if (!(is >> id >> hex >> rank >> left >> right)) throw FormatError("vocab: truncated at line " + std::to_string(line + 2));
        if (id != line) throw FormatError("vocab: ids must be dense and ordered");
        if (id < kFirstMerge) {
            const std::string expect = id == kBos ? std::string("<bos>") : to_hex(v.tokens_[id]);
            if (hex != expect) throw FormatError("vocab: base token mismatch at id " + std::to_string(id));
            continue;
        }
        if (rank != id - kFirstMerge) throw FormatError("vocab: merge rank mismatch");
        TokenId got;
        try {
            got = v.add_merge(static_cast<TokenId>(left), static_cast<TokenId>(right));
        } catch (const InputError & e) {
            throw FormatError(std::string("vocab: ") + e.what());
        }
        if (to_hex(v.tokens_[got]) != hex) throw FormatError("vocab: merge bytes mismatch at id " + std::to_string(id));
    }
    return v;
}

void SubwordVocab::save(const std::string & path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    f << serialize();
    if (!f) throw Error("write failed: " + path);
}

SubwordVocab SubwordVocab::load(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
}

bool SubwordVocab::operator==(const SubwordVocab & o) const {
    if (tokens_ != o.tokens_ || split_before_space_ != o.split_before_space_ || merges_.size() != o.merges_.size())
        return false;
    for (size_t i = 0; i < merges_.size(); ++i)
        if (merges_[i].left != o.merges_[i].left || merges_[i].right != o.merges_[i].right) return false;
    return true;
}

// ---------------------------------------------------------------- training

std::vector<std::span<const uint8_t>> pre_tokenize(std::span<const uint8_t> bytes, bool split_before_space) {
    std::vector<std::span<const uint8_t>> out;
    if (bytes.empty()) return out;
    if (!split_before_space) {
        out.push_back(bytes);
        return out;
    }
    size_t start = 0;
    for (size_t i = 1; i < bytes.size(); ++i) {
        if (bytes[i] == ' ') {
            out.push_back(bytes.subspan(start, i - start));
            start = i;
        }
    }
    out.push_back(bytes.subspan(start));
    return out;
}

SubwordVocab train_bpe(const std::vector<ByteSeq> & corpus, int32_t vocab_size, bool split_before_space,
                       int64_t min_count) {
    if (vocab_size < 256) throw InputError("train_bpe: vocab_size must be at least 256");
    if (min_count < 1) throw InputError("train_bpe: min_count must be positive");
    SubwordVocab v = SubwordVocab::byte_level(split_before_space);
    const int64_t wanted = std::max<int64_t>(0, int64_t{vocab_size} - SubwordVocab::kFirstMerge);

    // Unique pre-tokens with multiplicities.
    std::map<std::string, int64_t> chunk_count;
    for (const ByteSeq & doc : corpus)
        for (auto c : pre_tokenize(doc, split_before_space)) ++chunk_count[std::string(c.begin(), c.end())];
    std::vector<std::vector<TokenId>> seqs;
    std::vector<int64_t> freq;
    for (const auto & [s, c] : chunk_count) {
        seqs.emplace_back(s.begin(), s.end());
        for (auto & t : seqs.back()) t = static_cast<uint8_t>(t);
        freq.push_back(c);
    }

    std::unordered_set<uint64_t> forbidden;
    std::unordered_map<uint64_t, int64_t> counts;
    while (static_cast<int64_t>(v.merges_.size()) < wanted) {
        counts.clear();
        for (size_t k = 0; k < seqs.size(); ++k)
            for (size_t i = 0; i + 1 < seqs[k].size(); ++i)
                counts[SubwordVocab::pair_key(seqs[k][i], seqs[k][i + 1])] += freq[k];

        uint64_t best = 0;
        int64_t best_count = 0;
        for (const auto & [key, c] : counts) {
            if (c < min_count || forbidden.count(key)) continue;
            if (c > best_count || (c == best_count && key < best)) {
                best = key;
                best_count = c;
            }
        }
        if (best_count == 0) {
            v.truncated_ = true;
            break;
        }
        const TokenId l = static_cast<TokenId>(best >> 32), r = static_cast<TokenId>(best & 0xffffffffu);
        if (v.find(v.tokens_[l] + v.tokens_[r])) {
            forbidden.insert(best);
            continue;
        }
        const TokenId id = v.add_merge(l, r);
        for (auto & s : seqs) {
            size_t w = 0;
            for (size_t i = 0; i < s.size();) {
                if (i + 1 < s.size() && s[i] == l && s[i + 1] == r) {
                    s[w++] = id;
                    i += 2;
                } else {
                    s[w++] = s[i++];
                }
            }
            s.resize(w);
        }
    }
    return v;
}

BoundaryMask boundary_mask_from_tokens(const SubwordVocab & vocab, std::span<const TokenId> tokens) {
    std::vector<uint8_t> f;
    for (TokenId id : tokens) {
        const size_t len = vocab.bytes_of(id).size();
        if (len == 0) continue;
        f.insert(f.end(), len - 1, 0);
        f.push_back(1);
    }
    return BoundaryMask(std::move(f));
}

BoundaryMask subword_boundary_mask(const SubwordVocab & vocab, std::span<const uint8_t> x) {
    if (x.empty()) throw InputError("subword_boundary_mask: empty input");
    return boundary_mask_from_tokens(vocab, vocab.encode(x));
}

// ---------------------------------------------------------------- suffix index

SuffixIndex::SuffixIndex(const SubwordVocab & vocab) {
    nodes_.emplace_back();
    for (TokenId id = 0; id < vocab.size(); ++id) {
        if (vocab.is_special(id)) continue;
        const std::string & s = vocab.bytes_of(id);
        int32_t cur = 0;
        for (auto it = s.rbegin(); it != s.rend(); ++it) {
            const uint8_t b = static_cast<uint8_t>(*it);
            int32_t nxt = child(cur, b);
            if (nxt < 0) {
                nxt = static_cast<int32_t>(nodes_.size());
                nodes_[cur].children.emplace_back(b, nxt);
                nodes_.emplace_back();
            }
            cur = nxt;
        }
        nodes_[cur].token = id;
    }
}

int32_t SuffixIndex::child(int32_t node, uint8_t b) const {
    for (const auto & [c, n] : nodes_[node].children)
        if (c == b) return n;
    return -1;
}

TokenId SuffixIndex::longest_suffix_token(std::span<const uint8_t> x, size_t i) const {
    if (i >= x.size()) throw InputError("longest_suffix_token: position out of range");
    TokenId best = -1;
    int32_t cur = 0;
    for (size_t k = i + 1; k-- > 0;) {
        cur = child(cur, x[k]);
        if (cur < 0) break;
        if (nodes_[cur].token >= 0) best = nodes_[cur].token;
    }
    return best; // every single byte is a token, so best >= 0
}

std::vector<TokenId> SuffixIndex::suffix_ids(std::span<const uint8_t> x) const {
    std::vector<TokenId> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = longest_suffix_token(x, i);
    return out;
}

} // namespace bolmo
