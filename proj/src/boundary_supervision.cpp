#include "bolmo/boundary_supervision.h"

#include "bolmo/errors.h"

#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace bolmo {

const char * merge_kind_name(MergeKind k) {
    switch (k) {
    case MergeKind::Subword: return "subword";
    case MergeKind::Bpe: return "bpe";
    case MergeKind::Entropy: return "entropy";
    case MergeKind::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

MergeKind parse_merge_kind(const std::string & s) {
    if (s == "subword") return MergeKind::Subword;
    if (s == "bpe") return MergeKind::Bpe;
    if (s == "entropy") return MergeKind::Entropy;
    if (s == "cross_entropy" || s == "xent" || s == "ce") return MergeKind::CrossEntropy;
    throw ConfigError("unknown merge strategy: " + s);
}

void validate_strategy(const MergeStrategy & s, double subword_compression) {
    if (s.kind == MergeKind::Subword) return;
    if (!(s.target_compression > 0.0)) throw ConfigError("merge target must be positive");
    if (s.target_compression < subword_compression)
        throw ConfigError("merge target below the subword compression of the corpus");
    const bool needs_aux = s.kind == MergeKind::Entropy || s.kind == MergeKind::CrossEntropy;
    if (needs_aux && !s.aux) throw ConfigError("entropy merges need an auxiliary scorer");
}

namespace {

void check_mask(const BoundaryMask & mask, size_t n) {
    if (mask.size() != n) throw InputError("mask length does not match the text");
    if (n == 0) throw InputError("empty text");
    if (!mask[n - 1]) throw InputError("mask must close a patch at the final byte");
}

bool reached(size_t bytes, size_t patches, double t) {
    return patches <= 1 || static_cast<double>(bytes) >= t * static_cast<double>(patches);
}

} // namespace

BoundaryMask merge_bpe_per_example(const BoundaryMask & mask, std::span<const uint8_t> x, double t,
                                   int64_t max_iterations) {
    check_mask(mask, x.size());
    if (!(t > 0.0)) throw InputError("target compression must be positive");
    // Patches as [start, end) byte ranges.
    std::vector<std::pair<size_t, size_t>> p;
    size_t start = 0;
    for (size_t i = 0; i < x.size(); ++i)
        if (mask[i]) {
            p.emplace_back(start, i + 1);
            start = i + 1;
        }
    auto text = [&](const std::pair<size_t, size_t> & r) {
        return std::string(x.begin() + static_cast<long>(r.first), x.begin() + static_cast<long>(r.second));
    };

    for (int64_t it = 0; it < max_iterations && !reached(x.size(), p.size(), t); ++it) {
        struct Stat {
            int64_t count = 0;
            size_t first = 0;
        };
        std::map<std::pair<std::string, std::string>, Stat> stats;
        for (size_t i = 0; i + 1 < p.size(); ++i) {
            auto & s = stats[{text(p[i]), text(p[i + 1])}];
            if (s.count++ == 0) s.first = i;
        }
        const std::pair<std::string, std::string> * best = nullptr;
        Stat best_stat;
        for (const auto & [key, s] : stats) {
            if (!best || s.count > best_stat.count || (s.count == best_stat.count && s.first < best_stat.first)) {
                best = &key;
                best_stat = s;
            }
        }
        std::vector<std::pair<size_t, size_t>> next;
        for (size_t i = 0; i < p.size();) {
            if (i + 1 < p.size() && text(p[i]) == best->first && text(p[i + 1]) == best->second) {
                next.emplace_back(p[i].first, p[i + 1].second);
                i += 2;
            } else {
                next.push_back(p[i++]);
            }
        }
        p = std::move(next);
    }
    std::vector<uint8_t> flags(x.size(), 0);
    for (const auto & r : p) flags[r.second - 1] = 1;
    return BoundaryMask(std::move(flags));
}

BoundaryMask merge_by_scores(const BoundaryMask & mask, const std::vector<double> & scores, double t,
                             int64_t max_iterations) {
    check_mask(mask, mask.size());
    if (!(t > 0.0)) throw InputError("target compression must be positive");
    auto ends = mask.patch_ends();
    const size_t np = ends.size();
    if (scores.size() != np) throw InputError("need one score per patch");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericError("non-finite patch score");

    std::vector<double> score = scores;
    std::vector<int64_t> prev(np), next(np);
    for (size_t i = 0; i < np; ++i) {
        prev[i] = static_cast<int64_t>(i) - 1;
        next[i] = i + 1 < np ? static_cast<int64_t>(i) + 1 : -1;
    }
    // (pair sum, left patch index); the set order gives min sum, leftmost on ties.
    std::set<std::pair<double, int64_t>> heap;
    auto pair_sum = [&](int64_t l) { return score[l] + score[next[l]]; };
    for (int64_t l = 0; l + 1 < static_cast<int64_t>(np); ++l) heap.emplace(pair_sum(l), l);

    std::vector<uint8_t> flags = mask.flags();
    size_t patches = np;
    for (int64_t it = 0; it < max_iterations && !reached(mask.size(), patches, t); ++it) {
        const int64_t l = heap.begin()->second;
        const int64_t r = next[l];
        heap.erase(heap.begin());
        if (prev[l] >= 0) heap.erase({pair_sum(prev[l]), prev[l]});
        if (next[r] >= 0) heap.erase({pair_sum(r), r});
        flags[ends[l]] = 0; // the right patch keeps its closing flag
        score[l] += score[r];
        next[l] = next[r];
        if (next[r] >= 0) prev[next[r]] = l;
        if (prev[l] >= 0) heap.emplace(pair_sum(prev[l]), prev[l]);
        if (next[l] >= 0) heap.emplace(pair_sum(l), l);
        // the merged patch now ends where r ended
        ends[l] = ends[r];
        --patches;
    }
    return BoundaryMask(std::move(flags));
}

namespace {

BoundaryMask merge_scored(const BoundaryMask & mask, std::span<const uint8_t> x, double t, const AuxScorer * aux,
                          ScoreKind kind, int64_t max_iterations) {
    if (!aux) throw InputError("entropy merges need an auxiliary scorer");
    check_mask(mask, x.size());
    if (reached(x.size(), static_cast<size_t>(mask.count()), t)) return mask;
    return merge_by_scores(mask, aux->patch_scores(x, mask, kind), t, max_iterations);
}

} // namespace

BoundaryMask merge_entropy(const BoundaryMask & mask, std::span<const uint8_t> x, double t, const AuxScorer * aux,
                           int64_t max_iterations) {
    return merge_scored(mask, x, t, aux, ScoreKind::Entropy, max_iterations);
}

BoundaryMask merge_cross_entropy(const BoundaryMask & mask, std::span<const uint8_t> x, double t,
                                 const AuxScorer * aux, int64_t max_iterations) {
    return merge_scored(mask, x, t, aux, ScoreKind::CrossEntropy, max_iterations);
}

BoundaryMask supervision_mask(const MergeStrategy & s, const SubwordVocab & vocab, std::span<const uint8_t> x) {
    BoundaryMask base = subword_boundary_mask(vocab, x);
    switch (s.kind) {
    case MergeKind::Subword: return base;
    case MergeKind::Bpe: return merge_bpe_per_example(base, x, s.target_compression);
    case MergeKind::Entropy: return merge_entropy(base, x, s.target_compression, s.aux);
    case MergeKind::CrossEntropy: return merge_cross_entropy(base, x, s.target_compression, s.aux);
    }
    return base;
}

double attained_compression(const std::vector<BoundaryMask> & masks) {
    if (masks.empty()) throw InputError("attained_compression: empty corpus");
    int64_t bytes = 0, patches = 0;
    for (const auto & m : masks) {
        bytes += static_cast<int64_t>(m.size());
        patches += m.count();
    }
    if (patches == 0) throw InputError("attained_compression: no patches");
    return static_cast<double>(bytes) / static_cast<double>(patches);
}

std::string mask_to_rle(const BoundaryMask & m) {
    std::ostringstream os;
    os << m.size();
    if (m.empty()) return os.str();
    os << ' ' << (m[0] ? 1 : 0);
    size_t run = 1;
    for (size_t i = 1; i < m.size(); ++i) {
        if (m[i] == m[i - 1]) {
            ++run;
        } else {
            os << ' ' << run;
            run = 1;
        }
    }
    os << ' ' << run;
    return os.str();
}

BoundaryMask mask_from_rle(const std::string & line) {
    std::istringstream is(line);
    size_t n = 0;
    if (!(is >> n)) throw FormatError("rle: missing length");
    std::vector<uint8_t> flags;
    flags.reserve(n);
    if (n > 0) {
        int bit = 0;
        if (!(is >> bit) || (bit != 0 && bit != 1)) throw FormatError("rle: bad first bit");
        size_t run = 0;
        while (is >> run) {
            if (run == 0) throw FormatError("rle: zero-length run");
            flags.insert(flags.end(), run, static_cast<uint8_t>(bit));
            bit ^= 1;
        }
    }
    if (flags.size() != n) throw FormatError("rle: runs do not add up to the length");
    return BoundaryMask(std::move(flags));
}

void write_masks(std::ostream & os, const std::vector<BoundaryMask> & masks) {
    os << "bolmo-masks 1 " << masks.size() << '\n';
    for (const auto & m : masks) os << mask_to_rle(m) << '\n';
}

std::vector<BoundaryMask> read_masks(std::istream & is) {
    std::string header;
    if (!std::getline(is, header)) throw FormatError("masks: missing header");
    std::istringstream hs(header);
    std::string magic;
    int version = 0;
    size_t count = 0;
    if (!(hs >> magic >> version >> count) || magic != "bolmo-masks" || version != 1)
        throw FormatError("masks: bad header");
    std::vector<BoundaryMask> out;
    std::string line;
    for (size_t k = 0; k < count; ++k) {
        if (!std::getline(is, line)) throw FormatError("masks: truncated");
        out.push_back(mask_from_rle(line));
    }
    return out;
}

} // namespace bolmo
