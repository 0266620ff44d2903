#pragma once

#include "bolmo/tokenizer.h"

#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace bolmo {

enum class MergeKind { Subword, Bpe, Entropy, CrossEntropy };
enum class ScoreKind { Entropy, CrossEntropy };

const char * merge_kind_name(MergeKind k);
MergeKind parse_merge_kind(const std::string & s);

// Scores every patch of a subword-segmented text, in nats. Entropy is the
// entropy of the predictive distribution over the token at that patch;
// cross-entropy is -log p of the token actually there.
class AuxScorer {
public:
    virtual ~AuxScorer() = default;
    virtual std::vector<double> patch_scores(std::span<const uint8_t> x, const BoundaryMask & mask,
                                             ScoreKind kind) const = 0;
};

struct MergeStrategy {
    MergeKind kind = MergeKind::Subword;
    double target_compression = 0.0; // bytes per patch
    const AuxScorer * aux = nullptr;
};

// Throws ConfigError if the strategy is malformed given the corpus-average
// subword bytes-per-patch.
void validate_strategy(const MergeStrategy & s, double subword_compression);

constexpr int64_t kUnlimited = std::numeric_limits<int64_t>::max();

// Per-example BPE over patches: repeatedly merges every non-overlapping
// occurrence (left to right) of the most frequent adjacent patch pair, with
// pairs compared by byte content. Ties go to the pair occurring leftmost.
// Stops once bytes/patch >= t, one patch remains, or max_iterations ran.
BoundaryMask merge_bpe_per_example(const BoundaryMask & mask, std::span<const uint8_t> x, double t,
                                   int64_t max_iterations = kUnlimited);

// Merges the adjacent pair with the smallest summed score, one pair per
// iteration, leftmost on ties; a merged patch scores the sum of its parts.
BoundaryMask merge_by_scores(const BoundaryMask & mask, const std::vector<double> & scores, double t,
                             int64_t max_iterations = kUnlimited);

BoundaryMask merge_entropy(const BoundaryMask & mask, std::span<const uint8_t> x, double t, const AuxScorer * aux,
                           int64_t max_iterations = kUnlimited);
BoundaryMask merge_cross_entropy(const BoundaryMask & mask, std::span<const uint8_t> x, double t,
                                 const AuxScorer * aux, int64_t max_iterations = kUnlimited);

// Supervision mask for one document under the given strategy.
BoundaryMask supervision_mask(const MergeStrategy & s, const SubwordVocab & vocab, std::span<const uint8_t> x);

// Total bytes / total patches.
double attained_compression(const std::vector<BoundaryMask> & masks);

// Run-length text form: "<n> <first bit> <run> <run> ..." with runs of
// alternating bits.
std::string mask_to_rle(const BoundaryMask & m);
BoundaryMask mask_from_rle(const std::string & line);
void write_masks(std::ostream & os, const std::vector<BoundaryMask> & masks);
std::vector<BoundaryMask> read_masks(std::istream & is);

} // namespace bolmo
