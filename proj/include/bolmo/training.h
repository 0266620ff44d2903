#pragma once

#include "bolmo/boundary_supervision.h"
#include "bolmo/data.h"
#include "bolmo/graph.h"
#include "bolmo/kv.h"
#include "bolmo/model.h"
#include "bolmo/optim.h"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

namespace bolmo {

enum class Reduction { Mean, Sum };

struct LossWeights {
    double boundary = 4.0;
    double encoder = 1.0;
    double distill = 1.0;
    double ce = 1.0;
};

struct LossBreakdown {
    double l_boundary = 0.0;
    double l_encoder = 0.0;
    double l_distill = 0.0;
    double l_ce = 0.0;
    double total = 0.0;
};

constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------- losses

// Binary cross-entropy of scores p against 0/1 targets, p clamped to
// [1e-7, 1 - 1e-7].
Var loss_boundary(Graph & g, Var p, const std::vector<uint8_t> & target, Reduction r = Reduction::Mean);

// -(y^(1/tau) log yhat^(1/tau) + (1 - y^(1/tau)) log(1 - yhat^(1/tau))) from
// log yhat and log y.
double f_temp_bce(double student_logp, double teacher_logp, double tau = 5.0);
Var f_temp_bce(Graph & g, Var student_logp, const Tensor & teacher_logp, double tau = 5.0);

// Mean over patches of the L2 distance between the pooled representations
// after n global blocks and the teacher's embeddings after the same blocks.
// Global weights take part only as constants.
Var loss_encoder(ParamBinder & b, Var h, const Tensor & teacher_probe, const SeqLayout & patches,
                 const ModelConfig & c, int64_t n);

// For every byte position, the patch its next-symbol prediction falls in
// (the patch holding byte j+1), or -1 at the last byte of a document.
std::vector<int64_t> prediction_patch(const SeqLayout & layout, const BoundaryMask & mask);

// Student patch log-likelihoods (sum of fused-symbol log-probs over the
// positions predicting the patch's bytes) against teacher token
// log-likelihoods, one f_temp_bce term per predicted patch.
Var loss_decoder_distill(Graph & g, Var logp, const std::vector<int32_t> & targets,
                         const std::vector<int64_t> & patch_of, const std::vector<double> & teacher_token_logp,
                         double tau = 5.0, Reduction r = Reduction::Mean);
// Student log-likelihood of every predicted patch.
Var patch_log_likelihood(Graph & g, Var logp, const std::vector<int32_t> & targets,
                         const std::vector<int64_t> & patch_of, std::vector<int64_t> * patch_ids = nullptr);

// Mean next-fused-symbol cross-entropy over positions with a target.
Var loss_ce(Graph & g, Var logp, const std::vector<int32_t> & targets);

// ---------------------------------------------------------------- teacher

struct TeacherOutputs {
    Tensor states;                  // final normed states [T, d]
    Tensor probe;                   // embeddings after n_probe blocks [T, d]
    std::vector<double> token_logp; // log p(token i | tokens < i); NaN at document starts
};

TeacherOutputs teacher_outputs(const ParamStore & teacher, std::span<const TokenId> tokens,
                               const SeqLayout & token_layout, const ModelConfig & c);

// Teacher cross-entropy per predicted token, in nats.
struct TeacherEval {
    double nats_per_token = 0.0;
    double nats_per_byte = 0.0; // same total, divided by content bytes + 1 (EOT)
    int64_t tokens = 0;
};
TeacherEval evaluate_teacher(const ParamStore & teacher, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                             int64_t batch_bytes = 2048);

// Entropy / cross-entropy patch scores from a teacher for entropy merges.
class TeacherScorer : public AuxScorer {
public:
    TeacherScorer(const ParamStore & teacher, const SubwordVocab & vocab, const ModelConfig & c);
    std::vector<double> patch_scores(std::span<const uint8_t> x, const BoundaryMask & mask,
                                     ScoreKind kind) const override;

private:
    const ParamStore & teacher_;
    const SubwordVocab & vocab_;
    ModelConfig c_;
};

// ---------------------------------------------------------------- training

struct TrainConfig {
    int stage = 1;
    int64_t steps = 1000;
    int64_t batch_bytes = 768;
    int64_t max_bytes = 256;
    int64_t warmup_steps = 100;
    double lr = 2e-3;        // peak lr of the local group
    double global_lr_ratio = 0.5; // stage 2 global-group lr relative to local
    AdamWConfig optim;
    LossWeights weights;
    double tau = 5.0;
    uint64_t seed = 0;
};

// "train.*" keys; unknown train keys are rejected, other keys ignored.
KvMap train_config_to_kv(const TrainConfig & cfg);
TrainConfig train_config_from_kv(const KvMap & kv, TrainConfig base = {});

struct GroupLr {
    double local = 0.0;
    double global = 0.0;
};

// Linear warmup to peak over warmup steps, then linear decay to 0 at total.
double lr_schedule(double peak, int64_t warmup, int64_t total, int64_t step);
GroupLr lr_at(const TrainConfig & cfg, int64_t step);

struct StepResult {
    int64_t step = 0;
    LossBreakdown loss;
    double boundary_accuracy = 0.0; // over non-forced positions
    double compression = 0.0;       // content bytes per content patch
    double grad_norm = 0.0;
    GroupLr lr;
};

// Stage-1 loss graph over one batch; global parameters enter as constants.
struct Stage1Graph {
    Var total;
    LossBreakdown loss;
    BoundaryScores scores;
};
Stage1Graph stage1_losses(ParamBinder & b, const PackedBatch & batch, const TeacherOutputs & teacher,
                          const ModelConfig & c, const LossWeights & w, double tau);

struct Stage2Graph {
    Var total;
    LossBreakdown loss;
    ForwardOut out;
};
Stage2Graph stage2_losses(ParamBinder & b, const PackedBatch & batch, const ModelConfig & c, const LossWeights & w);

StepResult stage1_step(ParamStore & params, AdamWState & opt, const PackedBatch & batch,
                       const TeacherOutputs & teacher, const ModelConfig & c, const TrainConfig & cfg, int64_t step);
StepResult stage2_step(ParamStore & params, AdamWState & opt, const PackedBatch & batch, const ModelConfig & c,
                       const TrainConfig & cfg, int64_t step);

using ParamFilter = std::function<bool(const std::string &)>;

// Next-token cross-entropy step on the teacher; only names passing
// `trainable` are updated.
double teacher_step(ParamStore & teacher, AdamWState & opt, const PackedBatch & batch, const ModelConfig & c,
                    const TrainConfig & cfg, int64_t step, const ParamFilter & trainable = nullptr);

// Training loops. Each step appends one JSON record to `metrics` if given.
ParamStore train_teacher(ParamStore teacher, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                         const TrainConfig & cfg, std::ostream * metrics = nullptr,
                         const ParamFilter & trainable = nullptr);
ParamStore run_stage1(ParamStore bolmo, const ParamStore & teacher, const std::vector<EncodedDoc> & docs,
                      const ModelConfig & c, const TrainConfig & cfg, std::ostream * metrics = nullptr);
ParamStore run_stage2(ParamStore bolmo, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                      const TrainConfig & cfg, std::ostream * metrics = nullptr);

void write_metrics(std::ostream & os, const StepResult & r);

// ---------------------------------------------------------------- evaluation

enum class PoolMask { Predicted, Teacher };

struct EvalResult {
    double bits_per_byte = 0.0;     // fused cross-entropy / ln 2, per predicted position
    double boundary_error = 0.0;    // vs the target mask, non-forced positions
    double compression = 0.0;       // content bytes per content patch
    int64_t positions = 0;
};

// Boundary error is measured against `supervision` targets when
// `against_supervision`, otherwise against the teacher mask.
EvalResult evaluate(const ParamStore & bolmo, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                    PoolMask pool = PoolMask::Predicted, bool against_supervision = false,
                    int64_t batch_bytes = 2048);

// Mean |student patch log-lik - teacher token log-lik| over predicted
// patches, pooling with the teacher mask.
double distill_gap(const ParamStore & bolmo, const ParamStore & teacher, const std::vector<EncodedDoc> & docs,
                   const ModelConfig & c, int64_t batch_bytes = 2048);

// Non-forced boundary agreement and content compression of a mask.
double boundary_accuracy(const Tensor & p, const std::vector<int64_t> & positions, const BoundaryMask & target,
                         double threshold);
double content_compression(const BoundaryMask & mask, const SeqLayout & layout);

} // namespace bolmo
