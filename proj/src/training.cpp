#include "bolmo/training.h"

#include "bolmo/errors.h"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <ostream>

namespace bolmo {

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

double scalar_log1mexp(double x) { return x > -0.6931471805599453 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x)); }

std::vector<uint8_t> targets_at(const BoundaryMask & mask, const std::vector<int64_t> & positions) {
    std::vector<uint8_t> t;
    t.reserve(positions.size());
    for (int64_t p : positions) t.push_back(mask[static_cast<size_t>(p)]);
    return t;
}

Var weighted(Graph & g, Var total, Var term, double w) { return w == 0.0 ? total : g.add(total, g.scale(term, w)); }

} // namespace

// ---------------------------------------------------------------- losses

Var loss_boundary(Graph & g, Var p, const std::vector<uint8_t> & target, Reduction r) {
    const Tensor & P = g.value(p);
    if (P.numel() != static_cast<int64_t>(target.size())) throw ShapeError("loss_boundary: length mismatch");
    if (target.empty()) return g.constant(Tensor::scalar(0.0));
    Tensor m({P.numel()}), om({P.numel()});
    for (size_t i = 0; i < target.size(); ++i) {
        m[static_cast<int64_t>(i)] = target[i] ? 1.0 : 0.0;
        om[static_cast<int64_t>(i)] = target[i] ? 0.0 : 1.0;
    }
    Var pc = g.clamp(p, kProbClamp, 1.0 - kProbClamp);
    Var terms = g.add(g.mul(g.log(pc), g.constant(std::move(m))),
                      g.mul(g.log(g.shift(g.neg(pc), 1.0)), g.constant(std::move(om))));
    return g.neg(r == Reduction::Mean ? g.mean(terms) : g.sum(terms));
}

double f_temp_bce(double student_logp, double teacher_logp, double tau) {
    const double inv = 1.0 / tau;
    const double a = student_logp * inv, b = teacher_logp * inv;
    const double ac = std::min(a, std::log1p(-kProbClamp));
    return -(std::exp(b) * a + (-std::expm1(b)) * scalar_log1mexp(ac));
}

Var f_temp_bce(Graph & g, Var student_logp, const Tensor & teacher_logp, double tau) {
    if (g.value(student_logp).shape() != teacher_logp.shape()) throw ShapeError("f_temp_bce: shape mismatch");
    Tensor y(teacher_logp.shape()), ny(teacher_logp.shape());
    const double inv = 1.0 / tau;
    for (int64_t i = 0; i < y.numel(); ++i) {
        const double b = teacher_logp[i] * inv;
        y[i] = std::exp(b);
        ny[i] = -std::expm1(b);
    }
    Var a = g.scale(student_logp, inv);
    Var l1 = g.log1mexp(g.clamp(a, -std::numeric_limits<double>::infinity(), std::log1p(-kProbClamp)));
    return g.neg(g.add(g.mul(a, g.constant(std::move(y))), g.mul(l1, g.constant(std::move(ny)))));
}

Var loss_encoder(ParamBinder & b, Var h, const Tensor & teacher_probe, const SeqLayout & patches,
                 const ModelConfig & c, int64_t n) {
    Graph & g = b.graph();
    if (n < 0 || n > c.global.layers) throw ConfigError("loss_encoder: n exceeds the global layer count");
    if (g.value(h).shape() != teacher_probe.shape()) throw ShapeError("loss_encoder: patch/token misalignment");
    Var x = global_prefix(b, h, patches, c, n);
    return g.mean(g.row_norm(g.sub(x, g.constant(teacher_probe))));
}

std::vector<int64_t> prediction_patch(const SeqLayout & layout, const BoundaryMask & mask) {
    if (static_cast<int64_t>(mask.size()) != layout.size()) throw ShapeError("prediction_patch: mask length");
    std::vector<int64_t> out(mask.size(), -1);
    int64_t closed = 0; // boundaries in [0, j]
    for (int64_t k = 0; k < layout.docs(); ++k)
        for (int64_t j = layout.offsets[k]; j < layout.offsets[k + 1]; ++j) {
            closed += mask[static_cast<size_t>(j)];
            if (j + 1 < layout.offsets[k + 1]) out[static_cast<size_t>(j)] = closed;
        }
    return out;
}

Var patch_log_likelihood(Graph & g, Var logp, const std::vector<int32_t> & targets,
                         const std::vector<int64_t> & patch_of, std::vector<int64_t> * patch_ids) {
    if (targets.size() != patch_of.size() || static_cast<int64_t>(targets.size()) != g.value(logp).rows())
        throw ShapeError("patch_log_likelihood: length mismatch");
    std::vector<int64_t> rows, cols, groups, ids;
    for (size_t j = 0; j < targets.size(); ++j) {
        if ((targets[j] < 0) != (patch_of[j] < 0)) throw InputError("patch_log_likelihood: target/patch misalignment");
        if (targets[j] < 0) continue;
        rows.push_back(static_cast<int64_t>(j));
        cols.push_back(targets[j]);
        if (ids.empty() || ids.back() != patch_of[j]) {
            if (!ids.empty() && patch_of[j] < ids.back()) throw InputError("patch_log_likelihood: patches out of order");
            ids.push_back(patch_of[j]);
        }
        groups.push_back(static_cast<int64_t>(ids.size()) - 1);
    }
    if (rows.empty()) throw InputError("patch_log_likelihood: nothing to predict");
    Var picked = g.pick(logp, rows, cols);
    if (patch_ids) *patch_ids = ids;
    return g.segment_sum(picked, groups, static_cast<int64_t>(ids.size()));
}

Var loss_decoder_distill(Graph & g, Var logp, const std::vector<int32_t> & targets,
                         const std::vector<int64_t> & patch_of, const std::vector<double> & teacher_token_logp,
                         double tau, Reduction r) {
    std::vector<int64_t> ids;
    Var ll = patch_log_likelihood(g, logp, targets, patch_of, &ids);
    Tensor t({static_cast<int64_t>(ids.size())});
    for (size_t i = 0; i < ids.size(); ++i) {
        const auto id = static_cast<size_t>(ids[i]);
        if (id >= teacher_token_logp.size() || std::isnan(teacher_token_logp[id]))
            throw InputError("loss_decoder_distill: patch has no teacher token");
        t[static_cast<int64_t>(i)] = teacher_token_logp[id];
    }
    Var f = f_temp_bce(g, ll, t, tau);
    return r == Reduction::Mean ? g.mean(f) : g.sum(f);
}

Var loss_ce(Graph & g, Var logp, const std::vector<int32_t> & targets) {
    if (static_cast<int64_t>(targets.size()) != g.value(logp).rows()) throw ShapeError("loss_ce: length mismatch");
    std::vector<int64_t> rows, cols;
    for (size_t j = 0; j < targets.size(); ++j) {
        if (targets[j] < 0) continue;
        rows.push_back(static_cast<int64_t>(j));
        cols.push_back(targets[j]);
    }
    if (rows.empty()) throw InputError("loss_ce: nothing to predict");
    return g.neg(g.mean(g.pick(logp, rows, cols)));
}

// ---------------------------------------------------------------- teacher

TeacherOutputs teacher_outputs(const ParamStore & teacher, std::span<const TokenId> tokens,
                               const SeqLayout & token_layout, const ModelConfig & c) {
    if (static_cast<int64_t>(tokens.size()) != token_layout.size()) throw ShapeError("teacher_outputs: layout size");
    Graph g;
    ParamBinder b(g, teacher);
    std::vector<int64_t> ids(tokens.begin(), tokens.end());
    for (int64_t id : ids)
        if (id < 0 || id >= c.subword_vocab) throw InputError("teacher_outputs: token id out of range");
    Var emb = g.gather_rows(b("tok_embed.weight"), ids);
    GlobalOut o = global_forward(b, emb, token_layout, c, c.n_probe);
    Var logp = g.log_softmax(g.matmul(o.h_hat, b("unembed.weight")));
    TeacherOutputs out;
    out.states = g.value(o.h_hat);
    out.probe = g.value(*o.probe);
    out.token_logp.assign(tokens.size(), kNaN);
    const Tensor & L = g.value(logp);
    const auto starts = token_layout.seg_start();
    for (size_t i = 1; i < tokens.size(); ++i)
        if (!starts[i]) out.token_logp[i] = L.at(static_cast<int64_t>(i) - 1, tokens[i]);
    return out;
}

TeacherEval evaluate_teacher(const ParamStore & teacher, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                             int64_t batch_bytes) {
    TeacherEval ev;
    double nats = 0.0;
    int64_t bytes = 0;
    for (const auto & batch : sequential_batches(docs, batch_bytes)) {
        const TeacherOutputs t = teacher_outputs(teacher, batch.tokens, batch.token_layout, c);
        for (double v : t.token_logp)
            if (!std::isnan(v)) {
                nats -= v;
                ++ev.tokens;
            }
        bytes += batch.layout.size() - batch.layout.docs();
    }
    if (ev.tokens == 0) throw InputError("evaluate_teacher: no tokens");
    ev.nats_per_token = nats / static_cast<double>(ev.tokens);
    ev.nats_per_byte = nats / static_cast<double>(bytes);
    return ev;
}

TeacherScorer::TeacherScorer(const ParamStore & teacher, const SubwordVocab & vocab, const ModelConfig & c)
    : teacher_(teacher), vocab_(vocab), c_(c) {}

std::vector<double> TeacherScorer::patch_scores(std::span<const uint8_t> x, const BoundaryMask & mask,
                                                ScoreKind kind) const {
    if (mask.size() != x.size()) throw ShapeError("TeacherScorer: mask length");
    std::vector<TokenId> toks{SubwordVocab::kBos};
    size_t start = 0;
    for (int64_t len : mask.patch_lengths()) {
        const std::string_view piece(reinterpret_cast<const char *>(x.data()) + start, static_cast<size_t>(len));
        auto id = vocab_.find(piece);
        if (!id) throw InputError("TeacherScorer: patch is not a vocabulary token");
        toks.push_back(*id);
        start += static_cast<size_t>(len);
    }
    Graph g;
    ParamBinder b(g, teacher_);
    std::vector<int64_t> ids(toks.begin(), toks.end());
    Var states = global_forward(b, g.gather_rows(b("tok_embed.weight"), ids),
                                SeqLayout::single(static_cast<int64_t>(toks.size())), c_).h_hat;
    const Tensor & L = g.value(g.log_softmax(g.matmul(states, b("unembed.weight"))));
    std::vector<double> out;
    for (size_t i = 1; i < toks.size(); ++i) {
        const auto r = static_cast<int64_t>(i) - 1;
        if (kind == ScoreKind::CrossEntropy) {
            out.push_back(-L.at(r, toks[i]));
        } else {
            double h = 0.0;
            for (int64_t k = 0; k < L.cols(); ++k) h -= std::exp(L.at(r, k)) * L.at(r, k);
            out.push_back(h);
        }
    }
    return out;
}

// ---------------------------------------------------------------- schedule

namespace {

template <class C, class F>
void visit_train_fields(C & c, F && f) {
    f("train.steps", c.steps);
    f("train.batch_bytes", c.batch_bytes);
    f("train.max_bytes", c.max_bytes);
    f("train.warmup_steps", c.warmup_steps);
    f("train.lr", c.lr);
    f("train.global_lr_ratio", c.global_lr_ratio);
    f("train.tau", c.tau);
    f("train.beta1", c.optim.beta1);
    f("train.beta2", c.optim.beta2);
    f("train.eps", c.optim.eps);
    f("train.weight_decay", c.optim.weight_decay);
    f("train.grad_clip", c.optim.grad_clip);
    f("train.lambda_boundary", c.weights.boundary);
    f("train.lambda_encoder", c.weights.encoder);
    f("train.lambda_distill", c.weights.distill);
    f("train.lambda_ce", c.weights.ce);
}

} // namespace

KvMap train_config_to_kv(const TrainConfig & cfg) {
    KvMap kv;
    TrainConfig copy = cfg;
    visit_train_fields(copy, [&](const char * k, auto & v) { kv[k] = kv_format(v); });
    return kv;
}

TrainConfig train_config_from_kv(const KvMap & kv, TrainConfig base) {
    std::map<std::string, bool> known;
    visit_train_fields(base, [&](const char * k, auto & v) {
        known[k] = true;
        auto it = kv.find(k);
        if (it != kv.end()) kv_parse(k, it->second, v);
    });
    for (const auto & [k, v] : kv)
        if (starts_with(k, "train.") && !known.count(k)) throw ConfigError("unknown config key: " + k);
    if (base.steps < 0 || base.warmup_steps < 0) throw ConfigError("train: steps must be non-negative");
    if (base.batch_bytes <= 0 || base.max_bytes < 3) throw ConfigError("train: batch_bytes/max_bytes too small");
    if (!(base.lr >= 0) || !(base.global_lr_ratio >= 0) || !(base.tau > 0))
        throw ConfigError("train: lr, global_lr_ratio and tau must be non-negative (tau positive)");
    const LossWeights & w = base.weights;
    if (w.boundary < 0 || w.encoder < 0 || w.distill < 0 || w.ce < 0)
        throw ConfigError("train: loss weights must be non-negative");
    return base;
}

double lr_schedule(double peak, int64_t warmup, int64_t total, int64_t step) {
    if (step < 0) throw InputError("lr_schedule: negative step");
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return 0.0;
    return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

GroupLr lr_at(const TrainConfig & cfg, int64_t step) {
    GroupLr lr;
    lr.local = lr_schedule(cfg.lr, cfg.warmup_steps, cfg.steps, step);
    lr.global = cfg.stage == 2 ? lr.local * cfg.global_lr_ratio : 0.0;
    return lr;
}

// ---------------------------------------------------------------- steps

double boundary_accuracy(const Tensor & p, const std::vector<int64_t> & positions, const BoundaryMask & target,
                         double threshold) {
    if (positions.empty()) return 1.0;
    int64_t ok = 0;
    for (size_t k = 0; k < positions.size(); ++k) {
        const bool pred = p[static_cast<int64_t>(k)] > threshold;
        ok += pred == static_cast<bool>(target[static_cast<size_t>(positions[k])]);
    }
    return static_cast<double>(ok) / static_cast<double>(positions.size());
}

double content_compression(const BoundaryMask & mask, const SeqLayout & layout) {
    const int64_t patches = mask.count() - layout.docs();
    if (patches <= 0) throw InputError("content_compression: no content patches");
    return static_cast<double>(layout.size() - layout.docs()) / static_cast<double>(patches);
}

Stage1Graph stage1_losses(ParamBinder & b, const PackedBatch & batch, const TeacherOutputs & teacher,
                          const ModelConfig & c, const LossWeights & w, double tau) {
    Graph & g = b.graph();
    const auto seg = batch.layout.seg_start();
    if (batch.teacher_mask.count() != static_cast<int64_t>(batch.tokens.size()))
        throw InputError("stage1: teacher mask and tokens disagree");
    Stage1Graph s;
    Var e_hat = local_encode(b, embed_bytes(b, batch.bytes, batch.suffix_ids), seg, c);
    s.scores = predict_boundaries(b, e_hat, batch.layout, c);
    Var lb = loss_boundary(g, s.scores.p, targets_at(batch.teacher_mask, s.scores.positions));
    Var h = pool_last(g, e_hat, batch.teacher_mask);
    Var le = loss_encoder(b, h, teacher.probe, batch.token_layout, c, c.n_probe);
    Var total = g.scale(lb, w.boundary);
    total = weighted(g, total, le, w.encoder);
    s.loss.l_boundary = g.value(lb).item();
    s.loss.l_encoder = g.value(le).item();
    if (w.distill != 0.0 || w.ce != 0.0) {
        Var z = depool(b, g.stop_gradient(e_hat), g.constant(teacher.states),
                       depool_index(batch.layout, batch.teacher_mask));
        Var logp = lm_head_fused(b, local_decode(b, z, seg, c), c);
        const auto tg = fused_targets(batch.bytes, batch.teacher_mask, batch.layout);
        Var ld = loss_decoder_distill(g, logp, tg, prediction_patch(batch.layout, batch.teacher_mask),
                                      teacher.token_logp, tau);
        Var lce = loss_ce(g, logp, tg);
        total = weighted(g, total, ld, w.distill);
        total = weighted(g, total, lce, w.ce);
        s.loss.l_distill = g.value(ld).item();
        s.loss.l_ce = g.value(lce).item();
    }
    s.total = total;
    s.loss.total = g.value(total).item();
    return s;
}

Stage2Graph stage2_losses(ParamBinder & b, const PackedBatch & batch, const ModelConfig & c, const LossWeights & w) {
    Graph & g = b.graph();
    Stage2Graph s;
    s.out = forward_full(b, batch.bytes, batch.suffix_ids, batch.layout, c);
    Var lb = loss_boundary(g, s.out.scores.p, targets_at(batch.supervision, s.out.scores.positions));
    Var lce = loss_ce(g, s.out.logp, fused_targets(batch.bytes, s.out.mask, batch.layout));
    s.total = weighted(g, g.scale(lb, w.boundary), lce, w.ce);
    s.loss.l_boundary = g.value(lb).item();
    s.loss.l_ce = g.value(lce).item();
    s.loss.total = g.value(s.total).item();
    return s;
}

StepResult stage1_step(ParamStore & params, AdamWState & opt, const PackedBatch & batch,
                       const TeacherOutputs & teacher, const ModelConfig & c, const TrainConfig & cfg, int64_t step) {
    Graph g;
    ParamBinder b(g, params, [](const std::string & n) { return !is_global_param(n); });
    Stage1Graph s = stage1_losses(b, batch, teacher, c, cfg.weights, cfg.tau);
    if (!std::isfinite(s.loss.total)) throw NumericError("stage1: non-finite loss");
    g.backward(s.total);
    StepResult r;
    r.step = step;
    r.loss = s.loss;
    const Tensor & p = g.value(s.scores.p);
    r.boundary_accuracy = boundary_accuracy(p, s.scores.positions, batch.teacher_mask, c.boundary_threshold);
    r.compression = content_compression(threshold_mask(p, s.scores.positions, batch.layout, c.boundary_threshold),
                                        batch.layout);
    r.lr = lr_at(cfg, step);
    const double lr = r.lr.local;
    r.grad_norm = adamw_step(params, b.gradients(), opt, [lr](const std::string &) { return lr; }, cfg.optim).grad_norm;
    return r;
}

StepResult stage2_step(ParamStore & params, AdamWState & opt, const PackedBatch & batch, const ModelConfig & c,
                       const TrainConfig & cfg, int64_t step) {
    Graph g;
    ParamBinder b(g, params, [](const std::string &) { return true; });
    Stage2Graph s = stage2_losses(b, batch, c, cfg.weights);
    if (!std::isfinite(s.loss.total)) throw NumericError("stage2: non-finite loss");
    g.backward(s.total);
    StepResult r;
    r.step = step;
    r.loss = s.loss;
    r.boundary_accuracy =
        boundary_accuracy(g.value(s.out.scores.p), s.out.scores.positions, batch.supervision, c.boundary_threshold);
    r.compression = content_compression(s.out.mask, batch.layout);
    r.lr = lr_at(cfg, step);
    const GroupLr lr = r.lr;
    r.grad_norm = adamw_step(params, b.gradients(), opt,
                             [lr](const std::string & n) { return is_global_param(n) ? lr.global : lr.local; },
                             cfg.optim)
                      .grad_norm;
    return r;
}

double teacher_step(ParamStore & teacher, AdamWState & opt, const PackedBatch & batch, const ModelConfig & c,
                    const TrainConfig & cfg, int64_t step, const ParamFilter & trainable) {
    Graph g;
    ParamBinder b(g, teacher, trainable ? trainable : [](const std::string &) { return true; });
    TeacherOut o = teacher_forward(b, batch.tokens, batch.token_layout, c);
    std::vector<int64_t> rows, cols;
    const auto starts = batch.token_layout.seg_start();
    for (size_t i = 1; i < batch.tokens.size(); ++i)
        if (!starts[i]) {
            rows.push_back(static_cast<int64_t>(i) - 1);
            cols.push_back(batch.tokens[i]);
        }
    Var loss = g.neg(g.mean(g.pick(o.logp, rows, cols)));
    const double value = g.value(loss).item();
    if (!std::isfinite(value)) throw NumericError("teacher: non-finite loss");
    g.backward(loss);
    const double lr = lr_at(cfg, step).local;
    adamw_step(teacher, b.gradients(), opt, [lr](const std::string &) { return lr; }, cfg.optim);
    return value;
}

// ---------------------------------------------------------------- loops

void write_metrics(std::ostream & os, const StepResult & r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["total"] = r.loss.total;
    j["l_boundary"] = r.loss.l_boundary;
    j["l_encoder"] = r.loss.l_encoder;
    j["l_distill"] = r.loss.l_distill;
    j["l_ce"] = r.loss.l_ce;
    j["boundary_accuracy"] = r.boundary_accuracy;
    j["compression"] = r.compression;
    j["grad_norm"] = r.grad_norm;
    j["lr_local"] = r.lr.local;
    j["lr_global"] = r.lr.global;
    os << j.dump() << "\n";
}

ParamStore train_teacher(ParamStore teacher, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                         const TrainConfig & cfg, std::ostream * metrics, const ParamFilter & trainable) {
    BatchSampler sampler(docs, cfg.batch_bytes, cfg.seed);
    AdamWState opt;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        const double loss = teacher_step(teacher, opt, sampler.next(), c, cfg, step, trainable);
        if (metrics) {
            nlohmann::ordered_json j;
            j["step"] = step;
            j["loss"] = loss;
            j["lr"] = lr_at(cfg, step).local;
            *metrics << j.dump() << "\n";
        }
    }
    return teacher;
}

ParamStore run_stage1(ParamStore bolmo, const ParamStore & teacher, const std::vector<EncodedDoc> & docs,
                      const ModelConfig & c, const TrainConfig & cfg, std::ostream * metrics) {
    for (const auto & [name, t] : bolmo)
        if (is_global_param(name) && !(teacher.contains(name) && bit_equal(teacher.get(name), t)))
            throw InputError("stage1: global parameter differs from the teacher: " + name);
    BatchSampler sampler(docs, cfg.batch_bytes, cfg.seed);
    AdamWState opt;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        const PackedBatch batch = sampler.next();
        const TeacherOutputs t = teacher_outputs(teacher, batch.tokens, batch.token_layout, c);
        const StepResult r = stage1_step(bolmo, opt, batch, t, c, cfg, step);
        if (metrics) write_metrics(*metrics, r);
    }
    return bolmo;
}

ParamStore run_stage2(ParamStore bolmo, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                      const TrainConfig & cfg, std::ostream * metrics) {
    BatchSampler sampler(docs, cfg.batch_bytes, cfg.seed);
    AdamWState opt;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        const StepResult r = stage2_step(bolmo, opt, sampler.next(), c, cfg, step);
        if (metrics) write_metrics(*metrics, r);
    }
    return bolmo;
}

// ---------------------------------------------------------------- evaluation

EvalResult evaluate(const ParamStore & bolmo, const std::vector<EncodedDoc> & docs, const ModelConfig & c,
                    PoolMask pool, bool against_supervision, int64_t batch_bytes) {
    EvalResult ev;
    double nats = 0.0;
    int64_t scored = 0, wrong = 0, bytes = 0, patches = 0;
    for (const auto & batch : sequential_batches(docs, batch_bytes)) {
        Graph g;
        ParamBinder b(g, bolmo);
        const BoundaryMask * mask = pool == PoolMask::Teacher ? &batch.teacher_mask : nullptr;
        ForwardOut o = forward_full(b, batch.bytes, batch.suffix_ids, batch.layout, c, mask);
        const auto tg = fused_targets(batch.bytes, o.mask, batch.layout);
        const Tensor & L = g.value(o.logp);
        for (size_t j = 0; j < tg.size(); ++j)
            if (tg[j] >= 0) {
                nats -= L.at(static_cast<int64_t>(j), tg[j]);
                ++ev.positions;
            }
        const BoundaryMask & target = against_supervision ? batch.supervision : batch.teacher_mask;
        const Tensor & p = g.value(o.scores.p);
        const double acc = boundary_accuracy(p, o.scores.positions, target, c.boundary_threshold);
        const auto n = static_cast<int64_t>(o.scores.positions.size());
        wrong += n - static_cast<int64_t>(std::llround(acc * static_cast<double>(n)));
        scored += n;
        const BoundaryMask pred = threshold_mask(p, o.scores.positions, batch.layout, c.boundary_threshold);
        bytes += batch.layout.size() - batch.layout.docs();
        patches += pred.count() - batch.layout.docs();
    }
    if (ev.positions == 0) throw InputError("evaluate: nothing to predict");
    ev.bits_per_byte = nats / static_cast<double>(ev.positions) / std::log(2.0);
    ev.boundary_error = scored ? static_cast<double>(wrong) / static_cast<double>(scored) : 0.0;
    ev.compression = patches > 0 ? static_cast<double>(bytes) / static_cast<double>(patches) : 0.0;
    return ev;
}

double distill_gap(const ParamStore & bolmo, const ParamStore & teacher, const std::vector<EncodedDoc> & docs,
                   const ModelConfig & c, int64_t batch_bytes) {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto & batch : sequential_batches(docs, batch_bytes)) {
        const TeacherOutputs t = teacher_outputs(teacher, batch.tokens, batch.token_layout, c);
        Graph g;
        ParamBinder b(g, bolmo);
        ForwardOut o = forward_full(b, batch.bytes, batch.suffix_ids, batch.layout, c, &batch.teacher_mask);
        std::vector<int64_t> ids;
        Var ll = patch_log_likelihood(g, o.logp, fused_targets(batch.bytes, batch.teacher_mask, batch.layout),
                                      prediction_patch(batch.layout, batch.teacher_mask), &ids);
        const Tensor & v = g.value(ll);
        for (size_t i = 0; i < ids.size(); ++i) {
            sum += std::abs(v[static_cast<int64_t>(i)] - t.token_logp[static_cast<size_t>(ids[i])]);
            ++n;
        }
    }
    if (n == 0) throw InputError("distill_gap: no patches");
    return sum / static_cast<double>(n);
}

} // namespace bolmo
