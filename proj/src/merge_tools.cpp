#include "bolmo/merge_tools.h"

#include "bolmo/errors.h"
#include "bolmo/training.h"

#include <Eigen/SVD>

#include <cmath>
#include <ostream>

namespace bolmo {

namespace {

void check_same_globals(const ParamStore & a, const ParamStore & b, const char * what) {
    for (const auto & [name, t] : a) {
        if (!is_global_param(name)) continue;
        if (!b.contains(name)) throw InputError(std::string(what) + ": missing " + name);
        if (b.get(name).shape() != t.shape()) throw ShapeError(std::string(what) + ": shape mismatch for " + name);
    }
    for (const auto & [name, t] : b)
        if (is_global_param(name) && !a.contains(name)) throw InputError(std::string(what) + ": missing " + name);
}

} // namespace

ParamStore weight_delta(const ParamStore & base, const ParamStore & posttrained) {
    check_same_globals(base, posttrained, "weight_delta");
    ParamStore delta;
    for (const auto & [name, t] : base) {
        if (!is_global_param(name)) continue;
        const Tensor & p = posttrained.get(name);
        Tensor d(t.shape());
        for (int64_t i = 0; i < d.numel(); ++i) d[i] = p[i] - t[i];
        delta.set(name, std::move(d));
    }
    if (delta.size() == 0) throw InputError("weight_delta: no global tensors");
    return delta;
}

ParamStore apply_delta(const ParamStore & target, const ParamStore & delta, double scale) {
    ParamStore out = target;
    for (const auto & [name, d] : delta) {
        if (!is_global_param(name)) throw InputError("apply_delta: not a global tensor: " + name);
        if (!target.contains(name)) throw InputError("apply_delta: target lacks " + name);
        Tensor & t = out.get_mut(name);
        if (t.shape() != d.shape()) throw ShapeError("apply_delta: shape mismatch for " + name);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] += scale * d[i];
    }
    return out;
}

ParamStore task_arithmetic_merge(const ParamStore & bolmo, const ParamStore & base, const ParamStore & posttrained) {
    const ParamStore delta = weight_delta(base, posttrained);
    check_same_globals(bolmo, delta, "task_arithmetic_merge");
    return apply_delta(bolmo, delta);
}

ParamStore reset_embeddings(const ParamStore & base, const ParamStore & posttrained) {
    ParamStore out = posttrained;
    for (const auto & [name, t] : posttrained) {
        if (is_global_param(name)) continue;
        if (!base.contains(name)) throw InputError("reset_embeddings: base lacks " + name);
        if (base.get(name).shape() != t.shape()) throw ShapeError("reset_embeddings: shape mismatch for " + name);
        out.set(name, base.get(name));
    }
    return out;
}

ResetCheck reset_embeddings_check(const ParamStore & base, const ParamStore & posttrained,
                                  const std::vector<EncodedDoc> & docs, const ModelConfig & c) {
    ResetCheck r;
    r.posttrained_nats = evaluate_teacher(posttrained, docs, c).nats_per_token;
    r.reset_nats = evaluate_teacher(reset_embeddings(base, posttrained), docs, c).nats_per_token;
    r.ratio = r.reset_nats / r.posttrained_nats;
    return r;
}

Spectrum spectrum_report(const Tensor & matrix) {
    if (matrix.numel() == 0 || matrix.rank() != 2) throw InputError("spectrum_report: need a non-empty matrix");
    if (!matrix.all_finite()) throw NumericError("spectrum_report: non-finite entries");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        matrix.data(), matrix.rows(), matrix.cols());
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
    if (svd.info() != Eigen::Success) throw NumericError("spectrum_report: SVD failed");
    const auto & sv = svd.singularValues();
    Spectrum s;
    double total = 0.0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        s.singular_values.push_back(sv[i]);
        total += sv[i] * sv[i];
    }
    if (total == 0.0) throw NumericError("spectrum_report: zero matrix");
    double acc = 0.0;
    for (double v : s.singular_values) {
        s.ratio.push_back(v * v / total);
        acc += v * v / total;
        s.cumulative.push_back(acc);
    }
    return s;
}

void write_spectrum(std::ostream & os, const Spectrum & s) {
    os << "index\tsigma\tratio\tcumulative\n";
    for (size_t i = 0; i < s.ratio.size(); ++i)
        os << i << '\t' << s.singular_values[i] << '\t' << s.ratio[i] << '\t' << s.cumulative[i] << '\n';
}

} // namespace bolmo
