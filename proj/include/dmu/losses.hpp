// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmu/errors.hpp"
#include "dmu/models.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/tape.hpp"

namespace dmu {

/// Additive angular margin softmax: target logit s·cos(θ_y + m), others s·cos θ_j.
struct ArcFaceConfig {
    double scale = 30.0;
    double margin = 0.3;  // radians

    void validate() const {
        if (!(scale > 0.0)) throw InvalidArgument("ArcFaceConfig: scale must be positive");
        if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) {
            throw InvalidArgument("ArcFaceConfig: margin must lie in [0, pi/2)");
        }
    }
};

/// Clamp applied to the target cosine before arccos.
inline constexpr double kArcCosClamp = 1e-7;

namespace ad {

/// Per-sample ArcFace loss (N×1) from an N×C matrix of cosine logits.
///
/// targets[i] is the column of sample i's class. With m = 0 the target logit
/// is the cosine itself, so the loss is exactly cross-entropy over s·cos.
inline Var arcface_per_sample(Tape& t, Var cosines, std::vector<std::size_t> targets,
                              const ArcFaceConfig& cfg) {
    cfg.validate();
    const Matrix& c = t.value(cosines);
    const std::size_t n = c.rows();
    const std::size_t k = c.cols();
    if (targets.size() != n) {
        throw DimensionError("arcface: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " rows");
    }
    Matrix probs(n, k);
    std::vector<double> target_slope(n, 1.0);  // d(kernel)/d(cos_y)
    Matrix out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = targets[i];
        if (y >= k) throw InvalidArgument("arcface: target column out of range");
        auto row = c.row(i);
        auto p = probs.row(i);
        double kernel = row[y];
        if (cfg.margin > 0.0) {
            const double lo = -1.0 + kArcCosClamp;
            const double hi = 1.0 - kArcCosClamp;
            const double cc = std::clamp(row[y], lo, hi);
            const double theta = std::acos(cc);
            kernel = std::cos(theta + cfg.margin);
            target_slope[i] = (row[y] < lo || row[y] > hi)
                                  ? 0.0
                                  : std::sin(theta + cfg.margin) / std::sin(theta);
        }
        for (std::size_t j = 0; j < k; ++j) p[j] = cfg.scale * (j == y ? kernel : row[j]);
        const double mx = *std::max_element(p.begin(), p.end());
        double sum = 0.0;
        for (double& v : p) {
            v = std::exp(v - mx);
            sum += v;
        }
        const double log_norm = mx + std::log(sum);
        for (double& v : p) v /= sum;
        out(i, 0) = log_norm - cfg.scale * kernel;
    }
    const double s = cfg.scale;
    return t.record(std::move(out), {cosines},
                    [cosines, targets = std::move(targets), probs = std::move(probs),
                     target_slope = std::move(target_slope), s](Tape& tp, const Matrix& g) {
        Matrix dc(probs.rows(), probs.cols());
        for (std::size_t i = 0; i < probs.rows(); ++i) {
            const std::size_t y = targets[i];
            for (std::size_t j = 0; j < probs.cols(); ++j) dc(i, j) = g[i] * s * probs(i, j);
            dc(i, y) = g[i] * s * (probs(i, y) - 1.0) * target_slope[i];
        }
        tp.accumulate(cosines, dc);
    });
}

/// 1 − ⟨a_i, b_i⟩ per row, for unit-norm rows (N×1).
inline Var regression_terms(Tape& t, Var a, Var b) {
    return affine_scalar(t, row_dot(t, a, b), -1.0, 1.0);
}

}  // namespace ad

/// Samples of a batch whose label has a prototype, and that prototype's row.
struct TargetRows {
    std::vector<std::size_t> samples;
    std::vector<std::size_t> rows;
    bool complete(std::size_t batch) const { return samples.size() == batch; }
};

inline TargetRows target_rows(const ClassifierPrototypes& classifier, std::span<const int> labels) {
    TargetRows out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (auto r = classifier.row_of(labels[i])) {
            out.samples.push_back(i);
            out.rows.push_back(*r);
        }
    }
    return out;
}

/// Rows for a classifier that must know every label in the batch.
inline std::vector<std::size_t> required_rows(const ClassifierPrototypes& classifier,
                                              std::span<const int> labels) {
    std::vector<std::size_t> rows;
    rows.reserve(labels.size());
    for (int label : labels) {
        auto r = classifier.row_of(label);
        if (!r) throw InvalidArgument("label " + std::to_string(label) + " has no prototype");
        rows.push_back(*r);
    }
    return rows;
}

/// How the reduced ArcFace loss combines per-sample values.
struct Reduction {
    enum class Kind { mean, weighted };
    Kind kind = Kind::mean;
    std::vector<double> weights;

    static Reduction mean() { return {}; }
    static Reduction weighted(std::vector<double> w) { return {Kind::weighted, std::move(w)}; }
};

/// Per-sample ArcFace loss of unit-norm embeddings against prototypes.
inline std::vector<double> arcface_loss(const Matrix& emb, std::span<const int> labels,
                                        const ClassifierPrototypes& prototypes,
                                        const ArcFaceConfig& cfg) {
    Tape t;
    Var cos = ad::cosine_logits(t, t.constant(emb), t.constant(prototypes.weights()));
    Var per = ad::arcface_per_sample(t, cos, required_rows(prototypes, labels), cfg);
    return t.value(per).storage();
}

inline double arcface_loss(const Matrix& emb, std::span<const int> labels,
                           const ClassifierPrototypes& prototypes, const ArcFaceConfig& cfg,
                           const Reduction& reduction) {
    const std::vector<double> per = arcface_loss(emb, labels, prototypes, cfg);
    if (per.empty()) throw InvalidArgument("arcface_loss: empty batch");
    double total = 0.0;
    if (reduction.kind == Reduction::Kind::mean) {
        for (double v : per) total += v;
        return total / static_cast<double>(per.size());
    }
    if (reduction.weights.size() != per.size()) {
        throw DimensionError("arcface_loss: weight count does not match batch");
    }
    for (std::size_t i = 0; i < per.size(); ++i) total += reduction.weights[i] * per[i];
    return total;
}

/// Natural-log entropy of each row of a posterior matrix; 0·log 0 counts as 0.
inline std::vector<double> posterior_entropy(const Matrix& p) {
    std::vector<double> out(p.rows(), 0.0);
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double h = 0.0;
        for (double v : p.row(i))
            if (v > 0.0) h -= v * std::log(v);
        out[i] = h;
    }
    return out;
}

/// Λ(x): entropy of softmax(⟨φo(x), ω̂o(i)⟩) with raw cosines (no scale, no margin).
inline std::vector<double> entropy_discriminativeness(const Matrix& old_emb,
                                                      const ClassifierPrototypes& old_classifier) {
    return posterior_entropy(softmax_rows(cosine_logits(old_emb, old_classifier)));
}

/// λ(x) = (1 − softmax_batch(Λ)(x)) / (B − 1). Larger for lower entropy; sums to 1.
inline std::vector<double> selective_weights(std::span<const double> entropies) {
    const std::size_t b = entropies.size();
    if (b < 2) {
        throw DegenerateBatchError("selective_weights: batch of " + std::to_string(b) +
                                   " samples; at least 2 required");
    }
    std::vector<double> q = softmax(entropies);
    for (double& v : q) v = (1.0 - v) / static_cast<double>(b - 1);
    return q;
}

/// Ground-truth posterior p_y(x) under the old classifier.
inline std::vector<double> true_class_posterior(const Matrix& old_emb,
                                                const ClassifierPrototypes& old_classifier,
                                                std::span<const int> labels) {
    const std::vector<std::size_t> rows = required_rows(old_classifier, labels);
    const Matrix p = softmax_rows(cosine_logits(old_emb, old_classifier));
    std::vector<double> out(p.rows());
    for (std::size_t i = 0; i < p.rows(); ++i) out[i] = p(i, rows[i]);
    return out;
}

/// λ = softmax_batch(p_y): more confident old features weigh more.
inline std::vector<double> least_confidence_weights(const Matrix& old_emb,
                                                    const ClassifierPrototypes& old_classifier,
                                                    std::span<const int> labels) {
    if (labels.empty()) throw InvalidArgument("least_confidence_weights: empty batch");
    return softmax(true_class_posterior(old_emb, old_classifier, labels));
}

/// 1 − cos⟨a_i, b_i⟩ per row for unit-norm rows; lies in [0, 2].
inline std::vector<double> regression_regularizer(const Matrix& new_emb, const Matrix& old_emb) {
    detail::require_same_shape(new_emb, old_emb, "regression_regularizer");
    std::vector<double> out(new_emb.rows());
    for (std::size_t i = 0; i < new_emb.rows(); ++i)
        out[i] = 1.0 - dot(new_emb.row(i), old_emb.row(i));
    return out;
}

// ---------------------------------------------------------------------------
// Composed training objective
// ---------------------------------------------------------------------------

enum class CompatKind { none, arcface, regression };
enum class Weighting { uniform, entropy, least_confidence };
/// Prototypes the compatibility term is computed against.
enum class CompatTarget { old_prototypes, new_prototypes };

struct ObjectiveConfig {
    ArcFaceConfig arcface;
    CompatKind compat = CompatKind::none;
    Weighting weighting = Weighting::uniform;
    CompatTarget compat_target = CompatTarget::old_prototypes;
    bool forward_adaptation = false;
    double new_coef = 1.0;
    double compat_coef = 1.0;
    double fa_coef = 1.0;
};

/// Scalar values of one batch plus the per-sample weights and discriminativeness.
struct BatchLossReport {
    double l_new = 0.0;
    double l_sbc = 0.0;  // compatibility term (uniform, selective or regression)
    double l_fa = 0.0;
    double total = 0.0;
    std::vector<double> weights;     // λ per sample; 0 for samples outside the old class set
    std::vector<double> entropies;   // Λ per sample (p_y under least-confidence weighting)
};

/// Tape handles for the objective inputs.
struct ObjectiveInputs {
    Var new_emb;                   // φn(x_new), differentiable
    Var new_prototypes;            // ωn, differentiable
    std::optional<Var> old_emb;    // φo(x_old), already detached
    std::optional<Var> adapted;    // ψ(φo(x_old)), differentiable in ψ
    const ClassifierPrototypes* new_classifier = nullptr;
    const ClassifierPrototypes* old_classifier = nullptr;  // frozen
    std::span<const int> labels;
};

struct ObjectiveTerms {
    Var total;
    Var l_new;
    std::optional<Var> l_compat;
    std::optional<Var> l_fa;
    BatchLossReport report;
};

namespace ad {

/// Mean ArcFace of embeddings against prototype rows `rows`.
inline Var arcface_mean(Tape& t, Var emb, Var prototypes, std::vector<std::size_t> rows,
                        const ArcFaceConfig& cfg) {
    return mean(t, arcface_per_sample(t, cosine_logits(t, emb, prototypes), std::move(rows), cfg));
}

}  // namespace ad

/// L_new: mean ArcFace of new embeddings against the new prototypes.
inline Var new_loss(Tape& t, Var new_emb, Var new_prototypes, const ClassifierPrototypes& new_classifier,
                    std::span<const int> labels, const ArcFaceConfig& cfg) {
    return ad::arcface_mean(t, new_emb, new_prototypes, required_rows(new_classifier, labels), cfg);
}

/// λ-weighted sum of ArcFace losses of new embeddings against frozen old
/// prototypes, over samples whose label the old classifier knows. Uniform λ
/// gives the plain backward-compatible (BCT) loss.
inline Var sbc_loss(Tape& t, Var new_emb, const ClassifierPrototypes& old_classifier,
                    std::span<const int> labels, std::vector<double> weights,
                    const ArcFaceConfig& cfg) {
    TargetRows tr = target_rows(old_classifier, labels);
    if (weights.size() != tr.samples.size()) {
        throw DimensionError("sbc_loss: " + std::to_string(weights.size()) + " weights for " +
                             std::to_string(tr.samples.size()) + " compatible samples");
    }
    Var emb = tr.complete(labels.size()) ? new_emb : ad::gather_rows(t, new_emb, tr.samples);
    Var protos = t.constant(old_classifier.weights());
    Var per = ad::arcface_per_sample(t, ad::cosine_logits(t, emb, protos), tr.rows, cfg);
    return ad::weighted_sum(t, per, std::move(weights));
}

/// L_BC: uniform-weight special case of sbc_loss.
inline Var bct_loss(Tape& t, Var new_emb, const ClassifierPrototypes& old_classifier,
                    std::span<const int> labels, const ArcFaceConfig& cfg) {
    const std::size_t n = target_rows(old_classifier, labels).samples.size();
    if (n == 0) throw InvalidArgument("bct_loss: no sample has an old prototype");
    return sbc_loss(t, new_emb, old_classifier, labels,
                    std::vector<double>(n, 1.0 / static_cast<double>(n)), cfg);
}

/// L_FA: mean ArcFace of adapted old embeddings against the new prototypes.
inline Var fa_loss(Tape& t, Var adapted, Var new_prototypes, const ClassifierPrototypes& new_classifier,
                   std::span<const int> labels, const ArcFaceConfig& cfg) {
    return ad::arcface_mean(t, adapted, new_prototypes, required_rows(new_classifier, labels), cfg);
}

namespace detail {

inline std::vector<double> subset_weights(Weighting w, const Matrix& old_emb_subset,
                                          const ClassifierPrototypes& old_classifier,
                                          std::span<const int> labels_subset,
                                          std::vector<double>& measure) {
    const std::size_t n = labels_subset.size();
    switch (w) {
        case Weighting::uniform:
            measure = entropy_discriminativeness(old_emb_subset, old_classifier);
            return std::vector<double>(n, 1.0 / static_cast<double>(n));
        case Weighting::entropy:
            measure = entropy_discriminativeness(old_emb_subset, old_classifier);
            // A lone compatible sample carries the whole (unit) weight.
            if (n == 1) return {1.0};
            return selective_weights(measure);
        case Weighting::least_confidence:
            measure = true_class_posterior(old_emb_subset, old_classifier, labels_subset);
            return softmax(measure);
    }
    return {};
}

}  // namespace detail

/// L = c_new·L_new + c_compat·L_compat + c_fa·L_FA for one batch.
///
/// λ and Λ are computed from the detached old embeddings without gradient.
/// Samples whose label is unknown to the old classifier are left out of the
/// compatibility term and of λ, which is normalized over the remaining subset.
inline ObjectiveTerms dmu_objective(Tape& t, const ObjectiveInputs& in, const ObjectiveConfig& cfg) {
    if (in.new_classifier == nullptr) throw InvalidArgument("dmu_objective: new classifier missing");
    const std::size_t batch = in.labels.size();
    if (t.value(in.new_emb).rows() != batch) {
        throw DimensionError("dmu_objective: label count does not match batch");
    }

    ObjectiveTerms out;
    out.report.weights.assign(batch, 0.0);
    out.l_new = new_loss(t, in.new_emb, in.new_prototypes, *in.new_classifier, in.labels, cfg.arcface);
    out.report.l_new = t.value(out.l_new)[0];
    Var total = ad::affine_scalar(t, out.l_new, cfg.new_coef);

    const bool needs_old = cfg.compat != CompatKind::none || cfg.forward_adaptation;
    if (needs_old && (!in.old_emb || in.old_classifier == nullptr)) {
        throw InvalidArgument("dmu_objective: old embeddings and classifier required");
    }
    if (in.old_emb && in.old_classifier != nullptr) {
        out.report.entropies =
            entropy_discriminativeness(t.value(*in.old_emb), *in.old_classifier);
    }

    if (cfg.compat != CompatKind::none) {
        const ClassifierPrototypes& old_cls = *in.old_classifier;
        TargetRows tr = target_rows(old_cls, in.labels);
        if (!tr.samples.empty()) {
            const Matrix old_sub = gather_rows(t.value(*in.old_emb), tr.samples);
            std::vector<int> labels_sub;
            for (std::size_t i : tr.samples) labels_sub.push_back(in.labels[i]);
            std::vector<double> measure;
            std::vector<double> lambda =
                detail::subset_weights(cfg.weighting, old_sub, old_cls, labels_sub, measure);
            for (std::size_t k = 0; k < tr.samples.size(); ++k) {
                out.report.weights[tr.samples[k]] = lambda[k];
                if (cfg.weighting == Weighting::least_confidence) {
                    out.report.entropies[tr.samples[k]] = measure[k];
                }
            }

            const bool all = tr.complete(batch);
            Var new_sub = all ? in.new_emb : ad::gather_rows(t, in.new_emb, tr.samples);
            Var per;
            if (cfg.compat == CompatKind::regression) {
                Var old_v = all ? *in.old_emb : t.constant(old_sub);
                per = ad::regression_terms(t, new_sub, old_v);
            } else if (cfg.compat_target == CompatTarget::old_prototypes) {
                Var protos = t.constant(old_cls.weights());
                per = ad::arcface_per_sample(t, ad::cosine_logits(t, new_sub, protos), tr.rows,
                                             cfg.arcface);
            } else {
                std::vector<std::size_t> rows = required_rows(*in.new_classifier, labels_sub);
                per = ad::arcface_per_sample(t, ad::cosine_logits(t, new_sub, in.new_prototypes),
                                             std::move(rows), cfg.arcface);
            }
            out.l_compat = ad::weighted_sum(t, per, std::move(lambda));
            out.report.l_sbc = t.value(*out.l_compat)[0];
            total = ad::add(t, total, ad::affine_scalar(t, *out.l_compat, cfg.compat_coef));
        }
    }

    if (cfg.forward_adaptation) {
        if (!in.adapted) throw InvalidArgument("dmu_objective: adapted embeddings required");
        if (cfg.compat == CompatKind::regression) {
            // Regression form pulls ψ(φo(x)) toward the (detached) new embedding.
            out.l_fa = ad::mean(t, ad::regression_terms(t, *in.adapted, t.detach(in.new_emb)));
        } else {
            out.l_fa = fa_loss(t, *in.adapted, in.new_prototypes, *in.new_classifier, in.labels,
                               cfg.arcface);
        }
        out.report.l_fa = t.value(*out.l_fa)[0];
        total = ad::add(t, total, ad::affine_scalar(t, *out.l_fa, cfg.fa_coef));
    }

    out.total = total;
    out.report.total = t.value(total)[0];
    return out;
}

}  // namespace dmu
