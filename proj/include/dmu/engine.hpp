// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dmu/data.hpp"
#include "dmu/errors.hpp"
#include "dmu/losses.hpp"
#include "dmu/models.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/random.hpp"
#include "dmu/numerics/tape.hpp"

namespace dmu {

enum class Method { old_model, oracle, bct, dmu, dmu_least_conf, bct_regression, dmu_regression };

inline std::string_view to_string(Method m) {
    switch (m) {
        case Method::old_model: return "old";
        case Method::oracle: return "oracle";
        case Method::bct: return "bct";
        case Method::dmu: return "dmu";
        case Method::dmu_least_conf: return "dmu_least_conf";
        case Method::bct_regression: return "bct_regression";
        case Method::dmu_regression: return "dmu_regression";
    }
    return "?";
}

inline Method parse_method(std::string_view s) {
    for (Method m : {Method::old_model, Method::oracle, Method::bct, Method::dmu,
                     Method::dmu_least_conf, Method::bct_regression, Method::dmu_regression}) {
        if (to_string(m) == s) return m;
    }
    throw InvalidArgument("unknown method '" + std::string(s) + "'");
}

/// True for methods trained against a frozen old model.
inline bool is_compatible(Method m) { return m != Method::old_model && m != Method::oracle; }

/// True for methods that train a forward-adaptation head.
inline bool has_adapter(Method m) {
    return m == Method::dmu || m == Method::dmu_least_conf || m == Method::dmu_regression;
}

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t warmup_epochs = 1;
    double base_lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 64;
    double augment_noise = 0.05;
    double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
    ArcFaceConfig arcface;
    Method method = Method::oracle;
    CompatTarget compat_target = CompatTarget::old_prototypes;
    double new_coef = 1.0;
    double compat_coef = 1.0;
    double fa_coef = 1.0;
    EncoderSpec encoder;
    AdapterSpec adapter;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs == 0) throw InvalidArgument("TrainConfig: epochs must be positive");
        if (warmup_epochs >= epochs) throw InvalidArgument("TrainConfig: warmup must be shorter than training");
        if (!(base_lr > 0.0)) throw InvalidArgument("TrainConfig: base_lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("TrainConfig: momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw InvalidArgument("TrainConfig: negative weight_decay");
        if (batch_size < 2) throw InvalidArgument("TrainConfig: batch_size must be at least 2");
        if (!(augment_noise >= 0.0)) throw InvalidArgument("TrainConfig: negative augment_noise");
        if (!(clip_norm >= 0.0)) throw InvalidArgument("TrainConfig: negative clip_norm");
        arcface.validate();
        encoder.mlp().validate();
        if (adapter.embedding_dim != encoder.embedding_dim) {
            throw InvalidArgument("TrainConfig: adapter width differs from the embedding width");
        }
    }
};

/// Loss composition used by each method.
inline ObjectiveConfig objective_for(const TrainConfig& c) {
    ObjectiveConfig o;
    o.arcface = c.arcface;
    o.compat_target = c.compat_target;
    o.new_coef = c.new_coef;
    o.compat_coef = c.compat_coef;
    o.fa_coef = c.fa_coef;
    switch (c.method) {
        case Method::old_model:
        case Method::oracle: break;
        case Method::bct: o.compat = CompatKind::arcface; break;
        case Method::bct_regression: o.compat = CompatKind::regression; break;
        case Method::dmu:
            o.compat = CompatKind::arcface;
            o.weighting = Weighting::entropy;
            o.forward_adaptation = true;
            break;
        case Method::dmu_least_conf:
            o.compat = CompatKind::arcface;
            o.weighting = Weighting::least_confidence;
            o.forward_adaptation = true;
            break;
        case Method::dmu_regression:
            o.compat = CompatKind::regression;
            o.weighting = Weighting::entropy;
            o.forward_adaptation = true;
            break;
    }
    return o;
}

/// Learning rate at `step`: linear warmup reaching base_lr at step warmup−1,
/// then cosine decay reaching 0 at the final step.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
    if (step >= total_steps) throw InvalidArgument("lr_at: step beyond schedule");
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::size_t span = total_steps - warmup_steps;
    if (span <= 1) return base_lr;
    const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span - 1);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// v ← momentum·v + grad + weight_decay·param; param ← param − lr·v.
inline void sgd_step(Matrix& param, const Matrix& grad, Matrix& velocity, double lr, double momentum,
                     double weight_decay) {
    detail::require_same_shape(param, grad, "sgd_step");
    detail::require_same_shape(param, velocity, "sgd_step");
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        if (!std::isfinite(g)) {
            throw DivergenceError("sgd_step: non-finite gradient at element " + std::to_string(i), -1);
        }
        velocity[i] = momentum * velocity[i] + g + weight_decay * param[i];
        param[i] -= lr * velocity[i];
    }
}

/// Momentum SGD over a fixed, ordered parameter list.
class SgdMomentum {
public:
    SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(const std::vector<Parameter*>& params, const std::vector<Matrix>& grads, double lr) {
        if (grads.size() != params.size()) throw DimensionError("SgdMomentum: gradient count mismatch");
        if (velocity_.empty()) {
            for (const Parameter* p : params) velocity_.emplace_back(p->value.rows(), p->value.cols());
        }
        if (velocity_.size() != params.size()) throw DimensionError("SgdMomentum: parameter set changed");
        for (std::size_t i = 0; i < params.size(); ++i) {
            try {
                sgd_step(params[i]->value, grads[i], velocity_[i], lr, momentum_,
                         params[i]->decay ? weight_decay_ : 0.0);
            } catch (const DivergenceError& e) {
                throw DivergenceError(params[i]->name + ": " + e.what(), e.step());
            }
        }
    }

private:
    double momentum_;
    double weight_decay_;
    std::vector<Matrix> velocity_;
};

/// A trained encoder with its classifier, frozen once returned.
struct FrozenModel {
    EncoderModel encoder;
    ClassifierPrototypes classifier;
};

/// Models updated by one training run.
struct TrainableState {
    EncoderModel encoder;
    ClassifierPrototypes classifier;
    std::optional<AdapterModel> adapter;

    /// Parameters in optimizer order: encoder, prototypes, adapter.
    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out = encoder.net().parameters();
        out.push_back(&classifier.parameter());
        if (adapter) {
            for (Parameter* p : adapter->net().parameters()) out.push_back(p);
        }
        return out;
    }
};

/// Fresh models for a run; depends only on the config seed and the class set.
inline TrainableState init_state(const TrainConfig& c, std::vector<int> class_labels) {
    TrainableState s{EncoderModel::init(c.encoder, derive_seed(c.seed, "init")),
                     ClassifierPrototypes::init(std::move(class_labels), c.encoder.embedding_dim,
                                                derive_seed(c.seed, "classifier")),
                     std::nullopt};
    if (has_adapter(c.method)) s.adapter = AdapterModel::init(c.adapter, derive_seed(c.seed, "adapter"));
    return s;
}

struct StepOptions {
    bool update_running_stats = true;
    bool bind_old_parameters = false;  // register old weights as leaves to observe their gradients
};

struct StepGradients {
    BatchLossReport report;
    std::vector<Parameter*> params;
    std::vector<Matrix> grads;
    std::vector<Matrix> old_grads;  // filled when bind_old_parameters is set
};

/// Loss and gradients of one batch, in this order: frozen old view,
/// adapted old features, new view, then the composed objective.
inline StepGradients compute_step(TrainableState& state, const FrozenModel* old, const Batch& batch,
                                  const ObjectiveConfig& objective, const StepOptions& opt = {}) {
    Tape t;
    ParamBinding binding;
    ParamBinding adapter_binding;
    const bool needs_old = objective.compat != CompatKind::none || objective.forward_adaptation;
    if (needs_old && old == nullptr) throw InvalidArgument("compute_step: method needs an old model");

    StepGradients out;
    ObjectiveInputs in;
    std::optional<EncoderModel> old_copy;
    ParamBinding old_binding;
    if (old != nullptr && needs_old) {
        Var old_emb;
        if (opt.bind_old_parameters) {
            old_copy = old->encoder;
            Var raw = old_copy->forward(t, t.constant(batch.x_old), Mode::infer, &old_binding);
            old_emb = t.detach(raw);
        } else {
            old_emb = t.constant(encode(old->encoder, batch.x_old));
        }
        in.old_emb = old_emb;
        in.old_classifier = &old->classifier;
        if (objective.forward_adaptation) {
            if (!state.adapter) throw InvalidArgument("compute_step: forward adaptation needs an adapter");
            in.adapted = state.adapter->forward(t, old_emb, Mode::train, &adapter_binding,
                                                !opt.update_running_stats);
        }
    }

    in.new_emb = state.encoder.forward(t, t.constant(batch.x_new), Mode::train, &binding,
                                       !opt.update_running_stats);
    in.new_prototypes = binding.bind(t, state.classifier.parameter());
    in.new_classifier = &state.classifier;
    in.labels = batch.labels;

    ObjectiveTerms terms = dmu_objective(t, in, objective);
    t.backward(terms.total);
    out.report = std::move(terms.report);
    if (!std::isfinite(out.report.total)) {
        throw DivergenceError("compute_step: non-finite loss", -1);
    }

    out.params = binding.params;
    out.grads = binding.gradients(t);
    for (Parameter* p : adapter_binding.params) out.params.push_back(p);
    for (Matrix& g : adapter_binding.gradients(t)) out.grads.push_back(std::move(g));
    if (opt.bind_old_parameters) out.old_grads = old_binding.gradients(t);
    return out;
}

/// Scales gradients so their global L2 norm is at most max_norm.
inline void clip_gradients(std::vector<Matrix>& grads, double max_norm) {
    double sq = 0.0;
    for (const Matrix& g : grads)
        for (double v : g.data()) sq += v * v;
    const double n = std::sqrt(sq);
    if (n > max_norm && n > 0.0) {
        const double f = max_norm / n;
        for (Matrix& g : grads)
            for (double& v : g.data()) v *= f;
    }
}

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;  // at the last step of the epoch
    double l_new = 0.0;
    double l_sbc = 0.0;
    double l_fa = 0.0;
    double total = 0.0;
};

struct TrainRun {
    TrainConfig config;
    std::vector<EpochRecord> trace;
    EncoderModel encoder;
    ClassifierPrototypes classifier;
    std::optional<AdapterModel> adapter;

    FrozenModel frozen() const { return {encoder, classifier}; }
};

struct StepInfo {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    const StepGradients* gradients = nullptr;
};

struct TrainHooks {
    StepOptions step_options;
    std::function<void(const StepInfo&)> on_step;
};

/// Runs every epoch of `config` over `data`.
inline TrainRun train(const LabeledVectorSet& data, const TrainConfig& config, const FrozenModel* old,
                      const TrainHooks& hooks = {}) {
    config.validate();
    data.validate();
    if (data.dim() != config.encoder.input_dim) {
        throw DimensionError("train: data width " + std::to_string(data.dim()) + ", encoder expects " +
                             std::to_string(config.encoder.input_dim));
    }
    if (is_compatible(config.method) && old == nullptr) {
        throw InvalidArgument("train: method '" + std::string(to_string(config.method)) +
                              "' needs an old model");
    }
    if (old != nullptr && old->encoder.embedding_dim() != config.encoder.embedding_dim) {
        throw DimensionError("train: old and new embedding widths differ");
    }

    TrainableState state = init_state(config, data.present_labels());
    const ObjectiveConfig objective = objective_for(config);
    const FrozenModel* old_used = is_compatible(config.method) ? old : nullptr;
    SgdMomentum opt(config.momentum, config.weight_decay);

    const std::size_t per_epoch = data.size() / config.batch_size;
    if (per_epoch == 0) throw InvalidArgument("train: dataset smaller than one batch");
    const std::size_t total_steps = per_epoch * config.epochs;
    const std::size_t warmup_steps = per_epoch * config.warmup_epochs;
    const std::uint64_t batch_seed = derive_seed(config.seed, "batches");

    TrainRun run;
    run.config = config;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        BatchStream stream(data, config.batch_size, config.augment_noise, batch_seed, epoch);
        Batch batch;
        while (stream.next(batch)) {
            const double lr = lr_at(step, total_steps, warmup_steps, config.base_lr);
            StepGradients g;
            try {
                g = compute_step(state, old_used, batch, objective, hooks.step_options);
                if (config.clip_norm > 0.0) clip_gradients(g.grads, config.clip_norm);
                opt.step(g.params, g.grads, lr);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                          ", step " + std::to_string(step) + ")",
                                      static_cast<long>(step));
            }
            if (hooks.on_step) hooks.on_step({step, epoch, lr, &g});
            rec.lr = lr;
            rec.l_new += g.report.l_new;
            rec.l_sbc += g.report.l_sbc;
            rec.l_fa += g.report.l_fa;
            rec.total += g.report.total;
            ++step;
        }
        const double n = static_cast<double>(per_epoch);
        rec.l_new /= n;
        rec.l_sbc /= n;
        rec.l_fa /= n;
        rec.total /= n;
        run.trace.push_back(rec);
    }
    run.encoder = std::move(state.encoder);
    run.classifier = std::move(state.classifier);
    run.adapter = std::move(state.adapter);
    return run;
}

/// Old or oracle model: L_new only.
inline TrainRun train_standalone(const LabeledVectorSet& data, const TrainConfig& config) {
    if (is_compatible(config.method)) {
        throw InvalidArgument("train_standalone: method must be old or oracle");
    }
    return train(data, config, nullptr);
}

/// L_new + L_BC against the frozen old model.
inline TrainRun train_bct(const LabeledVectorSet& data, const FrozenModel& old, const TrainConfig& config,
                          const TrainHooks& hooks = {}) {
    if (config.method != Method::bct && config.method != Method::bct_regression) {
        throw InvalidArgument("train_bct: method must be bct or bct_regression");
    }
    return train(data, config, &old, hooks);
}

/// L_new + L_SBC + L_FA with one joint update of the new model and ψ.
inline TrainRun train_dmu(const LabeledVectorSet& data, const FrozenModel& old, const TrainConfig& config,
                          const TrainHooks& hooks = {}) {
    if (!has_adapter(config.method)) {
        throw InvalidArgument("train_dmu: method must be dmu, dmu_least_conf or dmu_regression");
    }
    return train(data, config, &old, hooks);
}

}  // namespace dmu
