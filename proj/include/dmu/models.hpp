// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmu/errors.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/random.hpp"
#include "dmu/numerics/tape.hpp"

namespace dmu {

/// Trainable tensor with its optimizer policy.
struct Parameter {
    std::string name;
    Matrix value;
    bool decay = true;  // weight decay applies (false for batch-norm scale/shift)
};

/// Parameters of one or more models registered on a tape for a training step.
struct ParamBinding {
    std::vector<Parameter*> params;
    std::vector<Var> vars;

    Var bind(Tape& t, Parameter& p) {
        Var v = t.parameter(p.value);
        params.push_back(&p);
        vars.push_back(v);
        return v;
    }

    /// Gradients in binding order (copied out of the tape).
    std::vector<Matrix> gradients(const Tape& t) const {
        std::vector<Matrix> out;
        out.reserve(vars.size());
        for (Var v : vars) out.push_back(t.grad(v));
        return out;
    }
};

/// Architecture of a stack of [affine → batch_norm → relu] blocks followed by
/// an output affine and row-wise L2 normalization.
///
/// Block affines carry no bias: batch norm removes any per-column offset, so a
/// bias there has an identically zero gradient.
struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 0;

    void validate() const {
        if (input_dim == 0 || output_dim == 0) {
            throw InvalidArgument("MlpSpec: input and output widths must be positive");
        }
        for (std::size_t h : hidden)
            if (h == 0) throw InvalidArgument("MlpSpec: hidden widths must be positive");
    }

    /// Trainable scalars.
    std::size_t parameter_count() const {
        std::size_t n = 0;
        std::size_t in = input_dim;
        for (std::size_t h : hidden) {
            n += in * h + 2 * h;
            in = h;
        }
        return n + in * output_dim + output_dim;
    }

    /// Running batch-norm moments (two per hidden unit).
    std::size_t state_count() const {
        std::size_t n = 0;
        for (std::size_t h : hidden) n += 2 * h;
        return n;
    }

    /// Multiply-accumulates of the affine layers for one input row.
    std::size_t multiply_accumulates() const {
        std::size_t n = 0;
        std::size_t in = input_dim;
        for (std::size_t h : hidden) {
            n += in * h;
            in = h;
        }
        return n + in * output_dim;
    }

    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Parameterized MLP shared by the encoder and the adaptation head.
class Mlp {
public:
    struct Block {
        Parameter weight;
        Parameter gamma;
        Parameter beta;
        BatchNormState bn;
    };

    Mlp() = default;

    /// Zero weights, unit batch-norm scale; use init() for a trainable start.
    explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        std::size_t in = spec_.input_dim;
        for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
            const std::size_t h = spec_.hidden[i];
            const std::string prefix = "block" + std::to_string(i) + ".";
            blocks_.push_back(Block{{prefix + "weight", Matrix(in, h), true},
                                    {prefix + "gamma", Matrix(1, h, 1.0), false},
                                    {prefix + "beta", Matrix(1, h, 0.0), false},
                                    BatchNormState::identity(h)});
            in = h;
        }
        out_weight_ = {"out.weight", Matrix(in, spec_.output_dim), true};
        out_bias_ = {"out.bias", Matrix(1, spec_.output_dim), true};
    }

    /// He-uniform weights, zero biases, identity batch norm.
    static Mlp init(const MlpSpec& spec, std::uint64_t seed) {
        Mlp m(spec);
        Rng rng(seed);
        auto fill = [&rng](Matrix& w) {
            const double bound = std::sqrt(6.0 / static_cast<double>(w.rows()));
            for (double& v : w.data()) v = rng.uniform(-bound, bound);
        };
        for (Block& b : m.blocks_) fill(b.weight.value);
        fill(m.out_weight_.value);
        return m;
    }

    const MlpSpec& spec() const noexcept { return spec_; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }

    /// Trainable parameters in a fixed order.
    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (Block& b : blocks_) {
            out.push_back(&b.weight);
            out.push_back(&b.gamma);
            out.push_back(&b.beta);
        }
        out.push_back(&out_weight_);
        out.push_back(&out_bias_);
        return out;
    }

    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (const Parameter* p : const_cast<Mlp*>(this)->parameters()) out.push_back(p);
        return out;
    }

    /// Records the forward pass. With `binding`, parameters become gradient
    /// leaves; otherwise they enter the tape as constants. Train mode folds
    /// batch moments into the running state unless `freeze_state` is set.
    Var forward(Tape& t, Var x, Mode mode, ParamBinding* binding, bool freeze_state = false) {
        if (t.value(x).cols() != spec_.input_dim) {
            throw DimensionError("Mlp::forward: input width " +
                                 std::to_string(t.value(x).cols()) + ", expected " +
                                 std::to_string(spec_.input_dim));
        }
        auto leaf = [&](Parameter& p) { return binding ? binding->bind(t, p) : t.constant(p.value); };
        Var h = x;
        for (Block& b : blocks_) {
            Var w = leaf(b.weight);
            Var g = leaf(b.gamma);
            Var be = leaf(b.beta);
            h = ad::affine(t, h, w);
            BatchNormState* update = (mode == Mode::train && !freeze_state) ? &b.bn : nullptr;
            h = ad::batch_norm(t, h, g, be, mode, b.bn, update);
            h = ad::relu(t, h);
        }
        Var w = leaf(out_weight_);
        Var bias = leaf(out_bias_);
        h = ad::affine(t, h, w, bias);
        return ad::l2_normalize(t, h);
    }

    /// Infer-mode evaluation without gradient bookkeeping.
    /// Same arithmetic as forward() in infer mode, without a tape.
    Matrix infer(const Matrix& x) const {
        if (x.cols() != spec_.input_dim) {
            throw DimensionError("Mlp::infer: input width " + std::to_string(x.cols()) + ", expected " +
                                 std::to_string(spec_.input_dim));
        }
        constexpr double eps = BatchNormConstants::eps;
        Matrix h = x;
        for (const Block& b : blocks_) {
            h = matmul(h, b.weight.value);
            const std::size_t d = h.cols();
            std::vector<double> inv_std(d);
            for (std::size_t c = 0; c < d; ++c) inv_std[c] = 1.0 / std::sqrt(b.bn.running_var[c] + eps);
            const double* mean = b.bn.running_mean.data();
            const double* g = b.gamma.value.data().data();
            const double* be = b.beta.value.data().data();
            double* v = h.data().data();
            for (std::size_t r = 0; r < h.rows(); ++r, v += d)
                for (std::size_t c = 0; c < d; ++c) {
                    const double xhat = (v[c] - mean[c]) * inv_std[c];
                    const double y = g[c] * xhat + be[c];
                    v[c] = y > 0.0 ? y : 0.0;
                }
        }
        h = matmul(h, out_weight_.value);
        const std::size_t d = h.cols();
        const double* bias = out_bias_.value.data().data();
        for (std::size_t r = 0; r < h.rows(); ++r) {
            double* v = h.data().data() + r * d;
            for (std::size_t c = 0; c < d; ++c) v[c] += bias[c];
            const double n = norm(h.row(r));
            if (!(n > 0.0) || !std::isfinite(n)) {
                throw NormalizationError("l2_normalize: row " + std::to_string(r) + " has zero or non-finite norm");
            }
            for (std::size_t c = 0; c < d; ++c) v[c] /= n;
        }
        return h;
    }

    /// Parameters followed by running moments, as one flat array.
    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(spec_.parameter_count() + spec_.state_count());
        for (const Parameter* p : parameters())
            out.insert(out.end(), p->value.data().begin(), p->value.data().end());
        for (const Block& b : blocks_) {
            out.insert(out.end(), b.bn.running_mean.begin(), b.bn.running_mean.end());
            out.insert(out.end(), b.bn.running_var.begin(), b.bn.running_var.end());
        }
        return out;
    }

    void load_flat(std::span<const double> flat) {
        if (flat.size() != spec_.parameter_count() + spec_.state_count()) {
            throw DimensionError("Mlp::load_flat: got " + std::to_string(flat.size()) +
                                 " values, expected " +
                                 std::to_string(spec_.parameter_count() + spec_.state_count()));
        }
        std::size_t pos = 0;
        auto take = [&](std::span<double> dst) {
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                      flat.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()), dst.begin());
            pos += dst.size();
        };
        for (Parameter* p : parameters()) take(p->value.data());
        for (Block& b : blocks_) {
            take(b.bn.running_mean);
            take(b.bn.running_var);
        }
    }

    friend bool operator==(const Mlp& a, const Mlp& b) {
        return a.spec_ == b.spec_ && a.flatten() == b.flatten();
    }

private:
    MlpSpec spec_;
    std::vector<Block> blocks_;
    Parameter out_weight_;
    Parameter out_bias_;
};

/// Embedding model: input features → unit-norm embedding.
struct EncoderSpec {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden{256, 256};
    std::size_t embedding_dim = 64;

    MlpSpec mlp() const { return {input_dim, hidden, embedding_dim}; }
    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

/// Forward-adaptation head: three hidden blocks of equal width mapping old
/// embeddings into the new embedding space.
struct AdapterSpec {
    static constexpr std::size_t block_count = 3;
    std::size_t embedding_dim = 64;
    std::size_t hidden_dim = 1024;

    MlpSpec mlp() const {
        return {embedding_dim, std::vector<std::size_t>(block_count, hidden_dim), embedding_dim};
    }
    friend bool operator==(const AdapterSpec&, const AdapterSpec&) = default;
};

class EncoderModel {
public:
    EncoderModel() = default;
    explicit EncoderModel(EncoderSpec spec) : spec_(std::move(spec)), net_(spec_.mlp()) {}
    EncoderModel(EncoderSpec spec, Mlp net) : spec_(std::move(spec)), net_(std::move(net)) {
        if (!(net_.spec() == spec_.mlp())) throw DimensionError("EncoderModel: network does not match spec");
    }

    static EncoderModel init(const EncoderSpec& spec, std::uint64_t seed) {
        return EncoderModel(spec, Mlp::init(spec.mlp(), derive_seed(seed, "encoder")));
    }

    const EncoderSpec& spec() const noexcept { return spec_; }
    std::size_t embedding_dim() const noexcept { return spec_.embedding_dim; }
    Mlp& net() noexcept { return net_; }
    const Mlp& net() const noexcept { return net_; }

    Var forward(Tape& t, Var x, Mode mode, ParamBinding* binding, bool freeze_state = false) {
        return net_.forward(t, x, mode, binding, freeze_state);
    }

    friend bool operator==(const EncoderModel&, const EncoderModel&) = default;

private:
    EncoderSpec spec_;
    Mlp net_;
};

class AdapterModel {
public:
    AdapterModel() = default;
    explicit AdapterModel(AdapterSpec spec) : spec_(spec), net_(spec_.mlp()) {}
    AdapterModel(AdapterSpec spec, Mlp net) : spec_(spec), net_(std::move(net)) {
        if (!(net_.spec() == spec_.mlp())) throw DimensionError("AdapterModel: network does not match spec");
    }

    static AdapterModel init(const AdapterSpec& spec, std::uint64_t seed) {
        return AdapterModel(spec, Mlp::init(spec.mlp(), derive_seed(seed, "adapter")));
    }

    const AdapterSpec& spec() const noexcept { return spec_; }
    Mlp& net() noexcept { return net_; }
    const Mlp& net() const noexcept { return net_; }

    Var forward(Tape& t, Var old_emb, Mode mode, ParamBinding* binding, bool freeze_state = false) {
        return net_.forward(t, old_emb, mode, binding, freeze_state);
    }

    friend bool operator==(const AdapterModel&, const AdapterModel&) = default;

private:
    AdapterSpec spec_;
    Mlp net_;
};

/// Class prototypes ω; row j is the prototype of global label class_labels[j].
///
/// Rows are normalized where they are used, not constrained during optimization.
class ClassifierPrototypes {
public:
    ClassifierPrototypes() = default;
    ClassifierPrototypes(Matrix weights, std::vector<int> class_labels)
        : weights_{"prototypes", std::move(weights), true}, labels_(std::move(class_labels)) {
        if (weights_.value.rows() != labels_.size()) {
            throw DimensionError("ClassifierPrototypes: " + std::to_string(labels_.size()) +
                                 " labels for " + std::to_string(weights_.value.rows()) + " rows");
        }
        rebuild_index();
    }

    /// Unit-norm random prototypes for the given labels.
    static ClassifierPrototypes init(std::vector<int> class_labels, std::size_t embedding_dim,
                                     std::uint64_t seed) {
        if (class_labels.empty() || embedding_dim == 0) {
            throw InvalidArgument("ClassifierPrototypes::init: empty class set or zero width");
        }
        Rng rng(derive_seed(seed, "prototypes"));
        Matrix w(class_labels.size(), embedding_dim);
        for (double& v : w.data()) v = rng.gaussian();
        return ClassifierPrototypes(l2_normalize(w), std::move(class_labels));
    }

    std::size_t class_count() const noexcept { return labels_.size(); }
    std::size_t dim() const noexcept { return weights_.value.cols(); }
    const std::vector<int>& class_labels() const noexcept { return labels_; }
    const Matrix& weights() const noexcept { return weights_.value; }
    Parameter& parameter() noexcept { return weights_; }

    std::optional<std::size_t> row_of(int label) const {
        auto it = index_.find(label);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    Matrix normalized() const { return l2_normalize(weights_.value); }

    friend bool operator==(const ClassifierPrototypes& a, const ClassifierPrototypes& b) {
        return a.labels_ == b.labels_ && a.weights_.value == b.weights_.value;
    }

private:
    void rebuild_index() {
        index_.clear();
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            if (!index_.emplace(labels_[i], i).second) {
                throw InvalidArgument("ClassifierPrototypes: duplicate label " +
                                      std::to_string(labels_[i]));
            }
        }
    }

    Parameter weights_{"prototypes", Matrix(), true};
    std::vector<int> labels_;
    std::unordered_map<int, std::size_t> index_;
};

/// Unit-norm embeddings for x. Train mode uses batch moments and updates the
/// running state; infer mode is deterministic and batch-size independent.
inline Matrix encode(EncoderModel& model, const Matrix& x, Mode mode) {
    Tape t;
    Var v = model.forward(t, t.constant(x), mode, nullptr);
    return t.value(v);
}

inline Matrix encode(const EncoderModel& model, const Matrix& x) { return model.net().infer(x); }

/// Old embeddings mapped into the new space (unit norm).
inline Matrix adapt(AdapterModel& adapter, const Matrix& old_emb, Mode mode) {
    if (old_emb.cols() != adapter.spec().embedding_dim) {
        throw DimensionError("adapt: embedding width " + std::to_string(old_emb.cols()) +
                             ", adapter expects " + std::to_string(adapter.spec().embedding_dim));
    }
    Tape t;
    Var v = adapter.forward(t, t.constant(old_emb), mode, nullptr);
    return t.value(v);
}

inline Matrix adapt(const AdapterModel& adapter, const Matrix& old_emb) {
    if (old_emb.cols() != adapter.spec().embedding_dim) {
        throw DimensionError("adapt: embedding width " + std::to_string(old_emb.cols()) +
                             ", adapter expects " + std::to_string(adapter.spec().embedding_dim));
    }
    return adapter.net().infer(old_emb);
}

/// Entry (i, j) = ⟨emb_i, ω_j / ‖ω_j‖⟩.
inline Matrix cosine_logits(const Matrix& emb, const ClassifierPrototypes& prototypes) {
    if (emb.cols() != prototypes.dim()) {
        throw DimensionError("cosine_logits: embedding width " + std::to_string(emb.cols()) +
                             " vs prototype width " + std::to_string(prototypes.dim()));
    }
    return matmul_nt(emb, prototypes.normalized());
}

namespace ad {

/// Differentiable cosine logits against a prototype matrix (normalized inside).
inline Var cosine_logits(Tape& t, Var emb, Var prototypes) {
    return matmul_nt(t, emb, l2_normalize(t, prototypes));
}

}  // namespace ad
}  // namespace dmu
