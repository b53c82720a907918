// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dmu/errors.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/random.hpp"

namespace dmu {

/// Feature vectors with integer class labels and unique sample ids.
struct LabeledVectorSet {
    Matrix vectors;
    std::vector<int> labels;
    std::vector<std::uint64_t> ids;
    std::size_t class_count = 0;  // labels lie in [0, class_count)
    std::uint64_t seed = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return vectors.cols(); }

    void validate() const {
        if (vectors.rows() != labels.size() || ids.size() != labels.size()) {
            throw DimensionError("LabeledVectorSet: vectors, labels and ids disagree in length");
        }
        for (int l : labels)
            if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
                throw InvalidArgument("LabeledVectorSet: label " + std::to_string(l) +
                                      " outside [0, " + std::to_string(class_count) + ")");
            }
        std::set<std::uint64_t> seen(ids.begin(), ids.end());
        if (seen.size() != ids.size()) throw InvalidArgument("LabeledVectorSet: duplicate sample ids");
    }

    /// Rows at the given positions, in order.
    LabeledVectorSet subset(std::span<const std::size_t> idx) const {
        LabeledVectorSet out;
        out.vectors = gather_rows(vectors, idx);
        out.class_count = class_count;
        out.seed = seed;
        out.labels.reserve(idx.size());
        out.ids.reserve(idx.size());
        for (std::size_t i : idx) {
            out.labels.push_back(labels[i]);
            out.ids.push_back(ids[i]);
        }
        return out;
    }

    /// Positions of each present label, ascending by label.
    std::map<int, std::vector<std::size_t>> by_class() const {
        std::map<int, std::vector<std::size_t>> out;
        for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
        return out;
    }

    /// Distinct labels present, ascending.
    std::vector<int> present_labels() const {
        std::vector<int> out;
        for (const auto& [label, idx] : by_class()) out.push_back(label);
        return out;
    }
};

struct SyntheticParams {
    std::size_t class_count = 10;
    std::size_t per_class = 300;
    std::size_t input_dim = 32;
    double intra_class_spread = 0.25;
    double noise_fraction = 0.3;  // share of samples drawn with 3× spread
    std::uint64_t seed = 0;

    void validate() const {
        if (class_count == 0 || per_class == 0 || input_dim == 0) {
            throw InvalidArgument("generate_synthetic: counts must be positive");
        }
        if (!(intra_class_spread >= 0.0) || !std::isfinite(intra_class_spread)) {
            throw InvalidArgument("generate_synthetic: spread must be finite and non-negative");
        }
        if (!(noise_fraction >= 0.0 && noise_fraction <= 1.0)) {
            throw InvalidArgument("generate_synthetic: noise_fraction must lie in [0, 1]");
        }
    }
};

/// Multiplier applied to the spread of low-quality samples.
inline constexpr double kNoisySpreadFactor = 3.0;

/// Gaussian clusters around class means drawn uniformly on the unit sphere.
///
/// Within each class, round(noise_fraction·per_class) randomly chosen samples
/// use kNoisySpreadFactor× the spread. Samples are class-major; ids are 0..N-1.
inline LabeledVectorSet generate_synthetic(const SyntheticParams& p) {
    p.validate();
    Rng mean_rng(derive_seed(p.seed, "class-means"));
    Matrix means(p.class_count, p.input_dim);
    for (std::size_t c = 0; c < p.class_count; ++c) {
        double n = 0.0;
        do {
            for (double& v : means.row(c)) v = mean_rng.gaussian();
            n = norm(means.row(c));
        } while (n == 0.0);
        for (double& v : means.row(c)) v /= n;
    }

    Rng rng(derive_seed(p.seed, "samples"));
    const std::size_t noisy_per_class =
        static_cast<std::size_t>(std::llround(p.noise_fraction * static_cast<double>(p.per_class)));
    LabeledVectorSet out;
    out.class_count = p.class_count;
    out.seed = p.seed;
    out.vectors = Matrix(p.class_count * p.per_class, p.input_dim);
    for (std::size_t c = 0; c < p.class_count; ++c) {
        std::vector<std::size_t> order(p.per_class);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<bool> noisy(p.per_class, false);
        for (std::size_t i = 0; i < noisy_per_class; ++i) noisy[order[i]] = true;
        for (std::size_t i = 0; i < p.per_class; ++i) {
            const std::size_t r = c * p.per_class + i;
            const double spread = p.intra_class_spread * (noisy[i] ? kNoisySpreadFactor : 1.0);
            auto row = out.vectors.row(r);
            for (std::size_t d = 0; d < p.input_dim; ++d) row[d] = means(c, d) + spread * rng.gaussian();
            out.labels.push_back(static_cast<int>(c));
            out.ids.push_back(r);
        }
    }
    return out;
}

enum class SplitKind { extended_data, open_data, extended_class };

inline std::string_view to_string(SplitKind k) {
    switch (k) {
        case SplitKind::extended_data: return "extended_data";
        case SplitKind::open_data: return "open_data";
        case SplitKind::extended_class: return "extended_class";
    }
    return "?";
}

inline SplitKind parse_split_kind(std::string_view s) {
    if (s == "extended_data") return SplitKind::extended_data;
    if (s == "open_data") return SplitKind::open_data;
    if (s == "extended_class") return SplitKind::extended_class;
    throw InvalidArgument("unknown split kind '" + std::string(s) + "'");
}

/// Old/new training sets for one upgrade scenario.
struct ScenarioSplit {
    SplitKind kind = SplitKind::extended_data;
    LabeledVectorSet old_set;
    LabeledVectorSet new_set;
    std::uint64_t seed = 0;
};

/// Builds the old and new training sets.
///
/// extended_data: old takes round(f·n_c) samples of every class, new is everything.
/// open_data: each class is partitioned into old (round(f·n_c)) and new (rest).
/// extended_class: old holds every sample of round(f·C) random classes, new is everything.
inline ScenarioSplit make_split(const LabeledVectorSet& data, SplitKind kind, double old_fraction,
                                std::uint64_t seed) {
    if (!(old_fraction > 0.0 && old_fraction < 1.0)) {
        throw InvalidArgument("make_split: old_fraction must lie in (0, 1)");
    }
    Rng rng(derive_seed(seed, "split"));
    ScenarioSplit out;
    out.kind = kind;
    out.seed = seed;
    std::vector<std::size_t> old_idx;
    std::vector<std::size_t> new_idx;
    const auto classes = data.by_class();

    if (kind == SplitKind::extended_class) {
        std::vector<int> labels;
        for (const auto& [label, idx] : classes) labels.push_back(label);
        const auto take = static_cast<std::size_t>(
            std::llround(old_fraction * static_cast<double>(labels.size())));
        if (take == 0 || take >= labels.size()) {
            throw InvalidArgument("make_split: fraction leaves the old or new class set empty");
        }
        rng.shuffle(labels);
        std::set<int> chosen(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(take));
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (chosen.count(data.labels[i])) old_idx.push_back(i);
            new_idx.push_back(i);
        }
    } else {
        for (const auto& [label, idx] : classes) {
            std::vector<std::size_t> perm = idx;
            rng.shuffle(perm);
            const auto take = static_cast<std::size_t>(
                std::llround(old_fraction * static_cast<double>(perm.size())));
            if (take == 0 || (kind == SplitKind::open_data && take >= perm.size())) {
                throw InvalidArgument("make_split: fraction yields an empty class " +
                                      std::to_string(label));
            }
            for (std::size_t k = 0; k < perm.size(); ++k) {
                if (k < take) old_idx.push_back(perm[k]);
                if (kind == SplitKind::extended_data || k >= take) new_idx.push_back(perm[k]);
            }
        }
        std::sort(old_idx.begin(), old_idx.end());
        std::sort(new_idx.begin(), new_idx.end());
    }
    out.old_set = data.subset(old_idx);
    out.new_set = data.subset(new_idx);
    return out;
}

/// Nested per-class prefixes of one random permutation: generation k gets
/// round(fractions[k]·n_c) samples of every class. Used for sequential upgrades.
inline std::vector<LabeledVectorSet> nested_fractions(const LabeledVectorSet& data,
                                                      std::span<const double> fractions,
                                                      std::uint64_t seed) {
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) {
            throw InvalidArgument("nested_fractions: fractions must lie in (0, 1]");
        }
        if (i > 0 && !(fractions[i] > fractions[i - 1])) {
            throw InvalidArgument("nested_fractions: fractions must be strictly increasing");
        }
    }
    Rng rng(derive_seed(seed, "nested"));
    std::vector<std::vector<std::size_t>> perms;
    for (const auto& [label, idx] : data.by_class()) {
        perms.push_back(idx);
        rng.shuffle(perms.back());
    }
    std::vector<LabeledVectorSet> out;
    for (double f : fractions) {
        std::vector<std::size_t> idx;
        for (const auto& perm : perms) {
            const auto take =
                static_cast<std::size_t>(std::llround(f * static_cast<double>(perm.size())));
            if (take == 0) throw InvalidArgument("nested_fractions: fraction yields an empty class");
            idx.insert(idx.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(take));
        }
        std::sort(idx.begin(), idx.end());
        out.push_back(data.subset(idx));
    }
    return out;
}

/// Removes `per_class` random samples of every class; returns {rest, held_out}.
inline std::pair<LabeledVectorSet, LabeledVectorSet> hold_out(const LabeledVectorSet& data,
                                                              std::size_t per_class,
                                                              std::uint64_t seed) {
    Rng rng(derive_seed(seed, "holdout"));
    std::vector<std::size_t> keep;
    std::vector<std::size_t> held;
    for (const auto& [label, idx] : data.by_class()) {
        if (idx.size() <= per_class) {
            throw InvalidArgument("hold_out: class " + std::to_string(label) + " has only " +
                                  std::to_string(idx.size()) + " samples");
        }
        std::vector<std::size_t> perm = idx;
        rng.shuffle(perm);
        held.insert(held.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(per_class));
        keep.insert(keep.end(), perm.begin() + static_cast<std::ptrdiff_t>(per_class), perm.end());
    }
    std::sort(keep.begin(), keep.end());
    std::sort(held.begin(), held.end());
    return {data.subset(keep), data.subset(held)};
}

/// Queries and gallery with disjoint ids; relevance = same label.
struct QueryGalleryBench {
    LabeledVectorSet query;
    LabeledVectorSet gallery;

    /// Gallery ids sharing each query's label.
    std::vector<std::vector<std::uint64_t>> relevance() const {
        std::map<int, std::vector<std::uint64_t>> by_label;
        for (std::size_t i = 0; i < gallery.size(); ++i) by_label[gallery.labels[i]].push_back(gallery.ids[i]);
        std::vector<std::vector<std::uint64_t>> out;
        out.reserve(query.size());
        for (int l : query.labels) out.push_back(by_label[l]);
        return out;
    }
};

/// Holds out query_per_class samples of each class as queries; the rest is the gallery.
inline QueryGalleryBench make_bench(const LabeledVectorSet& data, std::size_t query_per_class,
                                    std::uint64_t seed) {
    if (query_per_class == 0) throw InvalidArgument("make_bench: query_per_class must be positive");
    auto [gallery, query] = hold_out(data, query_per_class, derive_seed(seed, "bench"));
    return {std::move(query), std::move(gallery)};
}

/// Two independently augmented views of the same samples.
struct Batch {
    Matrix x_old;
    Matrix x_new;
    std::vector<int> labels;
    std::vector<std::uint64_t> ids;
    std::size_t size() const noexcept { return labels.size(); }
};

/// One epoch of shuffled mini-batches; the final incomplete batch is dropped.
///
/// Shuffling depends only on (seed, epoch). Each view adds isotropic Gaussian
/// noise of scale augment_noise drawn from an (seed, epoch) stream.
class BatchStream {
public:
    BatchStream(const LabeledVectorSet& data, std::size_t batch_size, double augment_noise,
                std::uint64_t seed, std::size_t epoch)
        : data_(&data), batch_size_(batch_size), noise_(augment_noise),
          augment_rng_(derive_seed(seed, "augment", epoch)) {
        if (batch_size < 2) {
            throw InvalidArgument("BatchStream: batch_size must be at least 2");
        }
        if (!(augment_noise >= 0.0)) throw InvalidArgument("BatchStream: negative augment_noise");
        order_.resize(data.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        Rng shuffle_rng(derive_seed(seed, "shuffle", epoch));
        shuffle_rng.shuffle(order_);
    }

    std::size_t batches_per_epoch() const noexcept { return data_->size() / batch_size_; }

    bool next(Batch& out) {
        if (cursor_ + batch_size_ > order_.size()) return false;
        std::span<const std::size_t> idx(order_.data() + cursor_, batch_size_);
        cursor_ += batch_size_;
        out.x_old = gather_rows(data_->vectors, idx);
        out.x_new = out.x_old;
        for (double& v : out.x_old.data()) v += noise_ * augment_rng_.gaussian();
        for (double& v : out.x_new.data()) v += noise_ * augment_rng_.gaussian();
        out.labels.clear();
        out.ids.clear();
        for (std::size_t i : idx) {
            out.labels.push_back(data_->labels[i]);
            out.ids.push_back(data_->ids[i]);
        }
        return true;
    }

private:
    const LabeledVectorSet* data_;
    std::size_t batch_size_;
    double noise_;
    Rng augment_rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// All batches of one epoch.
inline std::vector<Batch> batches(const LabeledVectorSet& data, std::size_t batch_size,
                                  double augment_noise, std::uint64_t seed, std::size_t epoch) {
    BatchStream stream(data, batch_size, augment_noise, seed, epoch);
    std::vector<Batch> out;
    Batch b;
    while (stream.next(b)) out.push_back(b);
    return out;
}

}  // namespace dmu
