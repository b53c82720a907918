// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmu/data.hpp"
#include "dmu/errors.hpp"
#include "dmu/losses.hpp"
#include "dmu/models.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/random.hpp"

namespace dmu {

/// Unit-norm embeddings of a sample set, tagged with the model that produced them.
struct EmbeddingStore {
    std::string name;
    std::string model_tag;
    std::uint32_t generation = 0;
    Matrix embeddings;
    std::vector<std::uint64_t> ids;
    std::vector<int> labels;

    std::size_t size() const noexcept { return ids.size(); }
    std::size_t dim() const noexcept { return embeddings.cols(); }

    void validate() const {
        if (embeddings.rows() != ids.size() || labels.size() != ids.size()) {
            throw DimensionError("EmbeddingStore '" + name + "': rows, ids and labels disagree");
        }
        for (std::size_t r = 0; r < embeddings.rows(); ++r) {
            const double n = norm(embeddings.row(r));
            if (std::abs(n - 1.0) > 1e-6) {
                throw NormalizationError("EmbeddingStore '" + name + "': row " + std::to_string(r) +
                                         " has norm " + std::to_string(n));
            }
        }
    }
};

/// Rows per chunk when embedding large sets; infer mode makes chunking exact.
inline constexpr std::size_t kInferChunk = 2048;

namespace detail {

template <class F>
Matrix chunked_rows(const Matrix& x, std::size_t out_cols, F&& f) {
    Matrix out(x.rows(), out_cols);
    for (std::size_t begin = 0; begin < x.rows(); begin += kInferChunk) {
        const std::size_t end = std::min(x.rows(), begin + kInferChunk);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        const Matrix y = f(gather_rows(x, idx));
        std::copy(y.data().begin(), y.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * out_cols));
    }
    return out;
}

}  // namespace detail

/// Infer-mode embeddings of every sample of `data`.
inline EmbeddingStore embed(const EncoderModel& model, const LabeledVectorSet& data, std::string name,
                            std::string model_tag, std::uint32_t generation) {
    EmbeddingStore s{std::move(name), std::move(model_tag), generation,
                     detail::chunked_rows(data.vectors, model.embedding_dim(),
                                          [&](const Matrix& x) { return encode(model, x); }),
                     data.ids, data.labels};
    return s;
}

/// Gallery refreshed by ψ; the result carries `target_generation`.
///
/// A store already at or beyond target_generation is rejected unless `force`.
inline EmbeddingStore adapt_store(const AdapterModel& adapter, const EmbeddingStore& store,
                                  std::string model_tag, std::uint32_t target_generation, bool force = false) {
    if (store.dim() != adapter.spec().embedding_dim) {
        throw DimensionError("adapt_store: store width " + std::to_string(store.dim()) +
                             ", adapter expects " + std::to_string(adapter.spec().embedding_dim));
    }
    if (!force && store.generation >= target_generation) {
        throw InvalidArgument("adapt_store: store '" + store.name + "' is already at generation " +
                              std::to_string(store.generation));
    }
    EmbeddingStore out = store;
    out.model_tag = std::move(model_tag);
    out.generation = target_generation;
    out.embeddings = detail::chunked_rows(store.embeddings, store.dim(),
                                          [&](const Matrix& x) { return adapt(adapter, x); });
    return out;
}

/// Ranked gallery ids per query: descending cosine, ties by ascending id.
inline std::vector<std::vector<std::uint64_t>> rank(const EmbeddingStore& query,
                                                    const EmbeddingStore& gallery, std::size_t k) {
    if (query.dim() != gallery.dim()) {
        throw DimensionError("rank: query width " + std::to_string(query.dim()) + " vs gallery width " +
                             std::to_string(gallery.dim()));
    }
    const Matrix sims = matmul_nt(query.embeddings, gallery.embeddings);
    const std::size_t keep = std::min(k, gallery.size());
    std::vector<std::vector<std::uint64_t>> out(query.size());
    std::vector<std::size_t> order(gallery.size());
    for (std::size_t q = 0; q < query.size(); ++q) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        const auto row = sims.row(q);
        auto before = [&](std::size_t a, std::size_t b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return gallery.ids[a] < gallery.ids[b];
        };
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
        out[q].reserve(keep);
        for (std::size_t i = 0; i < keep; ++i) out[q].push_back(gallery.ids[order[i]]);
    }
    return out;
}

/// Average precision at k of one ranking, as a fraction.
inline double average_precision(const std::vector<std::uint64_t>& ranking,
                                const std::vector<std::uint64_t>& relevant, std::size_t k) {
    if (relevant.empty()) throw EvaluationError("average_precision: query has no relevant item");
    const std::unordered_set<std::uint64_t> rel(relevant.begin(), relevant.end());
    double sum = 0.0;
    std::size_t hits = 0;
    const std::size_t depth = std::min(k, ranking.size());
    for (std::size_t r = 0; r < depth; ++r) {
        if (rel.count(ranking[r])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    return sum / static_cast<double>(std::min(rel.size(), k));
}

/// mAP@k in percent; AP is normalized by min(R, k).
inline double mean_average_precision(const std::vector<std::vector<std::uint64_t>>& rankings,
                                     const std::vector<std::vector<std::uint64_t>>& relevance,
                                     std::size_t k) {
    if (rankings.size() != relevance.size()) {
        throw DimensionError("mean_average_precision: rankings and relevance differ in length");
    }
    if (rankings.empty()) throw EvaluationError("mean_average_precision: no queries");
    if (k == 0) throw InvalidArgument("mean_average_precision: k must be positive");
    double sum = 0.0;
    for (std::size_t q = 0; q < rankings.size(); ++q) sum += average_precision(rankings[q], relevance[q], k);
    return 100.0 * sum / static_cast<double>(rankings.size());
}

/// Best true-accept rate whose false-accept rate stays within each target.
/// Thresholds sweep the observed scores; rates are fractions.
inline std::vector<double> tar_at_far(std::vector<double> genuine, std::vector<double> impostor,
                                      const std::vector<double>& far_targets) {
    if (genuine.empty() || impostor.empty()) throw EvaluationError("tar_at_far: empty score set");
    std::sort(genuine.begin(), genuine.end(), std::greater<>());
    std::sort(impostor.begin(), impostor.end(), std::greater<>());
    std::vector<double> thresholds(genuine);
    thresholds.insert(thresholds.end(), impostor.begin(), impostor.end());
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    // (far, tar) at every threshold, lowering t one distinct score at a time.
    std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
    std::size_t g = 0;
    std::size_t i = 0;
    for (double t : thresholds) {
        while (g < genuine.size() && genuine[g] >= t) ++g;
        while (i < impostor.size() && impostor[i] >= t) ++i;
        curve.emplace_back(static_cast<double>(i) / static_cast<double>(impostor.size()),
                           static_cast<double>(g) / static_cast<double>(genuine.size()));
    }
    std::vector<double> out;
    out.reserve(far_targets.size());
    for (double alpha : far_targets) {
        double best = 0.0;
        for (const auto& [far, tar] : curve)
            if (far <= alpha) best = std::max(best, tar);
        out.push_back(best);
    }
    return out;
}

/// Genuine (same label) and impostor scores of all query-gallery pairs.
struct VerificationScores {
    std::vector<double> genuine;
    std::vector<double> impostor;
};

inline VerificationScores verification_scores(const EmbeddingStore& query, const EmbeddingStore& gallery) {
    if (query.dim() != gallery.dim()) throw DimensionError("verification_scores: width mismatch");
    const Matrix sims = matmul_nt(query.embeddings, gallery.embeddings);
    VerificationScores out;
    for (std::size_t q = 0; q < query.size(); ++q)
        for (std::size_t j = 0; j < gallery.size(); ++j)
            (query.labels[q] == gallery.labels[j] ? out.genuine : out.impostor).push_back(sims(q, j));
    return out;
}

enum class MetricKind { map, tar };

struct MetricSpec {
    MetricKind kind = MetricKind::map;
    std::size_t map_k = 100;
    double far = 1e-2;
};

/// Same-label relevance of queries against a store.
inline std::vector<std::vector<std::uint64_t>> label_relevance(const std::vector<int>& query_labels,
                                                               const EmbeddingStore& gallery) {
    std::vector<std::vector<std::uint64_t>> out(query_labels.size());
    for (std::size_t q = 0; q < query_labels.size(); ++q)
        for (std::size_t j = 0; j < gallery.size(); ++j)
            if (gallery.labels[j] == query_labels[q]) out[q].push_back(gallery.ids[j]);
    return out;
}

/// Benchmark metric (percent) of query embeddings against a gallery store.
inline double store_metric(const EmbeddingStore& query, const EmbeddingStore& gallery, const MetricSpec& m) {
    if (m.kind == MetricKind::map) {
        return mean_average_precision(rank(query, gallery, m.map_k), label_relevance(query.labels, gallery),
                                      m.map_k);
    }
    const VerificationScores s = verification_scores(query, gallery);
    return 100.0 * tar_at_far(s.genuine, s.impostor, {m.far}).front();
}

/// M(query_model(Q), gallery_store): queries are encoded fresh.
inline double cross_model_eval(const EncoderModel& query_model, const EmbeddingStore& gallery_store,
                               const LabeledVectorSet& queries, const MetricSpec& m = {}) {
    return store_metric(embed(query_model, queries, "query", "query", 0), gallery_store, m);
}

/// Δ↑ in percent.
inline double upgrade_gain(double m_cross, double m_old_self) {
    if (!(m_old_self > 0.0)) throw EvaluationError("upgrade_gain: baseline must be positive");
    return 100.0 * (m_cross - m_old_self) / m_old_self;
}

/// Δ↓ in percent; negative when the new model beats the oracle.
inline double degradation(double m_oracle_self, double m_new_self) {
    if (!(m_oracle_self > 0.0)) throw EvaluationError("degradation: baseline must be positive");
    return 100.0 * (m_oracle_self - m_new_self) / m_oracle_self;
}

struct ChainResult {
    bool old_below_cross = false;
    bool cross_below_adapted = false;
    bool holds() const noexcept { return old_below_cross && cross_below_adapted; }
};

/// M(φo, φo) < M(φn, φo) < M(φn, ψ∘φo), link by link.
inline ChainResult chain_check(double m_old_self, double m_cross, double m_adapted) {
    return {m_old_self < m_cross, m_cross < m_adapted};
}

/// (Λ_old, Λ_FA) for `sample_count` random gallery items.
inline std::vector<std::pair<double, double>> entropy_scatter(const Matrix& gallery_inputs,
                                                              const EncoderModel& old_encoder,
                                                              const ClassifierPrototypes& old_classifier,
                                                              const AdapterModel& adapter,
                                                              const ClassifierPrototypes& new_classifier,
                                                              std::size_t sample_count, std::uint64_t seed) {
    if (sample_count > gallery_inputs.rows()) {
        throw InvalidArgument("entropy_scatter: " + std::to_string(sample_count) + " samples requested from " +
                              std::to_string(gallery_inputs.rows()));
    }
    std::vector<std::size_t> idx(gallery_inputs.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "scatter"));
    rng.shuffle(idx);
    idx.resize(sample_count);
    const Matrix old_emb = encode(old_encoder, gather_rows(gallery_inputs, idx));
    const std::vector<double> before = entropy_discriminativeness(old_emb, old_classifier);
    const std::vector<double> after = entropy_discriminativeness(adapt(adapter, old_emb), new_classifier);
    std::vector<std::pair<double, double>> out;
    out.reserve(sample_count);
    for (std::size_t i = 0; i < sample_count; ++i) out.emplace_back(before[i], after[i]);
    return out;
}

/// Ranks starting at 1; ties get their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("spearman: need two equal-length samples");
    const std::vector<double> rx = average_ranks(x);
    const std::vector<double> ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw EvaluationError("spearman: constant sample");
    return sxy / std::sqrt(sxx * syy);
}

/// Cross-model metrics of one upgrade, in percent.
struct EvalReport {
    double m_self = 0.0;                   // M(φn, φn)
    std::optional<double> m_old_self;      // M(φo, φo)
    std::optional<double> m_cross;         // M(φn, φo)
    std::optional<double> m_adapted;       // M(φn, ψ∘φo)
    std::optional<double> m_oracle_self;   // M(φoracle, φoracle)
    std::optional<double> delta_up;        // against the adapted gallery when ψ exists
    std::optional<double> delta_up_raw;    // against the raw old gallery
    std::optional<double> delta_down;
    std::optional<ChainResult> chain;
    std::vector<std::pair<double, double>> entropy_pairs;
};

struct UpgradeModels {
    const EncoderModel* new_encoder = nullptr;
    const EncoderModel* old_encoder = nullptr;  // absent for a self-test
    const AdapterModel* adapter = nullptr;
    std::optional<double> m_oracle_self;
};

/// Self, cross-model and adapted metrics of an upgrade on one bench.
inline EvalReport evaluate_upgrade(const QueryGalleryBench& bench, const UpgradeModels& models,
                                   const MetricSpec& metric = {}) {
    if (models.new_encoder == nullptr) throw InvalidArgument("evaluate_upgrade: new model missing");
    EvalReport r;
    const EmbeddingStore new_q = embed(*models.new_encoder, bench.query, "query", "new", 0);
    const EmbeddingStore new_g = embed(*models.new_encoder, bench.gallery, "gallery", "new", 0);
    r.m_self = store_metric(new_q, new_g, metric);
    r.m_oracle_self = models.m_oracle_self;
    if (models.m_oracle_self) r.delta_down = degradation(*models.m_oracle_self, r.m_self);
    if (models.old_encoder == nullptr) return r;

    const EmbeddingStore old_q = embed(*models.old_encoder, bench.query, "query", "old", 0);
    const EmbeddingStore old_g = embed(*models.old_encoder, bench.gallery, "gallery", "old", 0);
    r.m_old_self = store_metric(old_q, old_g, metric);
    r.m_cross = store_metric(new_q, old_g, metric);
    r.delta_up_raw = upgrade_gain(*r.m_cross, *r.m_old_self);
    r.delta_up = r.delta_up_raw;
    if (models.adapter != nullptr) {
        const EmbeddingStore adapted = adapt_store(*models.adapter, old_g, "adapted", 1);
        r.m_adapted = store_metric(new_q, adapted, metric);
        r.delta_up = upgrade_gain(*r.m_adapted, *r.m_old_self);
        r.chain = chain_check(*r.m_old_self, *r.m_cross, *r.m_adapted);
    }
    return r;
}

}  // namespace dmu
