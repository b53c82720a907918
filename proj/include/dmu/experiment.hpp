// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmu/data.hpp"
#include "dmu/engine.hpp"
#include "dmu/errors.hpp"
#include "dmu/eval.hpp"
#include "dmu/models.hpp"

namespace dmu {

/// Everything needed to reproduce one experiment from its seed.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "dmu-run";

    SyntheticParams dataset{10, 200, 32, 0.25, 0.3, 0};  // per_class counts training samples
    std::size_t test_per_class = 100;

    SplitKind split_kind = SplitKind::extended_data;
    double old_fraction = 0.3;

    std::size_t query_per_class = 10;
    MetricSpec metric;
    std::size_t scatter_samples = 500;

    TrainConfig train;                     // shared by every stage; method and seed set per stage
    std::vector<std::size_t> old_hidden;   // old encoder blocks; empty = same as the new encoder

    std::vector<Method> methods{Method::bct, Method::dmu};
    std::vector<double> fractions{0.25, 0.5, 0.75};

    void validate() const {
        SyntheticParams p = dataset;
        p.per_class += test_per_class;
        p.validate();
        if (test_per_class <= query_per_class || query_per_class == 0) {
            throw InvalidArgument("config: need 0 < query_per_class < test_per_class");
        }
        if (!(old_fraction > 0.0 && old_fraction < 1.0)) {
            throw InvalidArgument("config: old_fraction must lie in (0, 1)");
        }
        if (dataset.input_dim != train.encoder.input_dim) {
            throw InvalidArgument("config: dataset input_dim differs from the encoder input width");
        }
        for (Method m : methods)
            if (!is_compatible(m)) throw InvalidArgument("config: methods must be compatible methods");
        if (fractions.size() < 2) throw InvalidArgument("config: sequence needs at least two fractions");
        train.validate();
    }

    /// Stage config with its own method and seed.
    TrainConfig stage(Method method, std::uint64_t stage_seed) const {
        TrainConfig c = train;
        c.method = method;
        c.seed = stage_seed;
        if (method == Method::old_model && !old_hidden.empty()) c.encoder.hidden = old_hidden;
        return c;
    }

    std::uint64_t old_seed() const { return derive_seed(seed, "old"); }
    std::uint64_t new_seed() const { return derive_seed(seed, "new"); }
};

/// Training pool, test bench and scenario split derived from the config seed.
struct PreparedData {
    LabeledVectorSet train;
    QueryGalleryBench bench;
    ScenarioSplit split;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    SyntheticParams p = cfg.dataset;
    p.per_class += cfg.test_per_class;
    p.seed = derive_seed(cfg.seed, "data");
    const LabeledVectorSet all = generate_synthetic(p);
    auto [train, test] = hold_out(all, cfg.test_per_class, derive_seed(cfg.seed, "test"));
    PreparedData out;
    out.bench = make_bench(test, cfg.query_per_class, derive_seed(cfg.seed, "bench"));
    out.split = make_split(train, cfg.split_kind, cfg.old_fraction, derive_seed(cfg.seed, "split"));
    out.train = std::move(train);
    return out;
}

struct MethodResult {
    Method method = Method::bct;
    TrainRun run;
    EvalReport report;
};

struct UpgradeResult {
    TrainRun old_run;
    TrainRun oracle_run;
    double m_old_self = 0.0;
    double m_oracle_self = 0.0;
    std::vector<MethodResult> methods;
};

/// Old model on the old split, oracle and every configured method on the new
/// split. All new models share one seed, so runs are paired.
inline UpgradeResult run_upgrade(const ExperimentConfig& cfg, const PreparedData& data) {
    cfg.validate();
    UpgradeResult out;
    out.old_run = train_standalone(data.split.old_set, cfg.stage(Method::old_model, cfg.old_seed()));
    out.oracle_run = train_standalone(data.split.new_set, cfg.stage(Method::oracle, cfg.new_seed()));
    const FrozenModel old = out.old_run.frozen();

    const EvalReport oracle_report =
        evaluate_upgrade(data.bench, {&out.oracle_run.encoder, &old.encoder, nullptr, std::nullopt}, cfg.metric);
    out.m_oracle_self = oracle_report.m_self;
    out.m_old_self = *oracle_report.m_old_self;

    for (Method m : cfg.methods) {
        MethodResult r;
        r.method = m;
        r.run = train(data.split.new_set, cfg.stage(m, cfg.new_seed()), &old);
        const AdapterModel* psi = r.run.adapter ? &*r.run.adapter : nullptr;
        r.report = evaluate_upgrade(data.bench, {&r.run.encoder, &old.encoder, psi, out.m_oracle_self}, cfg.metric);
        if (psi != nullptr) {
            r.report.entropy_pairs = entropy_scatter(
                data.bench.gallery.vectors, old.encoder, old.classifier, *psi, r.run.classifier,
                std::min(cfg.scatter_samples, data.bench.gallery.size()), derive_seed(cfg.seed, "scatter"));
        }
        out.methods.push_back(std::move(r));
    }
    return out;
}

/// Metrics of one upgrade generation in a sequence.
struct GenerationReport {
    std::size_t generation = 0;  // 1-based upgrade index
    Method method = Method::bct;
    double fraction = 0.0;
    double m_self = 0.0;            // M(φk, φk)
    double m_cross = 0.0;           // M(φk, deployed gallery)
    double m_cross_prev = 0.0;      // M(φk, φ(k−1)(G)), raw previous-generation gallery
    double m_cross_first = 0.0;     // M(φk, φ0(G))
    double m_first_self = 0.0;      // M(φ0, φ0)
    double m_prev_self = 0.0;       // M(φ(k−1), φ(k−1))
    double m_oracle_self = 0.0;     // oracle trained on the same fraction
    double delta_up = 0.0;          // against M(φ0, φ0)
    double delta_up_prev = 0.0;     // against M(φ(k−1), φ(k−1))
    double delta_down = 0.0;
    std::uint32_t gallery_generation = 0;
    std::string gallery_tag;
};

struct SequenceResult {
    TrainRun first;                                 // generation 0
    std::vector<TrainRun> oracles;                  // one per upgrade generation
    std::vector<std::vector<TrainRun>> runs;        // [method][generation − 1]
    std::vector<EmbeddingStore> final_galleries;    // per method
    std::vector<GenerationReport> reports;          // generation-major, then method order
};

/// Sequential upgrades over nested data fractions.
///
/// Generation k trains against generation k−1. DMU refreshes the deployed
/// gallery with ψk after each generation; BCT keeps the generation-0 gallery.
inline SequenceResult sequential_upgrade(const LabeledVectorSet& train_pool, const QueryGalleryBench& bench,
                                         const std::vector<double>& fractions, const std::vector<Method>& methods,
                                         const ExperimentConfig& cfg) {
    if (fractions.size() < 2) throw InvalidArgument("sequential_upgrade: need at least two fractions");
    const std::vector<LabeledVectorSet> sets = nested_fractions(train_pool, fractions, derive_seed(cfg.seed, "nested"));
    const MetricSpec& metric = cfg.metric;

    SequenceResult out;
    out.first = train_standalone(sets[0], cfg.stage(Method::old_model, cfg.old_seed()));
    const EmbeddingStore first_gallery = embed(out.first.encoder, bench.gallery, "gallery", "gen0", 0);
    const double first_self =
        store_metric(embed(out.first.encoder, bench.query, "query", "gen0", 0), first_gallery, metric);

    std::vector<double> oracle_self;
    for (std::size_t k = 1; k < sets.size(); ++k) {
        TrainRun o = train_standalone(sets[k], cfg.stage(Method::oracle, derive_seed(cfg.new_seed(), "gen", k)));
        oracle_self.push_back(store_metric(embed(o.encoder, bench.query, "query", "oracle", 0),
                                           embed(o.encoder, bench.gallery, "gallery", "oracle", 0), metric));
        out.oracles.push_back(std::move(o));
    }

    std::vector<GenerationReport> by_method;
    for (Method m : methods) {
        FrozenModel prev = out.first.frozen();
        double prev_self = first_self;
        EmbeddingStore deployed = first_gallery;
        std::vector<TrainRun> runs;
        for (std::size_t k = 1; k < sets.size(); ++k) {
            TrainRun run = train(sets[k], cfg.stage(m, derive_seed(cfg.new_seed(), "gen", k)), &prev);
            const auto gen = static_cast<std::uint32_t>(k);
            if (run.adapter) {
                deployed = adapt_store(*run.adapter, deployed, std::string(to_string(m)) + "-psi" + std::to_string(k), gen);
            }
            const EmbeddingStore q = embed(run.encoder, bench.query, "query", "gen", gen);
            GenerationReport g;
            g.generation = k;
            g.method = m;
            g.fraction = fractions[k];
            g.m_self = store_metric(q, embed(run.encoder, bench.gallery, "gallery", "gen", gen), metric);
            g.m_cross = store_metric(q, deployed, metric);
            g.m_cross_prev = store_metric(q, embed(prev.encoder, bench.gallery, "gallery", "prev", 0), metric);
            g.m_cross_first = store_metric(q, first_gallery, metric);
            g.m_first_self = first_self;
            g.m_prev_self = prev_self;
            g.m_oracle_self = oracle_self[k - 1];
            g.delta_up = upgrade_gain(g.m_cross, first_self);
            g.delta_up_prev = upgrade_gain(g.m_cross, prev_self);
            g.delta_down = degradation(g.m_oracle_self, g.m_self);
            g.gallery_generation = deployed.generation;
            g.gallery_tag = deployed.model_tag;
            by_method.push_back(g);
            prev = run.frozen();
            prev_self = g.m_self;
            runs.push_back(std::move(run));
        }
        out.runs.push_back(std::move(runs));
        out.final_galleries.push_back(std::move(deployed));
    }
    const std::size_t gens = sets.size() - 1;
    for (std::size_t k = 0; k < gens; ++k)
        for (std::size_t mi = 0; mi < methods.size(); ++mi) out.reports.push_back(by_method[mi * gens + k]);
    return out;
}

}  // namespace dmu
