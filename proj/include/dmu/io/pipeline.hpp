// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "dmu/engine.hpp"
#include "dmu/errors.hpp"
#include "dmu/experiment.hpp"
#include "dmu/io/config.hpp"
#include "dmu/io/files.hpp"
#include "dmu/io/report.hpp"

namespace dmu::io {

/// Refuses a non-empty output directory unless `force`.
inline void guard_output_dir(const fs::path& dir, bool force) {
    if (!force && fs::exists(dir) && !fs::is_empty(dir)) {
        throw IoError(dir.string() + " is not empty (use --force to overwrite)");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// Checkpoint of a finished run.
inline Checkpoint checkpoint_of(const TrainRun& run, std::uint32_t generation) {
    Checkpoint c;
    c.meta = {generation, std::string(to_string(run.config.method)), run.config.seed};
    c.encoder = run.encoder;
    c.classifier = run.classifier;
    c.adapter = run.adapter;
    return c;
}

/// model.ckpt and epochs.tsv inside `dir`.
inline void save_run(const fs::path& dir, const TrainRun& run, std::uint32_t generation, bool force) {
    save_checkpoint(dir / "model.ckpt", checkpoint_of(run, generation), force);
    write_text(dir / "epochs.tsv", epoch_log_tsv(run.trace), force);
}

inline void save_prepared(const fs::path& data_dir, const PreparedData& d, bool force) {
    save_dataset(data_dir / "train.ds", d.train, force);
    save_dataset(data_dir / "query.ds", d.bench.query, force);
    save_dataset(data_dir / "gallery.ds", d.bench.gallery, force);
}

/// Writes the upgrade comparison under `out`.
inline UpgradeResult write_upgrade(const ExperimentConfig& cfg, const PreparedData& data, const fs::path& out,
                                   bool force) {
    UpgradeResult u = run_upgrade(cfg, data);
    save_dataset(out / "data" / "old.ds", data.split.old_set, force);
    save_dataset(out / "data" / "new.ds", data.split.new_set, force);
    save_run(out / "runs" / "old", u.old_run, 0, force);
    save_run(out / "runs" / "oracle", u.oracle_run, 1, force);
    for (const MethodResult& m : u.methods) {
        const std::string name(to_string(m.method));
        save_run(out / "runs" / name, m.run, 1, force);
        write_text(out / "reports" / (name + ".txt"), report_text(m.report), force);
        if (!m.report.entropy_pairs.empty()) {
            write_text(out / "reports" / (name + "_scatter.tsv"), scatter_tsv(m.report.entropy_pairs), force);
        }
    }
    write_text(out / "reports" / "summary.tsv", upgrade_summary(u), force);
    return u;
}

/// Writes the sequential-upgrade protocol under `out`/sequence.
inline SequenceResult write_sequence(const ExperimentConfig& cfg, const PreparedData& data, const fs::path& out,
                                     bool force) {
    SequenceResult s = sequential_upgrade(data.train, data.bench, cfg.fractions, cfg.methods, cfg);
    const fs::path dir = out / "sequence";
    save_run(dir / "gen0", s.first, 0, force);
    for (std::size_t k = 0; k < s.oracles.size(); ++k) {
        save_run(dir / ("oracle_gen" + std::to_string(k + 1)), s.oracles[k], static_cast<std::uint32_t>(k + 1), force);
    }
    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        const std::string name(to_string(cfg.methods[mi]));
        for (std::size_t k = 0; k < s.runs[mi].size(); ++k) {
            save_run(dir / (name + "_gen" + std::to_string(k + 1)), s.runs[mi][k], static_cast<std::uint32_t>(k + 1),
                     force);
        }
        save_store(dir / (name + "_gallery.store"), s.final_galleries[mi], force);
    }
    for (const GenerationReport& g : s.reports) {
        write_text(dir / "reports" / (std::string(to_string(g.method)) + "_gen" + std::to_string(g.generation) + ".txt"),
                   generation_report_text(g), force);
    }
    write_text(dir / "summary.tsv", sequence_summary(s.reports), force);
    return s;
}

/// Full pipeline: data, upgrade comparison and (optionally) the sequence.
inline void run_pipeline(const ExperimentConfig& cfg, bool with_sequence, bool force) {
    cfg.validate();
    const fs::path out = cfg.output_dir;
    guard_output_dir(out, force);
    write_text(out / "config.ini", to_ini(cfg), force);
    const PreparedData data = prepare_data(cfg);
    save_prepared(out / "data", data, force);
    write_upgrade(cfg, data, out, force);
    if (with_sequence) write_sequence(cfg, data, out, force);
}

}  // namespace dmu::io
