// SPDX-License-Identifier: Apache-2.0
// Command-line front end: dataset generation, training, gallery refresh and evaluation.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmu/dmu.hpp"

namespace fs = std::filesystem;
using namespace dmu;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2, kIo = 3 };

/// Config file plus per-field --section.key overrides.
struct ConfigOptions {
    std::string file;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;

    void attach(CLI::App& app) {
        app.add_option("-c,--config", file, "INI config file (flags override it)");
        for (const io::ConfigField& f : io::config_fields()) {
            options[f.path()] = app.add_option("--" + f.path(), values[f.path()], f.help)->group("Config");
        }
    }

    ExperimentConfig resolve() const {
        ExperimentConfig cfg;
        if (!file.empty()) io::apply_config_text(cfg, io::read_text(file));
        for (const auto& [path, opt] : options)
            if (opt->count() > 0) io::set_config_value(cfg, path, values.at(path));
        cfg.validate();
        return cfg;
    }
};

io::Checkpoint load_model(const std::string& path, bool need_adapter = false) {
    io::Checkpoint c = io::load_checkpoint(path);
    if (!c.encoder || !c.classifier) throw InvalidArgument(path + ": checkpoint lacks an encoder or classifier");
    if (need_adapter && !c.adapter) throw InvalidArgument(path + ": checkpoint has no adapter");
    return c;
}

std::string model_tag(const io::Checkpoint& c) {
    return c.meta.method + "-gen" + std::to_string(c.meta.generation);
}

int cmd_generate(const ConfigOptions& co, bool force) {
    const ExperimentConfig cfg = co.resolve();
    const fs::path out = cfg.output_dir;
    const PreparedData data = prepare_data(cfg);
    io::save_prepared(out / "data", data, force);
    const std::string ini = io::to_ini(cfg);
    io::write_text(out / "config.ini", ini, force);
    std::cout << ini;
    std::cerr << "wrote " << (out / "data").string() << "/{train,query,gallery}.ds (" << data.train.size()
              << " training samples)\n";
    return kOk;
}

int cmd_split(const ConfigOptions& co, std::string data_path, std::string old_out, std::string new_out, bool force) {
    const ExperimentConfig cfg = co.resolve();
    const fs::path out = cfg.output_dir;
    if (data_path.empty()) data_path = (out / "data" / "train.ds").string();
    if (old_out.empty()) old_out = (out / "data" / "old.ds").string();
    if (new_out.empty()) new_out = (out / "data" / "new.ds").string();
    const LabeledVectorSet data = io::load_dataset(data_path);
    const ScenarioSplit s = make_split(data, cfg.split_kind, cfg.old_fraction, derive_seed(cfg.seed, "split"));
    io::save_dataset(old_out, s.old_set, force);
    io::save_dataset(new_out, s.new_set, force);
    std::cout << to_string(s.kind) << ": old " << s.old_set.size() << " samples, new " << s.new_set.size()
              << " samples\n";
    return kOk;
}

int cmd_train(const ConfigOptions& co, const std::string& method_name, std::string data_path,
              const std::string& old_path, std::string out_dir, bool force) {
    const ExperimentConfig cfg = co.resolve();
    const Method method = parse_method(method_name);
    const fs::path out = cfg.output_dir;
    if (data_path.empty()) {
        data_path = (out / "data" / (method == Method::old_model ? "old.ds" : "new.ds")).string();
    }
    if (out_dir.empty()) out_dir = (out / "runs" / method_name).string();
    if (is_compatible(method) && old_path.empty()) {
        throw InvalidArgument("method '" + method_name + "' needs --old CHECKPOINT");
    }

    const LabeledVectorSet data = io::load_dataset(data_path);
    std::optional<FrozenModel> old;
    std::uint32_t generation = method == Method::old_model ? 0 : 1;
    if (!old_path.empty()) {
        io::Checkpoint c = load_model(old_path);
        old = FrozenModel{std::move(*c.encoder), std::move(*c.classifier)};
        generation = c.meta.generation + 1;
    }
    const TrainConfig tc = cfg.stage(method, method == Method::old_model ? cfg.old_seed() : cfg.new_seed());
    const TrainRun run = train(data, tc, old ? &*old : nullptr);
    io::save_run(out_dir, run, generation, force);
    io::write_text(fs::path(out_dir) / "config.ini", io::to_ini(cfg), force);
    std::cout << "trained " << method_name << " (generation " << generation << ") on " << data.size()
              << " samples; final loss " << io::format_double(run.trace.back().total) << "\n";
    return kOk;
}

int cmd_embed(const std::string& model_path, const std::string& data_path, const std::string& out_path,
              const std::string& name, bool force) {
    const io::Checkpoint c = load_model(model_path);
    const LabeledVectorSet data = io::load_dataset(data_path);
    const EmbeddingStore s = embed(*c.encoder, data, name, model_tag(c), c.meta.generation);
    io::save_store(out_path, s, force);
    std::cout << "embedded " << s.size() << " items with " << s.model_tag << "\n";
    return kOk;
}

int cmd_adapt_gallery(const std::string& model_path, const std::string& store_path, const std::string& out_path,
                      bool force_adapt, bool force) {
    const io::Checkpoint c = load_model(model_path, true);
    const EmbeddingStore in = io::load_store(store_path);
    const auto t0 = std::chrono::steady_clock::now();
    const EmbeddingStore out = adapt_store(*c.adapter, in, model_tag(c) + "-psi", c.meta.generation, force_adapt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::save_store(out_path, out, force);
    std::cout << "adapted " << out.size() << " items to generation " << out.generation << " in "
              << io::fixed2(secs) << " s (" << io::fixed2(secs > 0 ? out.size() / secs : 0.0) << " items/s)\n";
    return kOk;
}

int cmd_evaluate(const ConfigOptions& co, const std::string& new_path, const std::string& queries,
                 const std::string& gallery, const std::string& old_path, const std::string& oracle_path,
                 const std::string& store_path, const std::string& out_dir, bool force) {
    const ExperimentConfig cfg = co.resolve();
    const io::Checkpoint nc = load_model(new_path);
    const QueryGalleryBench bench{io::load_dataset(queries), io::load_dataset(gallery)};
    std::optional<io::Checkpoint> oc;
    if (!old_path.empty()) oc = load_model(old_path);

    UpgradeModels models;
    models.new_encoder = &*nc.encoder;
    if (oc) {
        models.old_encoder = &*oc->encoder;
        if (nc.adapter) models.adapter = &*nc.adapter;
    }
    if (!oracle_path.empty()) {
        const io::Checkpoint orc = load_model(oracle_path);
        models.m_oracle_self = evaluate_upgrade(bench, UpgradeModels{&*orc.encoder, nullptr, nullptr, std::nullopt}, cfg.metric).m_self;
    }
    EvalReport r = evaluate_upgrade(bench, models, cfg.metric);
    if (models.adapter) {
        r.entropy_pairs = entropy_scatter(bench.gallery.vectors, *oc->encoder, *oc->classifier, *nc.adapter,
                                          *nc.classifier, std::min(cfg.scatter_samples, bench.gallery.size()),
                                          derive_seed(cfg.seed, "scatter"));
    }
    std::string text = io::report_text(r);
    if (!store_path.empty()) {
        const EmbeddingStore store = io::load_store(store_path);
        const double m = cross_model_eval(*nc.encoder, store, bench.query, cfg.metric);
        text += io::RecordWriter().add("m_store", m).add("store_tag", store.model_tag).str();
    }
    const fs::path dir = out_dir.empty() ? fs::path(cfg.output_dir) / "eval" : fs::path(out_dir);
    io::write_text(dir / "report.txt", text, force);
    if (!r.entropy_pairs.empty()) io::write_text(dir / "scatter.tsv", io::scatter_tsv(r.entropy_pairs), force);
    std::cout << text;
    return kOk;
}

int cmd_sequence(const ConfigOptions& co, bool force) {
    const ExperimentConfig cfg = co.resolve();
    const fs::path out = cfg.output_dir;
    io::guard_output_dir(out / "sequence", force);
    const SequenceResult s = io::write_sequence(cfg, prepare_data(cfg), out, force);
    std::cout << io::sequence_summary(s.reports);
    return kOk;
}

int cmd_pipeline(const ConfigOptions& co, bool no_sequence, bool force) {
    const ExperimentConfig cfg = co.resolve();
    io::run_pipeline(cfg, !no_sequence, force);
    const fs::path out = cfg.output_dir;
    std::cout << io::read_text(out / "reports" / "summary.tsv");
    if (!no_sequence) std::cout << "\n" << io::read_text(out / "sequence" / "summary.tsv");
    return kOk;
}

int cmd_report(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".txt" && e.path().parent_path().filename() == "reports")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    const std::vector<std::string> keys{"m_self", "m_cross", "m_adapted", "delta_up", "delta_down"};
    std::cout << "report";
    for (const std::string& k : keys) std::cout << "\t" << k;
    std::cout << "\n";
    for (const fs::path& f : files) {
        const auto rec = io::parse_records(io::read_text(f));
        std::cout << fs::relative(f, dir).string();
        for (const std::string& k : keys) {
            auto it = rec.find(k);
            std::cout << "\t" << (it == rec.end() ? "-" : io::fixed2(io::parse_double(it->second, k)));
        }
        std::cout << "\n";
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Backward-compatible embedding upgrades on synthetic retrieval benchmarks"};
    app.require_subcommand(1);
    app.fallthrough();
    bool force = false;
    app.add_flag("-f,--force", force, "overwrite existing outputs");

    ConfigOptions gen_cfg, split_cfg, train_cfg, eval_cfg, seq_cfg, pipe_cfg;

    auto* gen = app.add_subcommand("generate", "write the synthetic training pool and test bench");
    gen_cfg.attach(*gen);

    std::string split_data, split_old, split_new;
    auto* split = app.add_subcommand("split", "split a training pool into old and new sets");
    split_cfg.attach(*split);
    split->add_option("--data", split_data, "training pool (default <output_dir>/data/train.ds)");
    split->add_option("--old-out", split_old, "old set output");
    split->add_option("--new-out", split_new, "new set output");

    std::string method, train_data, train_old, train_out;
    auto* tr = app.add_subcommand("train", "train one model");
    train_cfg.attach(*tr);
    tr->add_option("-m,--method", method, "old | oracle | bct | dmu | dmu_least_conf | bct_regression | dmu_regression")
        ->required();
    tr->add_option("--data", train_data, "training set (default <output_dir>/data/{old,new}.ds)");
    tr->add_option("--old", train_old, "frozen old checkpoint (compatible methods)");
    tr->add_option("-o,--out", train_out, "run directory (default <output_dir>/runs/<method>)");

    std::string emb_model, emb_data, emb_out, emb_name = "gallery";
    auto* emb = app.add_subcommand("embed", "build an embedding store from a checkpoint and a dataset");
    emb->add_option("--model", emb_model, "checkpoint")->required();
    emb->add_option("--data", emb_data, "dataset")->required();
    emb->add_option("-o,--out", emb_out, "store output")->required();
    emb->add_option("--name", emb_name, "store name");

    std::string ad_model, ad_store, ad_out;
    bool ad_force = false;
    auto* ad = app.add_subcommand("adapt-gallery", "refresh a gallery store with a forward-adaptation head");
    ad->add_option("--model", ad_model, "checkpoint with an adapter")->required();
    ad->add_option("--gallery", ad_store, "gallery store")->required();
    ad->add_option("-o,--out", ad_out, "adapted store output")->required();
    ad->add_flag("--force-adapt", ad_force, "adapt even if the store is already at the target generation");

    std::string ev_new, ev_queries, ev_gallery, ev_old, ev_oracle, ev_store, ev_out;
    auto* ev = app.add_subcommand("evaluate", "cross-model retrieval metrics");
    eval_cfg.attach(*ev);
    ev->add_option("--new", ev_new, "query (new) model checkpoint")->required();
    ev->add_option("--queries", ev_queries, "query dataset")->required();
    ev->add_option("--gallery-data", ev_gallery, "gallery dataset")->required();
    ev->add_option("--old", ev_old, "old model checkpoint");
    ev->add_option("--oracle", ev_oracle, "oracle checkpoint (enables delta_down)");
    ev->add_option("--gallery-store", ev_store, "deployed gallery store to score against");
    ev->add_option("-o,--out", ev_out, "report directory (default <output_dir>/eval)");

    auto* seq = app.add_subcommand("sequence", "sequential upgrades over nested data fractions");
    seq_cfg.attach(*seq);

    bool no_sequence = false;
    auto* pipe = app.add_subcommand("pipeline", "data, all methods, reports and the sequence in one run");
    pipe_cfg.attach(*pipe);
    pipe->add_flag("--no-sequence", no_sequence, "skip the sequential-upgrade stage");

    std::string rep_dir;
    auto* rep = app.add_subcommand("report", "tabulate report records under a directory");
    rep->add_option("dir", rep_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_generate(gen_cfg, force);
        if (*split) return cmd_split(split_cfg, split_data, split_old, split_new, force);
        if (*tr) return cmd_train(train_cfg, method, train_data, train_old, train_out, force);
        if (*emb) return cmd_embed(emb_model, emb_data, emb_out, emb_name, force);
        if (*ad) return cmd_adapt_gallery(ad_model, ad_store, ad_out, ad_force, force);
        if (*ev) {
            return cmd_evaluate(eval_cfg, ev_new, ev_queries, ev_gallery, ev_old, ev_oracle, ev_store, ev_out, force);
        }
        if (*seq) return cmd_sequence(seq_cfg, force);
        if (*pipe) return cmd_pipeline(pipe_cfg, no_sequence, force);
        if (*rep) return cmd_report(rep_dir);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
