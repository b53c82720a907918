// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dmu/errors.hpp"
#include "dmu/experiment.hpp"

namespace dmu::io {

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) throw InvalidArgument("cannot format number");
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, std::string_view key) {
    double v = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size()) {
        throw InvalidArgument(std::string(key) + ": '" + std::string(s) + "' is not a number");
    }
    return v;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view key) {
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size()) {
        throw InvalidArgument(std::string(key) + ": '" + std::string(s) + "' is not a non-negative integer");
    }
    return v;
}

inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != ' ' && ch != '\t') {
            cur.push_back(ch);
        }
    }
    if (!cur.empty() || !out.empty()) out.push_back(cur);
    return out;
}

template <class T, class F>
std::string join_list(const std::vector<T>& v, F&& fmt) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += fmt(v[i]);
    }
    return out;
}

/// One config entry: `key` inside `[section]`, also the CLI flag --section.key.
struct ConfigField {
    std::string section;
    std::string key;
    std::string help;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;

    std::string path() const { return section + "." + key; }
};

namespace detail {

template <class Ref>
ConfigField size_field(std::string section, std::string key, std::string help, Ref ref) {
    std::string path = section + "." + key;
    return {std::move(section), std::move(key), std::move(help),
            [ref](const ExperimentConfig& c) { return std::to_string(ref(c)); },
            [ref, path](ExperimentConfig& c, const std::string& v) {
                ref(c) = static_cast<std::size_t>(parse_u64(v, path));
            }};
}

template <class Ref>
ConfigField real_field(std::string section, std::string key, std::string help, Ref ref) {
    std::string path = section + "." + key;
    return {std::move(section), std::move(key), std::move(help),
            [ref](const ExperimentConfig& c) { return format_double(ref(c)); },
            [ref, path](ExperimentConfig& c, const std::string& v) { ref(c) = parse_double(v, path); }};
}

template <class Ref>
ConfigField widths_field(std::string section, std::string key, std::string help, Ref ref) {
    std::string path = section + "." + key;
    return {std::move(section), std::move(key), std::move(help),
            [ref](const ExperimentConfig& c) {
                return join_list(ref(c), [](std::size_t w) { return std::to_string(w); });
            },
            [ref, path](ExperimentConfig& c, const std::string& v) {
                std::vector<std::size_t> w;
                for (const std::string& s : split_list(v)) w.push_back(static_cast<std::size_t>(parse_u64(s, path)));
                ref(c) = std::move(w);
            }};
}

}  // namespace detail

/// Every configurable field, in file order.
inline const std::vector<ConfigField>& config_fields() {
    using detail::real_field;
    using detail::size_field;
    using detail::widths_field;
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        f.push_back({"experiment", "seed", "root seed of every random stream",
                     [](const ExperimentConfig& c) { return std::to_string(c.seed); },
                     [](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64(v, "experiment.seed"); }});
        f.push_back({"experiment", "output_dir", "directory receiving all artifacts",
                     [](const ExperimentConfig& c) { return c.output_dir; },
                     [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }});

        f.push_back(size_field("dataset", "class_count", "number of classes",
                               [](auto& c) -> auto& { return c.dataset.class_count; }));
        f.push_back(size_field("dataset", "per_class", "training samples per class",
                               [](auto& c) -> auto& { return c.dataset.per_class; }));
        f.push_back(size_field("dataset", "test_per_class", "held-out test samples per class",
                               [](auto& c) -> auto& { return c.test_per_class; }));
        f.push_back({"dataset", "input_dim", "input feature width (also the encoder input width)",
                     [](const ExperimentConfig& c) { return std::to_string(c.dataset.input_dim); },
                     [](ExperimentConfig& c, const std::string& v) {
                         c.dataset.input_dim = static_cast<std::size_t>(parse_u64(v, "dataset.input_dim"));
                         c.train.encoder.input_dim = c.dataset.input_dim;
                     }});
        f.push_back(real_field("dataset", "intra_class_spread", "standard deviation around class means",
                               [](auto& c) -> auto& { return c.dataset.intra_class_spread; }));
        f.push_back(real_field("dataset", "noise_fraction", "share of samples drawn with 3x spread",
                               [](auto& c) -> auto& { return c.dataset.noise_fraction; }));

        f.push_back({"split", "kind", "extended_data | open_data | extended_class",
                     [](const ExperimentConfig& c) { return std::string(to_string(c.split_kind)); },
                     [](ExperimentConfig& c, const std::string& v) { c.split_kind = parse_split_kind(v); }});
        f.push_back(real_field("split", "old_fraction", "share of data (or classes) in the old training set",
                               [](auto& c) -> auto& { return c.old_fraction; }));

        f.push_back(size_field("bench", "query_per_class", "test samples per class used as queries",
                               [](auto& c) -> auto& { return c.query_per_class; }));
        f.push_back({"bench", "metric", "map | tar",
                     [](const ExperimentConfig& c) { return std::string(c.metric.kind == MetricKind::map ? "map" : "tar"); },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "map") c.metric.kind = MetricKind::map;
                         else if (v == "tar") c.metric.kind = MetricKind::tar;
                         else throw InvalidArgument("bench.metric: expected map or tar, got '" + v + "'");
                     }});
        f.push_back(size_field("bench", "map_k", "ranking depth of mAP@k",
                               [](auto& c) -> auto& { return c.metric.map_k; }));
        f.push_back(real_field("bench", "far", "false-accept rate for TAR@FAR",
                               [](auto& c) -> auto& { return c.metric.far; }));
        f.push_back(size_field("bench", "scatter_samples", "gallery items in the entropy scatter",
                               [](auto& c) -> auto& { return c.scatter_samples; }));

        f.push_back(widths_field("model", "hidden", "encoder hidden block widths",
                                 [](auto& c) -> auto& { return c.train.encoder.hidden; }));
        f.push_back(widths_field("model", "old_hidden", "old encoder hidden widths (empty = same as hidden)",
                                 [](auto& c) -> auto& { return c.old_hidden; }));
        f.push_back({"model", "embedding_dim", "embedding width",
                     [](const ExperimentConfig& c) { return std::to_string(c.train.encoder.embedding_dim); },
                     [](ExperimentConfig& c, const std::string& v) {
                         c.train.encoder.embedding_dim = static_cast<std::size_t>(parse_u64(v, "model.embedding_dim"));
                         c.train.adapter.embedding_dim = c.train.encoder.embedding_dim;
                     }});
        f.push_back(size_field("model", "adapter_hidden", "adapter hidden width",
                               [](auto& c) -> auto& { return c.train.adapter.hidden_dim; }));

        f.push_back(size_field("train", "epochs", "training epochs",
                               [](auto& c) -> auto& { return c.train.epochs; }));
        f.push_back(size_field("train", "warmup_epochs", "linear warmup epochs",
                               [](auto& c) -> auto& { return c.train.warmup_epochs; }));
        f.push_back(real_field("train", "base_lr", "peak learning rate",
                               [](auto& c) -> auto& { return c.train.base_lr; }));
        f.push_back(real_field("train", "momentum", "SGD momentum",
                               [](auto& c) -> auto& { return c.train.momentum; }));
        f.push_back(real_field("train", "weight_decay", "weight decay (not on batch-norm scale/shift)",
                               [](auto& c) -> auto& { return c.train.weight_decay; }));
        f.push_back(size_field("train", "batch_size", "mini-batch size",
                               [](auto& c) -> auto& { return c.train.batch_size; }));
        f.push_back(real_field("train", "augment_noise", "std of the additive noise of each view",
                               [](auto& c) -> auto& { return c.train.augment_noise; }));
        f.push_back(real_field("train", "clip_norm", "global gradient-norm clip (0 = off)",
                               [](auto& c) -> auto& { return c.train.clip_norm; }));
        f.push_back(real_field("train", "arcface_scale", "ArcFace scale s",
                               [](auto& c) -> auto& { return c.train.arcface.scale; }));
        f.push_back(real_field("train", "arcface_margin", "ArcFace margin m (radians)",
                               [](auto& c) -> auto& { return c.train.arcface.margin; }));
        f.push_back({"train", "compat_target", "old_prototypes | new_prototypes",
                     [](const ExperimentConfig& c) {
                         return std::string(c.train.compat_target == CompatTarget::old_prototypes ? "old_prototypes"
                                                                                                  : "new_prototypes");
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "old_prototypes") c.train.compat_target = CompatTarget::old_prototypes;
                         else if (v == "new_prototypes") c.train.compat_target = CompatTarget::new_prototypes;
                         else throw InvalidArgument("train.compat_target: unknown value '" + v + "'");
                     }});
        f.push_back(real_field("train", "new_coef", "coefficient of the new-model loss",
                               [](auto& c) -> auto& { return c.train.new_coef; }));
        f.push_back(real_field("train", "compat_coef", "coefficient of the compatibility loss",
                               [](auto& c) -> auto& { return c.train.compat_coef; }));
        f.push_back(real_field("train", "fa_coef", "coefficient of the forward-adaptation loss",
                               [](auto& c) -> auto& { return c.train.fa_coef; }));

        f.push_back({"upgrade", "methods", "compatible methods to compare, comma separated",
                     [](const ExperimentConfig& c) {
                         return join_list(c.methods, [](Method m) { return std::string(to_string(m)); });
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         std::vector<Method> ms;
                         for (const std::string& s : split_list(v)) ms.push_back(parse_method(s));
                         c.methods = std::move(ms);
                     }});
        f.push_back({"sequence", "fractions", "nested data fractions, strictly increasing",
                     [](const ExperimentConfig& c) { return join_list(c.fractions, format_double); },
                     [](ExperimentConfig& c, const std::string& v) {
                         std::vector<double> fr;
                         for (const std::string& s : split_list(v)) fr.push_back(parse_double(s, "sequence.fractions"));
                         c.fractions = std::move(fr);
                     }});
        return f;
    }();
    return fields;
}

/// Sets `section.key` to `value`.
inline void set_config_value(ExperimentConfig& cfg, std::string_view path, const std::string& value) {
    for (const ConfigField& f : config_fields()) {
        if (f.path() == path) {
            f.set(cfg, value);
            return;
        }
    }
    throw InvalidArgument("unknown config key '" + std::string(path) + "'");
}

/// Applies an INI document on top of `cfg`; unknown sections or keys are errors.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw InvalidArgument(std::string("config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw InvalidArgument("config: key '" + section + "' outside any section");
        }
        for (const auto& [key, value] : body) set_config_value(cfg, section + "." + key, value.data());
    }
}

inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    apply_config_text(cfg, text);
    return cfg;
}

/// Canonical INI text; parse_config(to_ini(c)) reproduces c.
inline std::string to_ini(const ExperimentConfig& cfg) {
    std::ostringstream os;
    std::string section;
    for (const ConfigField& f : config_fields()) {
        if (f.section != section) {
            if (!section.empty()) os << "\n";
            section = f.section;
            os << "[" << section << "]\n";
        }
        os << "# " << f.help << "\n" << f.key << " = " << f.get(cfg) << "\n";
    }
    return os.str();
}

}  // namespace dmu::io
