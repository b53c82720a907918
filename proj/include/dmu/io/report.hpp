// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmu/engine.hpp"
#include "dmu/errors.hpp"
#include "dmu/eval.hpp"
#include "dmu/experiment.hpp"
#include "dmu/io/config.hpp"

namespace dmu::io {

/// Two-decimal rendering used by summary tables.
inline std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// Key-value records; numbers are written losslessly.
class RecordWriter {
public:
    RecordWriter& add(const std::string& key, double v) { return line(key, format_double(v)); }
    RecordWriter& add(const std::string& key, const std::optional<double>& v) {
        return v ? add(key, *v) : *this;
    }
    RecordWriter& add(const std::string& key, bool v) { return line(key, v ? "true" : "false"); }
    RecordWriter& add(const std::string& key, const std::string& v) { return line(key, v); }
    RecordWriter& add(const std::string& key, std::uint64_t v) { return line(key, std::to_string(v)); }

    std::string str() const { return os_.str(); }

private:
    RecordWriter& line(const std::string& key, const std::string& value) {
        os_ << key << " = " << value << "\n";
        return *this;
    }
    std::ostringstream os_;
};

/// `key = value` lines back into a map; blank lines and `#` comments are skipped.
inline std::map<std::string, std::string> parse_records(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw IoError("malformed record line '" + line + "'");
        out[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return out;
}

inline std::string report_text(const EvalReport& r) {
    RecordWriter w;
    w.add("m_self", r.m_self)
        .add("m_old_self", r.m_old_self)
        .add("m_cross", r.m_cross)
        .add("m_adapted", r.m_adapted)
        .add("m_oracle_self", r.m_oracle_self)
        .add("delta_up", r.delta_up)
        .add("delta_up_raw", r.delta_up_raw)
        .add("delta_down", r.delta_down);
    if (r.chain) {
        w.add("chain_old_below_cross", r.chain->old_below_cross)
            .add("chain_cross_below_adapted", r.chain->cross_below_adapted)
            .add("chain_holds", r.chain->holds());
    }
    return w.str();
}

/// Two columns (lambda_old, lambda_fa), tab separated.
inline std::string scatter_tsv(const std::vector<std::pair<double, double>>& pairs) {
    std::string out = "lambda_old\tlambda_fa\n";
    for (const auto& [a, b] : pairs) out += format_double(a) + "\t" + format_double(b) + "\n";
    return out;
}

/// One line per epoch.
inline std::string epoch_log_tsv(const std::vector<EpochRecord>& trace) {
    std::string out = "epoch\tlr\tl_new\tl_sbc\tl_fa\ttotal\n";
    for (const EpochRecord& e : trace) {
        out += std::to_string(e.epoch) + "\t" + format_double(e.lr) + "\t" + format_double(e.l_new) + "\t" +
               format_double(e.l_sbc) + "\t" + format_double(e.l_fa) + "\t" + format_double(e.total) + "\n";
    }
    return out;
}

inline std::string generation_report_text(const GenerationReport& g) {
    RecordWriter w;
    w.add("generation", static_cast<std::uint64_t>(g.generation))
        .add("method", std::string(to_string(g.method)))
        .add("fraction", g.fraction)
        .add("m_self", g.m_self)
        .add("m_cross", g.m_cross)
        .add("m_cross_prev", g.m_cross_prev)
        .add("m_cross_first", g.m_cross_first)
        .add("m_first_self", g.m_first_self)
        .add("m_prev_self", g.m_prev_self)
        .add("m_oracle_self", g.m_oracle_self)
        .add("delta_up", g.delta_up)
        .add("delta_up_prev", g.delta_up_prev)
        .add("delta_down", g.delta_down)
        .add("gallery_generation", static_cast<std::uint64_t>(g.gallery_generation))
        .add("gallery_tag", g.gallery_tag);
    return w.str();
}

/// Upgrade summary: one row per method.
inline std::string upgrade_summary(const UpgradeResult& u) {
    std::ostringstream os;
    os << "method\tM(n,n)\tM(n,o)\tM(n,psi(o))\tdelta_up\tdelta_down\n";
    os << "oracle/old\t" << fixed2(u.m_oracle_self) << "/" << fixed2(u.m_old_self) << "\t-\t-\t-\t-\n";
    for (const MethodResult& m : u.methods) {
        const EvalReport& r = m.report;
        os << to_string(m.method) << "\t" << fixed2(r.m_self) << "\t" << fixed2(*r.m_cross) << "\t"
           << (r.m_adapted ? fixed2(*r.m_adapted) : "-") << "\t" << fixed2(*r.delta_up) << "\t"
           << fixed2(*r.delta_down) << "\n";
    }
    return os.str();
}

/// Sequence summary: per generation M(n,n), M(n,o), delta_up, delta_down.
inline std::string sequence_summary(const std::vector<GenerationReport>& reports) {
    std::size_t gens = 0;
    std::vector<Method> methods;
    for (const GenerationReport& g : reports) {
        gens = std::max(gens, g.generation);
        if (std::find(methods.begin(), methods.end(), g.method) == methods.end()) methods.push_back(g.method);
    }
    auto find = [&](Method m, std::size_t k) -> const GenerationReport& {
        for (const GenerationReport& g : reports)
            if (g.method == m && g.generation == k) return g;
        throw InvalidArgument("sequence_summary: missing generation report");
    };
    std::ostringstream os;
    os << "method";
    for (std::size_t k = 1; k <= gens; ++k)
        os << "\tgen" << k << ":M(n,n)\tgen" << k << ":M(n,o)\tgen" << k << ":delta_up\tgen" << k << ":delta_down";
    os << "\n";
    if (!methods.empty()) {
        os << "oracle/old";
        for (std::size_t k = 1; k <= gens; ++k) {
            const GenerationReport& g = find(methods.front(), k);
            os << "\t" << fixed2(g.m_oracle_self) << "/" << fixed2(g.m_first_self) << "\t-\t-\t-";
        }
        os << "\n";
    }
    for (Method m : methods) {
        os << to_string(m);
        for (std::size_t k = 1; k <= gens; ++k) {
            const GenerationReport& g = find(m, k);
            os << "\t" << fixed2(g.m_self) << "\t" << fixed2(g.m_cross) << "\t" << fixed2(g.delta_up) << "\t"
               << fixed2(g.delta_down);
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace dmu::io
