// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmu/data.hpp"
#include "dmu/errors.hpp"
#include "dmu/eval.hpp"
#include "dmu/io/binary.hpp"
#include "dmu/models.hpp"

namespace dmu::io {

namespace fs = std::filesystem;

inline constexpr std::string_view kDatasetMagic = "DMUDATA1";
inline constexpr std::string_view kCheckpointMagic = "DMUCKPT1";
inline constexpr std::string_view kStoreMagic = "DMUSTOR1";

/// Upper bound on element counts read from headers; guards against corrupt files.
inline constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

namespace detail {

inline std::uint64_t checked_count(std::uint64_t n, std::string_view what) {
    if (n > kMaxElements) throw IoError(std::string(what) + ": implausible element count");
    return n;
}

inline std::uint64_t checked_product(std::uint64_t a, std::uint64_t b, std::string_view what) {
    if (a != 0 && b > kMaxElements / a) throw IoError(std::string(what) + ": implausible element count");
    return a * b;
}

}  // namespace detail

/// Opens `path` for writing; refuses to replace an existing file unless `force`.
inline std::ofstream open_output(const fs::path& path, bool force) {
    if (!force && fs::exists(path)) {
        throw IoError(path.string() + " exists (use --force to overwrite)");
    }
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    return os;
}

inline std::ifstream open_input(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return is;
}

/// Writes a complete text file.
inline void write_text(const fs::path& path, const std::string& text, bool force) {
    std::ofstream os = open_output(path, force);
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
    std::ifstream is = open_input(path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Dataset: magic, u64 N, u64 I, u64 C, u64 seed, f64[N·I] row-major, i32[N] labels, u64[N] ids.

inline void write_dataset(std::ostream& os, const LabeledVectorSet& d) {
    d.validate();
    BinaryWriter w(os);
    w.magic(kDatasetMagic);
    w.u64(d.size());
    w.u64(d.dim());
    w.u64(d.class_count);
    w.u64(d.seed);
    w.f64s(d.vectors.data());
    for (int l : d.labels) w.i32(l);
    for (std::uint64_t id : d.ids) w.u64(id);
}

inline LabeledVectorSet read_dataset(std::istream& is) {
    BinaryReader r(is);
    r.expect_magic(kDatasetMagic, "dataset");
    const auto n = detail::checked_count(r.u64(), "dataset");
    const auto dim = detail::checked_count(r.u64(), "dataset");
    LabeledVectorSet d;
    d.class_count = r.u64();
    d.seed = r.u64();
    d.vectors = Matrix(n, dim, std::vector<double>(detail::checked_product(n, dim, "dataset")));
    r.f64s(d.vectors.data());
    d.labels.resize(n);
    for (int& l : d.labels) l = r.i32();
    d.ids.resize(n);
    for (std::uint64_t& id : d.ids) id = r.u64();
    r.expect_end("dataset");
    d.validate();
    return d;
}

inline void save_dataset(const fs::path& path, const LabeledVectorSet& d, bool force) {
    std::ofstream os = open_output(path, force);
    write_dataset(os, d);
}

inline LabeledVectorSet load_dataset(const fs::path& path) {
    std::ifstream is = open_input(path);
    try {
        return read_dataset(is);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

/// Provenance stored with every checkpoint.
struct CheckpointMeta {
    std::uint32_t generation = 0;
    std::string method;
    std::uint64_t seed = 0;
    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

/// Any combination of encoder, classifier and adapter.
struct Checkpoint {
    CheckpointMeta meta;
    std::optional<EncoderModel> encoder;
    std::optional<ClassifierPrototypes> classifier;
    std::optional<AdapterModel> adapter;
};

// Checkpoint: magic, u32 generation, str method, u64 seed, u8 section mask
// (1 encoder, 2 classifier, 4 adapter), then the present sections in that order:
//   encoder:    u64 input_dim, u64 H, u64[H] hidden, u64 D, u64 n, f64[n] flat
//   classifier: u64 C, u64 D, i32[C] labels, f64[C·D] rows
//   adapter:    u64 D, u64 hidden_dim, u64 n, f64[n] flat
// where flat = Mlp::flatten() (parameters, then running moments).

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
    BinaryWriter w(os);
    w.magic(kCheckpointMagic);
    w.u32(c.meta.generation);
    w.str(c.meta.method);
    w.u64(c.meta.seed);
    w.u8(static_cast<std::uint8_t>((c.encoder ? 1 : 0) | (c.classifier ? 2 : 0) | (c.adapter ? 4 : 0)));
    if (c.encoder) {
        const EncoderSpec& s = c.encoder->spec();
        w.u64(s.input_dim);
        w.u64(s.hidden.size());
        for (std::size_t h : s.hidden) w.u64(h);
        w.u64(s.embedding_dim);
        const std::vector<double> flat = c.encoder->net().flatten();
        w.u64(flat.size());
        w.f64s(flat);
    }
    if (c.classifier) {
        w.u64(c.classifier->class_count());
        w.u64(c.classifier->dim());
        for (int l : c.classifier->class_labels()) w.i32(l);
        w.f64s(c.classifier->weights().data());
    }
    if (c.adapter) {
        w.u64(c.adapter->spec().embedding_dim);
        w.u64(c.adapter->spec().hidden_dim);
        const std::vector<double> flat = c.adapter->net().flatten();
        w.u64(flat.size());
        w.f64s(flat);
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    BinaryReader r(is);
    r.expect_magic(kCheckpointMagic, "checkpoint");
    Checkpoint c;
    c.meta.generation = r.u32();
    c.meta.method = r.str();
    c.meta.seed = r.u64();
    const std::uint8_t mask = r.u8();
    if (mask & ~7u) throw IoError("checkpoint: unknown sections");
    auto read_flat = [&r]() {
        std::vector<double> flat(detail::checked_count(r.u64(), "checkpoint"));
        r.f64s(flat);
        return flat;
    };
    if (mask & 1u) {
        EncoderSpec s;
        s.input_dim = r.u64();
        s.hidden.resize(detail::checked_count(r.u64(), "checkpoint"));
        for (std::size_t& h : s.hidden) h = r.u64();
        s.embedding_dim = r.u64();
        EncoderModel m(s);
        m.net().load_flat(read_flat());
        c.encoder = std::move(m);
    }
    if (mask & 2u) {
        const auto n = detail::checked_count(r.u64(), "checkpoint");
        const auto dim = detail::checked_count(r.u64(), "checkpoint");
        std::vector<int> labels(n);
        for (int& l : labels) l = r.i32();
        Matrix w(n, dim, std::vector<double>(detail::checked_product(n, dim, "checkpoint")));
        r.f64s(w.data());
        c.classifier = ClassifierPrototypes(std::move(w), std::move(labels));
    }
    if (mask & 4u) {
        AdapterSpec s;
        s.embedding_dim = r.u64();
        s.hidden_dim = r.u64();
        AdapterModel m(s);
        m.net().load_flat(read_flat());
        c.adapter = std::move(m);
    }
    r.expect_end("checkpoint");
    return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c, bool force) {
    std::ofstream os = open_output(path, force);
    write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream is = open_input(path);
    try {
        return read_checkpoint(is);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    } catch (const DimensionError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

// Store: magic, str name, str model_tag, u32 generation, u64 N, u64 D,
// f64[N·D] rows, u64[N] ids, i32[N] labels.

inline void write_store(std::ostream& os, const EmbeddingStore& s) {
    s.validate();
    BinaryWriter w(os);
    w.magic(kStoreMagic);
    w.str(s.name);
    w.str(s.model_tag);
    w.u32(s.generation);
    w.u64(s.size());
    w.u64(s.dim());
    w.f64s(s.embeddings.data());
    for (std::uint64_t id : s.ids) w.u64(id);
    for (int l : s.labels) w.i32(l);
}

inline EmbeddingStore read_store(std::istream& is) {
    BinaryReader r(is);
    r.expect_magic(kStoreMagic, "embedding store");
    EmbeddingStore s;
    s.name = r.str();
    s.model_tag = r.str();
    s.generation = r.u32();
    const auto n = detail::checked_count(r.u64(), "embedding store");
    const auto dim = detail::checked_count(r.u64(), "embedding store");
    s.embeddings = Matrix(n, dim, std::vector<double>(detail::checked_product(n, dim, "embedding store")));
    r.f64s(s.embeddings.data());
    s.ids.resize(n);
    for (std::uint64_t& id : s.ids) id = r.u64();
    s.labels.resize(n);
    for (int& l : s.labels) l = r.i32();
    r.expect_end("embedding store");
    s.validate();
    return s;
}

inline void save_store(const fs::path& path, const EmbeddingStore& s, bool force) {
    std::ofstream os = open_output(path, force);
    write_store(os, s);
}

inline EmbeddingStore load_store(const fs::path& path) {
    std::ifstream is = open_input(path);
    try {
        return read_store(is);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

}  // namespace dmu::io
