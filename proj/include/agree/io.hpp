#pragma once

// File formats and store readers/writers.  Binary stores (embeddings,
// attention maps) are little-endian and platform-independent; evaluation
// artifacts (qrels, runs, annotations, manifests, reports) are TSV/JSON.
// Byte layouts are documented in FORMATS.md.  All writers go through a
// temp-file + rename so readers never observe a partial file.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "agree/core.hpp"
#include "agree/evaluation.hpp"

namespace agree {

inline constexpr std::uint16_t kStoreVersion = 1;

namespace detail {

class ByteWriter {
public:
    void put_u8(std::uint8_t v) { buffer_.push_back(v); }
    void put_u16(std::uint16_t v) {
        for (int b = 0; b < 2; ++b) buffer_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
    void put_u32(std::uint32_t v) {
        for (int b = 0; b < 4; ++b) buffer_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
    void put_u64(std::uint64_t v) {
        for (int b = 0; b < 8; ++b) buffer_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
    void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
    void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
    void put_bytes(std::span<const char> bytes) {
        buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
    }
    /// Length-prefixed UTF-8 string (u16 length).
    void put_string16(const std::string& s) {
        require(s.size() <= 0xFFFF, ErrorCode::InvalidArgument, "string longer than 65535 bytes");
        put_u16(static_cast<std::uint16_t>(s.size()));
        put_bytes(std::span<const char>(s.data(), s.size()));
    }

    const std::vector<std::uint8_t>& bytes() const { return buffer_; }

private:
    std::vector<std::uint8_t> buffer_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string source)
        : bytes_(bytes), source_(std::move(source)) {}

    void set_context(std::string context) { context_ = std::move(context); }

    std::uint8_t get_u8() { return take(1)[0]; }
    std::uint16_t get_u16() { return static_cast<std::uint16_t>(gather(2)); }
    std::uint32_t get_u32() { return static_cast<std::uint32_t>(gather(4)); }
    std::uint64_t get_u64() { return gather(8); }
    float get_f32() { return std::bit_cast<float>(get_u32()); }
    double get_f64() { return std::bit_cast<double>(get_u64()); }
    std::string get_string16() {
        std::uint16_t len = get_u16();
        std::span<const std::uint8_t> raw = take(len);
        return std::string(reinterpret_cast<const char*>(raw.data()), raw.size());
    }

    bool exhausted() const { return offset_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - offset_; }

private:
    std::uint64_t gather(int n) {
        std::span<const std::uint8_t> raw = take(n);
        std::uint64_t v = 0;
        for (int b = 0; b < n; ++b) v |= static_cast<std::uint64_t>(raw[b]) << (8 * b);
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        if (offset_ + n > bytes_.size())
            throw Error(ErrorCode::IoTruncated,
                        source_ + ": truncated" + (context_.empty() ? "" : " at " + context_));
        std::span<const std::uint8_t> out = bytes_.subspan(offset_, n);
        offset_ += n;
        return out;
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t offset_ = 0;
    std::string source_;
    std::string context_;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::NotFound, "cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

inline void atomic_write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path target(path);
    std::filesystem::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorCode::InvalidArgument, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        require(out.good(), ErrorCode::InvalidArgument, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, target);
}

inline void atomic_write_text(const std::string& path, const std::string& text) {
    atomic_write_file(path, std::span<const std::uint8_t>(
                                reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string format_double(double v) {
    char buf[40];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

inline double parse_double(std::string_view text, const std::string& where) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    require(ec == std::errc() && ptr == text.data() + text.size(), ErrorCode::IoMalformed,
            where + ": bad number '" + std::string(text) + "'");
    return v;
}

inline long parse_int(std::string_view text, const std::string& where) {
    long v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    require(ec == std::errc() && ptr == text.data() + text.size(), ErrorCode::IoMalformed,
            where + ": bad integer '" + std::string(text) + "'");
    return v;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        std::size_t tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return fields;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Embedding store ("MVE1")
// ---------------------------------------------------------------------------

/// On-disk collection of embedding matrices sharing one dimension and one
/// normalized flag.
struct EmbeddingStore {
    std::uint32_t dim = 0;
    bool normalized = false;
    std::vector<EmbeddingMatrix> records;
};

inline EmbeddingStore make_store(std::vector<EmbeddingMatrix> records) {
    detail::require(!records.empty(), ErrorCode::EmptyInput, "make_store: no records");
    EmbeddingStore store;
    store.dim = static_cast<std::uint32_t>(records.front().dim);
    store.normalized = records.front().normalized;
    store.records = std::move(records);
    return store;
}

inline void write_embedding_store(const std::string& path, const EmbeddingStore& store) {
    detail::require(store.dim >= 1, ErrorCode::InvalidArgument,
                    "write_embedding_store: dim >= 1");
    std::map<std::string, bool> seen;
    for (const EmbeddingMatrix& m : store.records) {
        ValidationReport report = validate(m);
        detail::require(report.ok(), ErrorCode::InvalidArgument,
                        "write_embedding_store: invalid record '" + m.id + "' (" +
                            (report.violations.empty() ? "" : report.violations.front()) + ")");
        detail::require(m.dim == store.dim, ErrorCode::DimensionMismatch,
                        "write_embedding_store: record '" + m.id + "' dim != store dim");
        detail::require(m.normalized == store.normalized, ErrorCode::InvalidArgument,
                        "write_embedding_store: record '" + m.id + "' normalized flag mismatch");
        detail::require(seen.emplace(m.id, true).second, ErrorCode::IoDuplicateId,
                        "write_embedding_store: duplicate id '" + m.id + "'");
    }

    detail::ByteWriter w;
    w.put_bytes(std::span<const char>("MVE1", 4));
    w.put_u16(kStoreVersion);
    w.put_u32(store.dim);
    w.put_u8(store.normalized ? 1 : 0);
    w.put_u64(store.records.size());
    for (const EmbeddingMatrix& m : store.records) {
        w.put_string16(m.id);
        w.put_u32(static_cast<std::uint32_t>(m.rows));
        for (float v : m.data) w.put_f32(v);
    }
    detail::atomic_write_file(path, w.bytes());
}

inline EmbeddingStore read_embedding_store(const std::string& path, EmbeddingKind kind) {
    std::vector<std::uint8_t> bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes, path);

    r.set_context("header");
    detail::require(r.remaining() >= 4, ErrorCode::IoTruncated, path + ": missing magic");
    char magic[4];
    for (int i = 0; i < 4; ++i) magic[i] = static_cast<char>(r.get_u8());
    detail::require(std::memcmp(magic, "MVE1", 4) == 0, ErrorCode::IoMagic,
                    path + ": bad magic '" + std::string(magic, 4) + "', expected MVE1");
    std::uint16_t version = r.get_u16();
    detail::require(version == kStoreVersion, ErrorCode::IoVersion,
                    path + ": unsupported version " + std::to_string(version));

    EmbeddingStore store;
    store.dim = r.get_u32();
    store.normalized = r.get_u8() != 0;
    std::uint64_t count = r.get_u64();
    detail::require(store.dim >= 1, ErrorCode::IoMalformed, path + ": dim must be >= 1");

    std::map<std::string, bool> seen;
    for (std::uint64_t i = 0; i < count; ++i) {
        r.set_context("record " + std::to_string(i));
        EmbeddingMatrix m;
        m.id = r.get_string16();
        detail::require(seen.emplace(m.id, true).second, ErrorCode::IoDuplicateId,
                        path + ": duplicate id '" + m.id + "' at record " + std::to_string(i));
        m.rows = r.get_u32();
        m.dim = store.dim;
        m.kind = kind;
        m.normalized = store.normalized;
        m.data.resize(m.rows * m.dim);
        for (float& v : m.data) v = r.get_f32();
        store.records.push_back(std::move(m));
    }
    detail::require(r.exhausted(), ErrorCode::IoMalformed, path + ": trailing bytes after record "
                                                               + std::to_string(count));
    return store;
}

// ---------------------------------------------------------------------------
// Attention store ("ATT1")
// ---------------------------------------------------------------------------

inline void write_attention_store(const std::string& path, std::span<const AttentionMap> maps) {
    detail::ByteWriter w;
    w.put_bytes(std::span<const char>("ATT1", 4));
    w.put_u16(kStoreVersion);
    w.put_u64(maps.size());
    for (const AttentionMap& m : maps) {
        ValidationReport report = validate(m);
        detail::require(report.ok(), ErrorCode::InvalidArgument,
                        "write_attention_store: invalid map (" + m.query_id + ", " + m.page_id +
                            "): " + (report.violations.empty() ? "" : report.violations.front()));
        detail::require(m.grid.height <= 0xFFFF && m.grid.width <= 0xFFFF,
                        ErrorCode::InvalidArgument, "write_attention_store: grid exceeds u16");
        w.put_string16(m.query_id);
        w.put_string16(m.page_id);
        w.put_u8(static_cast<std::uint8_t>(m.provenance));
        w.put_u16(static_cast<std::uint16_t>(m.grid.height));
        w.put_u16(static_cast<std::uint16_t>(m.grid.width));
        for (float v : m.values) w.put_f32(v);
        w.put_string16(m.metadata);
    }
    detail::atomic_write_file(path, w.bytes());
}

inline std::vector<AttentionMap> read_attention_store(const std::string& path) {
    std::vector<std::uint8_t> bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes, path);

    r.set_context("header");
    detail::require(r.remaining() >= 4, ErrorCode::IoTruncated, path + ": missing magic");
    char magic[4];
    for (int i = 0; i < 4; ++i) magic[i] = static_cast<char>(r.get_u8());
    detail::require(std::memcmp(magic, "ATT1", 4) == 0, ErrorCode::IoMagic,
                    path + ": bad magic '" + std::string(magic, 4) + "', expected ATT1");
    std::uint16_t version = r.get_u16();
    detail::require(version == kStoreVersion, ErrorCode::IoVersion,
                    path + ": unsupported version " + std::to_string(version));

    std::uint64_t count = r.get_u64();
    std::vector<AttentionMap> maps;
    maps.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        r.set_context("record " + std::to_string(i));
        AttentionMap m;
        m.query_id = r.get_string16();
        m.page_id = r.get_string16();
        std::uint8_t prov = r.get_u8();
        detail::require(prov <= static_cast<std::uint8_t>(Provenance::Synthetic),
                        ErrorCode::IoMalformed,
                        path + ": invalid provenance code " + std::to_string(prov) +
                            " at record " + std::to_string(i));
        m.provenance = static_cast<Provenance>(prov);
        m.grid.height = r.get_u16();
        m.grid.width = r.get_u16();
        m.values.resize(m.grid.cells());
        for (float& v : m.values) v = r.get_f32();
        m.metadata = r.get_string16();
        maps.push_back(std::move(m));
    }
    detail::require(r.exhausted(), ErrorCode::IoMalformed,
                    path + ": trailing bytes after record " + std::to_string(count));
    return maps;
}

// ---------------------------------------------------------------------------
// Qrels and run files (TSV)
// ---------------------------------------------------------------------------

inline void write_qrels(const std::string& path, const Qrels& qrels) {
    std::ostringstream out;
    for (const auto& [query_id, pages] : qrels.judgments)
        for (const auto& [page_id, grade] : pages)
            out << query_id << '\t' << page_id << '\t' << grade << '\n';
    detail::atomic_write_text(path, out.str());
}

inline Qrels read_qrels(const std::string& path) {
    std::ifstream in(path);
    detail::require(in.good(), ErrorCode::NotFound, "cannot open " + path);
    Qrels qrels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_tabs(line);
        detail::require(fields.size() == 3, ErrorCode::IoMalformed,
                        path + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
        qrels.add(std::string(fields[0]), std::string(fields[1]),
                  static_cast<int>(detail::parse_int(fields[2], path)));
    }
    return qrels;
}

inline void write_run(const std::string& path, const RunFile& run) {
    std::ostringstream out;
    for (const auto& [query_id, entries] : run.rankings)
        for (std::size_t r = 0; r < entries.size(); ++r)
            out << query_id << '\t' << entries[r].page_id << '\t' << (r + 1) << '\t'
                << detail::format_double(entries[r].score) << '\n';
    detail::atomic_write_text(path, out.str());
}

inline RunFile read_run(const std::string& path) {
    std::ifstream in(path);
    detail::require(in.good(), ErrorCode::NotFound, "cannot open " + path);
    RunFile run;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_tabs(line);
        detail::require(fields.size() == 4, ErrorCode::IoMalformed,
                        path + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
        std::string where = path + ":" + std::to_string(lineno);
        std::string query_id(fields[0]);
        long rank = detail::parse_int(fields[2], where);
        auto& entries = run.rankings[query_id];
        detail::require(rank == static_cast<long>(entries.size()) + 1, ErrorCode::IoMalformed,
                        where + ": rank " + std::to_string(rank) + " out of order");
        entries.push_back({std::string(fields[1]), detail::parse_double(fields[3], where)});
    }
    ValidationReport report = validate(run);
    detail::require(report.ok(), ErrorCode::IoMalformed,
                    path + ": " + (report.violations.empty() ? "" : report.violations.front()));
    return run;
}

// ---------------------------------------------------------------------------
// Annotations (JSON)
// ---------------------------------------------------------------------------

inline nlohmann::json annotation_to_json(const AnnotationSet& a) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const PatchBox& b : a.boxes)
        boxes.push_back({{"r0", b.r0},
                         {"c0", b.c0},
                         {"r1", b.r1},
                         {"c1", b.c1},
                         {"kind", b.kind == MatchKind::Explicit ? "explicit" : "implicit"}});
    return {{"query_id", a.query_id},
            {"page_id", a.page_id},
            {"grid", {{"height", a.grid.height}, {"width", a.grid.width}}},
            {"boxes", boxes}};
}

inline AnnotationSet annotation_from_json(const nlohmann::json& j, const std::string& where) {
    try {
        AnnotationSet a;
        a.query_id = j.at("query_id").get<std::string>();
        a.page_id = j.at("page_id").get<std::string>();
        a.grid.height = j.at("grid").at("height").get<std::size_t>();
        a.grid.width = j.at("grid").at("width").get<std::size_t>();
        for (const auto& jb : j.at("boxes")) {
            PatchBox b;
            b.r0 = jb.at("r0").get<std::size_t>();
            b.c0 = jb.at("c0").get<std::size_t>();
            b.r1 = jb.at("r1").get<std::size_t>();
            b.c1 = jb.at("c1").get<std::size_t>();
            std::string kind = jb.at("kind").get<std::string>();
            detail::require(kind == "explicit" || kind == "implicit", ErrorCode::IoMalformed,
                            where + ": box kind must be explicit or implicit");
            b.kind = kind == "explicit" ? MatchKind::Explicit : MatchKind::Implicit;
            a.boxes.push_back(b);
        }
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoMalformed, where + ": " + e.what());
    }
}

inline void write_annotations(const std::string& path, std::span<const AnnotationSet> sets) {
    nlohmann::json j = nlohmann::json::array();
    for (const AnnotationSet& a : sets) j.push_back(annotation_to_json(a));
    detail::atomic_write_text(path, j.dump(2) + "\n");
}

inline std::vector<AnnotationSet> read_annotations(const std::string& path) {
    std::ifstream in(path);
    detail::require(in.good(), ErrorCode::NotFound, "cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoMalformed, path + ": " + e.what());
    }
    detail::require(j.is_array(), ErrorCode::IoMalformed, path + ": expected a JSON array");
    std::vector<AnnotationSet> sets;
    for (std::size_t i = 0; i < j.size(); ++i)
        sets.push_back(annotation_from_json(j[i], path + "[" + std::to_string(i) + "]"));
    return sets;
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON)
// ---------------------------------------------------------------------------

/// Declares the training instances and the stores their ids resolve against.
/// Store paths are interpreted relative to the manifest's directory.
struct DatasetManifest {
    std::string query_store;
    std::string page_store;
    std::string attention_store;  // optional, "" when absent
    std::string annotations;      // optional, "" when absent

    struct Instance {
        std::string query_id;
        std::string positive_page_id;
        std::vector<std::string> candidate_page_ids;
        bool has_attention = false;   // (query_id, positive) in the attention store
        bool has_annotation = false;  // (query_id, positive) in the annotations file
    };
    std::vector<Instance> instances;
};

inline void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    nlohmann::json instances = nlohmann::json::array();
    for (const auto& inst : manifest.instances) {
        nlohmann::json j = {{"query_id", inst.query_id},
                            {"positive", inst.positive_page_id},
                            {"candidates", inst.candidate_page_ids}};
        if (inst.has_attention) j["attention"] = true;
        if (inst.has_annotation) j["annotation"] = true;
        instances.push_back(std::move(j));
    }
    nlohmann::json j = {{"query_store", manifest.query_store},
                        {"page_store", manifest.page_store},
                        {"instances", instances}};
    if (!manifest.attention_store.empty()) j["attention_store"] = manifest.attention_store;
    if (!manifest.annotations.empty()) j["annotations"] = manifest.annotations;
    detail::atomic_write_text(path, j.dump(2) + "\n");
}

inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    detail::require(in.good(), ErrorCode::NotFound, "cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoMalformed, path + ": " + e.what());
    }
    try {
        DatasetManifest manifest;
        manifest.query_store = j.at("query_store").get<std::string>();
        manifest.page_store = j.at("page_store").get<std::string>();
        manifest.attention_store = j.value("attention_store", "");
        manifest.annotations = j.value("annotations", "");
        for (const auto& ji : j.at("instances")) {
            DatasetManifest::Instance inst;
            inst.query_id = ji.at("query_id").get<std::string>();
            inst.positive_page_id = ji.at("positive").get<std::string>();
            for (const auto& c : ji.value("candidates", nlohmann::json::array()))
                inst.candidate_page_ids.push_back(c.get<std::string>());
            inst.has_attention = ji.value("attention", false);
            inst.has_annotation = ji.value("annotation", false);
            manifest.instances.push_back(std::move(inst));
        }
        return manifest;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoMalformed, path + ": " + e.what());
    }
}

/// Resolve a store path named in a manifest against the manifest's location.
inline std::string resolve_relative(const std::string& manifest_path, const std::string& ref) {
    std::filesystem::path p(ref);
    if (p.is_absolute() || manifest_path.empty()) return ref;
    return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

}  // namespace agree
