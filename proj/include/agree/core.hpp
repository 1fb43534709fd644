#pragma once

// Core domain types shared by every other header: embedding matrices,
// patch grids, attention maps, annotation sets, validation, and the
// deterministic random generator used for fixtures and jitter.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace agree {

enum class ErrorCode {
    InvalidArgument,
    DimensionMismatch,
    GridMismatch,
    EmptyInput,
    Degenerate,
    Divergence,
    NotFound,
    IoMagic,
    IoVersion,
    IoTruncated,
    IoDuplicateId,
    IoMalformed,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::InvalidArgument: return "E_INVALID_ARGUMENT";
        case ErrorCode::DimensionMismatch: return "E_DIMENSION_MISMATCH";
        case ErrorCode::GridMismatch: return "E_GRID_MISMATCH";
        case ErrorCode::EmptyInput: return "E_EMPTY_INPUT";
        case ErrorCode::Degenerate: return "E_DEGENERATE";
        case ErrorCode::Divergence: return "E_DIVERGENCE";
        case ErrorCode::NotFound: return "E_NOT_FOUND";
        case ErrorCode::IoMagic: return "E_MAGIC";
        case ErrorCode::IoVersion: return "E_VERSION";
        case ErrorCode::IoTruncated: return "E_TRUNCATED";
        case ErrorCode::IoDuplicateId: return "E_DUPLICATE_ID";
        case ErrorCode::IoMalformed: return "E_MALFORMED";
    }
    return "E_UNKNOWN";
}

/// Domain error carrying a stable machine-parseable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

namespace detail {

inline void require(bool cond, ErrorCode code, const std::string& message) {
    if (!cond) throw Error(code, message);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Deterministic pseudo-random generation.
//
// The generator is splitmix64: state advances by the golden-gamma constant
// and the output is a finalizer over the new state.  Uniform doubles take the
// top 53 bits; standard normals use the sum of twelve uniforms minus six.
// Every step is integer or IEEE-754 double arithmetic in a fixed order, so a
// given seed produces bit-identical output on any conforming platform.
// ---------------------------------------------------------------------------

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Approximate standard normal: sum of 12 uniforms minus 6 (Irwin-Hall).
    double next_normal() {
        double acc = 0.0;
        for (int k = 0; k < 12; ++k) acc += next_unit();
        return acc - 6.0;
    }

    /// Uniform integer in [0, bound) by rejection-free scaling of the top bits.
    std::uint64_t next_below(std::uint64_t bound) {
        // 128-bit multiply-shift keeps the draw order identical everywhere.
        unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * bound;
        return static_cast<std::uint64_t>(wide >> 64);
    }

private:
    std::uint64_t state_;
};

/// Seeded in-place Fisher-Yates; std::shuffle is implementation-defined so a
/// fixed algorithm is used wherever shuffles feed the determinism contracts.
template <class T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
    SplitMix64 rng(seed);
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(items[i - 1], items[j]);
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class EmbeddingKind : std::uint8_t { Query = 0, Page = 1 };

/// Multi-vector embedding: one row per query token or page patch.
/// Payload is 32-bit float (the on-disk precision); all reductions over it
/// accumulate in 64-bit.
struct EmbeddingMatrix {
    std::string id;
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<float> data;  // row-major, rows * dim
    EmbeddingKind kind = EmbeddingKind::Query;
    bool normalized = false;

    const float* row(std::size_t r) const { return data.data() + r * dim; }
    float* row(std::size_t r) { return data.data() + r * dim; }
};

/// Patch grid, row-major, origin top-left; flat index = r * width + c.
struct PatchGrid {
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t cells() const { return height * width; }
    bool operator==(const PatchGrid&) const = default;
};

enum class Provenance : std::uint8_t {
    RawLayerwise = 0,
    Aggregated = 1,
    Refined = 2,
    Downsampled = 3,
    Synthetic = 4,
};

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::RawLayerwise: return "raw_layerwise";
        case Provenance::Aggregated: return "aggregated";
        case Provenance::Refined: return "refined";
        case Provenance::Downsampled: return "downsampled";
        case Provenance::Synthetic: return "synthetic";
    }
    return "unknown";
}

/// Non-negative per-patch saliency weights over a grid.  `metadata` is a
/// free-text JSON blob carried through the attention store (layer indices,
/// extraction strategy, producer notes, retriever-map flag).
struct AttentionMap {
    PatchGrid grid;
    std::vector<float> values;  // grid.cells(), row-major
    std::string query_id;
    std::string page_id;
    Provenance provenance = Provenance::RawLayerwise;
    std::string metadata;

    float at(std::size_t r, std::size_t c) const { return values[r * grid.width + c]; }
};

/// Layer-wise attention maps for one (query, page) pair.  `per_token` is
/// present only for the query-token extraction strategy and is indexed
/// [layer][token].
struct LayerAttentionStack {
    std::vector<AttentionMap> per_layer;
    std::vector<std::vector<AttentionMap>> per_token;

    std::size_t layers() const { return per_layer.empty() ? per_token.size() : per_layer.size(); }
};

enum class MatchKind : std::uint8_t { Explicit = 0, Implicit = 1 };

/// Inclusive patch-coordinate rectangle.
struct PatchBox {
    std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;
    MatchKind kind = MatchKind::Explicit;
};

/// Human-labeled relevant regions for a (query, page) pair.
struct AnnotationSet {
    std::string query_id;
    std::string page_id;
    PatchGrid grid;
    std::vector<PatchBox> boxes;  // may be empty: legal, flagged downstream
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Collected invariant violations; empty means valid.  Validation never
/// throws: malformed-but-parseable entities always produce a report.
struct ValidationReport {
    std::vector<std::string> violations;

    bool ok() const { return violations.empty(); }
    void fail(std::string message) { violations.push_back(std::move(message)); }
};

inline bool all_finite(std::span<const float> xs) {
    for (float x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

inline ValidationReport validate(const EmbeddingMatrix& m) {
    ValidationReport report;
    if (m.rows < 1) report.fail("rows >= 1");
    if (m.dim < 1) report.fail("dim >= 1");
    if (m.data.size() != m.rows * m.dim) report.fail("data length = rows * dim");
    if (!all_finite(m.data)) report.fail("all entries finite");
    if (m.normalized && m.data.size() == m.rows * m.dim && m.dim >= 1) {
        for (std::size_t r = 0; r < m.rows; ++r) {
            double sq = 0.0;
            for (std::size_t d = 0; d < m.dim; ++d) {
                double v = m.row(r)[d];
                sq += v * v;
            }
            if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
                report.fail("normalized flag requires unit rows (row " + std::to_string(r) + ")");
                break;
            }
        }
    }
    return report;
}

inline ValidationReport validate(const AttentionMap& a) {
    ValidationReport report;
    if (a.grid.height < 1 || a.grid.width < 1) report.fail("grid dims >= 1");
    if (a.values.size() != a.grid.cells()) report.fail("values length = height * width");
    bool finite = true;
    for (float v : a.values) {
        if (!std::isfinite(v)) {
            finite = false;
            break;
        }
        if (v < 0.0f) {
            report.fail("values >= 0");
            break;
        }
    }
    if (!finite) report.fail("values finite");
    if (a.provenance == Provenance::Refined && !a.values.empty()) {
        double sum = 0.0;
        for (float v : a.values) sum += v;
        if (std::abs(sum - 1.0) > 1e-6) report.fail("refined map sums to 1");
    }
    return report;
}

inline ValidationReport validate(const LayerAttentionStack& s) {
    ValidationReport report;
    if (s.layers() < 1) report.fail("layers >= 1");
    const PatchGrid* grid = nullptr;
    auto check_map = [&](const AttentionMap& m) {
        if (!grid)
            grid = &m.grid;
        else if (!(m.grid == *grid))
            report.fail("all member maps share identical grid dimensions");
        ValidationReport inner = validate(m);
        for (auto& v : inner.violations) report.fail("member map: " + v);
    };
    for (const auto& m : s.per_layer) check_map(m);
    for (const auto& layer : s.per_token)
        for (const auto& m : layer) check_map(m);
    return report;
}

inline ValidationReport validate(const AnnotationSet& a) {
    ValidationReport report;
    if (a.grid.height < 1 || a.grid.width < 1) report.fail("grid dims >= 1");
    for (std::size_t i = 0; i < a.boxes.size(); ++i) {
        const PatchBox& b = a.boxes[i];
        std::string tag = "box " + std::to_string(i) + ": ";
        if (b.r0 > b.r1) report.fail(tag + "r0 <= r1");
        if (b.c0 > b.c1) report.fail(tag + "c0 <= c1");
        if (b.r1 >= a.grid.height) report.fail(tag + "r1 < height");
        if (b.c1 >= a.grid.width) report.fail(tag + "c1 < width");
    }
    return report;
}

// ---------------------------------------------------------------------------
// Seeded fixtures
// ---------------------------------------------------------------------------

/// Deterministic standard-normal matrix; same (rows, dim, seed) gives
/// bit-identical bytes on every platform.  Entries are drawn row-major.
inline EmbeddingMatrix seeded_random_matrix(std::size_t rows, std::size_t dim, std::uint64_t seed,
                                            EmbeddingKind kind = EmbeddingKind::Query,
                                            std::string id = {}) {
    detail::require(rows >= 1, ErrorCode::InvalidArgument, "seeded_random_matrix: rows >= 1");
    detail::require(dim >= 1, ErrorCode::InvalidArgument, "seeded_random_matrix: dim >= 1");
    EmbeddingMatrix m;
    m.id = std::move(id);
    m.rows = rows;
    m.dim = dim;
    m.kind = kind;
    m.data.resize(rows * dim);
    SplitMix64 rng(seed);
    for (auto& x : m.data) x = static_cast<float>(rng.next_normal());
    return m;
}

/// Scale every row to unit Euclidean norm and set the `normalized` flag.
/// Zero rows are left untouched (and will fail validation downstream).
inline void l2_normalize_rows(EmbeddingMatrix& m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        double sq = 0.0;
        for (std::size_t d = 0; d < m.dim; ++d) {
            double v = m.row(r)[d];
            sq += v * v;
        }
        double norm = std::sqrt(sq);
        if (norm > 0.0) {
            for (std::size_t d = 0; d < m.dim; ++d)
                m.row(r)[d] = static_cast<float>(m.row(r)[d] / norm);
        }
    }
    m.normalized = true;
}

}  // namespace agree
