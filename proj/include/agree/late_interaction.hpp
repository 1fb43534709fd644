#pragma once

// Late-interaction relevance scoring: MaxSim page scores, patch-query
// similarity vectors, brute-force top-k retrieval, and similarity-map export.
//
// Kernels are templated on the element type so the same code path serves the
// float production matrices and the double matrices used by the
// finite-difference gradient harness.  All reductions accumulate in double.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "agree/core.hpp"

namespace agree {

/// Lightweight non-owning view of a row-major matrix.
template <class T>
struct MatView {
    const T* data = nullptr;
    std::size_t rows = 0;
    std::size_t dim = 0;

    const T* row(std::size_t r) const { return data + r * dim; }
};

inline MatView<float> view(const EmbeddingMatrix& m) { return {m.data.data(), m.rows, m.dim}; }

template <class T>
double dot_acc(const T* a, const T* b, std::size_t n) {
    // Four independent accumulator chains; summation order is fixed, so
    // results are reproducible run to run.
    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        acc1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
        acc2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
        acc3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
    }
    for (; i < n; ++i) acc0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return (acc0 + acc1) + (acc2 + acc3);
}

/// MaxSim result for one page: the summed per-token maxima and, per query
/// token, the patch index attaining the maximum (ties -> lowest index).
struct ScoredPage {
    std::string page_id;
    double score = 0.0;
    std::vector<std::uint32_t> argmax_patch;  // length N_q
};

/// Patch-query similarity vector s: per patch, the mean dot product over all
/// query tokens.
struct SimilarityVector {
    std::string page_id;
    std::string query_id;
    PatchGrid grid;                // defaults to 1 x N_d when no grid is known
    std::vector<double> values;    // length N_d
};

namespace detail {

inline void check_pair(const EmbeddingMatrix& query, const EmbeddingMatrix& page) {
    require(query.kind == EmbeddingKind::Query, ErrorCode::InvalidArgument,
            "first argument must be a query matrix");
    require(page.kind == EmbeddingKind::Page, ErrorCode::InvalidArgument,
            "second argument must be a page matrix");
    require(query.dim == page.dim, ErrorCode::DimensionMismatch,
            "query dim " + std::to_string(query.dim) + " != page dim " + std::to_string(page.dim));
}

}  // namespace detail

template <class T>
ScoredPage maxsim_score(MatView<T> query, MatView<T> page, std::string page_id = {}) {
    ScoredPage result;
    result.page_id = std::move(page_id);
    result.argmax_patch.resize(query.rows);
    double score = 0.0;
    for (std::size_t i = 0; i < query.rows; ++i) {
        const T* q = query.row(i);
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t best_j = 0;
        for (std::size_t j = 0; j < page.rows; ++j) {
            double s = dot_acc(q, page.row(j), query.dim);
            if (s > best) {  // strict: ties keep the lowest patch index
                best = s;
                best_j = static_cast<std::uint32_t>(j);
            }
        }
        result.argmax_patch[i] = best_j;
        score += best;
    }
    result.score = score;
    return result;
}

inline ScoredPage maxsim_score(const EmbeddingMatrix& query, const EmbeddingMatrix& page) {
    detail::check_pair(query, page);
    return maxsim_score(view(query), view(page), page.id);
}

template <class T>
std::vector<double> patch_similarity_values(MatView<T> query, MatView<T> page) {
    std::vector<double> s(page.rows, 0.0);
    for (std::size_t j = 0; j < page.rows; ++j) {
        const T* p = page.row(j);
        double acc = 0.0;
        for (std::size_t i = 0; i < query.rows; ++i) acc += dot_acc(query.row(i), p, query.dim);
        s[j] = acc / static_cast<double>(query.rows);
    }
    return s;
}

inline SimilarityVector patch_similarity(const EmbeddingMatrix& query, const EmbeddingMatrix& page,
                                         std::optional<PatchGrid> grid = std::nullopt) {
    detail::check_pair(query, page);
    if (grid) {
        detail::require(grid->cells() == page.rows, ErrorCode::GridMismatch,
                        "grid cells != page patch count");
    }
    SimilarityVector sim;
    sim.page_id = page.id;
    sim.query_id = query.id;
    sim.grid = grid ? *grid : PatchGrid{1, page.rows};
    sim.values = patch_similarity_values(view(query), view(page));
    return sim;
}

/// Top-k retrieval over an immutable in-memory index.  Brute-force MaxSim on
/// every page; descending score, ties by lexicographic page id.  `threads`
/// splits the index into contiguous chunks; per-page scores are computed
/// independently so the result is identical at any parallelism degree.
inline std::vector<ScoredPage> retrieve(const EmbeddingMatrix& query,
                                        std::span<const EmbeddingMatrix> index, std::size_t k,
                                        unsigned threads = 1) {
    detail::require(!index.empty(), ErrorCode::EmptyInput, "retrieve: empty index");
    detail::require(k >= 1, ErrorCode::InvalidArgument, "retrieve: k >= 1");

    std::vector<ScoredPage> scored(index.size());
    auto score_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) scored[p] = maxsim_score(query, index[p]);
    };
    if (threads <= 1 || index.size() < 2) {
        score_range(0, index.size());
    } else {
        unsigned n = std::min<unsigned>(threads, static_cast<unsigned>(index.size()));
        std::vector<std::thread> pool;
        std::size_t chunk = (index.size() + n - 1) / n;
        for (unsigned t = 0; t < n; ++t) {
            std::size_t begin = t * chunk;
            std::size_t end = std::min(index.size(), begin + chunk);
            if (begin < end) pool.emplace_back(score_range, begin, end);
        }
        for (auto& th : pool) th.join();
    }

    std::sort(scored.begin(), scored.end(), [](const ScoredPage& a, const ScoredPage& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.page_id < b.page_id;
    });
    if (scored.size() > k) scored.resize(k);
    return scored;
}

/// Similarity map export: the raw Eq.-8 values reshaped onto the grid plus a
/// min-max scaled copy in [0, 1] suitable for the attention store (raw dot
/// products may be negative, scaled values never are).  An all-equal vector
/// scales to all zeros.
struct SimilarityMapResult {
    AttentionMap map;             // scaled values, retriever-map metadata
    std::vector<double> raw;      // untouched patch_similarity output
};

inline SimilarityMapResult similarity_map(const EmbeddingMatrix& query, const EmbeddingMatrix& page,
                                          PatchGrid grid) {
    detail::require(grid.cells() == page.rows, ErrorCode::GridMismatch,
                    "similarity_map: grid cells != page patch count");
    SimilarityVector sim = patch_similarity(query, page, grid);

    double lo = sim.values[0], hi = sim.values[0];
    for (double v : sim.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double range = hi - lo;

    SimilarityMapResult out;
    out.raw = sim.values;
    out.map.grid = grid;
    out.map.query_id = query.id;
    out.map.page_id = page.id;
    out.map.provenance = Provenance::Synthetic;
    out.map.metadata = R"({"retriever_map":true,"scale":"minmax"})";
    out.map.values.resize(sim.values.size());
    for (std::size_t i = 0; i < sim.values.size(); ++i)
        out.map.values[i] = range > 0.0 ? static_cast<float>((sim.values[i] - lo) / range) : 0.0f;
    return out;
}

}  // namespace agree
