#pragma once

// Attention-map processing: per-token averaging, multi-layer aggregation,
// PMI-based refinement, spatial-preserving max-pool downsampling, and the
// synthetic generator used when no real MLLM attentions are available.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "agree/core.hpp"

namespace agree {

struct RefinementConfig {
    double epsilon = 1e-6;    // stabilizer added to both ratio terms
    bool renormalize = true;  // divide by the sum so the result totals 1
};

namespace detail {

inline void require_valid_map(const AttentionMap& m, const char* who) {
    ValidationReport report = validate(m);
    require(report.ok(), ErrorCode::InvalidArgument,
            std::string(who) + ": invalid attention map (" +
                (report.violations.empty() ? "" : report.violations.front()) + ")");
}

}  // namespace detail

/// Mean of the per-token attention vectors of one layer.
inline AttentionMap average_query_tokens(std::span<const AttentionMap> per_token_maps) {
    detail::require(!per_token_maps.empty(), ErrorCode::EmptyInput,
                    "average_query_tokens: empty token set");
    const AttentionMap& first = per_token_maps.front();
    detail::require_valid_map(first, "average_query_tokens");

    std::vector<double> acc(first.values.size(), 0.0);
    for (const AttentionMap& m : per_token_maps) {
        detail::require(m.grid == first.grid, ErrorCode::GridMismatch,
                        "average_query_tokens: grid mismatch");
        detail::require_valid_map(m, "average_query_tokens");
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m.values[i];
    }
    AttentionMap out = first;
    double inv = 1.0 / static_cast<double>(per_token_maps.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i] * inv);
    return out;
}

/// Mean across layers.  A stack holding per-token maps is reduced per layer
/// first, so both extraction strategies funnel through the same call.
inline AttentionMap aggregate_layers(const LayerAttentionStack& stack) {
    detail::require(stack.layers() >= 1, ErrorCode::EmptyInput, "aggregate_layers: layers >= 1");

    std::vector<AttentionMap> layers;
    if (!stack.per_layer.empty()) {
        layers = stack.per_layer;
    } else {
        layers.reserve(stack.per_token.size());
        for (const auto& token_maps : stack.per_token)
            layers.push_back(average_query_tokens(token_maps));
    }

    const AttentionMap& first = layers.front();
    detail::require_valid_map(first, "aggregate_layers");
    std::vector<double> acc(first.values.size(), 0.0);
    for (const AttentionMap& m : layers) {
        detail::require(m.grid == first.grid, ErrorCode::GridMismatch,
                        "aggregate_layers: inconsistent grid dims");
        detail::require_valid_map(m, "aggregate_layers");
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m.values[i];
    }
    AttentionMap out = first;
    out.provenance = Provenance::Aggregated;
    double inv = 1.0 / static_cast<double>(layers.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i] * inv);
    return out;
}

/// PMI refinement: elementwise (task + eps) / (general + eps).  The ratio is
/// the exponentiated pointwise mutual information between patch and query
/// when both maps are read as patch distributions; dividing out the general
/// map suppresses query-independent layout saliency.  Renormalized output
/// carries Refined provenance; the raw-ratio diagnostic keeps the task map's
/// provenance and notes itself in metadata.
inline AttentionMap refine_pmi(const AttentionMap& task, const AttentionMap& general,
                               RefinementConfig cfg = {}) {
    detail::require(cfg.epsilon > 0.0, ErrorCode::InvalidArgument, "refine_pmi: epsilon > 0");
    detail::require(task.grid == general.grid, ErrorCode::GridMismatch,
                    "refine_pmi: grid mismatch");
    detail::require_valid_map(task, "refine_pmi");
    detail::require_valid_map(general, "refine_pmi");

    std::vector<double> ratio(task.values.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < ratio.size(); ++i) {
        ratio[i] = (static_cast<double>(task.values[i]) + cfg.epsilon) /
                   (static_cast<double>(general.values[i]) + cfg.epsilon);
        sum += ratio[i];
    }

    AttentionMap out = task;
    if (cfg.renormalize) {
        out.provenance = Provenance::Refined;
        out.metadata = R"({"refinement":"pmi_ratio","renormalized":true})";
        for (std::size_t i = 0; i < ratio.size(); ++i)
            out.values[i] = static_cast<float>(ratio[i] / sum);
    } else {
        out.metadata = R"({"refinement":"pmi_ratio","renormalized":false})";
        for (std::size_t i = 0; i < ratio.size(); ++i) out.values[i] = static_cast<float>(ratio[i]);
    }
    return out;
}

/// Region of the high-resolution grid feeding low-resolution cell (i, j):
/// rows [floor(i*Hh/Hl), floor((i+1)*Hh/Hl)), columns likewise.  Integer
/// division is the floor here since all quantities are non-negative.
struct PoolRegion {
    std::size_t row_begin, row_end;
    std::size_t col_begin, col_end;
};

inline PoolRegion pool_region(std::size_t i, std::size_t j, PatchGrid high, PatchGrid low) {
    return {
        (i * high.height) / low.height, ((i + 1) * high.height) / low.height,
        (j * high.width) / low.width, ((j + 1) * high.width) / low.width,
    };
}

/// Adaptive max pooling onto a coarser grid.  Peak values survive, so regions
/// the producer highlighted stay prominent after the resolution change.
inline AttentionMap downsample(const AttentionMap& high, PatchGrid target) {
    detail::require(target.height >= 1 && target.width >= 1, ErrorCode::InvalidArgument,
                    "downsample: target dims >= 1");
    detail::require(target.height <= high.grid.height && target.width <= high.grid.width,
                    ErrorCode::GridMismatch, "downsample: target larger than source");
    detail::require_valid_map(high, "downsample");

    AttentionMap out;
    out.grid = target;
    out.query_id = high.query_id;
    out.page_id = high.page_id;
    out.provenance = Provenance::Downsampled;
    out.metadata = high.metadata;
    out.values.resize(target.cells());
    for (std::size_t i = 0; i < target.height; ++i) {
        for (std::size_t j = 0; j < target.width; ++j) {
            PoolRegion region = pool_region(i, j, high.grid, target);
            float best = high.at(region.row_begin, region.col_begin);
            for (std::size_t u = region.row_begin; u < region.row_end; ++u)
                for (std::size_t v = region.col_begin; v < region.col_end; ++v)
                    best = std::max(best, high.at(u, v));
            out.values[i * target.width + j] = best;
        }
    }
    return out;
}

/// Row-major flattening, the one global convention.
inline std::vector<float> flatten(const AttentionMap& map) { return map.values; }

/// Test-time stand-in for MLLM attention: background everywhere, raised to
/// `peak` inside annotated boxes, with seeded jitter of 1% of the background
/// amplitude so top-K sets are tie-free but stable.
inline AttentionMap synthesize_attention(const AnnotationSet& annotation, double peak,
                                         double background, std::uint64_t seed) {
    detail::require(background >= 0.0, ErrorCode::InvalidArgument,
                    "synthesize_attention: background >= 0");
    detail::require(peak > background, ErrorCode::InvalidArgument,
                    "synthesize_attention: peak > background");
    ValidationReport report = validate(annotation);
    detail::require(report.ok(), ErrorCode::InvalidArgument,
                    "synthesize_attention: invalid annotation (" +
                        (report.violations.empty() ? "" : report.violations.front()) + ")");

    std::vector<bool> inside(annotation.grid.cells(), false);
    for (const PatchBox& b : annotation.boxes)
        for (std::size_t r = b.r0; r <= b.r1; ++r)
            for (std::size_t c = b.c0; c <= b.c1; ++c)
                inside[r * annotation.grid.width + c] = true;

    AttentionMap out;
    out.grid = annotation.grid;
    out.query_id = annotation.query_id;
    out.page_id = annotation.page_id;
    out.provenance = Provenance::Synthetic;
    out.values.resize(annotation.grid.cells());

    double amplitude = 0.01 * background;
    SplitMix64 rng(seed);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        double jitter = (rng.next_unit() * 2.0 - 1.0) * amplitude;
        out.values[i] = static_cast<float>((inside[i] ? peak : background) + jitter);
    }
    return out;
}

}  // namespace agree
