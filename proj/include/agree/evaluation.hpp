#pragma once

// Retrieval and saliency-quality metrics: nDCG@k over run files against
// qrels, coverage of annotated regions by top-K% map values, and
// patch-rasterized IoU between annotation sets.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "agree/core.hpp"
#include "agree/objectives.hpp"

namespace agree {

/// Relevance judgments: query -> (page, integer grade >= 1).  Binary data
/// uses grade 1.
struct Qrels {
    std::map<std::string, std::map<std::string, int>> judgments;

    void add(const std::string& query_id, const std::string& page_id, int grade) {
        detail::require(grade >= 1, ErrorCode::InvalidArgument, "qrels: grade >= 1");
        auto& per_query = judgments[query_id];
        detail::require(per_query.emplace(page_id, grade).second, ErrorCode::IoDuplicateId,
                        "qrels: duplicate judgment for (" + query_id + ", " + page_id + ")");
    }
};

struct RunEntry {
    std::string page_id;
    double score = 0.0;
};

/// Ranked results per query, scores non-increasing, page ids unique.
struct RunFile {
    std::map<std::string, std::vector<RunEntry>> rankings;
};

inline ValidationReport validate(const RunFile& run) {
    ValidationReport report;
    for (const auto& [query_id, entries] : run.rankings) {
        std::set<std::string> seen;
        for (std::size_t r = 0; r < entries.size(); ++r) {
            if (!seen.insert(entries[r].page_id).second)
                report.fail(query_id + ": duplicate page id " + entries[r].page_id);
            if (r > 0 && entries[r].score > entries[r - 1].score) {
                report.fail(query_id + ": scores increase at rank " + std::to_string(r + 1));
                break;
            }
        }
    }
    return report;
}

struct NdcgResult {
    std::map<std::string, double> per_query;
    double mean = 0.0;
    std::size_t evaluated = 0;
    std::vector<std::string> skipped;  // run queries with no (or empty) judgments
};

/// nDCG@k with log2(rank+1) discount and gain = relevance grade.  The ideal
/// ordering ranks all judged pages by grade and truncates at k.  Queries
/// without judgments are skipped, not scored zero.
inline NdcgResult ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
    detail::require(k >= 1, ErrorCode::InvalidArgument, "ndcg_at_k: k >= 1");
    ValidationReport report = validate(run);
    detail::require(report.ok(), ErrorCode::IoMalformed,
                    "ndcg_at_k: malformed run (" +
                        (report.violations.empty() ? "" : report.violations.front()) + ")");

    NdcgResult result;
    double sum = 0.0;
    for (const auto& [query_id, entries] : run.rankings) {
        auto judged = qrels.judgments.find(query_id);
        if (judged == qrels.judgments.end() || judged->second.empty()) {
            result.skipped.push_back(query_id);
            continue;
        }
        double dcg = 0.0;
        for (std::size_t r = 0; r < std::min(k, entries.size()); ++r) {
            auto grade = judged->second.find(entries[r].page_id);
            if (grade != judged->second.end())
                dcg += grade->second / std::log2(static_cast<double>(r) + 2.0);
        }
        std::vector<int> grades;
        grades.reserve(judged->second.size());
        for (const auto& [page, grade] : judged->second) grades.push_back(grade);
        std::sort(grades.begin(), grades.end(), std::greater<>());
        double idcg = 0.0;
        for (std::size_t r = 0; r < std::min(k, grades.size()); ++r)
            idcg += grades[r] / std::log2(static_cast<double>(r) + 2.0);
        double ndcg = dcg / idcg;
        result.per_query[query_id] = ndcg;
        sum += ndcg;
        ++result.evaluated;
    }
    result.mean = result.evaluated > 0 ? sum / static_cast<double>(result.evaluated) : 0.0;
    return result;
}

/// Patch indices covered by any box (and by match kind).
struct RasterizedAnnotation {
    std::set<std::size_t> all;
    std::set<std::size_t> explicit_patches;
    std::set<std::size_t> implicit_patches;
};

inline RasterizedAnnotation rasterize(const AnnotationSet& annotation) {
    ValidationReport report = validate(annotation);
    detail::require(report.ok(), ErrorCode::InvalidArgument,
                    "rasterize: invalid annotation (" +
                        (report.violations.empty() ? "" : report.violations.front()) + ")");
    RasterizedAnnotation raster;
    for (const PatchBox& b : annotation.boxes) {
        for (std::size_t r = b.r0; r <= b.r1; ++r) {
            for (std::size_t c = b.c0; c <= b.c1; ++c) {
                std::size_t idx = r * annotation.grid.width + c;
                raster.all.insert(idx);
                (b.kind == MatchKind::Explicit ? raster.explicit_patches
                                               : raster.implicit_patches)
                    .insert(idx);
            }
        }
    }
    return raster;
}

/// Coverage of annotated patches by the top-K% map values.  An empty
/// annotation is reported as skipped rather than zero.
struct CoverageResult {
    bool skipped = false;  // no annotated patch
    double overall = 0.0;
    std::optional<double> explicit_only;  // absent when no box of that kind
    std::optional<double> implicit_only;
    std::size_t top_count = 0;
};

inline CoverageResult coverage_at_kpercent(std::span<const double> values, PatchGrid grid,
                                           const AnnotationSet& annotation, double k_percent) {
    detail::require(grid == annotation.grid, ErrorCode::GridMismatch,
                    "coverage: map and annotation grids differ");
    detail::require(values.size() == grid.cells(), ErrorCode::DimensionMismatch,
                    "coverage: value count != grid cells");

    RasterizedAnnotation raster = rasterize(annotation);
    CoverageResult result;
    if (raster.all.empty()) {
        result.skipped = true;
        return result;
    }

    std::vector<std::uint32_t> top = top_k_percent_indices(values, k_percent);
    result.top_count = top.size();
    std::set<std::size_t> top_set(top.begin(), top.end());
    auto fraction_hit = [&](const std::set<std::size_t>& region) {
        std::size_t hit = 0;
        for (std::size_t idx : region) hit += top_set.count(idx);
        return static_cast<double>(hit) / static_cast<double>(region.size());
    };
    result.overall = fraction_hit(raster.all);
    if (!raster.explicit_patches.empty())
        result.explicit_only = fraction_hit(raster.explicit_patches);
    if (!raster.implicit_patches.empty())
        result.implicit_only = fraction_hit(raster.implicit_patches);
    return result;
}

inline CoverageResult coverage_at_kpercent(const AttentionMap& map,
                                           const AnnotationSet& annotation, double k_percent) {
    std::vector<double> values(map.values.begin(), map.values.end());
    return coverage_at_kpercent(values, map.grid, annotation, k_percent);
}

inline CoverageResult coverage_at_kpercent(const SimilarityVector& sim,
                                           const AnnotationSet& annotation, double k_percent) {
    return coverage_at_kpercent(sim.values, sim.grid, annotation, k_percent);
}

/// Patch-set IoU of two annotation sets on the same grid; two empty sets are
/// in perfect agreement by convention.
inline double annotation_iou(const AnnotationSet& a, const AnnotationSet& b) {
    detail::require(a.grid == b.grid, ErrorCode::GridMismatch, "annotation_iou: grid mismatch");
    RasterizedAnnotation ra = rasterize(a);
    RasterizedAnnotation rb = rasterize(b);
    if (ra.all.empty() && rb.all.empty()) return 1.0;
    std::size_t intersection = 0;
    for (std::size_t idx : ra.all) intersection += rb.all.count(idx);
    std::size_t union_size = ra.all.size() + rb.all.size() - intersection;
    return static_cast<double>(intersection) / static_cast<double>(union_size);
}

}  // namespace agree
