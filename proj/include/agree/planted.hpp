#pragma once

// Synthetic planted-signal corpus for end-to-end experiments.
//
// Construction: queries are grouped into topics.  Every positive page hides
// one planted "evidence" patch correlated with its query's specific
// direction; hard positives additionally carry several topic patches that
// dominate the similarity map, and distractor pages carry topic patches
// only.  Cross-topic ranking is therefore solvable from topic matching
// alone, while ranking within a topic and localizing the evidence patch
// both require the specific direction that only the planted patch carries.
// Attention targets peak on the planted patch, so local supervision teaches
// exactly the part of the signal the global objective can ignore.  Easy
// instances (no topic patches, strong planted signal) start out already
// aligned; supervision spent on them is mostly wasted, which is what makes
// mismatch-first selection pay off at small supervised fractions.

#include <numeric>
#include <string>
#include <vector>

#include "agree/attention.hpp"
#include "agree/core.hpp"
#include "agree/io.hpp"
#include "agree/trainer.hpp"

namespace agree {

struct PlantedCorpusConfig {
    std::size_t num_topics = 10;
    std::size_t queries_per_topic = 10;
    std::size_t distractors_per_topic = 10;  // topic-only pages, never relevant
    PatchGrid grid{8, 8};
    std::size_t tokens_per_query = 4;
    std::size_t dim_in = 32;
    std::size_t topic_dims = 8;     // leading coordinates shared within a topic
    std::size_t specific_dims = 8;  // next block: per-query evidence directions
    std::size_t topic_patches = 4;  // per hard positive and per distractor page

    double easy_fraction = 0.5;   // instances whose evidence already dominates
    double easy_strength = 2.0;   // planted magnitude on easy positives
    double hard_strength = 0.9;   // planted magnitude on hard positives (weak)
    double query_specific_weight = 0.5;
    double topic_noise = 0.15;
    double planted_noise = 0.15;
    double token_noise = 0.2;
    double junk_scale = 0.5;       // per-dim noise outside the structured blocks
    double structured_leak = 0.05; // background leak into the structured dims
    double feature_scale = 0.1;    // overall magnitude of all base features

    double attention_peak = 1.0;
    double attention_background = 0.05;
    std::uint64_t seed = 0;

    std::size_t num_queries() const { return num_topics * queries_per_topic; }
    std::size_t num_pages() const {
        return num_topics * (queries_per_topic + distractors_per_topic);
    }
};

struct PlantedCorpus {
    TrainDataset dataset;  // instances carry attention targets and annotations
    Qrels qrels;
    std::vector<std::size_t> planted_patch;  // flat index per query
    std::vector<bool> easy;                  // per query
};

namespace detail {

inline std::string padded_id(char prefix, std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%c%04zu", prefix, i);
    return buf;
}

}  // namespace detail

inline PlantedCorpus make_planted_corpus(const PlantedCorpusConfig& cfg) {
    detail::require(cfg.num_topics >= 1 && cfg.queries_per_topic >= 1,
                    ErrorCode::InvalidArgument, "planted: at least one query");
    detail::require(cfg.topic_dims + cfg.specific_dims <= cfg.dim_in,
                    ErrorCode::InvalidArgument, "planted: structured dims exceed dim_in");
    detail::require(cfg.topic_patches + 1 <= cfg.grid.cells(), ErrorCode::InvalidArgument,
                    "planted: grid too small for the patch roles");

    SplitMix64 rng(cfg.seed ^ 0x9Ea7edull);
    std::size_t cells = cfg.grid.cells();

    auto unit_in = [&](std::size_t lo, std::size_t n) {
        std::vector<double> v(cfg.dim_in, 0.0);
        double sq = 0.0;
        for (std::size_t d = lo; d < lo + n; ++d) {
            v[d] = rng.next_normal();
            sq += v[d] * v[d];
        }
        double norm = std::sqrt(sq);
        if (norm == 0.0) {
            v[lo] = 1.0;
            norm = 1.0;
        }
        for (std::size_t d = lo; d < lo + n; ++d) v[d] /= norm;
        return v;
    };

    std::vector<std::vector<double>> topics;
    topics.reserve(cfg.num_topics);
    for (std::size_t t = 0; t < cfg.num_topics; ++t) topics.push_back(unit_in(0, cfg.topic_dims));

    auto junk_patch = [&](float* row) {
        std::size_t structured = cfg.topic_dims + cfg.specific_dims;
        for (std::size_t d = 0; d < cfg.dim_in; ++d) {
            double scale = d < structured ? cfg.structured_leak : cfg.junk_scale;
            row[d] = static_cast<float>(cfg.feature_scale * scale * rng.next_normal());
        }
    };
    auto topic_patch = [&](float* row, const std::vector<double>& topic) {
        for (std::size_t d = 0; d < cfg.dim_in; ++d)
            row[d] = static_cast<float>(
                cfg.feature_scale * (topic[d] + cfg.topic_noise * rng.next_normal()));
    };

    PlantedCorpus corpus;
    std::size_t page_id = 0;
    std::size_t easy_per_topic =
        static_cast<std::size_t>(cfg.easy_fraction * static_cast<double>(cfg.queries_per_topic));
    for (std::size_t topic = 0; topic < cfg.num_topics; ++topic) {
        for (std::size_t k = 0; k < cfg.queries_per_topic; ++k) {
            std::size_t qi = topic * cfg.queries_per_topic + k;
            bool easy = (k % 2 == 0) && (k / 2 + 1 <= easy_per_topic);
            std::string query_id = detail::padded_id('q', qi);
            std::string pid = detail::padded_id('p', page_id);
            std::vector<double> specific = unit_in(cfg.topic_dims, cfg.specific_dims);

            EmbeddingMatrix query;
            query.id = query_id;
            query.rows = cfg.tokens_per_query;
            query.dim = cfg.dim_in;
            query.kind = EmbeddingKind::Query;
            query.data.resize(query.rows * query.dim);
            for (std::size_t tk = 0; tk < cfg.tokens_per_query; ++tk)
                for (std::size_t d = 0; d < cfg.dim_in; ++d)
                    query.data[tk * cfg.dim_in + d] = static_cast<float>(
                        cfg.feature_scale *
                        (topics[topic][d] + cfg.query_specific_weight * specific[d] +
                         cfg.token_noise * rng.next_normal()));

            EmbeddingMatrix page;
            page.id = pid;
            page.rows = cells;
            page.dim = cfg.dim_in;
            page.kind = EmbeddingKind::Page;
            page.data.resize(cells * cfg.dim_in);
            std::vector<std::size_t> roles(cells);
            std::iota(roles.begin(), roles.end(), std::size_t{0});
            seeded_shuffle(roles, rng.next_u64());
            std::size_t planted = roles[0];
            for (std::size_t j = 0; j < cells; ++j) junk_patch(page.data.data() + j * cfg.dim_in);
            std::size_t n_topic = easy ? 0 : cfg.topic_patches;
            for (std::size_t m = 1; m <= n_topic; ++m)
                topic_patch(page.data.data() + roles[m] * cfg.dim_in, topics[topic]);
            double strength = easy ? cfg.easy_strength : cfg.hard_strength;
            float* evidence = page.data.data() + planted * cfg.dim_in;
            for (std::size_t d = 0; d < cfg.dim_in; ++d)
                evidence[d] = static_cast<float>(
                    cfg.feature_scale *
                    (strength * specific[d] + cfg.planted_noise * rng.next_normal()));
            corpus.dataset.add_page(std::move(page));

            AnnotationSet annotation;
            annotation.query_id = query_id;
            annotation.page_id = pid;
            annotation.grid = cfg.grid;
            std::size_t r = planted / cfg.grid.width;
            std::size_t c = planted % cfg.grid.width;
            annotation.boxes.push_back({r, c, r, c, MatchKind::Explicit});

            TrainingInstance inst;
            inst.query_id = query_id;
            inst.query_features = std::move(query);
            inst.positive_page_id = pid;
            inst.attention_target = synthesize_attention(
                annotation, cfg.attention_peak, cfg.attention_background, cfg.seed ^ (qi + 1));
            inst.annotation = std::move(annotation);
            corpus.dataset.instances.push_back(std::move(inst));
            corpus.qrels.add(query_id, pid, 1);
            corpus.planted_patch.push_back(planted);
            corpus.easy.push_back(easy);
            ++page_id;
        }
    }

    for (std::size_t topic = 0; topic < cfg.num_topics; ++topic) {
        for (std::size_t k = 0; k < cfg.distractors_per_topic; ++k) {
            EmbeddingMatrix page;
            page.id = detail::padded_id('p', page_id);
            page.rows = cells;
            page.dim = cfg.dim_in;
            page.kind = EmbeddingKind::Page;
            page.data.resize(cells * cfg.dim_in);
            std::vector<std::size_t> roles(cells);
            std::iota(roles.begin(), roles.end(), std::size_t{0});
            seeded_shuffle(roles, rng.next_u64());
            for (std::size_t j = 0; j < cells; ++j) junk_patch(page.data.data() + j * cfg.dim_in);
            for (std::size_t m = 0; m < cfg.topic_patches; ++m)
                topic_patch(page.data.data() + roles[m] * cfg.dim_in, topics[topic]);
            corpus.dataset.add_page(std::move(page));
            ++page_id;
        }
    }
    return corpus;
}

/// Materialize a planted corpus as stores + manifest under `dir`; returns the
/// manifest path.  The written dataset round-trips through load_dataset.
inline std::string write_planted_corpus(const std::string& dir, const PlantedCorpusConfig& cfg) {
    std::filesystem::create_directories(dir);
    PlantedCorpus corpus = make_planted_corpus(cfg);

    EmbeddingStore queries;
    queries.dim = static_cast<std::uint32_t>(cfg.dim_in);
    for (const TrainingInstance& inst : corpus.dataset.instances)
        queries.records.push_back(inst.query_features);
    EmbeddingStore pages;
    pages.dim = static_cast<std::uint32_t>(cfg.dim_in);
    pages.records = corpus.dataset.pages;

    std::vector<AttentionMap> attention;
    std::vector<AnnotationSet> annotations;
    for (const TrainingInstance& inst : corpus.dataset.instances) {
        attention.push_back(*inst.attention_target);
        annotations.push_back(*inst.annotation);
    }

    std::filesystem::path base(dir);
    write_embedding_store((base / "queries.mve").string(), queries);
    write_embedding_store((base / "pages.mve").string(), pages);
    write_attention_store((base / "attention.att").string(), attention);
    write_annotations((base / "annotations.json").string(), annotations);
    write_qrels((base / "qrels.tsv").string(), corpus.qrels);

    DatasetManifest manifest;
    manifest.query_store = "queries.mve";
    manifest.page_store = "pages.mve";
    manifest.attention_store = "attention.att";
    manifest.annotations = "annotations.json";
    for (const TrainingInstance& inst : corpus.dataset.instances) {
        DatasetManifest::Instance mi;
        mi.query_id = inst.query_id;
        mi.positive_page_id = inst.positive_page_id;
        mi.has_attention = true;
        mi.has_annotation = true;
        manifest.instances.push_back(std::move(mi));
    }
    std::string manifest_path = (base / "manifest.json").string();
    write_manifest(manifest_path, manifest);
    return manifest_path;
}

}  // namespace agree
