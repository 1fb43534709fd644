#pragma once

// Desk-scale trainer: a learnable linear projection maps frozen base features
// to retrieval embeddings, optimized by plain gradient descent on the dual
// objective (global contrastive + lambda * local alignment) over mini-batches
// with in-batch hardest negatives.  Includes supervised-subset selection
// (random / mismatch-first), the lambda-sweep and local-loss-comparison
// harnesses, head checkpointing, and dataset loading from manifests.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "agree/attention.hpp"
#include "agree/core.hpp"
#include "agree/evaluation.hpp"
#include "agree/io.hpp"
#include "agree/late_interaction.hpp"
#include "agree/objectives.hpp"

namespace agree {

// ---------------------------------------------------------------------------
// Projection head
// ---------------------------------------------------------------------------

/// Embeddings of one projected feature matrix, kept in double for the
/// training path.  `raw_norm` holds per-row pre-normalization norms when the
/// head normalizes its output (needed by the backward pass).
struct Projected {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> values;
    std::vector<double> raw_norm;

    MatView<double> view() const { return {values.data(), rows, dim}; }
};

struct ProjectionHead {
    std::size_t dim_in = 0;
    std::size_t dim_out = 0;
    std::vector<double> weight;  // row-major dim_in x dim_out
    bool normalize_output = false;

    static ProjectionHead seeded(std::size_t dim_in, std::size_t dim_out, std::uint64_t seed,
                                 bool normalize_output = false) {
        detail::require(dim_in >= 1 && dim_out >= 1, ErrorCode::InvalidArgument,
                        "ProjectionHead: dims >= 1");
        ProjectionHead head;
        head.dim_in = dim_in;
        head.dim_out = dim_out;
        head.normalize_output = normalize_output;
        head.weight.resize(dim_in * dim_out);
        SplitMix64 rng(seed ^ 0x4845414Dull);
        double scale = 1.0 / std::sqrt(static_cast<double>(dim_in));
        for (double& w : head.weight) w = rng.next_normal() * scale;
        return head;
    }

    Projected project(const EmbeddingMatrix& features) const {
        detail::require(features.dim == dim_in, ErrorCode::DimensionMismatch,
                        "project: feature dim != head dim_in");
        Projected out;
        out.rows = features.rows;
        out.dim = dim_out;
        out.values.assign(features.rows * dim_out, 0.0);
        for (std::size_t r = 0; r < features.rows; ++r) {
            const float* x = features.row(r);
            double* y = out.values.data() + r * dim_out;
            for (std::size_t i = 0; i < dim_in; ++i) {
                double xi = x[i];
                if (xi == 0.0) continue;
                const double* w = weight.data() + i * dim_out;
                for (std::size_t o = 0; o < dim_out; ++o) y[o] += xi * w[o];
            }
        }
        if (normalize_output) {
            out.raw_norm.resize(features.rows);
            for (std::size_t r = 0; r < features.rows; ++r) {
                double* y = out.values.data() + r * dim_out;
                double sq = 0.0;
                for (std::size_t o = 0; o < dim_out; ++o) sq += y[o] * y[o];
                double n = std::sqrt(sq);
                out.raw_norm[r] = n;
                if (n > 0.0)
                    for (std::size_t o = 0; o < dim_out; ++o) y[o] /= n;
            }
        }
        return out;
    }

    /// Float-precision embedding matrix for the retrieval engine.
    EmbeddingMatrix embed(const EmbeddingMatrix& features, EmbeddingKind kind) const {
        Projected proj = project(features);
        EmbeddingMatrix m;
        m.id = features.id;
        m.rows = proj.rows;
        m.dim = proj.dim;
        m.kind = kind;
        m.normalized = normalize_output;
        m.data.resize(proj.values.size());
        for (std::size_t i = 0; i < proj.values.size(); ++i)
            m.data[i] = static_cast<float>(proj.values[i]);
        return m;
    }

    /// dL/dW += backprop of `grad_embed` (dL/d embeddings, rows x dim_out)
    /// through this projection of `features`.
    void accumulate_weight_grad(const EmbeddingMatrix& features, const Projected& proj,
                                std::span<const double> grad_embed,
                                std::vector<double>& grad_weight) const {
        std::vector<double> grad_raw;  // dL/dy before normalization, when needed
        const double* g = grad_embed.data();
        if (normalize_output) {
            grad_raw.assign(grad_embed.size(), 0.0);
            for (std::size_t r = 0; r < proj.rows; ++r) {
                double n = proj.raw_norm[r];
                if (n == 0.0) continue;  // zero row: subgradient 0
                const double* e = proj.values.data() + r * dim_out;
                const double* gr = grad_embed.data() + r * dim_out;
                double ge = 0.0;
                for (std::size_t o = 0; o < dim_out; ++o) ge += gr[o] * e[o];
                double* out = grad_raw.data() + r * dim_out;
                for (std::size_t o = 0; o < dim_out; ++o) out[o] = (gr[o] - ge * e[o]) / n;
            }
            g = grad_raw.data();
        }
        for (std::size_t r = 0; r < proj.rows; ++r) {
            const float* x = features.row(r);
            const double* gr = g + r * dim_out;
            for (std::size_t i = 0; i < dim_in; ++i) {
                double xi = x[i];
                if (xi == 0.0) continue;
                double* gw = grad_weight.data() + i * dim_out;
                for (std::size_t o = 0; o < dim_out; ++o) gw[o] += xi * gr[o];
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One query with its positive page, candidate negatives, and optional
/// supervision artifacts.  Page features live in the shared dataset table and
/// are referenced by id.
struct TrainingInstance {
    std::string query_id;
    EmbeddingMatrix query_features;
    std::string positive_page_id;
    std::vector<std::string> candidate_page_ids;
    std::optional<AttentionMap> attention_target;  // aligned to the positive page grid
    std::optional<AnnotationSet> annotation;       // for coverage evaluation
};

struct TrainDataset {
    std::vector<TrainingInstance> instances;
    std::vector<EmbeddingMatrix> pages;  // features of every page in the corpus
    std::map<std::string, std::size_t> page_index;

    const EmbeddingMatrix& page(const std::string& id) const {
        auto it = page_index.find(id);
        detail::require(it != page_index.end(), ErrorCode::NotFound,
                        "dataset: unknown page id '" + id + "'");
        return pages[it->second];
    }

    void add_page(EmbeddingMatrix page) {
        detail::require(page_index.emplace(page.id, pages.size()).second,
                        ErrorCode::IoDuplicateId, "dataset: duplicate page id '" + page.id + "'");
        pages.push_back(std::move(page));
    }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class SelectionStrategy : std::uint8_t { Random = 0, MismatchFirst = 1 };

struct TrainConfig {
    double lambda = 0.1;
    LocalLossKind local_kind = LocalLossKind::cosine();
    std::size_t batch_size = 16;  // >= 2: in-batch negatives need company
    std::size_t epochs = 3;
    double learning_rate = 1e-2;
    std::uint64_t seed = 0;
    double supervised_fraction = 1.0;
    SelectionStrategy selection = SelectionStrategy::Random;

    std::size_t dim_out = 0;  // 0: keep the input dimension
    bool normalize_output = false;
    unsigned threads = 1;  // 1 is the deterministic reference mode
};

struct StepMetrics {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double global = 0.0;  // batch mean of L_global
    double local = 0.0;   // batch mean of L_local over supervised instances (0 when none)
    double total = 0.0;   // global + lambda * local
    std::size_t local_count = 0;
};

struct TrainResult {
    ProjectionHead head;
    std::vector<StepMetrics> log;
    std::vector<std::string> supervised_ids;
    std::map<std::string, std::size_t> local_eval_counts;  // per query id
};

// ---------------------------------------------------------------------------
// Supervised-subset selection
// ---------------------------------------------------------------------------

/// Choose which instances receive the local alignment loss.  Random draws a
/// seeded uniform subset; MismatchFirst ranks instances by 1 - cos(s, target)
/// under the current head and takes the most misaligned fraction (ties by
/// lexicographic query id).
inline std::vector<std::string> select_supervised(const TrainDataset& dataset, double fraction,
                                                  SelectionStrategy strategy,
                                                  const ProjectionHead& head,
                                                  std::uint64_t seed = 0) {
    detail::require(fraction >= 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument,
                    "select_supervised: fraction in [0, 1]");
    std::size_t n = dataset.instances.size();
    std::size_t m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    m = std::min(m, n);
    if (m == 0) return {};

    if (strategy == SelectionStrategy::Random) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        seeded_shuffle(order, seed ^ 0x5E1Ec7ull);
        order.resize(m);
        std::vector<std::string> ids;
        ids.reserve(m);
        for (std::size_t idx : order) ids.push_back(dataset.instances[idx].query_id);
        return ids;
    }

    struct Ranked {
        double mismatch;
        std::string query_id;
    };
    std::vector<Ranked> ranked;
    ranked.reserve(n);
    for (const TrainingInstance& inst : dataset.instances) {
        detail::require(inst.attention_target.has_value(), ErrorCode::InvalidArgument,
                        "select_supervised: mismatch-first needs an attention target for query '" +
                            inst.query_id + "'");
        Projected q = head.project(inst.query_features);
        Projected p = head.project(dataset.page(inst.positive_page_id));
        std::vector<double> s = patch_similarity_values(q.view(), p.view());
        std::vector<double> target = detail::widen(inst.attention_target->values);
        ranked.push_back({cosine_alignment_loss(s, target).value, inst.query_id});
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        if (a.mismatch != b.mismatch) return a.mismatch > b.mismatch;
        return a.query_id < b.query_id;
    });
    std::vector<std::string> ids;
    ids.reserve(m);
    for (std::size_t i = 0; i < m; ++i) ids.push_back(ranked[i].query_id);
    return ids;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

struct InstanceEval {
    TotalLossOutput out;
    double effective_lambda = 0.0;
    std::size_t positive_slot = 0;
};

}  // namespace detail

inline TrainResult train(const TrainDataset& dataset, const TrainConfig& cfg) {
    detail::require(!dataset.instances.empty(), ErrorCode::EmptyInput, "train: empty dataset");
    detail::require(cfg.batch_size >= 2, ErrorCode::InvalidArgument, "train: batch_size >= 2");
    detail::require(cfg.epochs >= 1, ErrorCode::InvalidArgument, "train: epochs >= 1");

    std::size_t dim_in = dataset.instances.front().query_features.dim;
    std::size_t dim_out = cfg.dim_out == 0 ? dim_in : cfg.dim_out;

    TrainResult result;
    result.head = ProjectionHead::seeded(dim_in, dim_out, cfg.seed, cfg.normalize_output);

    // Static selection: chosen once against the initial head, per the
    // labeling-cost framing; lambda = 0 runs never touch the local losses.
    std::vector<bool> supervised(dataset.instances.size(), false);
    if (cfg.lambda > 0.0 && cfg.supervised_fraction > 0.0) {
        result.supervised_ids = select_supervised(dataset, cfg.supervised_fraction, cfg.selection,
                                                  result.head, cfg.seed);
        std::map<std::string, bool> chosen;
        for (const std::string& id : result.supervised_ids) chosen[id] = true;
        for (std::size_t i = 0; i < dataset.instances.size(); ++i)
            supervised[i] = chosen.count(dataset.instances[i].query_id) > 0;
    }

    std::vector<std::size_t> order(dataset.instances.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<double> grad_weight(result.head.weight.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        seeded_shuffle(order, cfg.seed ^ (0xE90C000ull + epoch));
        std::size_t steps = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
        for (std::size_t step = 0; step < steps; ++step) {
            std::size_t begin = step * cfg.batch_size;
            std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::span<const std::size_t> batch(order.data() + begin, end - begin);

            // Shared page pool: every positive, then every explicit candidate,
            // in batch order, first occurrence wins.
            std::vector<std::size_t> pool;  // indices into dataset.pages
            std::map<std::string, std::size_t> pool_slot;
            auto add_to_pool = [&](const std::string& id) {
                if (pool_slot.count(id)) return;
                pool_slot[id] = pool.size();
                pool.push_back(dataset.page_index.at(id));
            };
            for (std::size_t idx : batch) add_to_pool(dataset.instances[idx].positive_page_id);
            for (std::size_t idx : batch)
                for (const std::string& id : dataset.instances[idx].candidate_page_ids)
                    add_to_pool(id);

            std::vector<Projected> pool_proj(pool.size());
            std::vector<MatView<double>> pool_views(pool.size());
            std::vector<std::string> pool_ids(pool.size());
            for (std::size_t p = 0; p < pool.size(); ++p) {
                pool_proj[p] = result.head.project(dataset.pages[pool[p]]);
                pool_views[p] = pool_proj[p].view();
                pool_ids[p] = dataset.pages[pool[p]].id;
            }

            std::vector<Projected> query_proj(batch.size());
            std::vector<detail::InstanceEval> evals(batch.size());
            auto eval_instance = [&](std::size_t b) {
                const TrainingInstance& inst = dataset.instances[batch[b]];
                query_proj[b] = result.head.project(inst.query_features);
                detail::InstanceEval& ev = evals[b];
                ev.positive_slot = pool_slot.at(inst.positive_page_id);
                ev.effective_lambda = (cfg.lambda > 0.0 && supervised[batch[b]] &&
                                       inst.attention_target.has_value())
                                          ? cfg.lambda
                                          : 0.0;
                std::vector<double> target;
                if (ev.effective_lambda > 0.0)
                    target = detail::widen(inst.attention_target->values);
                ev.out = total_loss_core<double>(query_proj[b].view(), pool_views, pool_ids,
                                                 ev.positive_slot, target, cfg.local_kind,
                                                 ev.effective_lambda);
            };
            if (cfg.threads <= 1 || batch.size() < 2) {
                for (std::size_t b = 0; b < batch.size(); ++b) eval_instance(b);
            } else {
                unsigned n = std::min<unsigned>(cfg.threads, static_cast<unsigned>(batch.size()));
                std::vector<std::thread> workers;
                std::size_t chunk = (batch.size() + n - 1) / n;
                for (unsigned t = 0; t < n; ++t) {
                    std::size_t lo = t * chunk, hi = std::min(batch.size(), lo + chunk);
                    if (lo < hi)
                        workers.emplace_back([&, lo, hi] {
                            for (std::size_t b = lo; b < hi; ++b) eval_instance(b);
                        });
                }
                for (auto& w : workers) w.join();
            }

            // Fixed-order reduction keeps parallel runs identical to serial.
            double inv_b = 1.0 / static_cast<double>(batch.size());
            StepMetrics metrics{epoch, step, 0.0, 0.0, 0.0, 0};
            std::vector<std::vector<double>> pool_grad(pool.size());
            for (std::size_t p = 0; p < pool.size(); ++p)
                pool_grad[p].assign(pool_proj[p].values.size(), 0.0);
            std::fill(grad_weight.begin(), grad_weight.end(), 0.0);

            for (std::size_t b = 0; b < batch.size(); ++b) {
                const detail::InstanceEval& ev = evals[b];
                metrics.global += ev.out.global_value * inv_b;
                if (ev.effective_lambda > 0.0) {
                    metrics.local += ev.out.local_value * inv_b;
                    ++metrics.local_count;
                    ++result.local_eval_counts[dataset.instances[batch[b]].query_id];
                }
                result.head.accumulate_weight_grad(dataset.instances[batch[b]].query_features,
                                                   query_proj[b], ev.out.loss.grad_query,
                                                   grad_weight);
                for (std::size_t p = 0; p < pool.size(); ++p)
                    for (std::size_t i = 0; i < pool_grad[p].size(); ++i)
                        pool_grad[p][i] += ev.out.loss.grad_pages[p][i];
            }
            for (std::size_t p = 0; p < pool.size(); ++p)
                result.head.accumulate_weight_grad(dataset.pages[pool[p]], pool_proj[p],
                                                   pool_grad[p], grad_weight);

            metrics.total = metrics.global + cfg.lambda * metrics.local;
            detail::require(std::isfinite(metrics.total), ErrorCode::Divergence,
                            "train: non-finite loss at epoch " + std::to_string(epoch) +
                                " step " + std::to_string(step));
            double scale = cfg.learning_rate * inv_b;
            for (std::size_t i = 0; i < grad_weight.size(); ++i)
                result.head.weight[i] -= scale * grad_weight[i];
            result.log.push_back(metrics);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation of a trained head
// ---------------------------------------------------------------------------

struct EvalConfig {
    std::size_t ndcg_k = 5;
    double coverage_k_percent = 3.0;
};

struct EvalSummary {
    double ndcg_at_1 = 0.0;
    double ndcg_at_k = 0.0;
    std::size_t queries_evaluated = 0;
    double coverage_mean = 0.0;
    std::size_t coverage_evaluated = 0;
    std::size_t coverage_skipped = 0;
};

/// Rank the full page corpus for each selected instance and score nDCG@1/k
/// against the instance positives, plus mean coverage@K% of the similarity
/// map on annotated positives.
inline EvalSummary evaluate_head(const ProjectionHead& head, const TrainDataset& dataset,
                                 std::span<const std::size_t> instance_indices, EvalConfig cfg = {},
                                 unsigned threads = 1) {
    detail::require(!instance_indices.empty(), ErrorCode::EmptyInput,
                    "evaluate_head: no instances");
    std::vector<EmbeddingMatrix> index;
    index.reserve(dataset.pages.size());
    for (const EmbeddingMatrix& page : dataset.pages)
        index.push_back(head.embed(page, EmbeddingKind::Page));

    RunFile run;
    Qrels qrels;
    EvalSummary summary;
    double coverage_sum = 0.0;
    for (std::size_t idx : instance_indices) {
        const TrainingInstance& inst = dataset.instances[idx];
        EmbeddingMatrix query = head.embed(inst.query_features, EmbeddingKind::Query);
        std::vector<ScoredPage> top = retrieve(query, index, cfg.ndcg_k, threads);
        auto& entries = run.rankings[inst.query_id];
        for (const ScoredPage& sp : top) entries.push_back({sp.page_id, sp.score});
        qrels.add(inst.query_id, inst.positive_page_id, 1);

        if (inst.annotation.has_value()) {
            const EmbeddingMatrix& page = dataset.page(inst.positive_page_id);
            EmbeddingMatrix page_emb = head.embed(page, EmbeddingKind::Page);
            SimilarityVector sim =
                patch_similarity(query, page_emb, inst.annotation->grid);
            CoverageResult cov =
                coverage_at_kpercent(sim, *inst.annotation, cfg.coverage_k_percent);
            if (cov.skipped) {
                ++summary.coverage_skipped;
            } else {
                coverage_sum += cov.overall;
                ++summary.coverage_evaluated;
            }
        }
    }
    summary.ndcg_at_1 = ndcg_at_k(run, qrels, 1).mean;
    summary.ndcg_at_k = ndcg_at_k(run, qrels, cfg.ndcg_k).mean;
    summary.queries_evaluated = run.rankings.size();
    summary.coverage_mean = summary.coverage_evaluated > 0
                                ? coverage_sum / static_cast<double>(summary.coverage_evaluated)
                                : 0.0;
    return summary;
}

// ---------------------------------------------------------------------------
// Harnesses
// ---------------------------------------------------------------------------

struct HarnessConfig {
    double holdout_fraction = 0.25;  // 0: evaluate on the training instances
    EvalConfig eval;
};

struct HarnessRow {
    std::string key;  // lambda value or local-loss name
    EvalSummary eval;
    double final_total = 0.0;
};

struct HarnessTable {
    std::string key_column;
    std::vector<HarnessRow> rows;
};

namespace detail {

struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> eval;
};

inline DatasetSplit split_dataset(std::size_t n, double holdout_fraction, std::uint64_t seed) {
    require(holdout_fraction >= 0.0 && holdout_fraction < 1.0, ErrorCode::InvalidArgument,
            "holdout fraction in [0, 1)");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    seeded_shuffle(order, seed ^ 0x5EEDF00Dull);
    std::size_t held = static_cast<std::size_t>(
        std::ceil(holdout_fraction * static_cast<double>(n)));
    if (held == 0 || held >= n) {
        // Degenerate split: evaluate on everything trained on.
        return {order, order};
    }
    DatasetSplit split;
    split.train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
    split.eval.assign(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
    return split;
}

inline TrainDataset subset_dataset(const TrainDataset& dataset,
                                   std::span<const std::size_t> indices) {
    TrainDataset out;
    out.pages = dataset.pages;
    out.page_index = dataset.page_index;
    for (std::size_t idx : indices) out.instances.push_back(dataset.instances[idx]);
    return out;
}

}  // namespace detail

/// One trained head per lambda on a shared split and seed; rows mirror the
/// lambda-vs-metrics shape of the paper-style sweep.
inline HarnessTable sweep_lambda(const TrainDataset& dataset, std::span<const double> lambdas,
                                 TrainConfig cfg, HarnessConfig harness = {}) {
    detail::require(!lambdas.empty(), ErrorCode::EmptyInput, "sweep_lambda: no lambda values");
    detail::DatasetSplit split =
        detail::split_dataset(dataset.instances.size(), harness.holdout_fraction, cfg.seed);
    TrainDataset train_set = detail::subset_dataset(dataset, split.train);

    HarnessTable table;
    table.key_column = "lambda";
    for (double lambda : lambdas) {
        TrainConfig run_cfg = cfg;
        run_cfg.lambda = lambda;
        TrainResult result = train(train_set, run_cfg);
        HarnessRow row;
        row.key = detail::format_double(lambda);
        row.eval = evaluate_head(result.head, dataset, split.eval, harness.eval, cfg.threads);
        row.final_total = result.log.empty() ? 0.0 : result.log.back().total;
        table.rows.push_back(std::move(row));
    }
    return table;
}

/// Same protocol over the local-loss family at a fixed lambda.
inline HarnessTable compare_local_losses(const TrainDataset& dataset,
                                         std::span<const LocalLossKind> kinds, TrainConfig cfg,
                                         HarnessConfig harness = {}) {
    detail::require(!kinds.empty(), ErrorCode::EmptyInput, "compare_local_losses: no kinds");
    detail::DatasetSplit split =
        detail::split_dataset(dataset.instances.size(), harness.holdout_fraction, cfg.seed);
    TrainDataset train_set = detail::subset_dataset(dataset, split.train);

    HarnessTable table;
    table.key_column = "local_loss";
    for (const LocalLossKind& kind : kinds) {
        TrainConfig run_cfg = cfg;
        run_cfg.local_kind = kind;
        TrainResult result = train(train_set, run_cfg);
        HarnessRow row;
        row.key = kind.name();
        row.eval = evaluate_head(result.head, dataset, split.eval, harness.eval, cfg.threads);
        row.final_total = result.log.empty() ? 0.0 : result.log.back().total;
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline std::string table_to_tsv(const HarnessTable& table) {
    std::ostringstream out;
    out << table.key_column << "\tndcg_at_1\tndcg_at_5\tcoverage\tfinal_total\n";
    for (const HarnessRow& row : table.rows)
        out << row.key << '\t' << detail::format_double(row.eval.ndcg_at_1) << '\t'
            << detail::format_double(row.eval.ndcg_at_k) << '\t'
            << detail::format_double(row.eval.coverage_mean) << '\t'
            << detail::format_double(row.final_total) << '\n';
    return out.str();
}

inline std::string table_to_json(const HarnessTable& table) {
    nlohmann::json rows = nlohmann::json::array();
    for (const HarnessRow& row : table.rows)
        rows.push_back({{table.key_column, row.key},
                        {"ndcg_at_1", row.eval.ndcg_at_1},
                        {"ndcg_at_5", row.eval.ndcg_at_k},
                        {"coverage", row.eval.coverage_mean},
                        {"final_total", row.final_total}});
    return rows.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Head checkpoint and metrics files
// ---------------------------------------------------------------------------

inline void write_head(const std::string& path, const ProjectionHead& head) {
    detail::ByteWriter w;
    w.put_bytes(std::span<const char>("PRJ1", 4));
    w.put_u16(kStoreVersion);
    w.put_u32(static_cast<std::uint32_t>(head.dim_in));
    w.put_u32(static_cast<std::uint32_t>(head.dim_out));
    w.put_u8(head.normalize_output ? 1 : 0);
    for (double v : head.weight) w.put_f64(v);
    detail::atomic_write_file(path, w.bytes());
}

inline ProjectionHead read_head(const std::string& path) {
    std::vector<std::uint8_t> bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes, path);
    r.set_context("header");
    detail::require(r.remaining() >= 4, ErrorCode::IoTruncated, path + ": missing magic");
    char magic[4];
    for (int i = 0; i < 4; ++i) magic[i] = static_cast<char>(r.get_u8());
    detail::require(std::memcmp(magic, "PRJ1", 4) == 0, ErrorCode::IoMagic,
                    path + ": bad magic, expected PRJ1");
    std::uint16_t version = r.get_u16();
    detail::require(version == kStoreVersion, ErrorCode::IoVersion,
                    path + ": unsupported version " + std::to_string(version));
    ProjectionHead head;
    head.dim_in = r.get_u32();
    head.dim_out = r.get_u32();
    head.normalize_output = r.get_u8() != 0;
    r.set_context("weights");
    head.weight.resize(head.dim_in * head.dim_out);
    for (double& v : head.weight) v = r.get_f64();
    detail::require(r.exhausted(), ErrorCode::IoMalformed, path + ": trailing bytes");
    return head;
}

/// JSONL, one line per optimization step; stable field order and shortest
/// round-trip number formatting keep same-seed reruns byte-identical.
inline std::string metrics_to_jsonl(std::span<const StepMetrics> log) {
    std::ostringstream out;
    for (const StepMetrics& m : log)
        out << "{\"epoch\":" << m.epoch << ",\"step\":" << m.step
            << ",\"global\":" << detail::format_double(m.global)
            << ",\"local\":" << detail::format_double(m.local)
            << ",\"local_count\":" << m.local_count
            << ",\"total\":" << detail::format_double(m.total) << "}\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Manifest loading
// ---------------------------------------------------------------------------

/// Materialize a manifest: load the stores, resolve every reference, and
/// attach attention targets / annotations to their instances.
inline TrainDataset load_dataset(const std::string& manifest_path) {
    DatasetManifest manifest = read_manifest(manifest_path);
    EmbeddingStore query_store = read_embedding_store(
        resolve_relative(manifest_path, manifest.query_store), EmbeddingKind::Query);
    EmbeddingStore page_store = read_embedding_store(
        resolve_relative(manifest_path, manifest.page_store), EmbeddingKind::Page);

    std::map<std::string, const EmbeddingMatrix*> queries;
    for (const EmbeddingMatrix& q : query_store.records) queries[q.id] = &q;

    TrainDataset dataset;
    for (EmbeddingMatrix& p : page_store.records) dataset.add_page(std::move(p));

    std::map<std::pair<std::string, std::string>, std::vector<const AttentionMap*>> attention;
    std::vector<AttentionMap> attention_records;
    if (!manifest.attention_store.empty()) {
        attention_records =
            read_attention_store(resolve_relative(manifest_path, manifest.attention_store));
        for (const AttentionMap& m : attention_records)
            attention[{m.query_id, m.page_id}].push_back(&m);
    }
    std::map<std::pair<std::string, std::string>, AnnotationSet> annotations;
    if (!manifest.annotations.empty()) {
        for (AnnotationSet& a :
             read_annotations(resolve_relative(manifest_path, manifest.annotations)))
            annotations[{a.query_id, a.page_id}] = std::move(a);
    }

    for (const DatasetManifest::Instance& mi : manifest.instances) {
        TrainingInstance inst;
        inst.query_id = mi.query_id;
        auto q = queries.find(mi.query_id);
        detail::require(q != queries.end(), ErrorCode::NotFound,
                        manifest_path + ": query '" + mi.query_id + "' not in query store");
        inst.query_features = *q->second;
        inst.positive_page_id = mi.positive_page_id;
        const EmbeddingMatrix& positive = dataset.page(mi.positive_page_id);
        for (const std::string& c : mi.candidate_page_ids) {
            dataset.page(c);  // resolvable or throws
            inst.candidate_page_ids.push_back(c);
        }
        if (mi.has_attention) {
            auto it = attention.find({mi.query_id, mi.positive_page_id});
            detail::require(it != attention.end() && !it->second.empty(), ErrorCode::NotFound,
                            manifest_path + ": no attention record for (" + mi.query_id + ", " +
                                mi.positive_page_id + ")");
            detail::require(it->second.size() == 1, ErrorCode::IoMalformed,
                            manifest_path + ": expected exactly one attention record for (" +
                                mi.query_id + ", " + mi.positive_page_id + "), found " +
                                std::to_string(it->second.size()));
            detail::require(it->second.front()->grid.cells() == positive.rows,
                            ErrorCode::GridMismatch,
                            manifest_path + ": attention grid does not match page '" +
                                mi.positive_page_id + "'");
            inst.attention_target = *it->second.front();
        }
        if (mi.has_annotation) {
            auto it = annotations.find({mi.query_id, mi.positive_page_id});
            detail::require(it != annotations.end(), ErrorCode::NotFound,
                            manifest_path + ": no annotation for (" + mi.query_id + ", " +
                                mi.positive_page_id + ")");
            detail::require(it->second.grid.cells() == positive.rows, ErrorCode::GridMismatch,
                            manifest_path + ": annotation grid does not match page '" +
                                mi.positive_page_id + "'");
            inst.annotation = it->second;
        }
        dataset.instances.push_back(std::move(inst));
    }
    return dataset;
}

}  // namespace agree
