#pragma once

// Training objectives with analytic gradients: the softplus contrastive loss
// over in-batch hardest negatives, the three local alignment losses (KL,
// top-K salient contrastive, cosine) on the patch-query similarity vector,
// the combined dual objective, and a central finite-difference harness that
// verifies every gradient.
//
// Gradient conventions: MaxSim uses the fixed-argmax subgradient (ties go to
// the lowest patch index), so gradients flow only through recorded argmax
// patches.  Local-loss gradients reach the embeddings through the Eq.-8 mean:
//   d s_j / d q_i = p_j / N_q          (every token row gets the same pull)
//   d s_j / d p_j = mean_i q_i

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "agree/core.hpp"
#include "agree/late_interaction.hpp"

namespace agree {

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

/// Softmax with max-subtraction stabilization.
inline std::vector<double> stable_softmax(std::span<const double> x) {
    double m = *std::max_element(x.begin(), x.end());
    std::vector<double> out(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

// ---------------------------------------------------------------------------
// Local losses on the similarity vector (gradients w.r.t. s)
// ---------------------------------------------------------------------------

struct SimLossResult {
    double value = 0.0;
    std::vector<double> grad_sim;  // dL/ds, length N_d
};

/// KL(softmax(target) || softmax(s)); gradient is softmax(s) - softmax(target).
inline SimLossResult kl_div_loss(std::span<const double> s, std::span<const double> target) {
    detail::require(s.size() == target.size(), ErrorCode::DimensionMismatch,
                    "kl_div_loss: length mismatch");
    detail::require(!s.empty(), ErrorCode::EmptyInput, "kl_div_loss: empty input");
    double target_sum = 0.0;
    for (double t : target) {
        detail::require(t >= 0.0, ErrorCode::InvalidArgument, "kl_div_loss: target >= 0");
        target_sum += t;
    }
    detail::require(target_sum > 0.0, ErrorCode::Degenerate, "kl_div_loss: target all zeros");

    std::vector<double> a = stable_softmax(target);
    std::vector<double> m = stable_softmax(s);
    SimLossResult out;
    out.grad_sim.resize(s.size());
    double value = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
        value += a[j] * (std::log(a[j]) - std::log(m[j]));
        out.grad_sim[j] = m[j] - a[j];
    }
    out.value = std::max(value, 0.0);  // clamp rounding residue, KL >= 0
    return out;
}

/// The top ceil(k_percent/100 * N) indices of `values`, ties to the lowest
/// index.  Shared by the top-K loss and the coverage metric.
inline std::vector<std::uint32_t> top_k_percent_indices(std::span<const double> values,
                                                        double k_percent) {
    detail::require(k_percent > 0.0 && k_percent < 100.0, ErrorCode::InvalidArgument,
                    "k_percent in (0, 100)");
    std::size_t n = values.size();
    std::size_t m = static_cast<std::size_t>(
        std::ceil(k_percent / 100.0 * static_cast<double>(n)));
    m = std::min(m, n);
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    });
    order.resize(m);
    return order;
}

struct TopKLossResult {
    double value = 0.0;
    std::vector<double> grad_sim;
    std::vector<std::uint32_t> salient;  // P+, sorted by target rank
};

/// -log( sum_{j in P+} exp(s_j) / sum_all exp(s_i) ), log-sum-exp stabilized.
/// P+ comes from the target, so it is constant under perturbations of s.
inline TopKLossResult topk_contrastive_loss(std::span<const double> s,
                                            std::span<const double> target, double k_percent) {
    detail::require(s.size() == target.size(), ErrorCode::DimensionMismatch,
                    "topk_contrastive_loss: length mismatch");
    detail::require(!s.empty(), ErrorCode::EmptyInput, "topk_contrastive_loss: empty input");
    double target_sum = 0.0;
    for (double t : target) {
        detail::require(t >= 0.0, ErrorCode::InvalidArgument,
                        "topk_contrastive_loss: target >= 0");
        target_sum += t;
    }
    detail::require(target_sum > 0.0, ErrorCode::Degenerate,
                    "topk_contrastive_loss: target all zeros");

    TopKLossResult out;
    out.salient = top_k_percent_indices(target, k_percent);
    detail::require(!out.salient.empty(), ErrorCode::Degenerate,
                    "topk_contrastive_loss: empty salient set");
    detail::require(out.salient.size() < s.size(), ErrorCode::Degenerate,
                    "topk_contrastive_loss: salient set covers all patches (loss identically 0)");

    double m = *std::max_element(s.begin(), s.end());
    std::vector<double> w(s.size());
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        w[i] = std::exp(s[i] - m);
        total += w[i];
    }
    std::vector<bool> in_salient(s.size(), false);
    double salient_mass = 0.0;
    for (std::uint32_t j : out.salient) {
        in_salient[j] = true;
        salient_mass += w[j];
    }
    out.value = std::log(total) - std::log(salient_mass);
    out.grad_sim.resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        out.grad_sim[i] = w[i] / total - (in_salient[i] ? w[i] / salient_mass : 0.0);
    return out;
}

/// 1 - cos(s, target).  At ||s|| = 0 the value is 1 and the gradient 0 (the
/// zero vector carries no direction; this subgradient keeps training finite).
inline SimLossResult cosine_alignment_loss(std::span<const double> s,
                                           std::span<const double> target) {
    detail::require(s.size() == target.size(), ErrorCode::DimensionMismatch,
                    "cosine_alignment_loss: length mismatch");
    detail::require(!s.empty(), ErrorCode::EmptyInput, "cosine_alignment_loss: empty input");
    double ss = 0.0, tt = 0.0, st = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        ss += s[i] * s[i];
        tt += target[i] * target[i];
        st += s[i] * target[i];
    }
    detail::require(tt > 0.0, ErrorCode::Degenerate, "cosine_alignment_loss: zero target norm");

    SimLossResult out;
    out.grad_sim.assign(s.size(), 0.0);
    double ns = std::sqrt(ss), nt = std::sqrt(tt);
    if (ns == 0.0) {
        out.value = 1.0;
        return out;
    }
    out.value = 1.0 - st / (ns * nt);
    for (std::size_t i = 0; i < s.size(); ++i)
        out.grad_sim[i] = -target[i] / (ns * nt) + st * s[i] / (ns * ns * ns * nt);
    return out;
}

namespace detail {

inline std::vector<double> widen(std::span<const float> xs) {
    return std::vector<double>(xs.begin(), xs.end());
}

}  // namespace detail

// Spec-surface wrappers over the SimilarityVector type.
inline SimLossResult kl_loss(const SimilarityVector& sim, std::span<const float> target) {
    return kl_div_loss(sim.values, detail::widen(target));
}
inline TopKLossResult topk_loss(const SimilarityVector& sim, std::span<const float> target,
                                double k_percent) {
    return topk_contrastive_loss(sim.values, detail::widen(target), k_percent);
}
inline SimLossResult cosine_loss(const SimilarityVector& sim, std::span<const float> target) {
    return cosine_alignment_loss(sim.values, detail::widen(target));
}

// ---------------------------------------------------------------------------
// Local loss selector
// ---------------------------------------------------------------------------

struct LocalLossKind {
    enum class Tag : std::uint8_t { KL = 0, TopK = 1, Cosine = 2 };
    Tag tag = Tag::Cosine;
    double k_percent = 3.0;  // TopK only

    static LocalLossKind kl() { return {Tag::KL, 0.0}; }
    static LocalLossKind topk(double percent) { return {Tag::TopK, percent}; }
    static LocalLossKind cosine() { return {Tag::Cosine, 0.0}; }

    std::string name() const {
        switch (tag) {
            case Tag::KL: return "kl";
            case Tag::TopK: return "topk(" + std::to_string(k_percent) + "%)";
            case Tag::Cosine: return "cosine";
        }
        return "?";
    }
};

// ---------------------------------------------------------------------------
// Embedding-level losses
// ---------------------------------------------------------------------------

/// Loss value with gradients shaped like the embedding matrices.  For the
/// global and total losses `grad_pages` aligns with the batch page list; for
/// a local loss it holds a single entry for the positive page.
struct LossOutput {
    double value = 0.0;
    std::vector<double> grad_query;               // N_q * D, row-major
    std::vector<std::vector<double>> grad_pages;  // each N_d * D, row-major
};

/// Identifies the non-differentiable structure a loss evaluation committed
/// to; the finite-difference harness treats a structure change across a
/// probe pair as a boundary coordinate.
inline std::uint64_t fnv1a(std::uint64_t h, std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
        h ^= (x >> (8 * b)) & 0xFFull;
        h *= 0x100000001B3ull;
    }
    return h;
}

struct GlobalLossOutput {
    LossOutput loss;
    std::size_t negative_index = 0;  // hardest in-batch negative
    double score_positive = 0.0;
    double score_negative = 0.0;
    std::vector<std::uint32_t> argmax_positive;
    std::vector<std::uint32_t> argmax_negative;

    std::uint64_t structure() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        h = fnv1a(h, negative_index);
        for (auto j : argmax_positive) h = fnv1a(h, j);
        for (auto j : argmax_negative) h = fnv1a(h, j);
        return h;
    }
};

/// Softplus contrastive loss against the hardest in-batch negative:
/// log(1 + exp(S(q, d-) - S(q, d+))).  The hardest negative is the highest
/// MaxSim non-positive page, score ties broken by lexicographic page id.
template <class T>
GlobalLossOutput global_loss_core(MatView<T> query, std::span<const MatView<T>> pages,
                                  std::span<const std::string> ids, std::size_t positive_index) {
    detail::require(pages.size() == ids.size(), ErrorCode::InvalidArgument,
                    "global_loss: pages/ids size mismatch");
    detail::require(positive_index < pages.size(), ErrorCode::InvalidArgument,
                    "global_loss: positive index out of range");
    detail::require(pages.size() >= 2, ErrorCode::EmptyInput,
                    "global_loss: batch needs a non-positive page");

    std::vector<ScoredPage> scored(pages.size());
    for (std::size_t p = 0; p < pages.size(); ++p)
        scored[p] = maxsim_score(query, pages[p], ids[p]);

    std::size_t neg = pages.size();
    for (std::size_t p = 0; p < pages.size(); ++p) {
        if (p == positive_index) continue;
        if (neg == pages.size() || scored[p].score > scored[neg].score ||
            (scored[p].score == scored[neg].score && ids[p] < ids[neg]))
            neg = p;
    }
    detail::require(neg < pages.size(), ErrorCode::EmptyInput,
                    "global_loss: batch needs a non-positive page");

    GlobalLossOutput out;
    out.negative_index = neg;
    out.score_positive = scored[positive_index].score;
    out.score_negative = scored[neg].score;
    out.argmax_positive = scored[positive_index].argmax_patch;
    out.argmax_negative = scored[neg].argmax_patch;

    double delta = out.score_negative - out.score_positive;
    double g = sigmoid(delta);  // dL/ddelta
    out.loss.value = softplus(delta);

    std::size_t dim = query.dim;
    out.loss.grad_query.assign(query.rows * dim, 0.0);
    out.loss.grad_pages.resize(pages.size());
    for (std::size_t p = 0; p < pages.size(); ++p)
        out.loss.grad_pages[p].assign(pages[p].rows * dim, 0.0);

    const MatView<T>& pos = pages[positive_index];
    const MatView<T>& hard = pages[neg];
    for (std::size_t i = 0; i < query.rows; ++i) {
        std::uint32_t jp = out.argmax_positive[i];
        std::uint32_t jn = out.argmax_negative[i];
        const T* pp = pos.row(jp);
        const T* pn = hard.row(jn);
        const T* q = query.row(i);
        for (std::size_t d = 0; d < dim; ++d) {
            out.loss.grad_query[i * dim + d] +=
                g * (static_cast<double>(pn[d]) - static_cast<double>(pp[d]));
            out.loss.grad_pages[positive_index][jp * dim + d] -= g * static_cast<double>(q[d]);
            out.loss.grad_pages[neg][jn * dim + d] += g * static_cast<double>(q[d]);
        }
    }
    return out;
}

/// Convenience over domain matrices; the positive is located in the batch by
/// its page id.
inline GlobalLossOutput global_loss(const EmbeddingMatrix& query, const EmbeddingMatrix& positive,
                                    std::span<const EmbeddingMatrix> batch_pages) {
    std::vector<MatView<float>> views;
    std::vector<std::string> ids;
    std::size_t positive_index = batch_pages.size();
    for (std::size_t p = 0; p < batch_pages.size(); ++p) {
        detail::require(batch_pages[p].dim == query.dim, ErrorCode::DimensionMismatch,
                        "global_loss: page dim mismatch");
        views.push_back(view(batch_pages[p]));
        ids.push_back(batch_pages[p].id);
        if (batch_pages[p].id == positive.id) positive_index = p;
    }
    detail::require(positive_index < batch_pages.size(), ErrorCode::NotFound,
                    "global_loss: positive page not in batch");
    return global_loss_core<float>(view(query), views, ids, positive_index);
}

/// One local alignment loss evaluated on a positive pair, with gradients
/// chained through the Eq.-8 similarity vector onto both embedding matrices.
template <class T>
LossOutput local_loss_core(MatView<T> query, MatView<T> page, std::span<const double> target,
                           LocalLossKind kind) {
    std::vector<double> s = patch_similarity_values(query, page);
    SimLossResult sim_loss;
    switch (kind.tag) {
        case LocalLossKind::Tag::KL: sim_loss = kl_div_loss(s, target); break;
        case LocalLossKind::Tag::TopK: {
            TopKLossResult r = topk_contrastive_loss(s, target, kind.k_percent);
            sim_loss.value = r.value;
            sim_loss.grad_sim = std::move(r.grad_sim);
            break;
        }
        case LocalLossKind::Tag::Cosine: sim_loss = cosine_alignment_loss(s, target); break;
    }

    LossOutput out;
    out.value = sim_loss.value;
    std::size_t dim = query.dim;
    double inv_nq = 1.0 / static_cast<double>(query.rows);

    // dL/dq_i = (1/N_q) sum_j g_j p_j, identical for every token row.
    std::vector<double> pull(dim, 0.0);
    for (std::size_t j = 0; j < page.rows; ++j) {
        double gj = sim_loss.grad_sim[j];
        if (gj == 0.0) continue;
        const T* p = page.row(j);
        for (std::size_t d = 0; d < dim; ++d) pull[d] += gj * static_cast<double>(p[d]);
    }
    out.grad_query.resize(query.rows * dim);
    for (std::size_t i = 0; i < query.rows; ++i)
        for (std::size_t d = 0; d < dim; ++d) out.grad_query[i * dim + d] = pull[d] * inv_nq;

    // dL/dp_j = g_j * mean_i q_i.
    std::vector<double> qbar(dim, 0.0);
    for (std::size_t i = 0; i < query.rows; ++i) {
        const T* q = query.row(i);
        for (std::size_t d = 0; d < dim; ++d) qbar[d] += static_cast<double>(q[d]);
    }
    for (double& v : qbar) v *= inv_nq;

    out.grad_pages.emplace_back(page.rows * dim, 0.0);
    std::vector<double>& gp = out.grad_pages.front();
    for (std::size_t j = 0; j < page.rows; ++j) {
        double gj = sim_loss.grad_sim[j];
        if (gj == 0.0) continue;
        for (std::size_t d = 0; d < dim; ++d) gp[j * dim + d] = gj * qbar[d];
    }
    return out;
}

inline LossOutput local_loss(const EmbeddingMatrix& query, const EmbeddingMatrix& positive,
                             const AttentionMap& target, LocalLossKind kind) {
    detail::check_pair(query, positive);
    detail::require(target.grid.cells() == positive.rows, ErrorCode::GridMismatch,
                    "local_loss: attention target grid does not match positive page");
    return local_loss_core<float>(view(query), view(positive), detail::widen(target.values), kind);
}

/// Eq.-12 combination: L_global + lambda * L_local, the local term evaluated
/// on the positive page only.  lambda = 0 short-circuits the local loss so
/// the result is bit-identical to global_loss alone.
struct TotalLossOutput {
    LossOutput loss;
    double global_value = 0.0;
    double local_value = 0.0;
    GlobalLossOutput global_detail;  // gradients cleared, structure retained
};

template <class T>
TotalLossOutput total_loss_core(MatView<T> query, std::span<const MatView<T>> pages,
                                std::span<const std::string> ids, std::size_t positive_index,
                                std::span<const double> target, LocalLossKind kind, double lambda) {
    detail::require(lambda >= 0.0, ErrorCode::InvalidArgument, "total_loss: lambda >= 0");
    GlobalLossOutput global = global_loss_core(query, pages, ids, positive_index);

    TotalLossOutput out;
    out.global_value = global.loss.value;
    out.loss = std::move(global.loss);
    global.loss = {};
    out.global_detail = std::move(global);

    if (lambda > 0.0) {
        LossOutput local = local_loss_core(query, pages[positive_index], target, kind);
        out.local_value = local.value;
        out.loss.value += lambda * local.value;
        for (std::size_t i = 0; i < out.loss.grad_query.size(); ++i)
            out.loss.grad_query[i] += lambda * local.grad_query[i];
        std::vector<double>& gp = out.loss.grad_pages[positive_index];
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += lambda * local.grad_pages[0][i];
    }
    return out;
}

inline TotalLossOutput total_loss(const EmbeddingMatrix& query, const EmbeddingMatrix& positive,
                                  std::span<const EmbeddingMatrix> batch_pages,
                                  const AttentionMap& attention_target, LocalLossKind kind,
                                  double lambda) {
    detail::require(attention_target.grid.cells() == positive.rows, ErrorCode::GridMismatch,
                    "total_loss: attention target grid does not match positive page");
    std::vector<MatView<float>> views;
    std::vector<std::string> ids;
    std::size_t positive_index = batch_pages.size();
    for (std::size_t p = 0; p < batch_pages.size(); ++p) {
        views.push_back(view(batch_pages[p]));
        ids.push_back(batch_pages[p].id);
        if (batch_pages[p].id == positive.id) positive_index = p;
    }
    detail::require(positive_index < batch_pages.size(), ErrorCode::NotFound,
                    "total_loss: positive page not in batch");
    return total_loss_core<float>(view(query), views, ids, positive_index,
                                  detail::widen(attention_target.values), kind, lambda);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// One evaluation of a loss closure: the value plus a hash of whatever
/// non-differentiable structure (argmax patches, hardest negative) the
/// evaluation committed to.  Smooth losses report a constant structure.
struct GradProbe {
    double value = 0.0;
    std::uint64_t structure = 0;
};

struct GradCheckConfig {
    double step = 1e-4;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    std::size_t sample_coords = 64;  // checked coordinates; all if fewer exist
};

struct CoordCheck {
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<CoordCheck> checked;
    std::vector<std::size_t> excluded;  // coordinates sitting on a structure boundary

    bool pass(double tolerance) const { return max_rel_error < tolerance; }
};

/// Central differences (f(x+h) - f(x-h)) / 2h on a seeded coordinate
/// subsample; relative error convention |a-b| / max(1, |a|, |b|).  A probe
/// pair whose structure hashes differ marks a non-differentiable boundary
/// and is excluded from the error statistic (and reported).
template <class Fn>
GradCheckReport gradcheck(Fn&& probe, std::vector<double> x, std::span<const double> analytic,
                          GradCheckConfig cfg = {}) {
    detail::require(x.size() == analytic.size(), ErrorCode::DimensionMismatch,
                    "gradcheck: parameter/gradient size mismatch");
    detail::require(cfg.step > 0.0, ErrorCode::InvalidArgument, "gradcheck: step > 0");

    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), 0u);
    if (coords.size() > cfg.sample_coords) {
        seeded_shuffle(coords, cfg.seed);
        coords.resize(cfg.sample_coords);
    }

    GradCheckReport report;
    for (std::size_t c : coords) {
        double keep = x[c];
        x[c] = keep + cfg.step;
        GradProbe hi = probe(std::span<const double>(x));
        x[c] = keep - cfg.step;
        GradProbe lo = probe(std::span<const double>(x));
        x[c] = keep;
        detail::require(std::isfinite(hi.value) && std::isfinite(lo.value), ErrorCode::Divergence,
                        "gradcheck: non-finite loss at probe (coordinate " + std::to_string(c) +
                            ")");
        if (hi.structure != lo.structure) {
            report.excluded.push_back(c);
            continue;
        }
        CoordCheck check;
        check.index = c;
        check.analytic = analytic[c];
        check.numeric = (hi.value - lo.value) / (2.0 * cfg.step);
        check.rel_error = std::abs(check.analytic - check.numeric) /
                          std::max({1.0, std::abs(check.analytic), std::abs(check.numeric)});
        report.max_rel_error = std::max(report.max_rel_error, check.rel_error);
        report.checked.push_back(check);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Seeded gradcheck instances (shared by the CLI and the acceptance suite)
// ---------------------------------------------------------------------------

enum class LossFamily { Global, KL, TopK, Cosine, Total };

inline const char* loss_family_name(LossFamily f) {
    switch (f) {
        case LossFamily::Global: return "global";
        case LossFamily::KL: return "kl";
        case LossFamily::TopK: return "topk";
        case LossFamily::Cosine: return "cosine";
        case LossFamily::Total: return "total";
    }
    return "?";
}

/// Builds a random instance (N_q <= 8, N_d <= 32, D <= 16, a 4-page batch for
/// the global and total families), evaluates the analytic gradient, and runs
/// the finite-difference harness over the stacked embedding coordinates.
inline GradCheckReport gradcheck_seeded_loss(LossFamily family, std::uint64_t seed,
                                             GradCheckConfig cfg = {}, double lambda = 0.1,
                                             double k_percent = 12.5) {
    SplitMix64 rng(seed ^ 0xA6EEull);
    std::size_t n_q = 1 + static_cast<std::size_t>(rng.next_below(8));
    std::size_t n_d = 2 + static_cast<std::size_t>(rng.next_below(31));
    std::size_t dim = 1 + static_cast<std::size_t>(rng.next_below(16));
    bool batched = family == LossFamily::Global || family == LossFamily::Total;
    std::size_t n_pages = batched ? 4 : 1;

    // Parameter vector: query rows, then every page's rows.
    std::vector<double> params;
    params.reserve((n_q + n_pages * n_d) * dim);
    for (std::size_t i = 0; i < (n_q + n_pages * n_d) * dim; ++i)
        params.push_back(rng.next_normal());

    std::vector<double> target(n_d);
    for (double& t : target) t = std::abs(rng.next_normal()) + 0.01;

    std::vector<std::string> ids;
    for (std::size_t p = 0; p < n_pages; ++p) ids.push_back("p" + std::to_string(p));
    LocalLossKind kind = family == LossFamily::KL      ? LocalLossKind::kl()
                         : family == LossFamily::TopK  ? LocalLossKind::topk(k_percent)
                         : family == LossFamily::Total ? LocalLossKind::cosine()
                                                       : LocalLossKind::cosine();

    auto views_of = [&](std::span<const double> x) {
        MatView<double> query{x.data(), n_q, dim};
        std::vector<MatView<double>> pages(n_pages);
        for (std::size_t p = 0; p < n_pages; ++p)
            pages[p] = MatView<double>{x.data() + (n_q + p * n_d) * dim, n_d, dim};
        return std::pair(query, pages);
    };

    auto evaluate = [&](std::span<const double> x) {
        auto [query, pages] = views_of(x);
        GradProbe probe;
        LossOutput loss;
        switch (family) {
            case LossFamily::Global: {
                GlobalLossOutput g = global_loss_core<double>(query, pages, ids, 0);
                probe.structure = g.structure();
                probe.value = g.loss.value;
                loss = std::move(g.loss);
                break;
            }
            case LossFamily::Total: {
                TotalLossOutput t =
                    total_loss_core<double>(query, pages, ids, 0, target, kind, lambda);
                probe.structure = t.global_detail.structure();
                probe.value = t.loss.value;
                loss = std::move(t.loss);
                break;
            }
            default: {
                loss = local_loss_core<double>(query, pages[0], target, kind);
                probe.value = loss.value;
                break;
            }
        }
        return std::pair(probe, std::move(loss));
    };

    LossOutput analytic_out = evaluate(params).second;
    std::vector<double> analytic = analytic_out.grad_query;
    for (const auto& gp : analytic_out.grad_pages)
        analytic.insert(analytic.end(), gp.begin(), gp.end());
    detail::require(analytic.size() == params.size(), ErrorCode::DimensionMismatch,
                    "gradcheck_seeded_loss: gradient/parameter layout mismatch");

    cfg.seed ^= seed;
    return gradcheck([&](std::span<const double> x) { return evaluate(x).first; }, params,
                     analytic, cfg);
}

}  // namespace agree
