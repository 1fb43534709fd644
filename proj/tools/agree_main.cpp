// agree: command-line front end chaining every pipeline stage over the file
// formats documented in FORMATS.md.  Each subcommand is a thin wrapper over
// the corresponding library call; no logic lives only here.

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "agree/agree.hpp"

namespace {

using nlohmann::json;

std::uint64_t env_default_seed() {
    const char* env = std::getenv("AGREE_SEED");
    if (!env) return 0;
    try {
        return std::stoull(env);
    } catch (...) {
        throw agree::Error(agree::ErrorCode::InvalidArgument,
                           std::string("AGREE_SEED is not an integer: ") + env);
    }
}

agree::PatchGrid parse_grid(const std::string& text) {
    auto x = text.find('x');
    if (x == std::string::npos) x = text.find('X');
    if (x == std::string::npos || x == 0 || x + 1 >= text.size())
        throw agree::Error(agree::ErrorCode::InvalidArgument,
                           "grid must look like HxW, got '" + text + "'");
    try {
        return {std::stoul(text.substr(0, x)), std::stoul(text.substr(x + 1))};
    } catch (...) {
        throw agree::Error(agree::ErrorCode::InvalidArgument, "bad grid '" + text + "'");
    }
}

std::vector<std::string> split_commas(const std::string& text) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t comma = text.find(',', start);
        if (comma == std::string::npos) {
            parts.push_back(text.substr(start));
            break;
        }
        parts.push_back(text.substr(start, comma - start));
        start = comma + 1;
    }
    return parts;
}

agree::LocalLossKind parse_loss_kind(const std::string& text) {
    if (text == "kl") return agree::LocalLossKind::kl();
    if (text == "cosine" || text == "cos") return agree::LocalLossKind::cosine();
    if (text.rfind("topk", 0) == 0) {
        double percent = 3.0;
        auto colon = text.find(':');
        if (colon != std::string::npos) percent = std::stod(text.substr(colon + 1));
        return agree::LocalLossKind::topk(percent);
    }
    throw agree::Error(agree::ErrorCode::InvalidArgument,
                       "unknown local loss '" + text + "' (expected kl, topk[:P], cosine)");
}

const agree::EmbeddingMatrix& find_record(const agree::EmbeddingStore& store,
                                          const std::string& id, const std::string& what) {
    for (const agree::EmbeddingMatrix& m : store.records)
        if (m.id == id) return m;
    throw agree::Error(agree::ErrorCode::NotFound, what + " id '" + id + "' not found in store");
}

std::optional<int> metadata_int(const std::string& metadata, const char* key) {
    if (metadata.empty()) return std::nullopt;
    json j = json::parse(metadata, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains(key) ||
        !j[key].is_number_integer())
        return std::nullopt;
    return j[key].get<int>();
}

std::optional<std::string> metadata_string(const std::string& metadata, const char* key) {
    if (metadata.empty()) return std::nullopt;
    json j = json::parse(metadata, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains(key) || !j[key].is_string())
        return std::nullopt;
    return j[key].get<std::string>();
}

struct TrainCliOptions {
    std::string manifest;
    double lambda = 0.1;
    std::string local = "cosine";
    std::size_t batch_size = 16;
    std::size_t epochs = 3;
    double learning_rate = 1e-2;
    std::uint64_t seed = 0;
    double supervised_fraction = 1.0;
    std::string selection = "random";
    std::size_t dim_out = 0;
    bool normalize = false;
    unsigned threads = 1;

    void attach(CLI::App* cmd) {
        cmd->add_option("--manifest", manifest, "dataset manifest (JSON)")->required();
        cmd->add_option("--lambda", lambda, "local-loss weight");
        cmd->add_option("--local", local, "local loss: kl | topk[:percent] | cosine");
        cmd->add_option("--batch-size", batch_size, "mini-batch size (>= 2)");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--lr", learning_rate, "learning rate");
        cmd->add_option("--seed", seed, "random seed");
        cmd->add_option("--supervised-fraction", supervised_fraction,
                        "fraction of instances receiving local supervision");
        cmd->add_option("--selection", selection, "random | mismatch-first");
        cmd->add_option("--dim-out", dim_out, "embedding dimension (0: keep input dim)");
        cmd->add_flag("--normalize", normalize, "L2-normalize projected embeddings");
        cmd->add_option("--threads", threads, "parallelism degree (1 = deterministic mode)");
    }

    agree::TrainConfig config() const {
        agree::TrainConfig cfg;
        cfg.lambda = lambda;
        cfg.local_kind = parse_loss_kind(local);
        cfg.batch_size = batch_size;
        cfg.epochs = epochs;
        cfg.learning_rate = learning_rate;
        cfg.seed = seed;
        cfg.supervised_fraction = supervised_fraction;
        if (selection == "random")
            cfg.selection = agree::SelectionStrategy::Random;
        else if (selection == "mismatch-first")
            cfg.selection = agree::SelectionStrategy::MismatchFirst;
        else
            throw agree::Error(agree::ErrorCode::InvalidArgument,
                               "unknown selection '" + selection + "'");
        cfg.dim_out = dim_out;
        cfg.normalize_output = normalize;
        cfg.threads = threads;
        return cfg;
    }
};

std::string fmt(double v) { return agree::detail::format_double(v); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attention-guided late-interaction retrieval toolkit"};
    app.require_subcommand(1);
    std::uint64_t seed_default = 0;
    try {
        seed_default = env_default_seed();
    } catch (const agree::Error& e) {
        std::cerr << "agree: error: " << e.what() << "\n";
        return 1;
    }

    int exit_code = 0;

    // ----- score ------------------------------------------------------------
    auto* score = app.add_subcommand("score", "MaxSim score for one (query, page) pair");
    struct {
        std::string query_store, page_store, query_id, page_id;
        bool as_json = false;
    } score_opt;
    score->add_option("--query-store", score_opt.query_store)->required();
    score->add_option("--page-store", score_opt.page_store)->required();
    score->add_option("--query-id", score_opt.query_id)->required();
    score->add_option("--page-id", score_opt.page_id)->required();
    score->add_flag("--json", score_opt.as_json);
    score->callback([&] {
        auto queries =
            agree::read_embedding_store(score_opt.query_store, agree::EmbeddingKind::Query);
        auto pages = agree::read_embedding_store(score_opt.page_store, agree::EmbeddingKind::Page);
        const auto& q = find_record(queries, score_opt.query_id, "query");
        const auto& p = find_record(pages, score_opt.page_id, "page");
        agree::ScoredPage sp = agree::maxsim_score(q, p);
        if (score_opt.as_json) {
            json j = {{"query_id", q.id},
                      {"page_id", p.id},
                      {"score", sp.score},
                      {"argmax_patch", sp.argmax_patch}};
            std::cout << j.dump() << "\n";
        } else {
            std::cout << q.id << '\t' << p.id << '\t' << fmt(sp.score) << "\n";
        }
    });

    // ----- retrieve ---------------------------------------------------------
    auto* retrieve = app.add_subcommand("retrieve", "rank pages for queries, write a run file");
    struct {
        std::string query_store, page_store, out, query_id;
        std::size_t k = 10;
        unsigned threads = 1;
    } retrieve_opt;
    retrieve->add_option("--query-store", retrieve_opt.query_store)->required();
    retrieve->add_option("--page-store", retrieve_opt.page_store)->required();
    retrieve->add_option("--k", retrieve_opt.k, "results per query");
    retrieve->add_option("--query-id", retrieve_opt.query_id, "single query (default: all)");
    retrieve->add_option("--threads", retrieve_opt.threads);
    retrieve->add_option("--out", retrieve_opt.out, "run file (TSV)")->required();
    retrieve->callback([&] {
        auto queries =
            agree::read_embedding_store(retrieve_opt.query_store, agree::EmbeddingKind::Query);
        auto pages =
            agree::read_embedding_store(retrieve_opt.page_store, agree::EmbeddingKind::Page);
        agree::RunFile run;
        for (const auto& q : queries.records) {
            if (!retrieve_opt.query_id.empty() && q.id != retrieve_opt.query_id) continue;
            auto ranked = agree::retrieve(q, pages.records, retrieve_opt.k, retrieve_opt.threads);
            auto& entries = run.rankings[q.id];
            for (const auto& sp : ranked) entries.push_back({sp.page_id, sp.score});
        }
        if (!retrieve_opt.query_id.empty() && run.rankings.empty())
            throw agree::Error(agree::ErrorCode::NotFound,
                               "query id '" + retrieve_opt.query_id + "' not found in store");
        agree::write_run(retrieve_opt.out, run);
        std::cout << "wrote " << run.rankings.size() << " rankings to " << retrieve_opt.out
                  << "\n";
    });

    // ----- simmap -----------------------------------------------------------
    auto* simmap = app.add_subcommand("simmap", "patch-level similarity map for a pair");
    struct {
        std::string query_store, page_store, query_id, page_id, grid, out, raw_out;
    } simmap_opt;
    simmap->add_option("--query-store", simmap_opt.query_store)->required();
    simmap->add_option("--page-store", simmap_opt.page_store)->required();
    simmap->add_option("--query-id", simmap_opt.query_id)->required();
    simmap->add_option("--page-id", simmap_opt.page_id)->required();
    simmap->add_option("--grid", simmap_opt.grid, "page patch grid, HxW")->required();
    simmap->add_option("--out", simmap_opt.out, "attention store for the scaled map")->required();
    simmap->add_option("--raw-out", simmap_opt.raw_out, "optional JSON dump of raw values");
    simmap->callback([&] {
        auto queries =
            agree::read_embedding_store(simmap_opt.query_store, agree::EmbeddingKind::Query);
        auto pages =
            agree::read_embedding_store(simmap_opt.page_store, agree::EmbeddingKind::Page);
        const auto& q = find_record(queries, simmap_opt.query_id, "query");
        const auto& p = find_record(pages, simmap_opt.page_id, "page");
        agree::SimilarityMapResult result =
            agree::similarity_map(q, p, parse_grid(simmap_opt.grid));
        agree::write_attention_store(simmap_opt.out, std::vector<agree::AttentionMap>{result.map});
        if (!simmap_opt.raw_out.empty()) {
            json j = {{"query_id", q.id}, {"page_id", p.id}, {"raw", result.raw}};
            agree::detail::atomic_write_text(simmap_opt.raw_out, j.dump(2) + "\n");
        }
        std::cout << "wrote similarity map to " << simmap_opt.out << "\n";
    });

    // ----- aggregate ----------------------------------------------------------
    auto* aggregate =
        app.add_subcommand("aggregate", "collapse layer-wise records into one map per pair");
    struct {
        std::string in, out;
    } aggregate_opt;
    aggregate->add_option("--in", aggregate_opt.in, "attention store of layer-wise records")
        ->required();
    aggregate->add_option("--out", aggregate_opt.out)->required();
    aggregate->callback([&] {
        auto records = agree::read_attention_store(aggregate_opt.in);
        // Group records by pair, preserving first-appearance order.
        std::vector<std::pair<std::string, std::string>> order;
        std::map<std::pair<std::string, std::string>, std::vector<const agree::AttentionMap*>>
            groups;
        for (const auto& m : records) {
            auto key = std::make_pair(m.query_id, m.page_id);
            if (!groups.count(key)) order.push_back(key);
            groups[key].push_back(&m);
        }
        std::vector<agree::AttentionMap> out;
        for (const auto& key : order) {
            const auto& group = groups[key];
            bool token_level = false;
            for (const auto* m : group)
                if (metadata_int(m->metadata, "token")) token_level = true;
            agree::LayerAttentionStack stack;
            if (token_level) {
                // layer index -> token index -> map
                std::map<int, std::map<int, const agree::AttentionMap*>> layers;
                for (const auto* m : group) {
                    auto layer = metadata_int(m->metadata, "layer");
                    auto token = metadata_int(m->metadata, "token");
                    if (!layer || !token)
                        throw agree::Error(agree::ErrorCode::IoMalformed,
                                           "record for (" + key.first + ", " + key.second +
                                               ") lacks layer/token metadata");
                    layers[*layer][*token] = m;
                }
                for (const auto& [layer, tokens] : layers) {
                    std::vector<agree::AttentionMap> token_maps;
                    for (const auto& [token, m] : tokens) token_maps.push_back(*m);
                    stack.per_token.push_back(std::move(token_maps));
                }
            } else {
                std::map<int, const agree::AttentionMap*> layers;
                bool indexed = true;
                for (const auto* m : group) {
                    auto layer = metadata_int(m->metadata, "layer");
                    if (!layer) {
                        indexed = false;
                        break;
                    }
                    layers[*layer] = m;
                }
                if (indexed && layers.size() == group.size()) {
                    for (const auto& [layer, m] : layers) stack.per_layer.push_back(*m);
                } else {
                    for (const auto* m : group) stack.per_layer.push_back(*m);
                }
            }
            agree::AttentionMap merged = agree::aggregate_layers(stack);
            json meta = {{"layers", stack.layers()}};
            if (auto strategy = metadata_string(group.front()->metadata, "strategy"))
                meta["strategy"] = *strategy;
            merged.metadata = meta.dump();
            out.push_back(std::move(merged));
        }
        agree::write_attention_store(aggregate_opt.out, out);
        std::cout << "aggregated " << records.size() << " records into " << out.size()
                  << " maps\n";
    });

    // ----- refine -------------------------------------------------------------
    auto* refine = app.add_subcommand("refine", "PMI refinement of task maps by general maps");
    struct {
        std::string task, general, out;
        double epsilon = 1e-6;
        bool raw_ratio = false;
    } refine_opt;
    refine->add_option("--task", refine_opt.task, "query-conditioned attention store")->required();
    refine->add_option("--general", refine_opt.general, "general attention store")->required();
    refine->add_option("--epsilon", refine_opt.epsilon, "stabilizer (> 0)");
    refine->add_flag("--raw-ratio", refine_opt.raw_ratio, "skip renormalization (diagnostic)");
    refine->add_option("--out", refine_opt.out)->required();
    refine->callback([&] {
        auto task = agree::read_attention_store(refine_opt.task);
        auto general = agree::read_attention_store(refine_opt.general);
        std::map<std::string, const agree::AttentionMap*> by_page;
        for (const auto& g : general) {
            if (!by_page.emplace(g.page_id, &g).second)
                throw agree::Error(agree::ErrorCode::IoDuplicateId,
                                   "general store has multiple maps for page '" + g.page_id +
                                       "'");
        }
        agree::RefinementConfig cfg;
        cfg.epsilon = refine_opt.epsilon;
        cfg.renormalize = !refine_opt.raw_ratio;
        std::vector<agree::AttentionMap> out;
        for (const auto& t : task) {
            auto g = by_page.find(t.page_id);
            if (g == by_page.end())
                throw agree::Error(agree::ErrorCode::NotFound,
                                   "no general map for page '" + t.page_id + "'");
            out.push_back(agree::refine_pmi(t, *g->second, cfg));
        }
        agree::write_attention_store(refine_opt.out, out);
        std::cout << "refined " << out.size() << " maps\n";
    });

    // ----- downsample -----------------------------------------------------------
    auto* downsample = app.add_subcommand("downsample", "adaptive max pooling onto a target grid");
    struct {
        std::string in, target, out;
    } downsample_opt;
    downsample->add_option("--in", downsample_opt.in)->required();
    downsample->add_option("--target", downsample_opt.target, "target grid, HxW")->required();
    downsample->add_option("--out", downsample_opt.out)->required();
    downsample->callback([&] {
        agree::PatchGrid target = parse_grid(downsample_opt.target);
        auto records = agree::read_attention_store(downsample_opt.in);
        std::vector<agree::AttentionMap> out;
        for (const auto& m : records) out.push_back(agree::downsample(m, target));
        agree::write_attention_store(downsample_opt.out, out);
        std::cout << "downsampled " << out.size() << " maps to " << target.height << "x"
                  << target.width << "\n";
    });

    // ----- synth-attn -----------------------------------------------------------
    auto* synth = app.add_subcommand("synth-attn", "synthesize attention from annotations");
    struct {
        std::string annotations, out;
        double peak = 1.0, background = 0.1;
        std::uint64_t seed;
    } synth_opt;
    synth_opt.seed = seed_default;
    synth->add_option("--annotations", synth_opt.annotations, "annotation JSON")->required();
    synth->add_option("--peak", synth_opt.peak);
    synth->add_option("--background", synth_opt.background);
    synth->add_option("--seed", synth_opt.seed);
    synth->add_option("--out", synth_opt.out)->required();
    synth->callback([&] {
        auto annotations = agree::read_annotations(synth_opt.annotations);
        std::vector<agree::AttentionMap> out;
        for (std::size_t i = 0; i < annotations.size(); ++i)
            out.push_back(agree::synthesize_attention(annotations[i], synth_opt.peak,
                                                      synth_opt.background,
                                                      synth_opt.seed ^ (i + 1)));
        agree::write_attention_store(synth_opt.out, out);
        std::cout << "synthesized " << out.size() << " maps\n";
    });

    // ----- train ----------------------------------------------------------------
    auto* train = app.add_subcommand("train", "train a projection head on a manifest");
    TrainCliOptions train_opt;
    train_opt.seed = seed_default;
    std::string train_out_head, train_out_metrics;
    train_opt.attach(train);
    train->add_option("--out-head", train_out_head, "checkpoint path (PRJ1)")->required();
    train->add_option("--out-metrics", train_out_metrics, "JSONL metrics path");
    train->callback([&] {
        agree::TrainDataset dataset = agree::load_dataset(train_opt.manifest);
        agree::TrainResult result = agree::train(dataset, train_opt.config());
        agree::write_head(train_out_head, result.head);
        if (!train_out_metrics.empty())
            agree::detail::atomic_write_text(train_out_metrics,
                                             agree::metrics_to_jsonl(result.log));
        double final_total = result.log.empty() ? 0.0 : result.log.back().total;
        std::cout << "trained " << result.log.size() << " steps, final total "
                  << fmt(final_total) << "\n";
    });

    // ----- sweep-lambda -----------------------------------------------------------
    auto* sweep = app.add_subcommand("sweep-lambda", "train and evaluate across lambda values");
    TrainCliOptions sweep_opt;
    sweep_opt.seed = seed_default;
    std::string sweep_lambdas = "0,0.05,0.1,0.5", sweep_out;
    double sweep_holdout = 0.25;
    bool sweep_json = false;
    sweep_opt.attach(sweep);
    sweep->add_option("--lambdas", sweep_lambdas, "comma-separated lambda grid");
    sweep->add_option("--holdout", sweep_holdout, "held-out fraction for evaluation");
    sweep->add_flag("--json", sweep_json);
    sweep->add_option("--out", sweep_out, "table path")->required();
    sweep->callback([&] {
        std::vector<double> lambdas;
        for (const std::string& part : split_commas(sweep_lambdas))
            lambdas.push_back(std::stod(part));
        agree::TrainDataset dataset = agree::load_dataset(sweep_opt.manifest);
        agree::HarnessConfig harness;
        harness.holdout_fraction = sweep_holdout;
        agree::HarnessTable table =
            agree::sweep_lambda(dataset, lambdas, sweep_opt.config(), harness);
        std::string rendered =
            sweep_json ? agree::table_to_json(table) : agree::table_to_tsv(table);
        agree::detail::atomic_write_text(sweep_out, rendered);
        std::cout << rendered;
    });

    // ----- compare-losses -----------------------------------------------------------
    auto* compare = app.add_subcommand("compare-losses", "train and evaluate across local losses");
    TrainCliOptions compare_opt;
    compare_opt.seed = seed_default;
    std::string compare_kinds = "kl,topk:3,cosine", compare_out;
    double compare_holdout = 0.25;
    bool compare_json = false;
    compare_opt.attach(compare);
    compare->add_option("--kinds", compare_kinds, "comma-separated: kl, topk[:P], cosine");
    compare->add_option("--holdout", compare_holdout);
    compare->add_flag("--json", compare_json);
    compare->add_option("--out", compare_out, "table path")->required();
    compare->callback([&] {
        std::vector<agree::LocalLossKind> kinds;
        for (const std::string& part : split_commas(compare_kinds))
            kinds.push_back(parse_loss_kind(part));
        agree::TrainDataset dataset = agree::load_dataset(compare_opt.manifest);
        agree::HarnessConfig harness;
        harness.holdout_fraction = compare_holdout;
        agree::HarnessTable table =
            agree::compare_local_losses(dataset, kinds, compare_opt.config(), harness);
        std::string rendered =
            compare_json ? agree::table_to_json(table) : agree::table_to_tsv(table);
        agree::detail::atomic_write_text(compare_out, rendered);
        std::cout << rendered;
    });

    // ----- select-hard -----------------------------------------------------------
    auto* select = app.add_subcommand("select-hard", "pick instances for local supervision");
    struct {
        std::string manifest, strategy = "mismatch-first", head, out;
        double fraction = 0.25;
        std::uint64_t seed;
        std::size_t dim_out = 0;
        bool normalize = false;
    } select_opt;
    select_opt.seed = seed_default;
    select->add_option("--manifest", select_opt.manifest)->required();
    select->add_option("--fraction", select_opt.fraction);
    select->add_option("--strategy", select_opt.strategy, "random | mismatch-first");
    select->add_option("--head", select_opt.head, "head checkpoint (default: seeded init)");
    select->add_option("--seed", select_opt.seed);
    select->add_option("--dim-out", select_opt.dim_out);
    select->add_flag("--normalize", select_opt.normalize);
    select->add_option("--out", select_opt.out, "selected query ids, one per line")->required();
    select->callback([&] {
        agree::TrainDataset dataset = agree::load_dataset(select_opt.manifest);
        agree::SelectionStrategy strategy;
        if (select_opt.strategy == "random")
            strategy = agree::SelectionStrategy::Random;
        else if (select_opt.strategy == "mismatch-first")
            strategy = agree::SelectionStrategy::MismatchFirst;
        else
            throw agree::Error(agree::ErrorCode::InvalidArgument,
                               "unknown strategy '" + select_opt.strategy + "'");
        agree::ProjectionHead head;
        if (!select_opt.head.empty()) {
            head = agree::read_head(select_opt.head);
        } else {
            std::size_t dim_in = dataset.instances.empty()
                                     ? 1
                                     : dataset.instances.front().query_features.dim;
            std::size_t dim_out = select_opt.dim_out == 0 ? dim_in : select_opt.dim_out;
            head = agree::ProjectionHead::seeded(dim_in, dim_out, select_opt.seed,
                                                 select_opt.normalize);
        }
        auto ids = agree::select_supervised(dataset, select_opt.fraction, strategy, head,
                                            select_opt.seed);
        std::string text;
        for (const auto& id : ids) text += id + "\n";
        agree::detail::atomic_write_text(select_opt.out, text);
        std::cout << "selected " << ids.size() << " of " << dataset.instances.size()
                  << " instances\n";
    });

    // ----- eval-ndcg -----------------------------------------------------------
    auto* ndcg = app.add_subcommand("eval-ndcg", "nDCG@k of a run file against qrels");
    struct {
        std::string run, qrels, out;
        std::size_t k = 5;
        bool as_json = false;
    } ndcg_opt;
    ndcg->add_option("--run", ndcg_opt.run)->required();
    ndcg->add_option("--qrels", ndcg_opt.qrels)->required();
    ndcg->add_option("--k", ndcg_opt.k);
    ndcg->add_flag("--json", ndcg_opt.as_json);
    ndcg->add_option("--out", ndcg_opt.out, "optional JSON report path");
    ndcg->callback([&] {
        agree::RunFile run = agree::read_run(ndcg_opt.run);
        agree::Qrels qrels = agree::read_qrels(ndcg_opt.qrels);
        agree::NdcgResult result = agree::ndcg_at_k(run, qrels, ndcg_opt.k);
        json report = {{"k", ndcg_opt.k},
                       {"mean", result.mean},
                       {"evaluated", result.evaluated},
                       {"skipped", result.skipped},
                       {"per_query", result.per_query}};
        if (!ndcg_opt.out.empty())
            agree::detail::atomic_write_text(ndcg_opt.out, report.dump(2) + "\n");
        if (ndcg_opt.as_json) {
            std::cout << report.dump() << "\n";
        } else {
            std::cout << "ndcg@" << ndcg_opt.k << '\t' << fmt(result.mean) << "\n";
            std::cout << "evaluated\t" << result.evaluated << "\nskipped\t"
                      << result.skipped.size() << "\n";
        }
    });

    // ----- eval-coverage -----------------------------------------------------------
    auto* coverage = app.add_subcommand("eval-coverage",
                                        "coverage of annotated regions by top-K% map values");
    struct {
        std::string maps, annotations, out;
        double k_percent = 3.0;
        bool as_json = false;
    } coverage_opt;
    coverage->add_option("--maps", coverage_opt.maps, "attention store")->required();
    coverage->add_option("--annotations", coverage_opt.annotations)->required();
    coverage->add_option("--k-percent", coverage_opt.k_percent);
    coverage->add_flag("--json", coverage_opt.as_json);
    coverage->add_option("--out", coverage_opt.out, "optional JSON report path");
    coverage->callback([&] {
        auto maps = agree::read_attention_store(coverage_opt.maps);
        auto annotations = agree::read_annotations(coverage_opt.annotations);
        std::map<std::pair<std::string, std::string>, const agree::AnnotationSet*> by_pair;
        for (const auto& a : annotations) by_pair[{a.query_id, a.page_id}] = &a;

        json pairs = json::array();
        double sum = 0.0;
        std::size_t evaluated = 0, skipped = 0;
        for (const auto& m : maps) {
            auto it = by_pair.find({m.query_id, m.page_id});
            if (it == by_pair.end())
                throw agree::Error(agree::ErrorCode::NotFound,
                                   "no annotation for (" + m.query_id + ", " + m.page_id + ")");
            agree::CoverageResult r =
                agree::coverage_at_kpercent(m, *it->second, coverage_opt.k_percent);
            json entry = {{"query_id", m.query_id}, {"page_id", m.page_id}};
            if (r.skipped) {
                ++skipped;
                entry["skipped"] = true;
            } else {
                sum += r.overall;
                ++evaluated;
                entry["coverage"] = r.overall;
                if (r.explicit_only) entry["explicit"] = *r.explicit_only;
                if (r.implicit_only) entry["implicit"] = *r.implicit_only;
            }
            pairs.push_back(std::move(entry));
        }
        double mean = evaluated > 0 ? sum / static_cast<double>(evaluated) : 0.0;
        json report = {{"k_percent", coverage_opt.k_percent},
                       {"mean", mean},
                       {"evaluated", evaluated},
                       {"skipped", skipped},
                       {"pairs", pairs}};
        if (!coverage_opt.out.empty())
            agree::detail::atomic_write_text(coverage_opt.out, report.dump(2) + "\n");
        if (coverage_opt.as_json) {
            std::cout << report.dump() << "\n";
        } else {
            std::cout << "coverage@" << fmt(coverage_opt.k_percent) << "%\t" << fmt(mean) << "\n";
            std::cout << "evaluated\t" << evaluated << "\nskipped\t" << skipped << "\n";
        }
    });

    // ----- eval-iou -----------------------------------------------------------
    auto* iou = app.add_subcommand("eval-iou", "patch IoU between two annotation files");
    struct {
        std::string a, b;
        bool as_json = false;
    } iou_opt;
    iou->add_option("--a", iou_opt.a)->required();
    iou->add_option("--b", iou_opt.b)->required();
    iou->add_flag("--json", iou_opt.as_json);
    iou->callback([&] {
        auto as = agree::read_annotations(iou_opt.a);
        auto bs = agree::read_annotations(iou_opt.b);
        std::map<std::pair<std::string, std::string>, const agree::AnnotationSet*> b_by_pair;
        for (const auto& b : bs) b_by_pair[{b.query_id, b.page_id}] = &b;
        json pairs = json::array();
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& a : as) {
            auto it = b_by_pair.find({a.query_id, a.page_id});
            if (it == b_by_pair.end()) continue;
            double value = agree::annotation_iou(a, *it->second);
            pairs.push_back(
                {{"query_id", a.query_id}, {"page_id", a.page_id}, {"iou", value}});
            sum += value;
            ++n;
        }
        if (n == 0)
            throw agree::Error(agree::ErrorCode::EmptyInput,
                               "no (query, page) pair present in both files");
        double mean = sum / static_cast<double>(n);
        if (iou_opt.as_json) {
            json report = {{"mean", mean}, {"pairs", pairs}};
            std::cout << report.dump() << "\n";
        } else {
            for (const auto& p : pairs)
                std::cout << p["query_id"].get<std::string>() << '\t'
                          << p["page_id"].get<std::string>() << '\t'
                          << fmt(p["iou"].get<double>()) << "\n";
            std::cout << "mean\t" << fmt(mean) << "\n";
        }
    });

    // ----- validate -----------------------------------------------------------
    auto* validate_cmd = app.add_subcommand("validate", "parse a file and report violations");
    struct {
        std::string in;
    } validate_opt;
    validate_cmd->add_option("--in", validate_opt.in)->required();
    validate_cmd->callback([&] {
        std::string path = validate_opt.in;
        auto head_bytes = agree::detail::read_file_bytes(path);
        std::string magic(head_bytes.begin(),
                          head_bytes.begin() + std::min<std::size_t>(4, head_bytes.size()));
        std::vector<std::string> violations;
        std::string kind;
        std::size_t count = 0;
        if (magic == "MVE1") {
            kind = "embedding store";
            auto store = agree::read_embedding_store(path, agree::EmbeddingKind::Page);
            count = store.records.size();
            for (std::size_t i = 0; i < store.records.size(); ++i)
                for (auto& v : agree::validate(store.records[i]).violations)
                    violations.push_back("record " + std::to_string(i) + ": " + v);
        } else if (magic == "ATT1") {
            kind = "attention store";
            auto maps = agree::read_attention_store(path);
            count = maps.size();
            for (std::size_t i = 0; i < maps.size(); ++i)
                for (auto& v : agree::validate(maps[i]).violations)
                    violations.push_back("record " + std::to_string(i) + ": " + v);
        } else if (magic == "PRJ1") {
            kind = "projection head";
            auto head = agree::read_head(path);
            count = 1;
            for (double w : head.weight)
                if (!std::isfinite(w)) {
                    violations.push_back("weights finite");
                    break;
                }
        } else if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
            // Annotation file or manifest, distinguished by shape.
            std::ifstream in(path);
            json j;
            try {
                in >> j;
            } catch (const json::exception& e) {
                throw agree::Error(agree::ErrorCode::IoMalformed, path + ": " + e.what());
            }
            if (j.is_array()) {
                kind = "annotations";
                auto sets = agree::read_annotations(path);
                count = sets.size();
                for (std::size_t i = 0; i < sets.size(); ++i)
                    for (auto& v : agree::validate(sets[i]).violations)
                        violations.push_back("record " + std::to_string(i) + ": " + v);
            } else {
                kind = "manifest";
                agree::load_dataset(path);  // resolves every reference
                count = 1;
            }
        } else if (path.size() >= 4 && path.substr(path.size() - 4) == ".tsv") {
            // Run files have 4 columns, qrels 3; sniff the first line.
            std::ifstream in(path);
            std::string first;
            std::getline(in, first);
            if (agree::detail::split_tabs(first).size() == 4) {
                kind = "run";
                auto run = agree::read_run(path);
                count = run.rankings.size();
                for (auto& v : agree::validate(run).violations) violations.push_back(v);
            } else {
                kind = "qrels";
                auto qrels = agree::read_qrels(path);
                count = qrels.judgments.size();
            }
        } else {
            throw agree::Error(agree::ErrorCode::IoMagic,
                               path + ": unrecognized format (magic '" + magic + "')");
        }
        if (!violations.empty()) {
            for (const auto& v : violations) std::cerr << "agree: invalid: " << v << "\n";
            exit_code = 1;
            return;
        }
        std::cout << "valid\t" << kind << "\t" << count << " record(s)\n";
    });

    // ----- gradcheck -----------------------------------------------------------
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference verification of analytic gradients");
    struct {
        std::string loss = "all";
        std::size_t instances = 100;
        std::uint64_t seed;
        double step = 1e-4, tolerance = 1e-4, lambda = 0.1, topk_percent = 12.5;
        bool as_json = false;
    } gc_opt;
    gc_opt.seed = seed_default;
    gradcheck_cmd->add_option("--loss", gc_opt.loss,
                              "global | kl | topk | cosine | total | all");
    gradcheck_cmd->add_option("--instances", gc_opt.instances);
    gradcheck_cmd->add_option("--seed", gc_opt.seed);
    gradcheck_cmd->add_option("--step", gc_opt.step);
    gradcheck_cmd->add_option("--tolerance", gc_opt.tolerance);
    gradcheck_cmd->add_option("--lambda", gc_opt.lambda, "lambda for the total loss");
    gradcheck_cmd->add_option("--topk-percent", gc_opt.topk_percent);
    gradcheck_cmd->add_flag("--json", gc_opt.as_json);
    gradcheck_cmd->callback([&] {
        std::vector<agree::LossFamily> families;
        auto parse_family = [](const std::string& name) {
            if (name == "global") return agree::LossFamily::Global;
            if (name == "kl") return agree::LossFamily::KL;
            if (name == "topk") return agree::LossFamily::TopK;
            if (name == "cosine") return agree::LossFamily::Cosine;
            if (name == "total") return agree::LossFamily::Total;
            throw agree::Error(agree::ErrorCode::InvalidArgument,
                               "unknown loss family '" + name + "'");
        };
        if (gc_opt.loss == "all") {
            families = {agree::LossFamily::Global, agree::LossFamily::KL,
                        agree::LossFamily::TopK, agree::LossFamily::Cosine,
                        agree::LossFamily::Total};
        } else {
            families = {parse_family(gc_opt.loss)};
        }
        agree::GradCheckConfig cfg;
        cfg.step = gc_opt.step;
        cfg.tolerance = gc_opt.tolerance;
        json report = json::array();
        bool all_pass = true;
        for (agree::LossFamily family : families) {
            double worst = 0.0;
            std::size_t excluded = 0, checked = 0;
            for (std::size_t i = 0; i < gc_opt.instances; ++i) {
                agree::GradCheckReport r = agree::gradcheck_seeded_loss(
                    family, gc_opt.seed + i, cfg, gc_opt.lambda, gc_opt.topk_percent);
                worst = std::max(worst, r.max_rel_error);
                excluded += r.excluded.size();
                checked += r.checked.size();
            }
            bool pass = worst < gc_opt.tolerance;
            all_pass = all_pass && pass;
            if (gc_opt.as_json) {
                report.push_back({{"loss", agree::loss_family_name(family)},
                                  {"max_rel_error", worst},
                                  {"checked", checked},
                                  {"excluded", excluded},
                                  {"pass", pass}});
            } else {
                std::cout << agree::loss_family_name(family) << '\t' << fmt(worst) << '\t'
                          << checked << " checked\t" << excluded << " excluded\t"
                          << (pass ? "pass" : "FAIL") << "\n";
            }
        }
        if (gc_opt.as_json) std::cout << report.dump() << "\n";
        if (!all_pass) exit_code = 1;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "agree: " << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 2;
    } catch (const agree::Error& e) {
        std::cerr << "agree: error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "agree: error: E_UNKNOWN: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
