#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "agree/agree.hpp"

using namespace agree;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr combined
};

CliResult run_cli(const std::string& args, const std::string& env_prefix = {}) {
    std::string command = env_prefix + std::string(AGREE_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult result;
    char buffer[4096];
    while (std::size_t n = std::fread(buffer, 1, sizeof(buffer), pipe))
        result.output.append(buffer, n);
    int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::filesystem::path work_dir() {
    auto dir = std::filesystem::temp_directory_path() / "agree_cli_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("unknown subcommands exit 2 with usage") {
    CliResult r = run_cli("frobnicate");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("Usage") != std::string::npos);

    CliResult none = run_cli("");
    CHECK(none.exit_code == 2);
}

TEST_CASE("cli downsample equals the library call byte for byte") {
    auto dir = work_dir();
    AttentionMap high;
    high.grid = {48, 64};
    high.query_id = "q";
    high.page_id = "p";
    high.values.resize(high.grid.cells());
    SplitMix64 rng(404);
    for (float& v : high.values) v = static_cast<float>(rng.next_unit());

    std::string in = (dir / "high.att").string();
    std::string out = (dir / "low.att").string();
    std::string lib_out = (dir / "low_lib.att").string();
    write_attention_store(in, std::vector<AttentionMap>{high});

    CliResult r = run_cli("downsample --in " + in + " --target 24x32 --out " + out);
    REQUIRE(r.exit_code == 0);

    write_attention_store(lib_out,
                          std::vector<AttentionMap>{downsample(high, PatchGrid{24, 32})});
    CHECK(detail::read_file_bytes(out) == detail::read_file_bytes(lib_out));

    auto records = read_attention_store(out);
    REQUIRE(records.size() == 1);
    CHECK(records[0].grid.height == 24);
    CHECK(records[0].grid.width == 32);
}

TEST_CASE("cli eval-ndcg reproduces the rank-2 fixture") {
    auto dir = work_dir();
    RunFile run;
    run.rankings["q"] = {{"x", 3.0}, {"rel", 2.0}, {"y", 1.0}};
    Qrels qrels;
    qrels.add("q", "rel", 1);
    std::string rpath = (dir / "r.tsv").string();
    std::string qpath = (dir / "q.tsv").string();
    write_run(rpath, run);
    write_qrels(qpath, qrels);

    CliResult r = run_cli("eval-ndcg --run " + rpath + " --qrels " + qpath + " --k 5");
    REQUIRE(r.exit_code == 0);
    auto tab = r.output.find('\t');
    REQUIRE(tab != std::string::npos);
    double mean = std::stod(r.output.substr(tab + 1));
    CHECK(mean == Catch::Approx(0.6309).margin(1e-4));
}

TEST_CASE("cli validate reports truncation with the record index and exits 1") {
    auto dir = work_dir();
    EmbeddingStore store;
    store.dim = 3;
    EmbeddingMatrix m;
    m.id = "m";
    m.rows = 2;
    m.dim = 3;
    m.data = {1, 2, 3, 4, 5, 6};
    store.records = {m};
    std::string path = (dir / "corrupt.mve").string();
    write_embedding_store(path, store);
    auto bytes = detail::read_file_bytes(path);
    bytes.resize(bytes.size() - 7);
    detail::atomic_write_file(path, bytes);

    CliResult r = run_cli("validate --in " + path);
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("E_TRUNCATED") != std::string::npos);
    CHECK(r.output.find("record 0") != std::string::npos);

    SECTION("a valid store passes") {
        std::string good = (dir / "good.mve").string();
        write_embedding_store(good, store);
        CliResult ok = run_cli("validate --in " + good);
        CHECK(ok.exit_code == 0);
        CHECK(ok.output.find("valid") != std::string::npos);
    }
    SECTION("wrong magic is a distinct error") {
        auto bad = detail::read_file_bytes((dir / "corrupt.mve").string());
        bad[3] = '9';
        std::string path9 = (dir / "magic.mve").string();
        detail::atomic_write_file(path9, bad);
        CliResult mg = run_cli("validate --in " + path9);
        CHECK(mg.exit_code == 1);
        CHECK(mg.output.find("E_MAGIC") != std::string::npos);
    }
}

TEST_CASE("cli pipeline aggregate | refine | downsample equals in-memory composition") {
    auto dir = work_dir();

    // Two layer-wise records per pair for the task prompt and for the
    // general prompt, on a 6x8 grid.
    PatchGrid grid{6, 8};
    auto make_layer = [&](std::uint64_t seed, const std::string& qid, int layer) {
        AttentionMap m;
        m.grid = grid;
        m.query_id = qid;
        m.page_id = "p";
        m.provenance = Provenance::RawLayerwise;
        m.metadata = std::string(R"({"layer":)") + std::to_string(layer) +
                     R"(,"strategy":"query-token"})";
        m.values.resize(grid.cells());
        SplitMix64 rng(seed);
        for (float& v : m.values) v = static_cast<float>(rng.next_unit());
        return m;
    };
    std::vector<AttentionMap> task_layers{make_layer(1, "q", 0), make_layer(2, "q", 1)};
    std::vector<AttentionMap> general_layers{make_layer(3, "gen", 0), make_layer(4, "gen", 1)};

    std::string task_in = (dir / "task.att").string();
    std::string gen_in = (dir / "gen.att").string();
    write_attention_store(task_in, task_layers);
    write_attention_store(gen_in, general_layers);

    std::string task_agg = (dir / "task_agg.att").string();
    std::string gen_agg = (dir / "gen_agg.att").string();
    std::string refined = (dir / "refined.att").string();
    std::string low = (dir / "low.att").string();
    REQUIRE(run_cli("aggregate --in " + task_in + " --out " + task_agg).exit_code == 0);
    REQUIRE(run_cli("aggregate --in " + gen_in + " --out " + gen_agg).exit_code == 0);
    REQUIRE(run_cli("refine --task " + task_agg + " --general " + gen_agg + " --out " + refined)
                .exit_code == 0);
    REQUIRE(run_cli("downsample --in " + refined + " --target 3x4 --out " + low).exit_code == 0);

    // In-memory composition of the same stages.
    LayerAttentionStack task_stack, gen_stack;
    task_stack.per_layer = task_layers;
    gen_stack.per_layer = general_layers;
    AttentionMap composed = downsample(
        refine_pmi(aggregate_layers(task_stack), aggregate_layers(gen_stack), {}), {3, 4});

    auto records = read_attention_store(low);
    REQUIRE(records.size() == 1);
    CHECK(records[0].values == composed.values);
    CHECK(records[0].provenance == Provenance::Downsampled);

    // The producer's strategy tag survives aggregation.
    auto aggregated = read_attention_store(task_agg);
    REQUIRE(aggregated.size() == 1);
    CHECK(aggregated[0].metadata.find("query-token") != std::string::npos);
}

TEST_CASE("cli aggregate reduces token-level records per layer first") {
    auto dir = work_dir();
    PatchGrid grid{3, 3};
    SplitMix64 rng(808);
    auto make_record = [&](int layer, int token) {
        AttentionMap m;
        m.grid = grid;
        m.query_id = "q";
        m.page_id = "p";
        m.provenance = Provenance::RawLayerwise;
        m.metadata = std::string("{\"layer\":") + std::to_string(layer) +
                     ",\"token\":" + std::to_string(token) + "}";
        m.values.resize(grid.cells());
        for (float& v : m.values) v = static_cast<float>(rng.next_unit());
        return m;
    };
    std::vector<AttentionMap> records;
    std::vector<std::vector<AttentionMap>> per_token(2);  // [layer][token]
    for (int layer = 0; layer < 2; ++layer)
        for (int token = 0; token < 3; ++token) {
            AttentionMap m = make_record(layer, token);
            per_token[layer].push_back(m);
            records.push_back(std::move(m));
        }
    std::string in = (dir / "tokens.att").string();
    std::string out = (dir / "tokens_agg.att").string();
    write_attention_store(in, records);
    REQUIRE(run_cli("aggregate --in " + in + " --out " + out).exit_code == 0);

    LayerAttentionStack stack;
    stack.per_token = per_token;
    AttentionMap want = aggregate_layers(stack);
    auto got = read_attention_store(out);
    REQUIRE(got.size() == 1);
    CHECK(got[0].values == want.values);
    CHECK(got[0].provenance == Provenance::Aggregated);
}

TEST_CASE("cli refine raw-ratio mode and eval-iou") {
    auto dir = work_dir();
    AttentionMap task;
    task.grid = {1, 2};
    task.query_id = "q";
    task.page_id = "p";
    task.provenance = Provenance::Aggregated;
    task.values = {0.5f, 0.5f};
    AttentionMap general = task;
    general.query_id = "gen";
    general.values = {0.9f, 0.1f};
    std::string tpath = (dir / "ratio_task.att").string();
    std::string gpath = (dir / "ratio_gen.att").string();
    std::string rpath = (dir / "ratio_out.att").string();
    write_attention_store(tpath, std::vector<AttentionMap>{task});
    write_attention_store(gpath, std::vector<AttentionMap>{general});
    REQUIRE(run_cli("refine --task " + tpath + " --general " + gpath +
                    " --raw-ratio --out " + rpath)
                .exit_code == 0);
    auto refined = read_attention_store(rpath);
    REQUIRE(refined.size() == 1);
    CHECK(refined[0].values[0] == Catch::Approx(0.5556).margin(1e-3));
    CHECK(refined[0].values[1] == Catch::Approx(4.9995).margin(1e-3));
    CHECK(refined[0].provenance == Provenance::Aggregated);  // not renormalized

    AnnotationSet a;
    a.query_id = "q";
    a.page_id = "p";
    a.grid = {4, 4};
    a.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
    AnnotationSet b = a;
    b.boxes[0] = {1, 0, 2, 1, MatchKind::Explicit};  // one-row shift: IoU 2/6
    std::string apath = (dir / "iou_a.json").string();
    std::string bpath = (dir / "iou_b.json").string();
    write_annotations(apath, std::vector<AnnotationSet>{a});
    write_annotations(bpath, std::vector<AnnotationSet>{b});
    CliResult r = run_cli("eval-iou --a " + apath + " --b " + bpath);
    REQUIRE(r.exit_code == 0);
    auto pos = r.output.find("mean\t");
    REQUIRE(pos != std::string::npos);
    CHECK(std::stod(r.output.substr(pos + 5)) == Catch::Approx(2.0 / 6.0).margin(1e-9));
}

TEST_CASE("cli synth-attn and eval-coverage chain") {
    auto dir = work_dir();
    AnnotationSet ann;
    ann.query_id = "q";
    ann.page_id = "p";
    ann.grid = {4, 4};
    ann.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
    std::string apath = (dir / "ann.json").string();
    write_annotations(apath, std::vector<AnnotationSet>{ann});

    std::string synth = (dir / "synth.att").string();
    REQUIRE(run_cli("synth-attn --annotations " + apath + " --peak 1 --background 0.1 --seed 4" +
                    " --out " + synth)
                .exit_code == 0);

    CliResult cov = run_cli("eval-coverage --maps " + synth + " --annotations " + apath +
                            " --k-percent 25 --json");
    REQUIRE(cov.exit_code == 0);
    CHECK(cov.output.find("\"mean\":1.0") != std::string::npos);
}

TEST_CASE("cli score, retrieve and eval chain on seeded stores") {
    auto dir = work_dir();
    EmbeddingStore queries;
    queries.dim = 8;
    queries.records = {seeded_random_matrix(3, 8, 1, EmbeddingKind::Query, "q0"),
                       seeded_random_matrix(3, 8, 2, EmbeddingKind::Query, "q1")};
    EmbeddingStore pages;
    pages.dim = 8;
    for (int p = 0; p < 6; ++p)
        pages.records.push_back(
            seeded_random_matrix(5, 8, 10 + p, EmbeddingKind::Page, "p" + std::to_string(p)));
    std::string qstore = (dir / "q.mve").string();
    std::string pstore = (dir / "p.mve").string();
    write_embedding_store(qstore, queries);
    write_embedding_store(pstore, pages);

    SECTION("score matches the library") {
        CliResult r = run_cli("score --query-store " + qstore + " --page-store " + pstore +
                              " --query-id q0 --page-id p3");
        REQUIRE(r.exit_code == 0);
        double got = std::stod(r.output.substr(r.output.rfind('\t') + 1));
        double want = maxsim_score(queries.records[0], pages.records[3]).score;
        CHECK(got == Catch::Approx(want).margin(1e-9));
    }
    SECTION("missing ids are NotFound domain errors") {
        CliResult r = run_cli("score --query-store " + qstore + " --page-store " + pstore +
                              " --query-id nope --page-id p3");
        CHECK(r.exit_code == 1);
        CHECK(r.output.find("E_NOT_FOUND") != std::string::npos);
    }
    SECTION("retrieve writes a run file consumable by eval-ndcg") {
        std::string run_path = (dir / "run.tsv").string();
        REQUIRE(run_cli("retrieve --query-store " + qstore + " --page-store " + pstore +
                        " --k 3 --out " + run_path)
                    .exit_code == 0);
        RunFile run = read_run(run_path);
        REQUIRE(run.rankings.size() == 2);
        REQUIRE(run.rankings.at("q0").size() == 3);

        Qrels qrels;
        qrels.add("q0", run.rankings.at("q0")[0].page_id, 1);
        qrels.add("q1", run.rankings.at("q1")[1].page_id, 1);
        std::string qrels_path = (dir / "qrels.tsv").string();
        write_qrels(qrels_path, qrels);
        CliResult r = run_cli("eval-ndcg --run " + run_path + " --qrels " + qrels_path +
                              " --k 3 --json");
        REQUIRE(r.exit_code == 0);
        double mean = (1.0 + 1.0 / std::log2(3.0)) / 2.0;
        CHECK(r.output.find("\"k\":3") != std::string::npos);
        auto pos = r.output.find("\"mean\":");
        REQUIRE(pos != std::string::npos);
        CHECK(std::stod(r.output.substr(pos + 7)) == Catch::Approx(mean).margin(1e-6));
    }
    SECTION("simmap raw values equal the library patch similarity") {
        std::string maps = (dir / "maps.att").string();
        std::string raw = (dir / "raw.json").string();
        REQUIRE(run_cli("simmap --query-store " + qstore + " --page-store " + pstore +
                        " --query-id q0 --page-id p0 --grid 1x5 --out " + maps + " --raw-out " +
                        raw)
                    .exit_code == 0);
        auto records = read_attention_store(maps);
        REQUIRE(records.size() == 1);
        CHECK(records[0].metadata.find("retriever_map") != std::string::npos);
        std::ifstream in(raw);
        nlohmann::json j;
        in >> j;
        SimilarityVector sim = patch_similarity(queries.records[0], pages.records[0]);
        REQUIRE(j["raw"].size() == sim.values.size());
        for (std::size_t i = 0; i < sim.values.size(); ++i)
            CHECK(j["raw"][i].get<double>() == Catch::Approx(sim.values[i]).margin(1e-12));
    }
}

TEST_CASE("cli gradcheck smoke") {
    CliResult r = run_cli("gradcheck --loss cosine --instances 3 --seed 5");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("cosine") != std::string::npos);
    CHECK(r.output.find("pass") != std::string::npos);
}

TEST_CASE("AGREE_SEED provides the default seed") {
    auto dir = work_dir();
    AnnotationSet ann;
    ann.query_id = "q";
    ann.page_id = "p";
    ann.grid = {4, 4};
    ann.boxes.push_back({1, 1, 2, 2, MatchKind::Explicit});
    std::string apath = (dir / "seed_ann.json").string();
    write_annotations(apath, std::vector<AnnotationSet>{ann});

    std::string via_env = (dir / "via_env.att").string();
    std::string via_flag = (dir / "via_flag.att").string();
    CliResult env_run = run_cli("synth-attn --annotations " + apath +
                                " --peak 1 --background 0.1 --out " + via_env,
                                "AGREE_SEED=77 ");
    REQUIRE(env_run.exit_code == 0);
    REQUIRE(run_cli("synth-attn --annotations " + apath +
                    " --peak 1 --background 0.1 --seed 77 --out " + via_flag)
                .exit_code == 0);
    CHECK(detail::read_file_bytes(via_env) == detail::read_file_bytes(via_flag));
}

TEST_CASE("cli train and select-hard on a planted corpus") {
    auto dir = work_dir() / "train_case";
    PlantedCorpusConfig cfg;
    cfg.num_topics = 2;
    cfg.queries_per_topic = 4;
    cfg.distractors_per_topic = 1;
    cfg.grid = {4, 4};
    cfg.dim_in = 8;
    cfg.topic_dims = 3;
    cfg.specific_dims = 3;
    std::string manifest = write_planted_corpus(dir.string(), cfg);

    std::string head = (dir / "head.prj").string();
    std::string metrics = (dir / "metrics.jsonl").string();
    CliResult r = run_cli("train --manifest " + manifest + " --out-head " + head +
                          " --out-metrics " + metrics +
                          " --batch-size 4 --epochs 1 --seed 3 --lambda 0.1");
    REQUIRE(r.exit_code == 0);
    CHECK(std::filesystem::exists(head));
    ProjectionHead loaded = read_head(head);
    CHECK(loaded.dim_in == 8);

    std::ifstream mfile(metrics);
    std::string first_line;
    std::getline(mfile, first_line);
    CHECK(first_line.find("\"epoch\":0") != std::string::npos);

    SECTION("select-hard writes the chosen ids") {
        std::string ids = (dir / "ids.txt").string();
        CliResult sel = run_cli("select-hard --manifest " + manifest +
                                " --fraction 0.25 --strategy mismatch-first --seed 3 --head " +
                                head + " --out " + ids);
        REQUIRE(sel.exit_code == 0);
        std::ifstream in(ids);
        std::string line;
        std::size_t count = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++count;
        CHECK(count == 2);  // ceil(0.25 * 8)
    }
}
