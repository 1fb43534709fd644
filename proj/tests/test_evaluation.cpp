#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "agree/attention.hpp"
#include "agree/evaluation.hpp"

using namespace agree;

namespace {

RunFile run_of(const std::string& query, std::vector<std::string> pages) {
    RunFile run;
    double score = static_cast<double>(pages.size());
    for (auto& p : pages) run.rankings[query].push_back({p, score--});
    return run;
}

}  // namespace

TEST_CASE("ndcg fixtures") {
    Qrels qrels;
    qrels.add("q", "rel", 1);

    SECTION("relevant page at rank 1 scores 1.0") {
        NdcgResult r = ndcg_at_k(run_of("q", {"rel", "x", "y"}), qrels, 5);
        CHECK(r.per_query.at("q") == Catch::Approx(1.0));
        CHECK(r.mean == Catch::Approx(1.0));
    }
    SECTION("relevant page at rank 2 scores 1/log2(3)") {
        NdcgResult r = ndcg_at_k(run_of("q", {"x", "rel", "y"}), qrels, 5);
        CHECK(r.per_query.at("q") == Catch::Approx(1.0 / std::log2(3.0)).margin(1e-9));
        CHECK(r.mean == Catch::Approx(0.6309).margin(1e-4));
    }
    SECTION("no relevant page in the top k scores 0") {
        NdcgResult r = ndcg_at_k(run_of("q", {"x", "y", "z"}), qrels, 5);
        CHECK(r.per_query.at("q") == 0.0);
    }
    SECTION("queries without judgments are skipped, not zeroed") {
        RunFile run = run_of("q", {"rel"});
        RunFile extra = run_of("unjudged", {"x"});
        run.rankings.insert(extra.rankings.begin(), extra.rankings.end());
        NdcgResult r = ndcg_at_k(run, qrels, 5);
        CHECK(r.evaluated == 1);
        REQUIRE(r.skipped.size() == 1);
        CHECK(r.skipped[0] == "unjudged");
        CHECK(r.mean == Catch::Approx(1.0));
    }
    SECTION("graded judgments use gain = grade") {
        Qrels graded;
        graded.add("q", "a", 3);
        graded.add("q", "b", 1);
        NdcgResult r = ndcg_at_k(run_of("q", {"b", "a"}), graded, 5);
        double dcg = 1.0 / std::log2(2.0) + 3.0 / std::log2(3.0);
        double idcg = 3.0 / std::log2(2.0) + 1.0 / std::log2(3.0);
        CHECK(r.per_query.at("q") == Catch::Approx(dcg / idcg).margin(1e-12));
    }
    SECTION("malformed runs are rejected") {
        RunFile bad;
        bad.rankings["q"] = {{"a", 1.0}, {"b", 2.0}};  // increasing scores
        CHECK_THROWS_AS(ndcg_at_k(bad, qrels, 5), Error);
        RunFile dup;
        dup.rankings["q"] = {{"a", 2.0}, {"a", 1.0}};
        CHECK_THROWS_AS(ndcg_at_k(dup, qrels, 5), Error);
    }
    SECTION("duplicate qrels entries are rejected") {
        Qrels q2;
        q2.add("q", "p", 1);
        CHECK_THROWS_AS(q2.add("q", "p", 2), Error);
    }
}

TEST_CASE("ndcg invariants over seeded fuzz cases") {
    SplitMix64 rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        // Random run over 12 pages, 3 of them relevant.
        std::vector<std::string> pages;
        for (int p = 0; p < 12; ++p) pages.push_back("p" + std::to_string(p));
        seeded_shuffle(pages, rng.next_u64());
        Qrels qrels;
        for (int rel = 0; rel < 3; ++rel)
            qrels.add("q", "p" + std::to_string(rel),
                      1 + static_cast<int>(rng.next_below(3)));
        RunFile run;
        double score = 100.0;
        for (auto& p : pages) run.rankings["q"].push_back({p, score -= rng.next_unit() + 0.01});
        std::size_t k = 1 + static_cast<std::size_t>(rng.next_below(8));
        double base = ndcg_at_k(run, qrels, k).mean;

        // Invariance under a positive monotone transform of the scores.
        RunFile transformed = run;
        for (auto& [q, entries] : transformed.rankings)
            for (auto& e : entries) e.score = 3.0 * e.score + 11.0;
        CHECK(ndcg_at_k(transformed, qrels, k).mean == Catch::Approx(base).margin(1e-12));

        // Promoting a relevant page one rank never lowers nDCG.
        auto& entries = run.rankings["q"];
        for (std::size_t r = 1; r < entries.size(); ++r) {
            if (qrels.judgments.at("q").count(entries[r].page_id) &&
                !qrels.judgments.at("q").count(entries[r - 1].page_id)) {
                RunFile promoted = run;
                auto& pe = promoted.rankings["q"];
                std::swap(pe[r - 1].page_id, pe[r].page_id);
                CHECK(ndcg_at_k(promoted, qrels, k).mean >= base - 1e-12);
                break;
            }
        }
    }
}

TEST_CASE("coverage") {
    AnnotationSet ann;
    ann.grid = {4, 4};

    SECTION("boxes covering everything give |T| / N") {
        ann.boxes.push_back({0, 0, 3, 3, MatchKind::Explicit});
        std::vector<double> values(16);
        SplitMix64 rng(3);
        for (double& v : values) v = rng.next_unit();
        CoverageResult r = coverage_at_kpercent(values, ann.grid, ann, 25.0);
        CHECK(r.overall == Catch::Approx(4.0 / 16.0));
    }
    SECTION("synthetic attention covers its own box exactly") {
        ann.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
        AttentionMap map = synthesize_attention(ann, 1.0, 0.1, 5);
        CoverageResult r = coverage_at_kpercent(map, ann, 25.0);  // 4 / 16 cells
        CHECK(r.overall == Catch::Approx(1.0));
    }
    SECTION("constant map documents the tie rule") {
        AnnotationSet one;
        one.grid = {10, 10};
        one.boxes.push_back({0, 2, 0, 2, MatchKind::Implicit});  // patch index 2
        std::vector<double> values(100, 0.5);
        CoverageResult r = coverage_at_kpercent(values, one.grid, one, 3.0);
        CHECK(r.top_count == 3);
        CHECK(r.overall == Catch::Approx(1.0));  // index 2 is among the 3 lowest indices

        AnnotationSet far;
        far.grid = {10, 10};
        far.boxes.push_back({5, 5, 5, 5, MatchKind::Implicit});
        CHECK(coverage_at_kpercent(values, far.grid, far, 3.0).overall == 0.0);
    }
    SECTION("empty annotation is skipped") {
        std::vector<double> values(16, 0.1);
        CoverageResult r = coverage_at_kpercent(values, ann.grid, ann, 10.0);
        CHECK(r.skipped);
    }
    SECTION("coverage at 100-ish percent hits everything annotated") {
        ann.boxes.push_back({1, 1, 2, 2, MatchKind::Explicit});
        std::vector<double> values(16);
        SplitMix64 rng(9);
        for (double& v : values) v = rng.next_normal();
        CoverageResult r = coverage_at_kpercent(values, ann.grid, ann, 99.9);
        CHECK(r.overall == Catch::Approx(1.0));
    }
    SECTION("invariant under strictly monotone transforms") {
        ann.boxes.push_back({0, 1, 2, 2, MatchKind::Explicit});
        std::vector<double> values(16);
        SplitMix64 rng(13);
        for (double& v : values) v = rng.next_normal();
        double base = coverage_at_kpercent(values, ann.grid, ann, 20.0).overall;
        std::vector<double> transformed(values);
        for (double& v : transformed) v = std::exp(0.5 * v) + 2.0;
        CHECK(coverage_at_kpercent(transformed, ann.grid, ann, 20.0).overall ==
              Catch::Approx(base));
    }
    SECTION("explicit and implicit splits") {
        ann.boxes.push_back({0, 0, 0, 0, MatchKind::Explicit});
        ann.boxes.push_back({3, 3, 3, 3, MatchKind::Implicit});
        std::vector<double> values(16, 0.0);
        values[0] = 1.0;  // only the explicit patch makes the top set
        CoverageResult r = coverage_at_kpercent(values, ann.grid, ann, 7.0);  // top-2
        REQUIRE(r.explicit_only.has_value());
        REQUIRE(r.implicit_only.has_value());
        CHECK(*r.explicit_only == Catch::Approx(1.0));
        CHECK(*r.implicit_only == Catch::Approx(0.0));
    }
}

TEST_CASE("annotation iou") {
    AnnotationSet a, b;
    a.grid = b.grid = {4, 4};

    SECTION("identical sets give 1") {
        a.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
        b.boxes = a.boxes;
        CHECK(annotation_iou(a, b) == Catch::Approx(1.0));
    }
    SECTION("disjoint boxes give 0") {
        a.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
        b.boxes.push_back({2, 2, 3, 3, MatchKind::Explicit});
        CHECK(annotation_iou(a, b) == 0.0);
    }
    SECTION("2x2 box against its one-row shift gives 2/6") {
        a.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
        b.boxes.push_back({1, 0, 2, 1, MatchKind::Explicit});
        CHECK(annotation_iou(a, b) == Catch::Approx(2.0 / 6.0).margin(1e-12));
    }
    SECTION("both empty are in perfect agreement") {
        CHECK(annotation_iou(a, b) == 1.0);
    }
    SECTION("grid mismatch is rejected") {
        b.grid = {4, 5};
        CHECK_THROWS_AS(annotation_iou(a, b), Error);
    }
}
