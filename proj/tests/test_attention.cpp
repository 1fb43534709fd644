#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "agree/attention.hpp"

using namespace agree;

namespace {

AttentionMap map_of(PatchGrid grid, std::vector<float> values) {
    AttentionMap m;
    m.grid = grid;
    m.values = std::move(values);
    return m;
}

AttentionMap seeded_map(PatchGrid grid, std::uint64_t seed) {
    AttentionMap m;
    m.grid = grid;
    m.values.resize(grid.cells());
    SplitMix64 rng(seed);
    for (float& v : m.values) v = static_cast<float>(rng.next_unit());
    return m;
}

// Independent downsampling oracle: materialize every pool region from the
// floor-boundary definition using floating-point floors.
AttentionMap downsample_oracle(const AttentionMap& high, PatchGrid target) {
    AttentionMap out;
    out.grid = target;
    out.values.resize(target.cells());
    double hh = static_cast<double>(high.grid.height);
    double ww = static_cast<double>(high.grid.width);
    double hl = static_cast<double>(target.height);
    double wl = static_cast<double>(target.width);
    for (std::size_t i = 0; i < target.height; ++i) {
        for (std::size_t j = 0; j < target.width; ++j) {
            std::size_t u0 = static_cast<std::size_t>(std::floor(i * hh / hl));
            std::size_t u1 = static_cast<std::size_t>(std::floor((i + 1) * hh / hl));
            std::size_t v0 = static_cast<std::size_t>(std::floor(j * ww / wl));
            std::size_t v1 = static_cast<std::size_t>(std::floor((j + 1) * ww / wl));
            float best = -1.0f;
            for (std::size_t u = u0; u < u1; ++u)
                for (std::size_t v = v0; v < v1; ++v) best = std::max(best, high.at(u, v));
            out.values[i * target.width + j] = best;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("aggregate_layers") {
    PatchGrid grid{2, 2};
    AttentionMap a = map_of(grid, {1, 2, 3, 4});

    SECTION("single layer is the identity") {
        LayerAttentionStack stack;
        stack.per_layer = {a};
        AttentionMap out = aggregate_layers(stack);
        CHECK(out.values == a.values);
        CHECK(out.provenance == Provenance::Aggregated);
    }
    SECTION("v and 3v average to 2v") {
        AttentionMap b = map_of(grid, {3, 6, 9, 12});
        LayerAttentionStack stack;
        stack.per_layer = {a, b};
        AttentionMap out = aggregate_layers(stack);
        CHECK(out.values == std::vector<float>{2, 4, 6, 8});
    }
    SECTION("seeded 5-layer stack matches a per-cell loop") {
        LayerAttentionStack stack;
        for (std::uint64_t l = 0; l < 5; ++l) stack.per_layer.push_back(seeded_map(grid, 900 + l));
        AttentionMap out = aggregate_layers(stack);
        for (std::size_t c = 0; c < grid.cells(); ++c) {
            double acc = 0.0;
            for (const auto& layer : stack.per_layer) acc += layer.values[c];
            CHECK(out.values[c] == Catch::Approx(acc / 5.0).margin(1e-7));
        }
    }
    SECTION("layer order does not matter") {
        LayerAttentionStack forward, backward;
        for (std::uint64_t l = 0; l < 4; ++l) forward.per_layer.push_back(seeded_map(grid, 30 + l));
        backward.per_layer.assign(forward.per_layer.rbegin(), forward.per_layer.rend());
        CHECK(aggregate_layers(forward).values == aggregate_layers(backward).values);
    }
    SECTION("inconsistent grids are rejected") {
        LayerAttentionStack stack;
        stack.per_layer = {a, map_of({1, 4}, {1, 2, 3, 4})};
        CHECK_THROWS_AS(aggregate_layers(stack), Error);
    }
}

TEST_CASE("average_query_tokens") {
    PatchGrid grid{2, 2};
    SECTION("one token is the identity") {
        std::vector<AttentionMap> maps{seeded_map(grid, 7)};
        CHECK(average_query_tokens(maps).values == maps[0].values);
    }
    SECTION("negative inputs are rejected by validation") {
        AttentionMap m = map_of(grid, {1, 2, 3, 4});
        AttentionMap neg = map_of(grid, {-1, -2, -3, -4});
        std::vector<AttentionMap> maps{m, neg};
        CHECK_THROWS_AS(average_query_tokens(maps), Error);
    }
    SECTION("seeded 4-token mean matches the scalar loop") {
        std::vector<AttentionMap> maps;
        for (std::uint64_t t = 0; t < 4; ++t) maps.push_back(seeded_map(grid, 50 + t));
        AttentionMap out = average_query_tokens(maps);
        for (std::size_t c = 0; c < grid.cells(); ++c) {
            double acc = 0.0;
            for (const auto& m : maps) acc += m.values[c];
            CHECK(out.values[c] == Catch::Approx(acc / 4.0).margin(1e-7));
        }
    }
    SECTION("token order does not matter") {
        std::vector<AttentionMap> forward;
        for (std::uint64_t t = 0; t < 5; ++t) forward.push_back(seeded_map(grid, 70 + t));
        std::vector<AttentionMap> backward(forward.rbegin(), forward.rend());
        CHECK(average_query_tokens(forward).values == average_query_tokens(backward).values);
    }
    SECTION("empty token set is an error") {
        std::vector<AttentionMap> maps;
        CHECK_THROWS_AS(average_query_tokens(maps), Error);
    }
}

TEST_CASE("refine_pmi") {
    PatchGrid grid{1, 2};
    SECTION("task = general gives the uniform distribution") {
        AttentionMap t = map_of({2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
        AttentionMap out = refine_pmi(t, t);
        CHECK(out.provenance == Provenance::Refined);
        for (float v : out.values) CHECK(v == Catch::Approx(0.25).margin(1e-9));
    }
    SECTION("uniform general preserves the task argmax") {
        AttentionMap task = map_of({2, 2}, {0.1f, 0.6f, 0.2f, 0.1f});
        AttentionMap general = map_of({2, 2}, {0.25f, 0.25f, 0.25f, 0.25f});
        AttentionMap out = refine_pmi(task, general);
        auto task_arg = std::max_element(task.values.begin(), task.values.end());
        auto out_arg = std::max_element(out.values.begin(), out.values.end());
        CHECK(std::distance(out.values.begin(), out_arg) ==
              std::distance(task.values.begin(), task_arg));
    }
    SECTION("pinned two-patch fixture") {
        AttentionMap task = map_of(grid, {0.5f, 0.5f});
        AttentionMap general = map_of(grid, {0.9f, 0.1f});
        AttentionMap out = refine_pmi(task, general, {1e-6, true});
        CHECK(out.values[0] == Catch::Approx(0.1000).margin(1e-3));
        CHECK(out.values[1] == Catch::Approx(0.9000).margin(1e-3));
        double sum = out.values[0] + out.values[1];
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
    SECTION("raw-ratio mode keeps unnormalized ratios and the task provenance") {
        AttentionMap task = map_of(grid, {0.5f, 0.5f});
        task.provenance = Provenance::Aggregated;
        AttentionMap general = map_of(grid, {0.9f, 0.1f});
        AttentionMap out = refine_pmi(task, general, {1e-6, false});
        CHECK(out.provenance == Provenance::Aggregated);
        CHECK(out.values[0] == Catch::Approx(0.5556).margin(1e-3));
        CHECK(out.values[1] == Catch::Approx(4.9995).margin(1e-3));
    }
    SECTION("grid mismatch is rejected") {
        CHECK_THROWS_AS(
            refine_pmi(map_of({1, 2}, {1, 1}), map_of({2, 1}, {1, 1}), RefinementConfig{}),
            Error);
    }
}

TEST_CASE("downsample") {
    SECTION("identity when target equals the source grid") {
        AttentionMap m = seeded_map({4, 6}, 77);
        AttentionMap out = downsample(m, m.grid);
        CHECK(out.values == m.values);
        CHECK(out.provenance == Provenance::Downsampled);
    }
    SECTION("pinned 4x4 -> 2x2 fixture") {
        std::vector<float> v(16);
        std::iota(v.begin(), v.end(), 1.0f);
        AttentionMap m = map_of({4, 4}, std::move(v));
        AttentionMap out = downsample(m, {2, 2});
        CHECK(out.values == std::vector<float>{6, 8, 14, 16});
    }
    SECTION("constant maps stay constant at any size") {
        AttentionMap m = map_of({5, 7}, std::vector<float>(35, 0.3f));
        for (PatchGrid target : {PatchGrid{1, 1}, PatchGrid{2, 3}, PatchGrid{5, 7}}) {
            AttentionMap out = downsample(m, target);
            for (float x : out.values) CHECK(x == 0.3f);
        }
    }
    SECTION("oracle equivalence on random grids and targets") {
        SplitMix64 rng(2024);
        for (int trial = 0; trial < 60; ++trial) {
            PatchGrid high{1 + static_cast<std::size_t>(rng.next_below(64)),
                           1 + static_cast<std::size_t>(rng.next_below(64))};
            PatchGrid target{1 + static_cast<std::size_t>(rng.next_below(high.height)),
                             1 + static_cast<std::size_t>(rng.next_below(high.width))};
            AttentionMap m = seeded_map(high, 5000 + trial);
            AttentionMap got = downsample(m, target);
            AttentionMap want = downsample_oracle(m, target);
            REQUIRE(got.values == want.values);
        }
    }
    SECTION("scaling commutes") {
        AttentionMap m = seeded_map({6, 9}, 88);
        AttentionMap scaled = m;
        for (float& v : scaled.values) v *= 4.0f;
        AttentionMap a = downsample(scaled, {2, 3});
        AttentionMap b = downsample(m, {2, 3});
        for (std::size_t c = 0; c < a.values.size(); ++c)
            CHECK(a.values[c] == Catch::Approx(4.0f * b.values[c]));
    }
    SECTION("never invents values") {
        AttentionMap m = seeded_map({7, 5}, 99);
        AttentionMap out = downsample(m, {3, 2});
        for (float v : out.values)
            CHECK(std::count(m.values.begin(), m.values.end(), v) > 0);
    }
    SECTION("target larger than source is rejected") {
        AttentionMap m = seeded_map({4, 4}, 11);
        CHECK_THROWS_AS(downsample(m, PatchGrid{5, 4}), Error);
        CHECK_THROWS_AS(downsample(m, PatchGrid{4, 5}), Error);
    }
}

TEST_CASE("flatten is row-major and inverts reshape") {
    AttentionMap m = map_of({2, 2}, {1, 2, 3, 4});
    CHECK(flatten(m) == std::vector<float>{1, 2, 3, 4});

    AttentionMap wide = map_of({1, 5}, {5, 4, 3, 2, 1});
    CHECK(flatten(wide) == wide.values);

    AttentionMap seeded = seeded_map({3, 4}, 123);
    std::vector<float> flat = flatten(seeded);
    AttentionMap rebuilt = seeded;
    rebuilt.values = flat;
    CHECK(flatten(rebuilt) == flat);
}

TEST_CASE("synthesize_attention") {
    AnnotationSet ann;
    ann.grid = {4, 4};
    ann.query_id = "q";
    ann.page_id = "p";

    SECTION("no boxes: near-uniform background") {
        AttentionMap out = synthesize_attention(ann, 1.0, 0.1, 3);
        for (float v : out.values) CHECK(v == Catch::Approx(0.1).margin(0.001 + 1e-9));
        CHECK(out.provenance == Provenance::Synthetic);
    }
    SECTION("full-grid box: near-uniform peak") {
        ann.boxes.push_back({0, 0, 3, 3, MatchKind::Explicit});
        AttentionMap out = synthesize_attention(ann, 1.0, 0.1, 3);
        for (float v : out.values) CHECK(v == Catch::Approx(1.0).margin(0.001 + 1e-9));
    }
    SECTION("box cells are exactly the top values") {
        ann.boxes.push_back({0, 0, 1, 1, MatchKind::Explicit});
        AttentionMap out = synthesize_attention(ann, 1.0, 0.1, 3);
        std::vector<std::size_t> order(out.values.size());
        std::iota(order.begin(), order.end(), 0u);
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return out.values[a] > out.values[b]; });
        std::vector<std::size_t> top(order.begin(), order.begin() + 4);
        std::sort(top.begin(), top.end());
        CHECK(top == std::vector<std::size_t>{0, 1, 4, 5});
    }
    SECTION("determinism and parameter checks") {
        AttentionMap a = synthesize_attention(ann, 1.0, 0.1, 9);
        AttentionMap b = synthesize_attention(ann, 1.0, 0.1, 9);
        CHECK(a.values == b.values);
        CHECK_THROWS_AS(synthesize_attention(ann, 0.1, 0.1, 9), Error);   // peak must exceed bg
        CHECK_THROWS_AS(synthesize_attention(ann, 1.0, -0.1, 9), Error);  // bg >= 0
    }
}
