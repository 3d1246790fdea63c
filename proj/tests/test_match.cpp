#include <doctest.h>

#include <cmath>

#include "graftor/errors.hpp"
#include "graftor/match.hpp"
#include "graftor/rng.hpp"

using namespace graftor;

namespace {

FeatureGrid random_grid(std::size_t rows, std::size_t cols, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> data(rows * cols * dim);
    for (float& v : data) v = static_cast<float>(rng.normal());
    return {rows, cols, dim, std::move(data)};
}

BinaryMask random_mask(std::size_t rows, std::size_t cols, std::uint64_t seed, double p = 0.5) {
    Rng rng(seed);
    BinaryMask m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.set(i, rng.uniform() < p);
    return m;
}

/// One-hot features: patch i gets basis vector i.
FeatureGrid one_hot(std::size_t rows, std::size_t cols) {
    FeatureGrid g(rows, cols, rows * cols);
    for (std::size_t i = 0; i < g.tokens(); ++i) g.token(i)[i] = 1.0f;
    return g;
}

double naive_cos(std::span<const float> a, std::span<const float> b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        dot += double(a[d]) * b[d];
        na += double(a[d]) * a[d];
        nb += double(b[d]) * b[d];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("cosine similarity basics") {
    FeatureGrid ref(1, 2, 2, {1, 0, 3, 4});
    FeatureGrid gen(1, 2, 2, {0, 2, 3, 4});
    const SimMatrix s = cosine_sim_matrix(ref, gen, BinaryMask::ones(1, 2));
    CHECK(s.at(0, 0) == doctest::Approx(0.0));
    CHECK(s.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("cosine similarity matches a scalar loop") {
    const FeatureGrid ref = random_grid(3, 3, 8, 1), gen = random_grid(3, 3, 8, 2);
    const SimMatrix s = cosine_sim_matrix(ref, gen, BinaryMask::ones(3, 3));
    for (std::size_t i = 0; i < 9; ++i) {
        for (std::size_t j = 0; j < 9; ++j) CHECK(s.at(i, j) == doctest::Approx(naive_cos(ref.token(i), gen.token(j))).epsilon(1e-6));
    }
}

TEST_CASE("unmasked rows hold the sentinel") {
    const BinaryMask pre(2, 2, std::vector<std::uint8_t>{1, 0, 1, 1});
    const SimMatrix s = cosine_sim_matrix(random_grid(2, 2, 4, 3), random_grid(2, 2, 4, 4), pre);
    for (std::size_t j = 0; j < 4; ++j) CHECK(s.at(1, j) == kMaskedSimilarity);
}

TEST_CASE("cosine similarity errors") {
    FeatureGrid zero(1, 2, 2, {0, 0, 1, 1});
    const FeatureGrid ok = random_grid(1, 2, 2, 5);
    CHECK_THROWS_AS(cosine_sim_matrix(zero, ok, BinaryMask::ones(1, 2)), DegenerateFeatureError);
    CHECK_THROWS_AS(cosine_sim_matrix(ok, zero, BinaryMask::ones(1, 2)), DegenerateFeatureError);
    // A zero vector outside the pre-mask is fine.
    CHECK_NOTHROW(cosine_sim_matrix(zero, ok, BinaryMask(1, 2, std::vector<std::uint8_t>{0, 1})));
    CHECK_THROWS_AS(cosine_sim_matrix(ok, random_grid(1, 2, 3, 6), BinaryMask::ones(1, 2)), ShapeError);
    CHECK_THROWS_AS(cosine_sim_matrix(ok, ok, BinaryMask::ones(2, 1)), ShapeError);
}

TEST_CASE("forward match: identity, translation and ties") {
    const FeatureGrid id = one_hot(3, 4);
    const BinaryMask all = BinaryMask::ones(3, 4);
    const Matching m = forward_match(cosine_sim_matrix(id, id, all), all, id.shape());
    for (std::size_t i = 0; i < 12; ++i) CHECK(m.forward[i] == i);

    // gen patch (r, c + 2) carries ref patch (r, c)'s vector.
    const GridShape g{3, 6};
    FeatureGrid gen(3, 6, 12);
    for (std::size_t j = 0; j < g.size(); ++j) gen.token(j)[11] = -1.0f;  // filler, anti-aligned with one ref patch
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            auto dst = gen.token(patch_index({r, c + 2}, g));
            std::fill(dst.begin(), dst.end(), 0.0f);
            dst[patch_index({r, c}, {3, 4})] = 1.0f;
        }
    }
    const Matching t = forward_match(cosine_sim_matrix(id, gen, all), all, g);
    for (std::size_t i = 0; i < 12; ++i) {
        const PatchCoord p = index_to_coord(i, {3, 4});
        CHECK(index_to_coord(t.forward[i], g) == PatchCoord{p.row, p.col + 2});
    }

    SimMatrix tie{2, 4, {0.5, 0.9, 0.9, 0.1, 0.3, 0.3, 0.3, 0.3}};
    const Matching tm = forward_match(tie, BinaryMask::ones(1, 2), {2, 2});
    CHECK(tm.forward[0] == 1);
    CHECK(tm.forward[1] == 0);
}

TEST_CASE("forward match agrees with an exhaustive oracle up to 4x4") {
    std::uint64_t seed = 0;
    for (std::size_t rows = 1; rows <= 4; ++rows) {
        for (std::size_t cols = 1; cols <= 4; ++cols) {
            ++seed;
            const FeatureGrid ref = random_grid(rows, cols, 6, seed), gen = random_grid(cols, rows, 6, seed + 1000);
            const BinaryMask pre = random_mask(rows, cols, seed + 2000, 0.7);
            const Matching m = forward_match(cosine_sim_matrix(ref, gen, pre), pre, gen.shape());
            for (std::size_t i = 0; i < ref.tokens(); ++i) {
                if (!pre[i]) {
                    CHECK(m.forward[i] == kNoMatch);
                    continue;
                }
                std::size_t best = 0;
                double best_s = -10;
                for (std::size_t j = 0; j < gen.tokens(); ++j) {
                    const double s = naive_cos(ref.token(i), gen.token(j));
                    if (s > best_s) best_s = s, best = j;
                }
                CHECK(m.forward[i] == best);
                CHECK(m.best_sim[i] == doctest::Approx(best_s).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("forward match ignores positive scaling of generated features") {
    const FeatureGrid ref = random_grid(4, 4, 8, 11);
    FeatureGrid gen = random_grid(4, 4, 8, 12);
    const BinaryMask all = BinaryMask::ones(4, 4);
    const Matching a = forward_match(cosine_sim_matrix(ref, gen, all), all, gen.shape());
    Rng rng(13);
    for (std::size_t j = 0; j < gen.tokens(); ++j) {
        const float k = static_cast<float>(rng.uniform(0.1, 10.0));
        for (float& v : gen.token(j)) v *= k;
    }
    CHECK(forward_match(cosine_sim_matrix(ref, gen, all), all, gen.shape()).forward == a.forward);
}

TEST_CASE("empty pre-mask yields an empty matching") {
    const BinaryMask none = BinaryMask::zeros(2, 2);
    Matching m = forward_match(cosine_sim_matrix(random_grid(2, 2, 3, 1), random_grid(2, 2, 3, 2), none), none, {2, 2});
    for (auto f : m.forward) CHECK(f == kNoMatch);
    CHECK(mask_popcount(similarity_filter(m, -1.0)) == 0);
}

TEST_CASE("similarity filter thresholds") {
    const FeatureGrid ref = random_grid(3, 3, 5, 21), gen = random_grid(3, 3, 5, 22);
    const BinaryMask pre = random_mask(3, 3, 23, 0.7);
    const Matching m = forward_match(cosine_sim_matrix(ref, gen, pre), pre, gen.shape());
    CHECK(similarity_filter(m, -1.0) == pre);
    CHECK(mask_popcount(similarity_filter(m, 1.0 + 1e-9)) == 0);
    for (std::size_t i = 0; i < 9; ++i) CHECK(similarity_filter(m, 0.2)[i] == (pre[i] && m.best_sim[i] >= 0.2));
}

TEST_CASE("cycle filter keeps a perfect cycle") {
    const FeatureGrid id = one_hot(4, 4);
    const BinaryMask all = BinaryMask::ones(4, 4);
    Matching m = forward_match(cosine_sim_matrix(id, id, all), all, id.shape());
    CHECK(cycle_consistency_filter(id, id, m, all, 1.5) == all);
    for (double d : m.cycle_dist) CHECK(d == 0.0);
    CHECK(cycle_consistency_filter(id, id, m, all, 0.0) == all);
}

TEST_CASE("cycle filter clears a planted far duplicate") {
    const FeatureGrid base = random_grid(5, 5, 16, 31);
    FeatureGrid ref = base, gen = base;
    const std::size_t i = patch_index({0, 0}, {5, 5}), k = patch_index({3, 4}, {5, 5});
    Rng rng(32);
    for (std::size_t d = 0; d < 16; ++d) {
        ref.token(i)[d] = base.token(k)[d] + 0.01f * static_cast<float>(rng.normal());
        gen.token(i)[d] = static_cast<float>(rng.normal());
    }
    const BinaryMask all = BinaryMask::ones(5, 5);
    Matching m = forward_match(cosine_sim_matrix(ref, gen, all), all, gen.shape());
    CHECK(m.forward[i] == k);
    const BinaryMask consi = cycle_consistency_filter(ref, gen, m, all, 1.5);
    CHECK(m.reverse[i] == k);
    CHECK(m.cycle_dist[i] == doctest::Approx(5.0));
    BinaryMask expect = all;
    expect.set(i, false);
    CHECK(consi == expect);
    // A loose enough threshold keeps it.
    CHECK(cycle_consistency_filter(ref, gen, m, all, 5.0) == all);
}

TEST_CASE("reverse match only considers pre-masked reference patches") {
    // Reference patch 1 is the best reverse match for gen patch 0, but it is outside pre.
    FeatureGrid ref(1, 4, 2, {1, 0.2f, 1, 0, 0, 1, 0, 1});
    FeatureGrid gen(1, 4, 2, {1, 0, 0, 1, 0, 1, 0, 1});
    const BinaryMask pre(1, 4, std::vector<std::uint8_t>{1, 0, 1, 1});
    Matching m = forward_match(cosine_sim_matrix(ref, gen, pre), pre, gen.shape());
    cycle_consistency_filter(ref, gen, m, pre, 1.5);
    CHECK(m.forward[0] == 0);
    CHECK(m.reverse[0] == 0);
    CHECK(m.reverse[1] == kNoMatch);
}

TEST_CASE("filters are monotone in their thresholds") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const FeatureGrid ref = random_grid(4, 4, 4, 40 + s), gen = random_grid(4, 4, 4, 60 + s);
        const BinaryMask pre = BinaryMask::ones(4, 4);
        Matching m = forward_match(cosine_sim_matrix(ref, gen, pre), pre, gen.shape());
        std::size_t last = 1000;
        for (double tau : {-1.0, -0.5, 0.0, 0.3, 0.6, 0.9, 1.0}) {
            const std::size_t c = mask_popcount(similarity_filter(m, tau));
            CHECK(c <= last);
            last = c;
        }
        last = 0;
        for (double delta : {0.0, 1.0, 1.5, 2.0, 3.0, 10.0}) {
            const std::size_t c = mask_popcount(cycle_consistency_filter(ref, gen, m, pre, delta));
            CHECK(c >= last);
            last = c;
        }
    }
}

TEST_CASE("final mask is the chained conjunction and stays inside pre") {
    const BinaryMask a = random_mask(6, 6, 71), b = random_mask(6, 6, 72), c = random_mask(6, 6, 73);
    CHECK(final_ref_mask(a, b, c) == mask_and(mask_and(a, b), c));
    CHECK(mask_subset(final_ref_mask(a, b, c), a));
    CHECK(final_ref_mask(BinaryMask::ones(2, 2), BinaryMask::ones(2, 2), BinaryMask::ones(2, 2)) == BinaryMask::ones(2, 2));
    CHECK(final_ref_mask(a, BinaryMask::zeros(6, 6), c) == BinaryMask::zeros(6, 6));
    CHECK_THROWS_AS(final_ref_mask(a, b, BinaryMask::ones(5, 6)), ShapeError);
}

TEST_CASE("self matching retains the whole pre-mask") {
    const FeatureGrid g = random_grid(5, 4, 24, 81);
    const BinaryMask pre = random_mask(5, 4, 82, 0.6);
    const MatchResult r = semantic_match(g, g, pre, 1.0 - 1e-9, 0.0);
    CHECK(r.final_mask == pre);
}

TEST_CASE("dropout mask") {
    const DropoutSchedule s{0.5, 99};
    CHECK(dropout_mask({8, 8}, s, 0.0) == BinaryMask::ones(8, 8));
    CHECK(dropout_mask({8, 8}, DropoutSchedule{0.0, 3}, 1.0) == BinaryMask::ones(8, 8));
    CHECK(dropout_mask({8, 8}, DropoutSchedule{1.0, 3}, 1.0) == BinaryMask::zeros(8, 8));
    CHECK(dropout_mask({8, 8}, s, 0.7) == dropout_mask({8, 8}, s, 0.7));
    CHECK_FALSE(dropout_mask({8, 8}, s, 0.7) == dropout_mask({8, 8}, DropoutSchedule{0.5, 100}, 0.7));
    CHECK_THROWS_AS(dropout_mask({8, 8}, s, 1.5), DomainError);
    CHECK_THROWS_AS(dropout_mask({8, 8}, s, -0.1), DomainError);
    CHECK_THROWS_AS(dropout_mask({8, 8}, DropoutSchedule{1.5, 0}, 0.5), DomainError);
}

TEST_CASE("dropout keep-rate converges to 1 - omega t") {
    for (double t : {0.2, 0.6, 1.0}) {
        std::size_t kept = 0, total = 0;
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            kept += mask_popcount(dropout_mask({32, 32}, DropoutSchedule{0.5, seed}, t));
            total += 32 * 32;
        }
        const double p = 1.0 - 0.5 * t;
        const double sigma = std::sqrt(p * (1 - p) / double(total));
        CHECK(std::abs(double(kept) / double(total) - p) <= 3 * sigma);
    }
}

TEST_CASE("apply_dropout") {
    const BinaryMask a = random_mask(4, 4, 91), b = random_mask(4, 4, 92);
    CHECK(apply_dropout(a, BinaryMask::ones(4, 4)) == a);
    CHECK(apply_dropout(a, BinaryMask::zeros(4, 4)) == BinaryMask::zeros(4, 4));
    CHECK(apply_dropout(a, b) == mask_and(a, b));
    CHECK_THROWS_AS(apply_dropout(a, BinaryMask::ones(4, 3)), ShapeError);
}
