#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "graftor/attention.hpp"
#include "graftor/errors.hpp"
#include "graftor/rng.hpp"

using namespace graftor;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
    }
    return m;
}

TokenSequence random_sequence(Rng& rng, std::size_t n_txt, std::size_t n_img, std::size_t heads, std::size_t hd) {
    const auto n = static_cast<Eigen::Index>(n_txt + n_img), w = static_cast<Eigen::Index>(heads * hd);
    return {n_txt, n_img, heads, hd, random_matrix(rng, n, w), random_matrix(rng, n, w), random_matrix(rng, n, w)};
}

GraftPacket random_packet(Rng& rng, const RoPETable& rope, std::size_t rows, std::size_t width) {
    GraftPacket p;
    p.keys = random_matrix(rng, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
    p.values = random_matrix(rng, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
    for (std::size_t r = 0; r < rows; ++r) {
        p.ref_index.push_back(r);
        p.coords.push_back(index_to_coord(rng.next() % rope.grid.size(), rope.grid));
    }
    return p;
}

}  // namespace

TEST_CASE("build_rope requires head_dim divisible by 4") {
    CHECK_THROWS_AS(build_rope(2, 2, 1, 6), ConfigError);
    CHECK_NOTHROW(build_rope(2, 2, 1, 8));
}

TEST_CASE("rope frequencies form a geometric band") {
    const RoPETable rope = build_rope(4, 4, 2, 16);
    REQUIRE(rope.freqs.size() == 4);
    CHECK(rope.freqs[0] == doctest::Approx(2.0));
    CHECK(rope.freqs[3] == doctest::Approx(0.5));
    CHECK(rope.freqs[1] / rope.freqs[0] == doctest::Approx(rope.freqs[2] / rope.freqs[1]));
}

TEST_CASE("rope is the identity at the origin and for text tokens") {
    Rng rng(1);
    const RoPETable rope = build_rope(3, 3, 2, 8);
    Matrix x = random_matrix(rng, 11, 16);
    const Matrix orig = x;
    apply_rope(x, rope.phases, 2, 8);
    for (Eigen::Index r = 0; r < 3; ++r) CHECK((x.row(r) - orig.row(r)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((x.row(4) - orig.row(4)).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("rope preserves norms and its inverse undoes it") {
    Rng rng(2);
    const RoPETable rope = build_rope(10, 10, 0, 16);
    Matrix x = random_matrix(rng, 100, 32);
    const Matrix orig = x;
    apply_rope(x, rope.phases, 2, 16);
    double worst = 0;
    for (Eigen::Index r = 0; r < 100; ++r) {
        for (Eigen::Index h = 0; h < 2; ++h) {
            worst = std::max(worst, std::abs(x.row(r).segment(h * 16, 16).norm() - orig.row(r).segment(h * 16, 16).norm()));
        }
    }
    CHECK(worst < 1e-9);
    apply_rope_inverse(x, rope.phases, 2, 16);
    CHECK((x - orig).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rotated dot products depend only on the relative offset") {
    Rng rng(3);
    const RoPETable rope = build_rope(4, 4, 0, 8);
    const Matrix q = random_matrix(rng, 1, 8), k = random_matrix(rng, 1, 8);
    auto dot_at = [&](PatchCoord a, PatchCoord b) {
        Matrix qa = q, kb = k;
        apply_rope(qa, rope.coord_phases({a}), 1, 8);
        apply_rope(kb, rope.coord_phases({b}), 1, 8);
        return qa.row(0).dot(kb.row(0));
    };
    for (std::size_t a = 0; a < 16; ++a) {
        for (std::size_t b = 0; b < 16; ++b) {
            const PatchCoord pa = index_to_coord(a, {4, 4}), pb = index_to_coord(b, {4, 4});
            // Shift both coordinates so the key lands on (3, 3).
            const PatchCoord sa{pa.row + 3 - pb.row, pa.col + 3 - pb.col};
            if (pa.row + 3 < pb.row || pa.col + 3 < pb.col) continue;
            const PatchCoord origin_shift{3, 3};
            CHECK(dot_at(pa, pb) == doctest::Approx(dot_at(sa, origin_shift)).epsilon(1e-9));
        }
    }
}

TEST_CASE("coord_phases agrees with the table rows") {
    const RoPETable rope = build_rope(3, 5, 4, 16);
    const PatchCoord c{2, 3};
    const PhaseRows p = rope.coord_phases({c});
    const auto row = static_cast<Eigen::Index>(4 + patch_index(c, rope.grid));
    CHECK(p.cos.row(0) == rope.phases.cos.row(row));
    CHECK(p.sin.row(0) == rope.phases.sin.row(row));
}

TEST_CASE("concat_kv and concat_pe contracts") {
    Rng rng(4);
    const RoPETable rope = build_rope(3, 3, 2, 8);
    const TokenSequence seq = random_sequence(rng, 2, 9, 2, 8);
    const KeyValue empty = concat_kv(seq, GraftPacket{});
    CHECK(empty.k.rows() == 11);
    CHECK(concat_pe(rope, GraftPacket{}).size() == 11);

    GraftPacket p = random_packet(rng, rope, 5, 16);
    p.coords.assign(5, PatchCoord{2, 1});
    const KeyValue kv = concat_kv(seq, p);
    CHECK(kv.k.rows() == 16);
    CHECK(kv.k.bottomRows(5) == p.keys);
    CHECK(kv.v.bottomRows(5) == p.values);
    CHECK(kv.k.topRows(11) == seq.k);

    const PhaseRows pe = concat_pe(rope, p);
    const auto gen_row = static_cast<Eigen::Index>(2 + patch_index({2, 1}, rope.grid));
    for (Eigen::Index r = 11; r < 16; ++r) {
        CHECK(pe.cos.row(r) == rope.phases.cos.row(gen_row));
        CHECK(pe.sin.row(r) == rope.phases.sin.row(gen_row));
    }

    GraftPacket bad = p;
    bad.coords[0] = {5, 5};
    CHECK_THROWS_AS(concat_pe(rope, bad), BoundsError);
    GraftPacket narrow = p;
    narrow.keys = Matrix::Zero(5, 8);
    CHECK_THROWS_AS(concat_kv(seq, narrow), ShapeError);
}

TEST_CASE("merged packets concatenate like two appends") {
    Rng rng(5);
    const RoPETable rope = build_rope(3, 3, 2, 8);
    const TokenSequence seq = random_sequence(rng, 2, 9, 2, 8);
    const GraftPacket a = random_packet(rng, rope, 3, 16), b = random_packet(rng, rope, 2, 16);
    const GraftPacket ab = merge_packets(a, b);
    CHECK(ab.size() == 5);
    const KeyValue kv = concat_kv(seq, ab);
    CHECK(kv.k.middleRows(11, 3) == a.keys);
    CHECK(kv.k.bottomRows(2) == b.keys);
    CHECK((grafted_attention(seq, rope, ab) - grafted_attention(seq, rope, merge_packets(GraftPacket{}, ab))).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("make_packet selects masked rows in ascending order") {
    Rng rng(6);
    const Matrix k = random_matrix(rng, 4, 8), v = random_matrix(rng, 4, 8);
    const BinaryMask mask(2, 2, std::vector<std::uint8_t>{0, 1, 0, 1});
    const std::vector<PatchCoord> coords{{0, 0}, {1, 1}, {0, 1}, {1, 0}};
    const GraftPacket p = make_packet(1, 0.5, k, v, mask, coords);
    CHECK(p.block == 1);
    CHECK(p.t == 0.5);
    CHECK(p.ref_index == std::vector<std::size_t>{1, 3});
    CHECK(p.coords == std::vector<PatchCoord>{{1, 1}, {1, 0}});
    CHECK(p.keys.row(0) == k.row(1));
    CHECK(p.values.row(1) == v.row(3));
}

TEST_CASE("empty packet attention equals baseline") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const RoPETable rope = build_rope(3, 4, 3, 8);
        const TokenSequence seq = random_sequence(rng, 3, 12, 2, 8);
        CHECK((grafted_attention(seq, rope, GraftPacket{}) - baseline_attention(seq, rope)).cwiseAbs().maxCoeff() <= 1e-6);
    }
}

TEST_CASE("softmax rows sum to one and reject non-finite input") {
    Rng rng(8);
    const Matrix a = softmax_rows(random_matrix(rng, 6, 9) * 50.0);
    for (Eigen::Index r = 0; r < 6; ++r) CHECK(a.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    Matrix sym = Matrix::Zero(1, 2);
    CHECK(softmax_rows(sym)(0, 0) == doctest::Approx(0.5));
    Matrix bad = Matrix::Zero(1, 2);
    bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(softmax_rows(bad), NumericalError);
}

TEST_CASE("two zero-logit keys average their values") {
    const RoPETable rope = build_rope(1, 1, 1, 4);
    TokenSequence seq{1, 1, 1, 4, Matrix::Zero(2, 4), Matrix::Zero(2, 4), Matrix::Zero(2, 4)};
    seq.v.row(0) << 1, 2, 3, 4;
    seq.v.row(1) << 3, 2, 1, 0;
    const Matrix out = grafted_attention(seq, rope, GraftPacket{});
    CHECK(out.rows() == 2);
    for (Eigen::Index c = 0; c < 4; ++c) CHECK(out(0, c) == doctest::Approx(2.0));
}

TEST_CASE("packet row with a matched token's key reproduces its logits") {
    Rng rng(9);
    const RoPETable rope = build_rope(4, 4, 2, 8);
    const TokenSequence seq = random_sequence(rng, 2, 16, 2, 8);
    const std::size_t target = patch_index({2, 3}, rope.grid);
    GraftPacket p;
    p.ref_index = {0};
    p.coords = {{2, 3}};
    p.keys = seq.k.row(static_cast<Eigen::Index>(2 + target));
    p.values = seq.v.row(static_cast<Eigen::Index>(2 + target));
    for (const Matrix& l : attention_logits(seq, rope, p)) {
        CHECK((l.col(18) - l.col(static_cast<Eigen::Index>(2 + target))).cwiseAbs().maxCoeff() <= 1e-9);
    }
    // Own (wrong) coordinate breaks the identity.
    p.coords = {{0, 1}};
    CHECK((attention_logits(seq, rope, p)[0].col(18) - attention_logits(seq, rope, p)[0].col(static_cast<Eigen::Index>(2 + target)))
              .cwiseAbs()
              .maxCoeff() > 1e-6);
}

TEST_CASE("output is invariant to packet row order and has one row per query") {
    Rng rng(10);
    const RoPETable rope = build_rope(3, 3, 2, 8);
    const TokenSequence seq = random_sequence(rng, 2, 9, 2, 8);
    const GraftPacket p = random_packet(rng, rope, 6, 16);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    GraftPacket q = p;
    for (std::size_t r = 0; r < 6; ++r) {
        q.keys.row(static_cast<Eigen::Index>(r)) = p.keys.row(static_cast<Eigen::Index>(perm[r]));
        q.values.row(static_cast<Eigen::Index>(r)) = p.values.row(static_cast<Eigen::Index>(perm[r]));
        q.coords[r] = p.coords[perm[r]];
    }
    const Matrix a = grafted_attention(seq, rope, p), b = grafted_attention(seq, rope, q);
    CHECK(a.rows() == 11);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("a dominant packet value pulls its matched query toward it") {
    Rng rng(11);
    const RoPETable rope = build_rope(2, 2, 1, 4);
    TokenSequence seq = random_sequence(rng, 1, 4, 1, 4);
    const std::size_t target = 3;
    GraftPacket p;
    p.ref_index = {0};
    p.coords = {index_to_coord(target, rope.grid)};
    p.keys = seq.q.row(static_cast<Eigen::Index>(1 + target)) * 3.0;
    p.values = Matrix::Constant(1, 4, 100.0);
    const Matrix before = grafted_attention(seq, rope, GraftPacket{});
    const Matrix after = grafted_attention(seq, rope, p);
    const auto row = static_cast<Eigen::Index>(1 + target);
    CHECK((Matrix::Constant(1, 4, 100.0) - after.row(row)).norm() < (Matrix::Constant(1, 4, 100.0) - before.row(row)).norm());
}

TEST_CASE("replace_features: empty, identity and collisions") {
    Rng rng(12);
    std::vector<float> a(4 * 3), b(4 * 3);
    for (float& v : a) v = static_cast<float>(rng.normal());
    for (float& v : b) v = static_cast<float>(rng.normal());
    const FeatureGrid gen(2, 2, 3, a), ref(2, 2, 3, b);
    Matching id;
    id.ref_shape = id.gen_shape = {2, 2};
    id.pre = BinaryMask::ones(2, 2);
    id.forward = {0, 1, 2, 3};
    CHECK(replace_features(gen, ref, id, BinaryMask::zeros(2, 2)) == gen);
    CHECK(replace_features(gen, ref, id, BinaryMask::ones(2, 2)) == ref);

    Matching coll = id;
    coll.forward = {3, 0, 1, 3};
    const BinaryMask m(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1});
    const FeatureGrid out = replace_features(gen, ref, coll, m);
    CHECK(std::equal(out.token(3).begin(), out.token(3).end(), ref.token(3).begin()));
    CHECK(std::equal(out.token(0).begin(), out.token(0).end(), gen.token(0).begin()));
}

TEST_CASE("rms_norm_heads scales each head and keeps zero rows") {
    Rng rng(13);
    Matrix x = random_matrix(rng, 3, 8);
    x.row(1).setZero();
    const Matrix y = rms_norm_heads(x, 2, 4, 2.0);
    CHECK(y.row(1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(std::sqrt(y.row(0).segment(0, 4).squaredNorm() / 4.0) == doctest::Approx(2.0));
    CHECK(std::sqrt(y.row(2).segment(4, 4).squaredNorm() / 4.0) == doctest::Approx(2.0));
}

TEST_CASE("seeded_orthonormal is orthonormal and deterministic") {
    const Matrix q = seeded_orthonormal(16, 12, 5);
    CHECK((q.transpose() * q - Matrix::Identity(12, 12)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(q == seeded_orthonormal(16, 12, 5));
    CHECK_FALSE(q == seeded_orthonormal(16, 12, 6));
}

TEST_CASE("toy model: zero in, zero out, deterministic") {
    const ToyModel model(ModelConfig{}, {4, 4});
    const Matrix text = Matrix::Zero(8, 64);
    CHECK(model.forward(Matrix::Zero(16, 12), text).cwiseAbs().maxCoeff() == 0.0);
    Rng rng(14);
    const Matrix x = random_matrix(rng, 16, 12);
    CHECK(model.forward(x, text) == ToyModel(ModelConfig{}, {4, 4}).forward(x, text));
}

TEST_CASE("block hook sees the block inputs") {
    const ToyModel model(ModelConfig{}, {3, 3});
    Rng rng(15);
    const Matrix x = random_matrix(rng, 9, 12);
    const Matrix text = model.text_embedding(tokenize_prompt("a red cube"));
    std::vector<Matrix> seen;
    model.forward(x, text, [&](const BlockView& v) {
        seen.push_back(v.features);
        if (v.block == 0) {
            const TokenSequence seq = model.project(0, text, v.features);
            CHECK((v.keys - seq.k.bottomRows(9)).cwiseAbs().maxCoeff() == 0.0);
            CHECK((v.values - seq.v.bottomRows(9)).cwiseAbs().maxCoeff() == 0.0);
        }
        return BlockIntervention{};
    });
    REQUIRE(seen.size() == 2);
    CHECK((seen[0] - model.embed(x)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((seen[1] - toy_mmdit_block(model, 0, text, model.embed(x))).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("an empty intervention leaves the forward pass unchanged") {
    const ToyModel model(ModelConfig{}, {3, 3});
    Rng rng(16);
    const Matrix x = random_matrix(rng, 9, 12);
    const Matrix text = Matrix::Zero(8, 64);
    const Matrix a = model.forward(x, text);
    const Matrix b = model.forward(x, text, [](const BlockView&) { return BlockIntervention{GraftPacket{}, std::nullopt}; });
    CHECK(a == b);
}

TEST_CASE("embedding round trip and prompt tokens") {
    const ToyModel model(ModelConfig{}, {2, 2});
    Rng rng(17);
    const Matrix x = random_matrix(rng, 4, 12);
    CHECK((model.unembed(model.embed(x)) - x).cwiseAbs().maxCoeff() < 1e-12);
    const auto ids = tokenize_prompt("two  cats");
    CHECK(ids.size() == 2);
    CHECK(ids[0] != 0);
    CHECK(tokenize_prompt("two cats") == ids);
    const Matrix e = model.text_embedding({});
    CHECK(e.rows() == 8);
    CHECK(e.cwiseAbs().maxCoeff() == 0.0);
}
