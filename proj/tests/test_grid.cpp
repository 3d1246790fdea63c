#include <doctest.h>

#include <cmath>
#include <limits>

#include "graftor/errors.hpp"
#include "graftor/grid.hpp"
#include "graftor/rng.hpp"

using namespace graftor;

namespace {

BinaryMask random_mask(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    BinaryMask m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.set(i, rng.uniform() < 0.5);
    return m;
}

}  // namespace

TEST_CASE("patch_index is row-major") {
    CHECK(patch_index({0, 0}, {8, 8}) == 0);
    CHECK(patch_index({2, 3}, {8, 8}) == 19);
    CHECK_THROWS_AS(patch_index({8, 0}, {8, 8}), BoundsError);
    CHECK_THROWS_AS(patch_index({0, 8}, {8, 8}), BoundsError);
}

TEST_CASE("patch_index and index_to_coord are inverse on a 4x4 grid") {
    const GridShape g{4, 4};
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(index_to_coord(patch_index({r, c}, g), g) == PatchCoord{r, c});
    }
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(patch_index(index_to_coord(i, g), g) == i);
    CHECK_THROWS_AS(index_to_coord(16, g), BoundsError);
}

TEST_CASE("coord_distance is euclidean in patch units") {
    CHECK(coord_distance({0, 0}, {3, 4}) == doctest::Approx(5.0));
    CHECK(coord_distance({1, 1}, {2, 2}) == doctest::Approx(std::sqrt(2.0)));
    CHECK(coord_distance({2, 5}, {2, 5}) == 0.0);
}

TEST_CASE("mask_and truth table and identities") {
    const BinaryMask a(1, 4, std::vector<std::uint8_t>{1, 0, 1, 1});
    const BinaryMask b(1, 4, std::vector<std::uint8_t>{1, 1, 0, 1});
    CHECK(mask_and(a, b) == BinaryMask(1, 4, std::vector<std::uint8_t>{1, 0, 0, 1}));
    CHECK(mask_and(BinaryMask::ones(3, 3), BinaryMask::ones(3, 3)) == BinaryMask::ones(3, 3));
    CHECK(mask_and(random_mask(3, 3, 1), BinaryMask::zeros(3, 3)) == BinaryMask::zeros(3, 3));
    CHECK_THROWS_AS(mask_and(BinaryMask::ones(2, 3), BinaryMask::ones(3, 2)), ShapeError);
}

TEST_CASE("mask_and is commutative, associative and idempotent") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const BinaryMask a = random_mask(5, 7, s), b = random_mask(5, 7, s + 100), c = random_mask(5, 7, s + 200);
        CHECK(mask_and(a, b) == mask_and(b, a));
        CHECK(mask_and(mask_and(a, b), c) == mask_and(a, mask_and(b, c)));
        CHECK(mask_and(a, a) == a);
    }
}

TEST_CASE("mask_or, mask_not and mask_subset") {
    const BinaryMask a = random_mask(4, 4, 3);
    CHECK(mask_or(a, mask_not(a)) == BinaryMask::ones(4, 4));
    CHECK(mask_and(a, mask_not(a)) == BinaryMask::zeros(4, 4));
    CHECK(mask_subset(mask_and(a, random_mask(4, 4, 4)), a));
    CHECK(mask_subset(BinaryMask::zeros(4, 4), a));
    CHECK_FALSE(mask_subset(BinaryMask::ones(4, 4), BinaryMask::zeros(4, 4)));
}

TEST_CASE("mask_popcount") {
    CHECK(mask_popcount(BinaryMask::zeros(4, 4)) == 0);
    CHECK(mask_popcount(BinaryMask::ones(4, 4)) == 16);
    const BinaryMask m = random_mask(8, 8, 42);
    std::size_t naive = 0;
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 8; ++c) naive += m.at(r, c) ? 1 : 0;
    }
    CHECK(mask_popcount(m) == naive);
}

TEST_CASE("downsample_any sets a patch when any pixel is set") {
    BinaryMask px(4, 6);
    px.set(0, 0, true);  // patch (0,0)
    px.set(3, 5, true);  // patch (1,2)
    const BinaryMask p = downsample_any(px);
    CHECK(p.shape() == GridShape{2, 3});
    CHECK(p == BinaryMask(2, 3, std::vector<std::uint8_t>{1, 0, 0, 0, 0, 1}));
    CHECK_THROWS_AS(downsample_any(BinaryMask(3, 4)), ShapeError);
}

TEST_CASE("FeatureGrid rejects non-finite values and wrong sizes") {
    CHECK_THROWS_AS(FeatureGrid(1, 1, 2, {0.0f, std::numeric_limits<float>::quiet_NaN()}), NumericalError);
    CHECK_THROWS_AS(FeatureGrid(1, 1, 2, {0.0f, std::numeric_limits<float>::infinity()}), NumericalError);
    CHECK_THROWS_AS(FeatureGrid(2, 2, 3, std::vector<float>(5)), ShapeError);
    FeatureGrid g(2, 2, 3);
    g.mutable_data()[4] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(g.validate(), NumericalError);
}

TEST_CASE("PixelImage validates size and range") {
    CHECK_THROWS_AS(PixelImage(3, 4), ShapeError);
    CHECK_THROWS_AS(PixelImage(2, 2, std::vector<float>(12, 1.5f)), DomainError);
    PixelImage img(4, 2, 0.25f);
    img.set(1, 1, 2, 0.75f);
    CHECK(img.at(1, 1, 2) == 0.75f);
    CHECK(img.pixel(1, 1)[0] == 0.25f);
    CHECK(img.patch_shape() == GridShape{1, 2});
}

TEST_CASE("encode and decode latents round trip") {
    Rng rng(5);
    std::vector<float> rgb(8 * 6 * 3);
    for (float& v : rgb) v = static_cast<float>(rng.uniform());
    const PixelImage img(8, 6, rgb);
    const FeatureGrid lat = encode_latent(img);
    CHECK(lat.shape() == GridShape{3, 4});
    CHECK(lat.dim() == kTokenDim);
    // Pixel (3, 2) sits in patch (1, 1) at local (1, 0).
    CHECK(lat.token(patch_index({1, 1}, lat.shape()))[(0 * 2 + 1) * 3 + 2] ==
          doctest::Approx(2.0f * img.at(3, 2, 2) - 1.0f));
    const PixelImage back = decode_latent(lat);
    for (std::size_t i = 0; i < rgb.size(); ++i) CHECK(back.data()[i] == doctest::Approx(rgb[i]).epsilon(1e-6));
}

TEST_CASE("decode clamps and quantize lands on 8-bit levels") {
    FeatureGrid lat(1, 1, kTokenDim, std::vector<float>(kTokenDim, 3.0f));
    const PixelImage img = decode_latent(lat);
    for (float v : img.data()) CHECK(v == 1.0f);
    const PixelImage q = quantize_8bit(PixelImage(2, 2, 0.3f));
    for (float v : q.data()) CHECK(v * 255.0f == doctest::Approx(std::round(0.3f * 255.0f)));
}
