#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "graftor/errors.hpp"
#include "graftor/io.hpp"
#include "graftor/rng.hpp"

using namespace graftor;

namespace {

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "graftor_test_io";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("png round trip of 8-bit levels is exact") {
    Rng rng(1);
    std::vector<float> rgb(6 * 4 * 3);
    for (float& v : rgb) v = static_cast<float>(rng.next() % 256) / 255.0f;
    const PixelImage img(6, 4, rgb);
    const auto path = scratch("rt.png");
    write_png(path, img);
    CHECK(read_png(path) == img);
}

TEST_CASE("png errors") {
    CHECK_THROWS_AS(read_png(scratch("missing.png")), IoError);
    const auto bad = scratch("bad.png");
    std::ofstream(bad) << "not a png";
    CHECK_THROWS_AS(read_png(bad), IoError);
}

TEST_CASE("fgrd round trip is bit exact") {
    Rng rng(2);
    std::vector<float> data(3 * 5 * 7);
    for (float& v : data) v = static_cast<float>(rng.normal());
    const FeatureGrid g(3, 5, 7, data);
    const auto path = scratch("g.fgrd");
    write_fgrd(path, g);
    CHECK(read_fgrd(path) == g);
    CHECK(std::filesystem::file_size(path) == 16 + data.size() * 4);
}

TEST_CASE("bmsk round trip and layout") {
    BinaryMask m(3, 3);
    m.set(0, true);
    m.set(8, true);
    const auto path = scratch("m.bmsk");
    write_bmsk(path, m);
    CHECK(read_bmsk(path) == m);
    CHECK(std::filesystem::file_size(path) == 16 + 2);

    std::ifstream in(path, std::ios::binary);
    char header[16];
    in.read(header, 16);
    CHECK(std::string(header, 4) == "BMSK");
    CHECK(in.get() == 0x01);
    CHECK(in.get() == 0x01);
}

TEST_CASE("containers reject the wrong magic and truncation") {
    const auto g = scratch("x.fgrd");
    write_fgrd(g, FeatureGrid(2, 2, 2));
    CHECK_THROWS_AS(read_bmsk(g), IoError);
    std::filesystem::resize_file(g, 20);
    CHECK_THROWS_AS(read_fgrd(g), IoError);
}
