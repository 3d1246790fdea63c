#include "graftor/io.hpp"

#include <png.h>

#include <array>
#include <bit>
#include <csetjmp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "graftor/errors.hpp"

namespace graftor {

namespace {

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
    if (!f) throw IoError("cannot open " + path.string());
    return f;
}

struct PngErr {
    std::jmp_buf jmp;
    std::string msg;
};

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
    auto* err = static_cast<PngErr*>(png_get_error_ptr(png));
    err->msg = msg;
    std::longjmp(err->jmp, 1);
}

void png_warn(png_structp, png_const_charp) {}

void put_u32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    out.write(b.data(), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

struct Header {
    std::uint32_t rows, cols, dim;
    std::vector<unsigned char> payload;
};

void write_container(const std::filesystem::path& path, const char* magic, std::uint32_t rows, std::uint32_t cols,
                     std::uint32_t dim, const std::vector<unsigned char>& payload) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string());
    out.write(magic, 4);
    put_u32(out, rows);
    put_u32(out, cols);
    put_u32(out, dim);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

Header read_container(const std::filesystem::path& path, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), magic, 4) != 0) {
        throw IoError(path.string() + ": not a " + std::string(magic, 4) + " container");
    }
    Header h{get_u32(&bytes[4]), get_u32(&bytes[8]), get_u32(&bytes[12]), {}};
    h.payload.assign(bytes.begin() + 16, bytes.end());
    return h;
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

PixelImage read_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    PngErr err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png: out of memory");
    }
    std::vector<png_byte> rows_buf;
    std::vector<png_bytep> rows;
    std::size_t width = 0, height = 0;
    if (setjmp(err.jmp)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path.string() + ": png: " + err.msg);
    }
    {
        png_init_io(png, f.get());
        png_read_info(png, info);
        width = png_get_image_width(png, info);
        height = png_get_image_height(png, info);
        const int color = png_get_color_type(png, info);
        if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);
        rows_buf.resize(width * height * 3);
        rows.resize(height);
        for (std::size_t y = 0; y < height; ++y) rows[y] = rows_buf.data() + y * width * 3;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::vector<float> rgb(rows_buf.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<float>(rows_buf[i]) / 255.0f;
    return {width, height, std::move(rgb)};
}

void write_png(const std::filesystem::path& path, const PixelImage& image) {
    FilePtr f = open_file(path, "wb");
    PngErr err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png: out of memory");
    }
    std::vector<png_byte> bytes(image.data().size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image.data()[i]);
    if (setjmp(err.jmp)) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path.string() + ": png: " + err.msg);
    }
    {
        png_init_io(png, f.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(image.width()), static_cast<png_uint_32>(image.height()), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::size_t y = 0; y < image.height(); ++y) png_write_row(png, bytes.data() + y * image.width() * 3);
        png_write_end(png, nullptr);
    }
    png_destroy_write_struct(&png, &info);
}

void write_fgrd(const std::filesystem::path& path, const FeatureGrid& grid) {
    std::vector<unsigned char> payload(grid.data().size() * 4);
    for (std::size_t i = 0; i < grid.data().size(); ++i) {
        const std::uint32_t bits = std::bit_cast<std::uint32_t>(grid.data()[i]);
        for (int b = 0; b < 4; ++b) payload[i * 4 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
    }
    write_container(path, "FGRD", static_cast<std::uint32_t>(grid.rows()), static_cast<std::uint32_t>(grid.cols()),
                    static_cast<std::uint32_t>(grid.dim()), payload);
}

FeatureGrid read_fgrd(const std::filesystem::path& path) {
    Header h = read_container(path, "FGRD");
    const std::size_t n = static_cast<std::size_t>(h.rows) * h.cols * h.dim;
    if (h.payload.size() != n * 4) throw IoError(path.string() + ": FGRD payload size mismatch");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_u32(&h.payload[i * 4]));
    return {h.rows, h.cols, h.dim, std::move(data)};
}

void write_bmsk(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<unsigned char> payload((mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) payload[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    }
    write_container(path, "BMSK", static_cast<std::uint32_t>(mask.rows()), static_cast<std::uint32_t>(mask.cols()), 1,
                    payload);
}

BinaryMask read_bmsk(const std::filesystem::path& path) {
    Header h = read_container(path, "BMSK");
    const std::size_t n = static_cast<std::size_t>(h.rows) * h.cols;
    if (h.dim != 1 || h.payload.size() != (n + 7) / 8) throw IoError(path.string() + ": BMSK payload size mismatch");
    std::vector<std::uint8_t> bits(n);
    for (std::size_t i = 0; i < n; ++i) bits[i] = (h.payload[i / 8] >> (i % 8)) & 1u;
    return {h.rows, h.cols, std::move(bits)};
}

}  // namespace graftor
