#include "graftor/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "graftor/errors.hpp"

namespace graftor {

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": mask shapes differ (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
    }
}

template <typename Op>
BinaryMask combine(const BinaryMask& a, const BinaryMask& b, const char* name, Op op) {
    require_same_shape(a, b, name);
    std::vector<std::uint8_t> bits(a.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = op(a[i], b[i]) ? 1 : 0;
    return {a.rows(), a.cols(), std::move(bits)};
}

}  // namespace

std::size_t patch_index(PatchCoord coord, GridShape shape) {
    if (coord.row >= shape.rows || coord.col >= shape.cols) {
        throw BoundsError("patch coordinate (" + std::to_string(coord.row) + "," + std::to_string(coord.col) +
                          ") outside " + std::to_string(shape.rows) + "x" + std::to_string(shape.cols) + " grid");
    }
    return coord.row * shape.cols + coord.col;
}

PatchCoord index_to_coord(std::size_t index, GridShape shape) {
    if (index >= shape.size()) {
        throw BoundsError("patch index " + std::to_string(index) + " outside grid of " +
                          std::to_string(shape.size()) + " patches");
    }
    return {index / shape.cols, index % shape.cols};
}

double coord_distance(PatchCoord a, PatchCoord b) {
    const double dr = static_cast<double>(a.row) - static_cast<double>(b.row);
    const double dc = static_cast<double>(a.col) - static_cast<double>(b.col);
    return std::sqrt(dr * dr + dc * dc);
}

// --- PixelImage -------------------------------------------------------------

PixelImage::PixelImage(std::size_t width, std::size_t height, float fill)
    : PixelImage(width, height, std::vector<float>(width * height * kChannels, fill)) {}

PixelImage::PixelImage(std::size_t width, std::size_t height, std::vector<float> rgb)
    : width_(width), height_(height), rgb_(std::move(rgb)) {
    if (width == 0 || height == 0 || width % kPatchSize != 0 || height % kPatchSize != 0) {
        throw ShapeError("image size " + std::to_string(width) + "x" + std::to_string(height) +
                         " is not a positive multiple of the patch size");
    }
    if (rgb_.size() != width * height * kChannels) throw ShapeError("pixel buffer length does not match image size");
    for (float v : rgb_) {
        if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("pixel value outside [0,1]");
    }
}

void PixelImage::set(std::size_t x, std::size_t y, std::size_t c, float v) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("pixel value outside [0,1]");
    rgb_[(y * width_ + x) * kChannels + c] = v;
}

// --- FeatureGrid ------------------------------------------------------------

FeatureGrid::FeatureGrid(std::size_t rows, std::size_t cols, std::size_t dim)
    : rows_(rows), cols_(cols), dim_(dim), data_(rows * cols * dim, 0.0f) {}

FeatureGrid::FeatureGrid(std::size_t rows, std::size_t cols, std::size_t dim, std::vector<float> data)
    : rows_(rows), cols_(cols), dim_(dim), data_(std::move(data)) {
    if (data_.size() != rows * cols * dim) {
        throw ShapeError("feature buffer holds " + std::to_string(data_.size()) + " values, expected " +
                         std::to_string(rows * cols * dim));
    }
    validate();
}

void FeatureGrid::validate() const {
    for (float v : data_) {
        if (!std::isfinite(v)) throw NumericalError("feature grid contains a non-finite value");
    }
}

// --- BinaryMask -------------------------------------------------------------

BinaryMask::BinaryMask(std::size_t rows, std::size_t cols, bool fill)
    : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

BinaryMask::BinaryMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits)
    : rows_(rows), cols_(cols), bits_(std::move(bits)) {
    if (bits_.size() != rows * cols) throw ShapeError("mask bit buffer does not match mask shape");
    for (auto& b : bits_) b = b ? 1 : 0;
}

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
    return combine(a, b, "mask_and", [](bool x, bool y) { return x && y; });
}

BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
    return combine(a, b, "mask_or", [](bool x, bool y) { return x || y; });
}

BinaryMask mask_not(const BinaryMask& m) {
    std::vector<std::uint8_t> bits(m.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = m[i] ? 0 : 1;
    return {m.rows(), m.cols(), std::move(bits)};
}

std::size_t mask_popcount(const BinaryMask& m) {
    return static_cast<std::size_t>(std::count(m.bits().begin(), m.bits().end(), std::uint8_t{1}));
}

bool mask_subset(const BinaryMask& inner, const BinaryMask& outer) {
    require_same_shape(inner, outer, "mask_subset");
    for (std::size_t i = 0; i < inner.size(); ++i) {
        if (inner[i] && !outer[i]) return false;
    }
    return true;
}

BinaryMask downsample_any(const BinaryMask& pixel_mask, std::size_t patch) {
    if (patch == 0 || pixel_mask.rows() % patch != 0 || pixel_mask.cols() % patch != 0) {
        throw ShapeError("pixel mask is not a multiple of the patch size");
    }
    BinaryMask out(pixel_mask.rows() / patch, pixel_mask.cols() / patch);
    for (std::size_t y = 0; y < pixel_mask.rows(); ++y) {
        for (std::size_t x = 0; x < pixel_mask.cols(); ++x) {
            if (pixel_mask.at(y, x)) out.set(y / patch, x / patch, true);
        }
    }
    return out;
}

// --- latent encoding ----------------------------------------------------------

FeatureGrid encode_latent(const PixelImage& image) {
    const GridShape shape = image.patch_shape();
    std::vector<float> data(shape.size() * kTokenDim);
    for (std::size_t pr = 0; pr < shape.rows; ++pr) {
        for (std::size_t pc = 0; pc < shape.cols; ++pc) {
            float* tok = data.data() + (pr * shape.cols + pc) * kTokenDim;
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < kPatchSize; ++dy) {
                for (std::size_t dx = 0; dx < kPatchSize; ++dx) {
                    for (std::size_t c = 0; c < kChannels; ++c) {
                        tok[k++] = 2.0f * image.at(pc * kPatchSize + dx, pr * kPatchSize + dy, c) - 1.0f;
                    }
                }
            }
        }
    }
    return {shape.rows, shape.cols, kTokenDim, std::move(data)};
}

PixelImage decode_latent(const FeatureGrid& latent) {
    if (latent.dim() != kTokenDim) throw ShapeError("latent token dimension must be " + std::to_string(kTokenDim));
    const std::size_t width = latent.cols() * kPatchSize;
    const std::size_t height = latent.rows() * kPatchSize;
    std::vector<float> rgb(width * height * kChannels);
    for (std::size_t pr = 0; pr < latent.rows(); ++pr) {
        for (std::size_t pc = 0; pc < latent.cols(); ++pc) {
            auto tok = latent.token(pr * latent.cols() + pc);
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < kPatchSize; ++dy) {
                for (std::size_t dx = 0; dx < kPatchSize; ++dx) {
                    const std::size_t x = pc * kPatchSize + dx;
                    const std::size_t y = pr * kPatchSize + dy;
                    for (std::size_t c = 0; c < kChannels; ++c) {
                        rgb[(y * width + x) * kChannels + c] = std::clamp(0.5f * (tok[k++] + 1.0f), 0.0f, 1.0f);
                    }
                }
            }
        }
    }
    return {width, height, std::move(rgb)};
}

PixelImage quantize_8bit(const PixelImage& image) {
    std::vector<float> rgb = image.data();
    for (float& v : rgb) v = std::round(v * 255.0f) / 255.0f;
    return {image.width(), image.height(), std::move(rgb)};
}

}  // namespace graftor
