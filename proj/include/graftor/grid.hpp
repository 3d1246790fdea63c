#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace graftor {

/// Side length, in pixels, of one square patch token.
inline constexpr std::size_t kPatchSize = 2;
inline constexpr std::size_t kChannels = 3;
/// Values carried by one latent token: a 2x2 block of RGB pixels.
inline constexpr std::size_t kTokenDim = kPatchSize * kPatchSize * kChannels;

struct GridShape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const noexcept { return rows * cols; }
    friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct PatchCoord {
    std::size_t row = 0;
    std::size_t col = 0;

    friend bool operator==(const PatchCoord&, const PatchCoord&) = default;
};

/// Row-major linear index of `coord`; throws BoundsError outside `shape`.
std::size_t patch_index(PatchCoord coord, GridShape shape);
PatchCoord index_to_coord(std::size_t index, GridShape shape);
double coord_distance(PatchCoord a, PatchCoord b);

/// RGB raster with values in [0,1]. Width and height are multiples of kPatchSize.
class PixelImage {
public:
    PixelImage() = default;
    PixelImage(std::size_t width, std::size_t height, float fill = 0.0f);
    PixelImage(std::size_t width, std::size_t height, std::vector<float> rgb);

    std::size_t width() const noexcept { return width_; }
    std::size_t height() const noexcept { return height_; }
    GridShape patch_shape() const noexcept { return {height_ / kPatchSize, width_ / kPatchSize}; }

    float at(std::size_t x, std::size_t y, std::size_t c) const { return rgb_[(y * width_ + x) * kChannels + c]; }
    void set(std::size_t x, std::size_t y, std::size_t c, float v);
    std::span<const float> pixel(std::size_t x, std::size_t y) const {
        return {rgb_.data() + (y * width_ + x) * kChannels, kChannels};
    }
    const std::vector<float>& data() const noexcept { return rgb_; }

    friend bool operator==(const PixelImage&, const PixelImage&) = default;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<float> rgb_;
};

/// rows x cols grid of dim-length real vectors, row-major. All values finite.
class FeatureGrid {
public:
    FeatureGrid() = default;
    FeatureGrid(std::size_t rows, std::size_t cols, std::size_t dim);
    FeatureGrid(std::size_t rows, std::size_t cols, std::size_t dim, std::vector<float> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t tokens() const noexcept { return rows_ * cols_; }
    GridShape shape() const noexcept { return {rows_, cols_}; }

    std::span<const float> token(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
    std::span<float> token(std::size_t i) { return {data_.data() + i * dim_, dim_}; }
    const std::vector<float>& data() const noexcept { return data_; }
    std::vector<float>& mutable_data() noexcept { return data_; }

    /// Re-checks the finiteness invariant after in-place edits through mutable_data().
    void validate() const;

    friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> data_;
};

/// Boolean grid, used both at patch resolution and at pixel resolution.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(std::size_t rows, std::size_t cols, bool fill = false);
    BinaryMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits);

    static BinaryMask ones(std::size_t rows, std::size_t cols) { return {rows, cols, true}; }
    static BinaryMask zeros(std::size_t rows, std::size_t cols) { return {rows, cols, false}; }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return bits_.size(); }
    GridShape shape() const noexcept { return {rows_, cols_}; }

    bool operator[](std::size_t i) const { return bits_[i] != 0; }
    bool at(std::size_t row, std::size_t col) const { return bits_[row * cols_ + col] != 0; }
    void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }
    void set(std::size_t row, std::size_t col, bool v) { bits_[row * cols_ + col] = v ? 1 : 0; }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_not(const BinaryMask& m);
std::size_t mask_popcount(const BinaryMask& m);
/// True when every set bit of `inner` is also set in `outer`.
bool mask_subset(const BinaryMask& inner, const BinaryMask& outer);

/// Pixel mask -> patch mask; a patch is set when any of its pixels is set.
BinaryMask downsample_any(const BinaryMask& pixel_mask, std::size_t patch = kPatchSize);

/// Pixel image <-> latent token grid. Latent values are 2p-1, so [0,1] maps to [-1,1].
FeatureGrid encode_latent(const PixelImage& image);
PixelImage decode_latent(const FeatureGrid& latent);
/// decode_latent followed by rounding every channel to the nearest 8-bit level.
PixelImage quantize_8bit(const PixelImage& image);

}  // namespace graftor
