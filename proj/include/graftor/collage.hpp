#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "graftor/grid.hpp"

namespace graftor {

/// Pixel rectangle [x, x+w) x [y, y+h).
struct BBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool intersects(const BBox& o) const noexcept;
    int overlap_area(const BBox& o) const noexcept;
    bool contains(int px, int py) const noexcept { return px >= x && px < x + w && py >= y && py < y + h; }
    friend bool operator==(const BBox&, const BBox&) = default;
};

enum class SubjectShape { Rect, Disc };

struct SubjectSpec {
    std::string id;
    std::uint64_t pattern = 0;
    SubjectShape shape = SubjectShape::Rect;
    BBox bbox;
    int z = 0;
};

struct SceneSpec {
    std::size_t width = 32;
    std::size_t height = 32;
    std::uint64_t background = 0;
    /// Render seed for scenes used as references; templates take the run's template seed.
    std::uint64_t seed = 0;
    std::string prompt;
    std::vector<SubjectSpec> subjects;

    /// Throws SpecError on boxes outside the canvas, duplicate ids or same-z overlaps.
    void validate() const;
    const SubjectSpec& subject(const std::string& id) const;
    bool has_subject(const std::string& id) const;
};

SceneSpec scene_from_json(const nlohmann::json& j);
nlohmann::json scene_to_json(const SceneSpec& spec);
SceneSpec load_scene(const std::filesystem::path& path);
void save_scene(const std::filesystem::path& path, const SceneSpec& spec);

/// Deterministic texture value of `pattern` at integer pixel (x, y): base color, four
/// seeded sinusoids and per-pixel speckle, clamped to [0,1].
float texture_value(std::uint64_t pattern, std::uint64_t seed, int x, int y, std::size_t channel);

/// Whether pixel (x, y) lies inside the subject's shape (bbox coverage, ignoring occlusion).
bool subject_covers(const SubjectSpec& s, int x, int y);

/// Background first, then subjects in ascending z. Subject textures use subject-local coordinates,
/// so a subject looks the same wherever its box is placed.
PixelImage render_scene(const SceneSpec& spec, std::uint64_t seed);
PixelImage render_background(const SceneSpec& spec, std::uint64_t seed);
/// Visible pixel mask of one subject after occlusion by higher-z subjects.
BinaryMask subject_pixel_mask(const SceneSpec& spec, const std::string& id);

/// Cropped pixels with alpha; any size (not bound to the patch grid).
struct Sprite {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> rgb;
    std::vector<std::uint8_t> alpha;

    float at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * kChannels + c]; }
    bool opaque(std::size_t x, std::size_t y) const { return alpha[y * width + x] != 0; }
    std::size_t alpha_count() const;
};

// Stage interfaces. The exact implementations answer from the scene description that
// produced the image; a learned detector, segmenter or inpainter can stand in behind them.
class Grounder {
public:
    virtual ~Grounder() = default;
    virtual BBox ground(const PixelImage& image, const std::string& subject_id) const = 0;
};

class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual BinaryMask segment(const PixelImage& image, const BBox& bbox) const = 0;
};

class Inpainter {
public:
    virtual ~Inpainter() = default;
    virtual PixelImage erase(const PixelImage& image, const BinaryMask& mask) const = 0;
};

class ExactGrounder : public Grounder {
public:
    explicit ExactGrounder(SceneSpec spec) : spec_(std::move(spec)) {}
    BBox ground(const PixelImage& image, const std::string& subject_id) const override;

private:
    SceneSpec spec_;
};

/// Wraps another grounder and grows its boxes by `pad` pixels, clamped to the image.
class DilatingGrounder : public Grounder {
public:
    DilatingGrounder(std::shared_ptr<const Grounder> inner, int pad) : inner_(std::move(inner)), pad_(pad) {}
    BBox ground(const PixelImage& image, const std::string& subject_id) const override;

private:
    std::shared_ptr<const Grounder> inner_;
    int pad_;
};

/// Returns the visible mask of the subject whose box overlaps `bbox` most, restricted to `bbox`.
class ExactSegmenter : public Segmenter {
public:
    explicit ExactSegmenter(SceneSpec spec) : spec_(std::move(spec)) {}
    BinaryMask segment(const PixelImage& image, const BBox& bbox) const override;

private:
    SceneSpec spec_;
};

/// Refills masked pixels from the scene background.
class BackgroundInpainter : public Inpainter {
public:
    BackgroundInpainter(SceneSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {}
    PixelImage erase(const PixelImage& image, const BinaryMask& mask) const override;

private:
    SceneSpec spec_;
    std::uint64_t seed_;
};

struct StageSet {
    std::shared_ptr<const Grounder> grounder;
    std::shared_ptr<const Segmenter> segmenter;
    std::shared_ptr<const Inpainter> inpainter;
};

StageSet exact_stages(const SceneSpec& spec, std::uint64_t seed);

BBox ground(const Grounder& g, const PixelImage& image, const std::string& subject_id);
BinaryMask segment(const Segmenter& s, const PixelImage& image, const BBox& bbox);
PixelImage erase(const Inpainter& p, const PixelImage& image, const BinaryMask& mask);

/// Tight crop around the mask's extent. Throws EmptySubjectError on an empty mask.
Sprite crop_with_mask(const PixelImage& ref, const BinaryMask& mask);

struct PasteResult {
    PixelImage image;
    BinaryMask alpha;  // pixel mask of pasted sprite pixels
    BBox placed;       // where the scaled sprite landed
};

/// Nearest-neighbor scale to fit `target` keeping aspect ratio, centered, alpha composited.
PasteResult resize_and_paste(const PixelImage& erased, const Sprite& sprite, const BBox& target);

/// Nearest-neighbor resize to exactly (w, h), no aspect preservation.
Sprite resize_sprite(const Sprite& sprite, std::size_t w, std::size_t h);

struct ReferenceInput {
    PixelImage image;
    std::string subject_id;
    StageSet stages;
};

struct SubjectPlacement {
    std::string subject_id;
    BBox template_box;
    Sprite sprite;
    BinaryMask pixel_mask;  // pasted alpha on the canvas
    BinaryMask patch_mask;
};

struct Collage {
    PixelImage template_image;
    PixelImage erased;
    PixelImage image;
    BinaryMask pre_mask;  // patch resolution, union of pasted subjects
    std::vector<SubjectPlacement> subjects;
};

/// Replaces each referenced subject of the template in turn: ground, segment, erase, crop, paste.
Collage build_collage(const PixelImage& template_image, const StageSet& template_stages,
                      const std::vector<ReferenceInput>& refs);

/// Scene pair for ablations: the same-sized subject sits at different places in the
/// reference and the template, and the template subject carries a generic texture.
struct TranslatedScene {
    SceneSpec template_spec;
    SceneSpec ref_spec;
    std::string subject_id;
    std::uint64_t seed = 0;
};

TranslatedScene make_translated_scene(std::uint64_t seed, std::size_t canvas = 32, int subject_size = 12);

}  // namespace graftor
