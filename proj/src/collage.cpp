#include "graftor/collage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <sstream>

#include "graftor/errors.hpp"
#include "graftor/log.hpp"
#include "graftor/rng.hpp"

namespace graftor {

namespace {

constexpr double kSpeckle = 0.3;
constexpr int kWaves = 4;

struct TextureParams {
    std::uint64_t pattern = 0;
    std::uint64_t seed = 0;
    double base[3];
    double freq[kWaves];
    double dir_x[kWaves];
    double dir_y[kWaves];
    double phase[kWaves][3];
    double amp[kWaves][3];
};

TextureParams texture_params(std::uint64_t pattern, std::uint64_t seed) {
    TextureParams p;
    p.pattern = pattern;
    p.seed = seed;
    Rng rng(hash_words({0x7E57, pattern, seed}));
    for (double& b : p.base) b = rng.uniform(0.25, 0.75);
    for (int k = 0; k < kWaves; ++k) {
        p.freq[k] = rng.uniform(0.4, 1.4);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        p.dir_x[k] = std::cos(theta);
        p.dir_y[k] = std::sin(theta);
        for (double& ph : p.phase[k]) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (double& a : p.amp[k]) a = rng.uniform(0.08, 0.16);
    }
    return p;
}

float sample(const TextureParams& p, int x, int y, std::size_t c) {
    double v = p.base[c];
    for (int k = 0; k < kWaves; ++k) {
        v += p.amp[k][c] * std::sin(p.freq[k] * (p.dir_x[k] * x + p.dir_y[k] * y) + p.phase[k][c]);
    }
    const std::uint64_t h = hash_words({0x5BEC, p.pattern, p.seed, static_cast<std::uint64_t>(x),
                                        static_cast<std::uint64_t>(y), c});
    v += (2.0 * unit_from_bits(h) - 1.0) * kSpeckle;
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

std::string shape_name(SubjectShape s) { return s == SubjectShape::Rect ? "rect" : "disc"; }

SubjectShape parse_shape(const std::string& s) {
    if (s == "rect") return SubjectShape::Rect;
    if (s == "disc") return SubjectShape::Disc;
    throw SpecError("unknown subject shape '" + s + "'");
}

std::vector<const SubjectSpec*> by_z(const SceneSpec& spec) {
    std::vector<const SubjectSpec*> order;
    for (const auto& s : spec.subjects) order.push_back(&s);
    std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->z < b->z; });
    return order;
}

void check_mask_matches(const PixelImage& image, const BinaryMask& mask) {
    if (mask.rows() != image.height() || mask.cols() != image.width()) {
        throw ShapeError("pixel mask does not match the image size");
    }
}

template <typename Fn>
auto tagged(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

}  // namespace

// --- boxes and specs ------------------------------------------------------------

bool BBox::intersects(const BBox& o) const noexcept { return overlap_area(o) > 0; }

int BBox::overlap_area(const BBox& o) const noexcept {
    const int w_ = std::min(x + w, o.x + o.w) - std::max(x, o.x);
    const int h_ = std::min(y + h, o.y + o.h) - std::max(y, o.y);
    return (w_ > 0 && h_ > 0) ? w_ * h_ : 0;
}

void SceneSpec::validate() const {
    if (width == 0 || height == 0 || width % kPatchSize != 0 || height % kPatchSize != 0) {
        throw SpecError("canvas " + std::to_string(width) + "x" + std::to_string(height) +
                        " is not a positive multiple of the patch size");
    }
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const SubjectSpec& s = subjects[i];
        const BBox& b = s.bbox;
        if (s.id.empty()) throw SpecError("subject without id");
        if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > static_cast<int>(width) ||
            b.y + b.h > static_cast<int>(height)) {
            throw SpecError("subject '" + s.id + "' box lies outside the canvas");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (subjects[j].id == s.id) throw SpecError("duplicate subject id '" + s.id + "'");
            if (subjects[j].z == s.z && subjects[j].bbox.intersects(b)) {
                throw SpecError("subjects '" + subjects[j].id + "' and '" + s.id + "' overlap at the same z");
            }
        }
    }
}

const SubjectSpec& SceneSpec::subject(const std::string& id) const {
    for (const auto& s : subjects) {
        if (s.id == id) return s;
    }
    throw NotFoundError("subject '" + id + "' not in scene");
}

bool SceneSpec::has_subject(const std::string& id) const {
    return std::any_of(subjects.begin(), subjects.end(), [&](const auto& s) { return s.id == id; });
}

SceneSpec scene_from_json(const nlohmann::json& j) {
    try {
        SceneSpec spec;
        const auto& canvas = j.at("canvas");
        spec.width = canvas.at("width").get<std::size_t>();
        spec.height = canvas.at("height").get<std::size_t>();
        spec.background = j.at("background").get<std::uint64_t>();
        spec.seed = j.value("seed", std::uint64_t{0});
        spec.prompt = j.value("prompt", std::string{});
        for (const auto& js : j.value("subjects", nlohmann::json::array())) {
            SubjectSpec s;
            s.id = js.at("id").get<std::string>();
            s.pattern = js.at("pattern").get<std::uint64_t>();
            s.shape = parse_shape(js.value("shape", std::string("rect")));
            const auto box = js.at("bbox").get<std::vector<int>>();
            if (box.size() != 4) throw SpecError("bbox of '" + s.id + "' needs 4 values [x, y, w, h]");
            s.bbox = {box[0], box[1], box[2], box[3]};
            s.z = js.value("z", 0);
            spec.subjects.push_back(std::move(s));
        }
        spec.validate();
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(std::string("scene json: ") + e.what());
    }
}

nlohmann::json scene_to_json(const SceneSpec& spec) {
    nlohmann::json j;
    j["canvas"] = {{"width", spec.width}, {"height", spec.height}};
    j["background"] = spec.background;
    j["seed"] = spec.seed;
    if (!spec.prompt.empty()) j["prompt"] = spec.prompt;
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : spec.subjects) {
        j["subjects"].push_back({{"id", s.id},
                                 {"pattern", s.pattern},
                                 {"shape", shape_name(s.shape)},
                                 {"bbox", {s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h}},
                                 {"z", s.z}});
    }
    return j;
}

SceneSpec load_scene(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scene " + path.string());
    try {
        return scene_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(path.string() + ": " + e.what());
    }
}

void save_scene(const std::filesystem::path& path, const SceneSpec& spec) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << scene_to_json(spec).dump(2) << '\n';
}

// --- rendering ------------------------------------------------------------------

float texture_value(std::uint64_t pattern, std::uint64_t seed, int x, int y, std::size_t channel) {
    return sample(texture_params(pattern, seed), x, y, channel);
}

bool subject_covers(const SubjectSpec& s, int x, int y) {
    const BBox& b = s.bbox;
    if (!b.contains(x, y)) return false;
    if (s.shape == SubjectShape::Rect) return true;
    const double cx = b.x + b.w / 2.0;
    const double cy = b.y + b.h / 2.0;
    const double dx = (x + 0.5 - cx) / (b.w / 2.0);
    const double dy = (y + 0.5 - cy) / (b.h / 2.0);
    return dx * dx + dy * dy <= 1.0;
}

PixelImage render_background(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    const TextureParams bg = texture_params(spec.background, seed);
    std::vector<float> rgb(spec.width * spec.height * kChannels);
    for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
            for (std::size_t c = 0; c < kChannels; ++c) {
                rgb[(y * spec.width + x) * kChannels + c] = sample(bg, static_cast<int>(x), static_cast<int>(y), c);
            }
        }
    }
    return {spec.width, spec.height, std::move(rgb)};
}

PixelImage render_scene(const SceneSpec& spec, std::uint64_t seed) {
    PixelImage img = render_background(spec, seed);
    for (const SubjectSpec* s : by_z(spec)) {
        const TextureParams tex = texture_params(s->pattern, seed);
        const BBox& b = s->bbox;
        for (int y = b.y; y < b.y + b.h; ++y) {
            for (int x = b.x; x < b.x + b.w; ++x) {
                if (!subject_covers(*s, x, y)) continue;
                for (std::size_t c = 0; c < kChannels; ++c) {
                    img.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c, sample(tex, x - b.x, y - b.y, c));
                }
            }
        }
    }
    return img;
}

BinaryMask subject_pixel_mask(const SceneSpec& spec, const std::string& id) {
    const SubjectSpec& target = spec.subject(id);
    BinaryMask m(spec.height, spec.width);
    const BBox& b = target.bbox;
    for (int y = b.y; y < b.y + b.h; ++y) {
        for (int x = b.x; x < b.x + b.w; ++x) {
            if (!subject_covers(target, x, y)) continue;
            bool hidden = false;
            for (const auto& other : spec.subjects) {
                if (other.z > target.z && subject_covers(other, x, y)) hidden = true;
            }
            if (!hidden) m.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), true);
        }
    }
    return m;
}

std::size_t Sprite::alpha_count() const {
    return static_cast<std::size_t>(std::count_if(alpha.begin(), alpha.end(), [](auto a) { return a != 0; }));
}

// --- stages -----------------------------------------------------------------------

BBox ExactGrounder::ground(const PixelImage& image, const std::string& subject_id) const {
    if (image.width() != spec_.width || image.height() != spec_.height) throw ShapeError("image does not match its scene");
    return spec_.subject(subject_id).bbox;
}

BBox DilatingGrounder::ground(const PixelImage& image, const std::string& subject_id) const {
    const BBox b = inner_->ground(image, subject_id);
    const int x0 = std::max(0, b.x - pad_);
    const int y0 = std::max(0, b.y - pad_);
    const int x1 = std::min(static_cast<int>(image.width()), b.x + b.w + pad_);
    const int y1 = std::min(static_cast<int>(image.height()), b.y + b.h + pad_);
    return {x0, y0, x1 - x0, y1 - y0};
}

BinaryMask ExactSegmenter::segment(const PixelImage& image, const BBox& bbox) const {
    if (image.width() != spec_.width || image.height() != spec_.height) throw ShapeError("image does not match its scene");
    if (bbox.x < 0 || bbox.y < 0 || bbox.w <= 0 || bbox.h <= 0 || bbox.x + bbox.w > static_cast<int>(image.width()) ||
        bbox.y + bbox.h > static_cast<int>(image.height())) {
        throw BoundsError("segmentation box outside the image");
    }
    const SubjectSpec* best = nullptr;
    int best_area = 0;
    for (const auto& s : spec_.subjects) {
        const int a = s.bbox.overlap_area(bbox);
        if (a > best_area) {
            best_area = a;
            best = &s;
        }
    }
    BinaryMask out(image.height(), image.width());
    if (best == nullptr) return out;
    const BinaryMask visible = subject_pixel_mask(spec_, best->id);
    for (int y = bbox.y; y < bbox.y + bbox.h; ++y) {
        for (int x = bbox.x; x < bbox.x + bbox.w; ++x) {
            if (visible.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) {
                out.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), true);
            }
        }
    }
    return out;
}

PixelImage BackgroundInpainter::erase(const PixelImage& image, const BinaryMask& mask) const {
    check_mask_matches(image, mask);
    if (image.width() != spec_.width || image.height() != spec_.height) throw ShapeError("image does not match its scene");
    const PixelImage bg = render_background(spec_, seed_);
    PixelImage out = image;
    for (std::size_t y = 0; y < image.height(); ++y) {
        for (std::size_t x = 0; x < image.width(); ++x) {
            if (!mask.at(y, x)) continue;
            for (std::size_t c = 0; c < kChannels; ++c) out.set(x, y, c, bg.at(x, y, c));
        }
    }
    return out;
}

StageSet exact_stages(const SceneSpec& spec, std::uint64_t seed) {
    return {std::make_shared<ExactGrounder>(spec), std::make_shared<ExactSegmenter>(spec),
            std::make_shared<BackgroundInpainter>(spec, seed)};
}

BBox ground(const Grounder& g, const PixelImage& image, const std::string& subject_id) {
    return g.ground(image, subject_id);
}

BinaryMask segment(const Segmenter& s, const PixelImage& image, const BBox& bbox) { return s.segment(image, bbox); }

PixelImage erase(const Inpainter& p, const PixelImage& image, const BinaryMask& mask) { return p.erase(image, mask); }

// --- crop and paste ---------------------------------------------------------------

Sprite crop_with_mask(const PixelImage& ref, const BinaryMask& mask) {
    check_mask_matches(ref, mask);
    std::size_t x0 = ref.width(), y0 = ref.height(), x1 = 0, y1 = 0;
    bool any = false;
    for (std::size_t y = 0; y < ref.height(); ++y) {
        for (std::size_t x = 0; x < ref.width(); ++x) {
            if (!mask.at(y, x)) continue;
            any = true;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (!any) throw EmptySubjectError("crop mask is empty");
    Sprite s;
    s.width = x1 - x0 + 1;
    s.height = y1 - y0 + 1;
    s.rgb.resize(s.width * s.height * kChannels);
    s.alpha.resize(s.width * s.height);
    for (std::size_t y = 0; y < s.height; ++y) {
        for (std::size_t x = 0; x < s.width; ++x) {
            s.alpha[y * s.width + x] = mask.at(y0 + y, x0 + x) ? 1 : 0;
            for (std::size_t c = 0; c < kChannels; ++c) s.rgb[(y * s.width + x) * kChannels + c] = ref.at(x0 + x, y0 + y, c);
        }
    }
    return s;
}

Sprite resize_sprite(const Sprite& sprite, std::size_t w, std::size_t h) {
    if (w == 0 || h == 0) throw SizeError("resize target has a zero dimension");
    Sprite out;
    out.width = w;
    out.height = h;
    out.rgb.resize(w * h * kChannels);
    out.alpha.resize(w * h);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = std::min(sprite.height - 1, ((2 * y + 1) * sprite.height) / (2 * h));
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = std::min(sprite.width - 1, ((2 * x + 1) * sprite.width) / (2 * w));
            out.alpha[y * w + x] = sprite.alpha[sy * sprite.width + sx];
            for (std::size_t c = 0; c < kChannels; ++c) out.rgb[(y * w + x) * kChannels + c] = sprite.at(sx, sy, c);
        }
    }
    return out;
}

PasteResult resize_and_paste(const PixelImage& erased, const Sprite& sprite, const BBox& target) {
    if (sprite.width == 0 || sprite.height == 0) throw EmptySubjectError("sprite is empty");
    if (target.x < 0 || target.y < 0 || target.x + target.w > static_cast<int>(erased.width()) ||
        target.y + target.h > static_cast<int>(erased.height())) {
        throw BoundsError("paste target outside the image");
    }
    if (target.w < 1 || target.h < 1) throw SizeError("paste target is degenerate");
    const double sw = static_cast<double>(sprite.width);
    const double sh = static_cast<double>(sprite.height);
    const double scale = std::min(target.w / sw, target.h / sh);
    const long nw = std::lround(sw * scale);
    const long nh = std::lround(sh * scale);
    if (nw < 1 || nh < 1) throw SizeError("scaled sprite collapses below one pixel");
    const double mismatch = (sw / sh) / (static_cast<double>(target.w) / target.h);
    if (mismatch > 4.0 || mismatch < 0.25) {
        std::ostringstream msg;
        msg << "sprite aspect " << sprite.width << "x" << sprite.height << " vs target " << target.w << "x" << target.h
            << " differs by more than 4:1";
        warn(msg.str());
    }
    const Sprite scaled = resize_sprite(sprite, static_cast<std::size_t>(nw), static_cast<std::size_t>(nh));
    const int ox = target.x + (target.w - static_cast<int>(nw)) / 2;
    const int oy = target.y + (target.h - static_cast<int>(nh)) / 2;

    PasteResult r{erased, BinaryMask(erased.height(), erased.width()), {ox, oy, static_cast<int>(nw), static_cast<int>(nh)}};
    for (std::size_t y = 0; y < scaled.height; ++y) {
        for (std::size_t x = 0; x < scaled.width; ++x) {
            if (!scaled.opaque(x, y)) continue;
            const auto px = static_cast<std::size_t>(ox) + x;
            const auto py = static_cast<std::size_t>(oy) + y;
            for (std::size_t c = 0; c < kChannels; ++c) r.image.set(px, py, c, scaled.at(x, y, c));
            r.alpha.set(py, px, true);
        }
    }
    return r;
}

// --- collage ------------------------------------------------------------------------

Collage build_collage(const PixelImage& template_image, const StageSet& template_stages,
                      const std::vector<ReferenceInput>& refs) {
    Collage col;
    col.template_image = template_image;
    col.erased = template_image;
    col.image = template_image;
    const GridShape patches = template_image.patch_shape();
    col.pre_mask = BinaryMask(patches.rows, patches.cols);
    for (const ReferenceInput& ref : refs) {
        const std::string tag = "collage[" + ref.subject_id + "]";
        SubjectPlacement place;
        place.subject_id = ref.subject_id;
        place.template_box = tagged(tag + ".ground_template",
                                    [&] { return ground(*template_stages.grounder, template_image, ref.subject_id); });
        const BinaryMask tmp_mask = tagged(tag + ".segment_template", [&] {
            return segment(*template_stages.segmenter, template_image, place.template_box);
        });
        col.erased = tagged(tag + ".erase", [&] { return erase(*template_stages.inpainter, col.erased, tmp_mask); });
        col.image = tagged(tag + ".erase", [&] { return erase(*template_stages.inpainter, col.image, tmp_mask); });
        const BBox ref_box = tagged(tag + ".ground_reference",
                                    [&] { return ground(*ref.stages.grounder, ref.image, ref.subject_id); });
        const BinaryMask ref_mask =
            tagged(tag + ".segment_reference", [&] { return segment(*ref.stages.segmenter, ref.image, ref_box); });
        place.sprite = tagged(tag + ".crop", [&] { return crop_with_mask(ref.image, ref_mask); });
        PasteResult pasted = tagged(tag + ".paste", [&] { return resize_and_paste(col.image, place.sprite, place.template_box); });
        col.image = std::move(pasted.image);
        place.pixel_mask = std::move(pasted.alpha);
        place.patch_mask = downsample_any(place.pixel_mask);
        col.pre_mask = mask_or(col.pre_mask, place.patch_mask);
        col.subjects.push_back(std::move(place));
    }
    return col;
}

TranslatedScene make_translated_scene(std::uint64_t seed, std::size_t canvas, int subject_size) {
    if (subject_size <= 0 || static_cast<std::size_t>(subject_size) > canvas) throw ConfigError("subject does not fit canvas");
    Rng rng(hash_words({0x75CE, seed}));
    const std::uint64_t bg = rng.next() % 1000;
    const std::uint64_t identity = 1000 + rng.next() % 1000;
    const std::uint64_t generic = 2000 + rng.next() % 1000;
    const int span = static_cast<int>(canvas) - subject_size + 1;
    auto pick = [&] { return static_cast<int>(rng.next() % static_cast<std::uint64_t>(span)); };
    const int ax = pick(), ay = pick();
    int bx = pick(), by = pick();
    while (std::abs(bx - ax) + std::abs(by - ay) < 4) {
        bx = pick();
        by = pick();
    }
    const SubjectShape shape = seed % 2 ? SubjectShape::Disc : SubjectShape::Rect;

    TranslatedScene ts;
    ts.subject_id = "subject";
    ts.seed = seed;
    ts.template_spec.width = ts.template_spec.height = canvas;
    ts.template_spec.background = bg;
    ts.template_spec.prompt = "a subject on a textured background";
    ts.template_spec.subjects.push_back({ts.subject_id, generic, shape, {bx, by, subject_size, subject_size}, 0});
    ts.ref_spec.width = ts.ref_spec.height = canvas;
    ts.ref_spec.background = bg + 1;
    ts.ref_spec.seed = seed;
    ts.ref_spec.subjects.push_back({ts.subject_id, identity, shape, {ax, ay, subject_size, subject_size}, 0});
    return ts;
}

}  // namespace graftor
