#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dtu/image_io.hpp"
#include "dtu/tensor.hpp"

namespace dtu {

struct SegmentationSample {
    Tensor<float> image;   // (channels, h, w) in [0,1]
    Tensor<int32_t> mask;  // (h, w) class labels
    std::string id;
};

using Dataset = std::vector<SegmentationSample>;

struct SplitSpec {
    double train_fraction = 0.75;
    uint64_t seed = 0;
};

template <typename T>
struct SegmentationBatch {
    Tensor<T> images;       // (n, c, s, s)
    Tensor<int32_t> masks;  // (n, s, s)
    std::vector<std::string> ids;
};

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

namespace data_detail {

struct ShapeSpec {
    bool ellipse = true;
    double cy = 0, cx = 0;  // center
    double ry = 0, rx = 0;  // radii / half-extents
    int32_t cls = 1;

    bool inside(double y, double x) const {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        return ellipse ? (dy * dy + dx * dx <= 1.0)
                       : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
    }
};

// Smooth value noise: coarse uniform grid, bilinearly interpolated.
inline std::vector<float> value_noise(int64_t size, int64_t cell, float lo, float hi,
                                      std::mt19937_64& rng) {
    const int64_t g = size / cell + 2;
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> grid(static_cast<size_t>(g * g));
    for (auto& v : grid) v = dist(rng);
    std::vector<float> out(static_cast<size_t>(size * size));
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double fy = static_cast<double>(y) / static_cast<double>(cell);
            const double fx = static_cast<double>(x) / static_cast<double>(cell);
            const int64_t y0 = static_cast<int64_t>(fy), x0 = static_cast<int64_t>(fx);
            const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
            const auto at = [&](int64_t yy, int64_t xx) {
                return static_cast<double>(grid[static_cast<size_t>(yy * g + xx)]);
            };
            const double top = at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx;
            const double bot = at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx;
            out[static_cast<size_t>(y * size + x)] = static_cast<float>(top * (1 - wy) + bot * wy);
        }
    return out;
}

}  // namespace data_detail

// Random anti-aliased ellipses/rectangles (one shape per foreground class)
// over a textured noise background. Masks are the exact generating shapes
// (pixel-center membership); the image gets 4x4 supersampled coverage.
// Total foreground fraction is kept within [5%, 40%] by rejection.
inline Dataset generate_synthetic(int64_t count, int64_t size, int64_t num_classes,
                                  uint64_t seed) {
    if (size < 16 || size % 16 != 0) {
        throw ConfigError("generate_synthetic: size must be a positive multiple of 16");
    }
    if (num_classes < 2) throw ConfigError("generate_synthetic: need at least 2 classes");
    std::mt19937_64 rng(seed);
    const int64_t fg_classes = num_classes - 1;

    Dataset out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t idx = 0; idx < count; ++idx) {
        std::vector<data_detail::ShapeSpec> shapes;
        Tensor<int32_t> mask({size, size});
        // Rejection loop: resample all shapes until the foreground fraction
        // lands in the required band.
        for (int attempt = 0; attempt < 64; ++attempt) {
            shapes.clear();
            std::uniform_real_distribution<double> frac_dist(0.10, 0.32);
            const double target_total = frac_dist(rng);
            const double per_class_area =
                target_total * static_cast<double>(size * size) / static_cast<double>(fg_classes);
            std::uniform_real_distribution<double> aspect_dist(0.6, 1.7);
            std::uniform_real_distribution<double> unit(0.0, 1.0);
            for (int32_t cls = 1; cls <= fg_classes; ++cls) {
                data_detail::ShapeSpec s;
                s.cls = cls;
                s.ellipse = unit(rng) < 0.5;
                const double aspect = aspect_dist(rng);
                // area = pi*ry*rx (ellipse) or 4*ry*rx (rect)
                const double area_const = s.ellipse ? M_PI : 4.0;
                s.ry = std::sqrt(per_class_area * aspect / area_const);
                s.rx = s.ry / aspect;
                s.ry = std::max(2.0, s.ry);
                s.rx = std::max(2.0, s.rx);
                const double margin_y = std::min(s.ry, static_cast<double>(size) / 2 - 1);
                const double margin_x = std::min(s.rx, static_cast<double>(size) / 2 - 1);
                s.cy = margin_y + unit(rng) * (static_cast<double>(size) - 2 * margin_y);
                s.cx = margin_x + unit(rng) * (static_cast<double>(size) - 2 * margin_x);
                shapes.push_back(s);
            }
            // Rasterize mask at pixel centers; later classes overwrite.
            std::fill(mask.vec().begin(), mask.vec().end(), 0);
            int64_t fg = 0;
            for (int64_t y = 0; y < size; ++y)
                for (int64_t x = 0; x < size; ++x) {
                    int32_t lab = 0;
                    for (const auto& s : shapes)
                        if (s.inside(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5))
                            lab = s.cls;
                    mask[y * size + x] = lab;
                    if (lab) fg++;
                }
            const double frac = static_cast<double>(fg) / static_cast<double>(size * size);
            if (frac >= 0.05 && frac <= 0.40) break;
        }

        // Render: noise background plus per-class tinted shapes with
        // supersampled coverage for smooth edges.
        Tensor<float> image({3, size, size});
        std::array<std::vector<float>, 3> bg;
        for (int ch = 0; ch < 3; ++ch)
            bg[static_cast<size_t>(ch)] = data_detail::value_noise(size, 8, 0.15f, 0.45f, rng);
        auto grain = data_detail::value_noise(size, 1, -0.04f, 0.04f, rng);

        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                std::array<double, 3> px{
                    static_cast<double>(bg[0][static_cast<size_t>(y * size + x)]),
                    static_cast<double>(bg[1][static_cast<size_t>(y * size + x)]),
                    static_cast<double>(bg[2][static_cast<size_t>(y * size + x)])};
                for (const auto& s : shapes) {
                    // 4x4 supersampled coverage
                    int hits = 0;
                    for (int sy = 0; sy < 4; ++sy)
                        for (int sx = 0; sx < 4; ++sx)
                            if (s.inside(static_cast<double>(y) + (sy + 0.5) / 4.0,
                                         static_cast<double>(x) + (sx + 0.5) / 4.0))
                                hits++;
                    if (!hits) continue;
                    const double cov = hits / 16.0;
                    const auto col = class_color(s.cls);
                    for (int ch = 0; ch < 3; ++ch) {
                        const double target =
                            0.35 + 0.5 * static_cast<double>(col[static_cast<size_t>(ch)]) / 255.0;
                        px[static_cast<size_t>(ch)] =
                            (1.0 - cov) * px[static_cast<size_t>(ch)] + cov * target;
                    }
                }
                for (int ch = 0; ch < 3; ++ch) {
                    double v = px[static_cast<size_t>(ch)] +
                               static_cast<double>(grain[static_cast<size_t>(y * size + x)]);
                    image[ch * size * size + y * size + x] =
                        static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }

        std::ostringstream id;
        id << "synth_";
        id.fill('0');
        id.width(4);
        id << idx;
        out.push_back({std::move(image), std::move(mask), id.str()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Directory ingestion
// ---------------------------------------------------------------------------

struct PaletteEntry {
    std::array<uint8_t, 3> color;
    int32_t cls;
};

struct Palette {
    std::vector<PaletteEntry> entries;
    double tolerance = 32.0;  // max Euclidean RGB distance to nearest entry

    static Palette binary() { return {{{{0, 0, 0}, 0}, {{255, 255, 255}, 1}}, 32.0}; }
};

struct LoadReport {
    std::vector<std::string> missing_masks;
    std::vector<std::string> missing_images;
    int64_t loaded = 0;

    std::string to_string() const {
        std::ostringstream os;
        os << "loaded " << loaded << " samples\n";
        for (const auto& m : missing_masks) os << "missing mask for image: " << m << "\n";
        for (const auto& m : missing_images) os << "missing image for mask: " << m << "\n";
        return os.str();
    }
};

inline int32_t palette_lookup(const Palette& pal, uint8_t r, uint8_t g, uint8_t b,
                              const std::string& file) {
    double best = 1e18;
    int32_t cls = -1;
    for (const auto& e : pal.entries) {
        const double dr = static_cast<double>(r) - e.color[0];
        const double dg = static_cast<double>(g) - e.color[1];
        const double db = static_cast<double>(b) - e.color[2];
        const double d = std::sqrt(dr * dr + dg * dg + db * db);
        if (d < best) {
            best = d;
            cls = e.cls;
        }
    }
    if (cls < 0 || best > pal.tolerance) {
        throw DataError("unmappable mask color (" + std::to_string(r) + "," + std::to_string(g) +
                        "," + std::to_string(b) + ") in " + file);
    }
    return cls;
}

// Pairs images/<id>.(png|jpg|jpeg) with masks/<id>.(png|jpg|jpeg) by basename.
// Unpaired files are listed in the report and skipped.
inline Dataset load_directory(const std::string& images_dir, const std::string& masks_dir,
                              const Palette& palette, LoadReport* report = nullptr) {
    namespace fs = std::filesystem;
    auto is_image_ext = [](std::string e) {
        std::transform(e.begin(), e.end(), e.begin(), ::tolower);
        return e == ".png" || e == ".jpg" || e == ".jpeg";
    };
    auto scan = [&](const std::string& dir) {
        std::map<std::string, std::string> stems;
        if (!fs::exists(dir)) return stems;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file()) continue;
            if (!is_image_ext(entry.path().extension().string())) continue;
            stems[entry.path().stem().string()] = entry.path().string();
        }
        return stems;
    };
    auto images = scan(images_dir);
    auto masks = scan(masks_dir);

    LoadReport local;
    LoadReport& rep = report ? *report : local;
    Dataset out;
    for (const auto& [stem, ipath] : images) {
        auto it = masks.find(stem);
        if (it == masks.end()) {
            rep.missing_masks.push_back(ipath);
            continue;
        }
        Tensor<float> image = read_image_rgb01(ipath);
        Tensor<uint8_t> mrgb = read_image_rgb8(it->second);
        if (image.dim(1) != mrgb.dim(0) || image.dim(2) != mrgb.dim(1)) {
            throw DataError("image/mask extent mismatch for id " + stem + ": " +
                            shape_str(image.shape()) + " vs " + shape_str(mrgb.shape()));
        }
        const int64_t h = mrgb.dim(0), w = mrgb.dim(1);
        Tensor<int32_t> mask({h, w});
        for (int64_t i = 0; i < h * w; ++i) {
            mask[i] = palette_lookup(palette, mrgb[i * 3 + 0], mrgb[i * 3 + 1], mrgb[i * 3 + 2],
                                     it->second);
        }
        out.push_back({std::move(image), std::move(mask), stem});
        rep.loaded++;
    }
    for (const auto& [stem, mpath] : masks) {
        if (images.find(stem) == images.end()) rep.missing_images.push_back(mpath);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Split and batching
// ---------------------------------------------------------------------------

// Deterministic shuffle then round-half-up on the train side.
inline std::pair<Dataset, Dataset> split(const Dataset& data, const SplitSpec& spec) {
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
        throw ConfigError("split: train_fraction must be in (0,1)");
    }
    if (data.size() < 2) throw DataError("split: need at least 2 samples");
    std::vector<size_t> idx(data.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::mt19937_64 rng(spec.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<size_t>(std::floor(
        spec.train_fraction * static_cast<double>(data.size()) + 0.5));
    Dataset train, test;
    for (size_t i = 0; i < idx.size(); ++i) {
        (i < n_train ? train : test).push_back(data[idx[i]]);
    }
    return {std::move(train), std::move(test)};
}

// FNV-1a over the ordered sample ids; used to prove runs share a split.
inline uint64_t dataset_hash(const Dataset& data) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& s : data) {
        for (char c : s.id) {
            h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        h ^= 0x7c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace data_detail {

// Bilinear with half-pixel centers; identity when sizes match.
inline Tensor<float> resize_image_bilinear(const Tensor<float>& img, int64_t target) {
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h == target && w == target) return img;
    Tensor<float> out({c, target, target});
    const double sy = static_cast<double>(h) / static_cast<double>(target);
    const double sx = static_cast<double>(w) / static_cast<double>(target);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < target; ++y) {
            double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (int64_t x = 0; x < target; ++x) {
                double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - static_cast<double>(x0);
                const auto at = [&](int64_t yy, int64_t xx) {
                    return static_cast<double>(img[(ch * h + yy) * w + xx]);
                };
                const double top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
                const double bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
                out[(ch * target + y) * target + x] = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    return out;
}

// Nearest neighbor keeps labels exact and never invents new ones.
inline Tensor<int32_t> resize_mask_nearest(const Tensor<int32_t>& mask, int64_t target) {
    const int64_t h = mask.dim(0), w = mask.dim(1);
    if (h == target && w == target) return mask;
    Tensor<int32_t> out({target, target});
    const double sy = static_cast<double>(h) / static_cast<double>(target);
    const double sx = static_cast<double>(w) / static_cast<double>(target);
    for (int64_t y = 0; y < target; ++y) {
        const int64_t yy = std::min<int64_t>(h - 1, static_cast<int64_t>(
                                                        (static_cast<double>(y) + 0.5) * sy));
        for (int64_t x = 0; x < target; ++x) {
            const int64_t xx = std::min<int64_t>(w - 1, static_cast<int64_t>(
                                                            (static_cast<double>(x) + 0.5) * sx));
            out[y * target + x] = mask[yy * w + xx];
        }
    }
    return out;
}

}  // namespace data_detail

// Random horizontal/vertical flip plus a k*90-degree rotation, applied to
// image and mask together (label-preserving). Draws exactly three values
// from rng per call.
inline SegmentationSample augment_flip_rotate(const SegmentationSample& s,
                                              std::mt19937_64& rng) {
    const bool hflip = (rng() & 1) != 0;
    const bool vflip = (rng() & 1) != 0;
    const int quarter_turns = static_cast<int>(rng() % 4);

    const int64_t c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
    auto map_index = [&](int64_t y, int64_t x) {
        if (hflip) x = w - 1 - x;
        if (vflip) y = h - 1 - y;
        for (int k = 0; k < quarter_turns; ++k) {
            const int64_t ny = x, nx = h - 1 - y;  // square inputs only
            y = ny;
            x = nx;
        }
        return y * w + x;
    };
    if (quarter_turns % 2 != 0 && h != w) {
        throw DataError("augment_flip_rotate: rotation needs square samples, got " +
                        shape_str(s.image.shape()));
    }
    SegmentationSample out;
    out.id = s.id;
    out.image = Tensor<float>({c, h, w});
    out.mask = Tensor<int32_t>({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t src = map_index(y, x);
            out.mask[y * w + x] = s.mask[src];
            for (int64_t ch = 0; ch < c; ++ch)
                out.image[ch * h * w + y * w + x] = s.image[ch * h * w + src];
        }
    return out;
}

// Resize all samples to target (bilinear images, nearest masks) and stack.
template <typename T>
SegmentationBatch<T> resize_batch(const SegmentationSample* samples, size_t count,
                                  int64_t target) {
    if (target < 16 || target % 16 != 0) {
        throw ConfigError("resize_batch: target must be a positive multiple of 16");
    }
    if (count == 0) throw DataError("resize_batch: empty batch");
    const int64_t c = samples[0].image.dim(0);
    SegmentationBatch<T> batch;
    batch.images = Tensor<T>({static_cast<int64_t>(count), c, target, target});
    batch.masks = Tensor<int32_t>({static_cast<int64_t>(count), target, target});
    for (size_t i = 0; i < count; ++i) {
        const auto& s = samples[i];
        if (s.image.dim(0) != c) {
            throw DataError("resize_batch: inconsistent channel counts in batch");
        }
        Tensor<float> img = data_detail::resize_image_bilinear(s.image, target);
        Tensor<int32_t> msk = data_detail::resize_mask_nearest(s.mask, target);
        for (int64_t j = 0; j < img.numel(); ++j)
            batch.images[static_cast<int64_t>(i) * img.numel() + j] = static_cast<T>(img[j]);
        std::copy(msk.data(), msk.data() + msk.numel(),
                  batch.masks.data() + static_cast<int64_t>(i) * msk.numel());
        batch.ids.push_back(s.id);
    }
    return batch;
}

template <typename T>
SegmentationBatch<T> resize_batch(const Dataset& samples, int64_t target) {
    return resize_batch<T>(samples.data(), samples.size(), target);
}

}  // namespace dtu
