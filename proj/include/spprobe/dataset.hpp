// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spprobe/errors.hpp"
#include "spprobe/image.hpp"
#include "spprobe/rng.hpp"

namespace spprobe {

constexpr int kNumClasses = 5;

/// One grayscale sample. The foreground mask marks the pixels of the
/// class-defining shape as rasterized before noise was added.
struct ImageSample {
    std::string id;
    Image pixels;
    int label = 0;
    std::optional<std::string> contaminated_with;
    std::vector<std::uint8_t> foreground_mask; // H*W, 1 on shape pixels

    bool has_foreground() const { return !foreground_mask.empty(); }
};

struct Dataset {
    int image_size = 0;
    int num_classes = kNumClasses;
    std::vector<ImageSample> samples;

    std::vector<int> label_histogram() const {
        std::vector<int> h(static_cast<std::size_t>(num_classes), 0);
        for (const ImageSample& s : samples) h.at(static_cast<std::size_t>(s.label))++;
        return h;
    }
};

namespace detail {

struct ShapeParams {
    double cx, cy, radius, rot, fg, bg;
};

inline bool inside_shape(int label, double x, double y, const ShapeParams& p) {
    const double dx = x - p.cx, dy = y - p.cy;
    const double cs = std::cos(p.rot), sn = std::sin(p.rot);
    const double u = dx * cs + dy * sn;
    const double v = -dx * sn + dy * cs;
    const double R = p.radius;
    switch (label) {
        case 0: // circle
            return dx * dx + dy * dy <= (0.85 * R) * (0.85 * R);
        case 1: // square
            return std::max(std::fabs(u), std::fabs(v)) <= 0.72 * R;
        case 2: { // equilateral triangle, vertices at 90/210/330 degrees
            std::array<double, 3> vx, vy;
            for (int i = 0; i < 3; ++i) {
                const double a = 1.5707963267948966 + i * 2.0943951023931953;
                vx[static_cast<std::size_t>(i)] = R * std::cos(a);
                vy[static_cast<std::size_t>(i)] = R * std::sin(a);
            }
            double prev = 0.0;
            for (int i = 0; i < 3; ++i) {
                const int j = (i + 1) % 3;
                const double ex = vx[j] - vx[i], ey = vy[j] - vy[i];
                const double cross = ex * (v - vy[i]) - ey * (u - vx[i]);
                if (i == 0) {
                    prev = cross;
                } else if (cross * prev < 0.0) {
                    return false;
                }
            }
            return true;
        }
        case 3: // cross
            return (std::fabs(u) <= 0.28 * R && std::fabs(v) <= R) ||
                   (std::fabs(v) <= 0.28 * R && std::fabs(u) <= R);
        case 4: { // ring
            const double r = std::sqrt(u * u + v * v);
            return r >= 0.55 * R && r <= 0.85 * R;
        }
        default:
            throw ParameterError("unknown shape label " + std::to_string(label));
    }
}

} // namespace detail

/// Renders one synthetic sample. Stream position is a pure function of the
/// per-sample seed, so generation parallelizes per index without changing
/// results.
inline ImageSample render_sample(int label, int image_size, std::uint64_t sample_seed,
                                 const std::string& id) {
    Rng rng(sample_seed);
    detail::ShapeParams p;
    const double S = image_size;
    p.cx = rng.uniform(0.32 * S, 0.68 * S);
    p.cy = rng.uniform(0.32 * S, 0.68 * S);
    p.radius = rng.uniform(0.13 * S, 0.28 * S);
    p.rot = rng.uniform(0.0, 6.283185307179586);
    p.fg = rng.uniform(0.50, 0.85);
    p.bg = rng.uniform(0.10, 0.40);

    ImageSample s;
    s.id = id;
    s.label = label;
    s.pixels = Image(image_size, image_size);
    s.foreground_mask.assign(static_cast<std::size_t>(image_size) * image_size, 0);
    for (int r = 0; r < image_size; ++r)
        for (int c = 0; c < image_size; ++c) {
            const bool in = detail::inside_shape(label, c + 0.5, r + 0.5, p);
            s.pixels.at(r, c) = in ? p.fg : p.bg;
            if (in) s.foreground_mask[static_cast<std::size_t>(r) * image_size + c] = 1;
        }
    for (double& v : s.pixels.pix) v += rng.gaussian(0.0, 0.05);
    s.pixels.clip01();
    return s;
}

/// Generates the 5-class synthetic dataset: circle, square, triangle,
/// cross, ring with randomized position/scale/rotation plus Gaussian pixel
/// noise. Deterministic per seed.
inline Dataset generate_synthetic(int n_per_class, std::uint64_t seed, int image_size = 64) {
    if (n_per_class < 1) throw ParameterError("generate_synthetic: n_per_class must be >= 1");
    if (image_size < 32)
        throw ParameterError("generate_synthetic: image_size must be >= 32 to fit the shapes");
    Dataset ds;
    ds.image_size = image_size;
    ds.samples.reserve(static_cast<std::size_t>(n_per_class) * kNumClasses);
    for (int label = 0; label < kNumClasses; ++label)
        for (int i = 0; i < n_per_class; ++i) {
            const std::uint64_t index =
                static_cast<std::uint64_t>(label) * static_cast<std::uint64_t>(n_per_class) + i;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "c%d_%05d", label, i);
            ds.samples.push_back(
                render_sample(label, image_size, derive_seed(seed, "sample", index), buf));
        }
    return ds;
}

/// Stable content hash over labels, ids, contamination flags and quantized
/// pixels; used for training provenance.
inline std::uint64_t dataset_hash(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a64_bytes(&ds.image_size, sizeof(ds.image_size), h);
    for (const ImageSample& s : ds.samples) {
        h = fnv1a64_bytes(s.id.data(), s.id.size(), h);
        h = fnv1a64_bytes(&s.label, sizeof(s.label), h);
        if (s.contaminated_with)
            h = fnv1a64_bytes(s.contaminated_with->data(), s.contaminated_with->size(), h);
        for (double v : s.pixels.pix) {
            const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
            h = fnv1a64_bytes(&q, sizeof(q), h);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// On-disk layout: one directory per class of 8-bit PGM images, a masks/
// directory, and a JSON manifest listing every sample.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::create_directories(dir / "masks");
    nlohmann::json manifest;
    manifest["image_size"] = ds.image_size;
    manifest["num_classes"] = ds.num_classes;
    manifest["samples"] = nlohmann::json::array();
    for (const ImageSample& s : ds.samples) {
        const std::string cls_dir = "class_" + std::to_string(s.label);
        fs::create_directories(dir / cls_dir);
        const std::string file = cls_dir + "/" + s.id + ".pgm";
        write_pgm8(dir / file, s.pixels);
        nlohmann::json entry;
        entry["id"] = s.id;
        entry["label"] = s.label;
        entry["file"] = file;
        if (s.contaminated_with)
            entry["contaminated_with"] = *s.contaminated_with;
        else
            entry["contaminated_with"] = nullptr;
        if (s.has_foreground()) {
            const std::string mfile = "masks/" + s.id + "_fg.pgm";
            Image m(s.pixels.height, s.pixels.width);
            for (std::size_t i = 0; i < m.pix.size(); ++i)
                m.pix[i] = s.foreground_mask[i] ? 1.0 : 0.0;
            write_pgm8(dir / mfile, m);
            entry["mask"] = mfile;
        } else {
            entry["mask"] = nullptr;
        }
        manifest["samples"].push_back(entry);
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("no manifest.json in " + dir.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest in " + dir.string() + ": " + e.what());
    }
    Dataset ds;
    ds.image_size = manifest.at("image_size").get<int>();
    ds.num_classes = manifest.value("num_classes", kNumClasses);
    for (const auto& entry : manifest.at("samples")) {
        ImageSample s;
        s.id = entry.at("id").get<std::string>();
        s.label = entry.at("label").get<int>();
        if (s.label < 0 || s.label >= ds.num_classes)
            throw IoError("manifest entry " + s.id + ": label out of range");
        s.pixels = read_pgm(dir / entry.at("file").get<std::string>());
        if (s.pixels.height != ds.image_size || s.pixels.width != ds.image_size)
            throw IoError("sample " + s.id + ": image size does not match manifest");
        if (!entry.at("contaminated_with").is_null())
            s.contaminated_with = entry.at("contaminated_with").get<std::string>();
        if (entry.contains("mask") && !entry.at("mask").is_null()) {
            const Image m = read_pgm(dir / entry.at("mask").get<std::string>());
            s.foreground_mask.resize(m.pix.size());
            for (std::size_t i = 0; i < m.pix.size(); ++i)
                s.foreground_mask[i] = m.pix[i] >= 0.5 ? 1 : 0;
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace spprobe
