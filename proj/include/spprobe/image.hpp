// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spprobe/errors.hpp"

namespace spprobe {

/// Grayscale image with pixel values in [0,1], row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), pix(static_cast<std::size_t>(h) * w, fill) {}

    double& at(int r, int c) { return pix[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return pix[static_cast<std::size_t>(r) * width + c]; }
    std::size_t size() const { return pix.size(); }

    double min_value() const { return pix.empty() ? 0.0 : *std::min_element(pix.begin(), pix.end()); }
    double max_value() const { return pix.empty() ? 0.0 : *std::max_element(pix.begin(), pix.end()); }

    void clip01() {
        for (double& v : pix) v = std::clamp(v, 0.0, 1.0);
    }

    bool operator==(const Image&) const = default;
};

namespace detail {

inline void skip_pgm_whitespace(std::istream& in) {
    int c = in.peek();
    while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            in.get();
        }
        c = in.peek();
    }
}

inline int read_pgm_int(std::istream& in) {
    skip_pgm_whitespace(in);
    int v = 0;
    if (!(in >> v)) throw IoError("pgm: malformed header");
    return v;
}

} // namespace detail

/// Writes a binary (P5) 8-bit PGM; values are clamped to [0,1] and scaled
/// to 0..255.
inline void write_pgm8(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width));
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const double v = std::clamp(img.at(r, c), 0.0, 1.0);
            row[static_cast<std::size_t>(c)] =
                static_cast<unsigned char>(std::lround(v * 255.0));
        }
        out.write(reinterpret_cast<const char*>(row.data()), img.width);
    }
    if (!out) throw IoError("short write: " + path.string());
}

/// Writes a binary (P5) 16-bit PGM (big-endian sample order per the netpbm
/// format). Values are clamped to [0,1] and scaled to 0..65535.
inline void write_pgm16(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n65535\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 2);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const double v = std::clamp(img.at(r, c), 0.0, 1.0);
            const auto s = static_cast<std::uint16_t>(std::lround(v * 65535.0));
            row[static_cast<std::size_t>(c) * 2] = static_cast<unsigned char>(s >> 8);
            row[static_cast<std::size_t>(c) * 2 + 1] = static_cast<unsigned char>(s & 0xff);
        }
        out.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!out) throw IoError("short write: " + path.string());
}

/// Reads a binary (P5) PGM with maxval 255 or 65535 into [0,1].
inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") throw IoError("pgm: not a binary P5 file: " + path.string());
    const int w = detail::read_pgm_int(in);
    const int h = detail::read_pgm_int(in);
    const int maxval = detail::read_pgm_int(in);
    in.get(); // single whitespace byte before raster
    if (w <= 0 || h <= 0 || (maxval != 255 && maxval != 65535))
        throw IoError("pgm: unsupported header in " + path.string());
    Image img(h, w);
    if (maxval == 255) {
        std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (!in) throw IoError("pgm: truncated raster in " + path.string());
        for (std::size_t i = 0; i < raw.size(); ++i) img.pix[i] = raw[i] / 255.0;
    } else {
        std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 2);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (!in) throw IoError("pgm: truncated raster in " + path.string());
        for (std::size_t i = 0; i < img.pix.size(); ++i) {
            const std::uint16_t s =
                static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
            img.pix[i] = s / 65535.0;
        }
    }
    return img;
}

} // namespace spprobe
