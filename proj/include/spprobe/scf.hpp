// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spprobe/dataset.hpp"
#include "spprobe/errors.hpp"
#include "spprobe/image.hpp"
#include "spprobe/rng.hpp"

namespace spprobe {

/// Binary pixel mask of the region a spurious signal occupies or alters.
struct GroundTruthMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> mask;

    std::size_t footprint() const {
        std::size_t n = 0;
        for (std::uint8_t v : mask) n += v;
        return n;
    }

    Image to_image() const {
        Image img(height, width);
        for (std::size_t i = 0; i < mask.size(); ++i) img.pix[i] = mask[i] ? 1.0 : 0.0;
        return img;
    }
};

namespace detail {

/// 10x18 three-glyph monogram bitmap used as the hospital-style tag.
inline const std::vector<std::uint8_t>& tag_bitmap() {
    static const std::vector<std::uint8_t> bits = [] {
        static constexpr const char* rows[10] = {
            "X...X .XXX. X...X ",
            "XX.XX X...X X...X ",
            "X.X.X X.... X...X ",
            "X...X X.... X...X ",
            "X...X X.... XXXXX ",
            "X...X X.XXX X...X ",
            "X...X X...X X...X ",
            "X...X X...X X...X ",
            "X...X X...X X...X ",
            "X...X .XXX. X...X ",
        };
        std::vector<std::uint8_t> out(10 * 18, 0);
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 18; ++c)
                out[static_cast<std::size_t>(r) * 18 + c] = rows[r][c] == 'X' ? 1 : 0;
        return out;
    }();
    return bits;
}

constexpr int kTagRows = 10;
constexpr int kTagCols = 18;

/// Gaussian blur over the whole image, truncated at radius ceil(3*sigma),
/// kernel renormalized near borders. Separable.
inline Image gaussian_blur(const Image& src, double sigma) {
    if (sigma < 0.0) throw ParameterError("gaussian_blur: sigma must be >= 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    if (radius == 0) return src;
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i)
        kernel[static_cast<std::size_t>(i + radius)] =
            std::exp(-0.5 * (i * i) / (sigma * sigma));

    Image tmp(src.height, src.width);
    for (int r = 0; r < src.height; ++r)
        for (int c = 0; c < src.width; ++c) {
            double acc = 0.0, wsum = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                const int cc = c + k;
                if (cc < 0 || cc >= src.width) continue;
                const double w = kernel[static_cast<std::size_t>(k + radius)];
                acc += w * src.at(r, cc);
                wsum += w;
            }
            tmp.at(r, c) = acc / wsum;
        }
    Image out(src.height, src.width);
    for (int r = 0; r < src.height; ++r)
        for (int c = 0; c < src.width; ++c) {
            double acc = 0.0, wsum = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                const int rr = r + k;
                if (rr < 0 || rr >= src.height) continue;
                const double w = kernel[static_cast<std::size_t>(k + radius)];
                acc += w * tmp.at(rr, c);
                wsum += w;
            }
            out.at(r, c) = acc / wsum;
        }
    return out;
}

} // namespace detail

/// Parametric description of the three contamination signals.
struct SpuriousSignal {
    enum class Kind { kTag, kStripe, kBlur };
    Kind kind = Kind::kTag;

    // tag: glyph bitmap pasted at a fixed anchor
    int anchor_row = 2;
    int anchor_col = 2;
    double tag_intensity = 1.0;

    // stripe: vertical stripes, each `stripe_width` columns wide
    std::vector<int> stripe_columns; // leftmost column of each stripe
    int stripe_width = 2;
    double stripe_delta = 0.4;

    // blur: Gaussian sigma applied to the image background
    double blur_sigma = 3.5;

    std::string id() const {
        switch (kind) {
            case Kind::kTag: return "tag";
            case Kind::kStripe: return "stripe";
            case Kind::kBlur: return "blur";
        }
        return "?";
    }

    static SpuriousSignal tag() {
        SpuriousSignal s;
        s.kind = Kind::kTag;
        return s;
    }

    static SpuriousSignal stripe(int image_width) {
        SpuriousSignal s;
        s.kind = Kind::kStripe;
        s.stripe_columns = {image_width / 4, 3 * image_width / 4};
        return s;
    }

    static SpuriousSignal blur(double sigma = 3.5) {
        SpuriousSignal s;
        s.kind = Kind::kBlur;
        s.blur_sigma = sigma;
        return s;
    }

    static SpuriousSignal from_id(const std::string& name, int image_width) {
        if (name == "tag") return tag();
        if (name == "stripe") return stripe(image_width);
        if (name == "blur") return blur();
        throw ParameterError("unknown signal id: " + name);
    }
};

/// Mask of the pixels the signal occupies: the glyph footprint for the tag,
/// the stripe columns for stripes, and the complement of the foreground for
/// background blur.
inline GroundTruthMask ground_truth_mask(const SpuriousSignal& signal, const ImageSample& sample) {
    const int H = sample.pixels.height, W = sample.pixels.width;
    GroundTruthMask gt;
    gt.height = H;
    gt.width = W;
    gt.mask.assign(static_cast<std::size_t>(H) * W, 0);
    switch (signal.kind) {
        case SpuriousSignal::Kind::kTag: {
            if (signal.anchor_row < 0 || signal.anchor_col < 0 ||
                signal.anchor_row + detail::kTagRows > H ||
                signal.anchor_col + detail::kTagCols > W)
                throw ParameterError("tag anchor places bitmap outside the image");
            const auto& bits = detail::tag_bitmap();
            for (int r = 0; r < detail::kTagRows; ++r)
                for (int c = 0; c < detail::kTagCols; ++c)
                    if (bits[static_cast<std::size_t>(r) * detail::kTagCols + c])
                        gt.mask[static_cast<std::size_t>(signal.anchor_row + r) * W +
                                signal.anchor_col + c] = 1;
            break;
        }
        case SpuriousSignal::Kind::kStripe: {
            for (int col : signal.stripe_columns) {
                if (col < 0 || col + signal.stripe_width > W)
                    throw ParameterError("stripe columns outside the image");
                for (int r = 0; r < H; ++r)
                    for (int c = col; c < col + signal.stripe_width; ++c)
                        gt.mask[static_cast<std::size_t>(r) * W + c] = 1;
            }
            break;
        }
        case SpuriousSignal::Kind::kBlur: {
            if (!sample.has_foreground())
                throw ParameterError("blur mask requires a sample with a foreground mask");
            for (std::size_t i = 0; i < gt.mask.size(); ++i)
                gt.mask[i] = sample.foreground_mask[i] ? 0 : 1;
            break;
        }
    }
    return gt;
}

/// Applies one spurious contamination function. The label is preserved,
/// pixels stay in [0,1], and no pixel outside the ground-truth mask
/// changes. Contaminating an already contaminated sample is an error.
inline ImageSample apply_scf(const ImageSample& sample, const SpuriousSignal& signal) {
    if (sample.contaminated_with)
        throw UsageError("apply_scf: sample " + sample.id + " already carries signal '" +
                         *sample.contaminated_with + "'");
    ImageSample out = sample;
    out.contaminated_with = signal.id();
    const int H = sample.pixels.height, W = sample.pixels.width;
    switch (signal.kind) {
        case SpuriousSignal::Kind::kTag: {
            const GroundTruthMask gt = ground_truth_mask(signal, sample);
            for (std::size_t i = 0; i < gt.mask.size(); ++i)
                if (gt.mask[i]) out.pixels.pix[i] = signal.tag_intensity;
            break;
        }
        case SpuriousSignal::Kind::kStripe: {
            const GroundTruthMask gt = ground_truth_mask(signal, sample);
            for (std::size_t i = 0; i < gt.mask.size(); ++i)
                if (gt.mask[i])
                    out.pixels.pix[i] =
                        std::clamp(out.pixels.pix[i] + signal.stripe_delta, 0.0, 1.0);
            break;
        }
        case SpuriousSignal::Kind::kBlur: {
            if (!sample.has_foreground())
                throw ParameterError("apply_scf: blur requires a sample with a foreground mask");
            if (signal.blur_sigma == 0.0) break; // identity kernel
            const Image blurred = detail::gaussian_blur(sample.pixels, signal.blur_sigma);
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * W + c;
                    if (!sample.foreground_mask[i]) out.pixels.pix[i] = blurred.pix[i];
                }
            break;
        }
    }
    out.pixels.clip01();
    return out;
}

/// Per-class contamination: each sample of the aligned class receives the
/// signal independently with the given probability.
struct ContaminationPolicy {
    SpuriousSignal signal;
    int aligned_class = 1;
    double rate = 1.0;
    std::uint64_t seed = 0;

    void validate(int num_classes) const {
        if (aligned_class < 0 || aligned_class >= num_classes)
            throw ParameterError("contamination policy: aligned class out of range");
        if (rate < 0.0 || rate > 1.0)
            throw ParameterError("contamination policy: rate must lie in [0,1]");
    }
};

/// Returns a new dataset; the input is left untouched. Uses one independent
/// RNG stream per sample index, so results do not depend on traversal order.
inline Dataset contaminate(const Dataset& dataset, const ContaminationPolicy& policy) {
    policy.validate(dataset.num_classes);
    Dataset out = dataset;
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        ImageSample& s = out.samples[i];
        if (s.label != policy.aligned_class) continue;
        Rng rng(derive_seed(policy.seed, "contaminate", i));
        if (rng.uniform() < policy.rate) s = apply_scf(s, policy.signal);
    }
    return out;
}

} // namespace spprobe
