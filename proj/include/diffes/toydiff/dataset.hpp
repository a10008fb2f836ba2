#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "diffes/error.hpp"

namespace diffes::toydiff {

inline constexpr int kImageSide = 16;
inline constexpr int kImagePixels = kImageSide * kImageSide;
inline constexpr int kNumClasses = 4;

enum class ShapeClass : int { Circle = 0, Square = 1, Cross = 2, Stripe = 3 };

/// Procedural 16x16 grayscale shapes; background -1, shape +1.
struct ToyDataset {
    std::uint64_t seed = 0;
    std::vector<std::vector<float>> images;
    std::vector<int> labels;

    std::size_t size() const noexcept { return images.size(); }
    bool empty() const noexcept { return images.empty(); }
};

namespace detail {

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace detail

inline std::vector<float> draw_shape(ShapeClass cls, std::mt19937_64& rng) {
    std::vector<float> img(kImagePixels, -1.0f);
    auto set = [&](int x, int y) { img[static_cast<std::size_t>(y * kImageSide + x)] = 1.0f; };
    switch (cls) {
        case ShapeClass::Circle: {
            const int r = detail::uniform_int(rng, 2, 5);
            const int cx = detail::uniform_int(rng, r, kImageSide - r);
            const int cy = detail::uniform_int(rng, r, kImageSide - r);
            for (int y = 0; y < kImageSide; ++y)
                for (int x = 0; x < kImageSide; ++x) {
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    if (dx * dx + dy * dy <= static_cast<double>(r) * r) set(x, y);
                }
            break;
        }
        case ShapeClass::Square: {
            const int side = detail::uniform_int(rng, 4, 10);
            const int x0 = detail::uniform_int(rng, 0, kImageSide - side);
            const int y0 = detail::uniform_int(rng, 0, kImageSide - side);
            for (int y = y0; y < y0 + side; ++y)
                for (int x = x0; x < x0 + side; ++x) set(x, y);
            break;
        }
        case ShapeClass::Cross: {
            const int arm = detail::uniform_int(rng, 3, 6);
            const int cx = detail::uniform_int(rng, arm, kImageSide - 1 - arm);
            const int cy = detail::uniform_int(rng, arm, kImageSide - 1 - arm);
            for (int d = -arm; d <= arm; ++d) {
                for (int w = 0; w <= 1; ++w) {
                    set(cx + d, cy + w);
                    set(cx + w, cy + d);
                }
            }
            break;
        }
        case ShapeClass::Stripe: {
            const bool vertical = detail::uniform_int(rng, 0, 1) == 1;
            const int width = detail::uniform_int(rng, 2, 4);
            const int pos = detail::uniform_int(rng, 0, kImageSide - width);
            for (int a = pos; a < pos + width; ++a)
                for (int b = 0; b < kImageSide; ++b) vertical ? set(a, b) : set(b, a);
            break;
        }
    }
    return img;
}

/// Balanced dataset: image i has class i mod 4. Identical seed gives a
/// bitwise-identical dataset.
inline ToyDataset make_dataset(std::size_t count, std::uint64_t seed) {
    if (count == 0) throw Error(ErrorKind::InvalidConfig, "dataset size must be positive");
    ToyDataset ds;
    ds.seed = seed;
    ds.images.reserve(count);
    ds.labels.reserve(count);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % kNumClasses);
        ds.images.push_back(draw_shape(static_cast<ShapeClass>(label), rng));
        ds.labels.push_back(label);
    }
    return ds;
}

}  // namespace diffes::toydiff
