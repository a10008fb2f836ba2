#pragma once

// Image metrics used as search fitness and for final evaluation, plus the
// cache of dense-model reference samples they are measured against.
//
// Reference cache layout (little-endian):
//   magic "DFESREFC", u32 version, u32 model checksum, i32 T, i32 num_steps,
//   f64 eta, i32 K, i32 pixels, u64[K] seeds, i32[K] labels, f32[K * pixels]

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/io.hpp"
#include "diffes/toydiff/checkpoint.hpp"
#include "diffes/toydiff/sampler.hpp"

// Metrics must be exactly symmetric in their arguments; fused multiply-adds
// would round a*a + b*b differently from b*b + a*a.
#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC push_options
#pragma GCC optimize("fp-contract=off")
#endif

namespace diffes::fitness {

enum class MetricId { SsimVsDense, MseVsDense, EnergyDistance };

inline std::string to_string(MetricId m) {
    switch (m) {
    case MetricId::SsimVsDense: return "ssim_vs_dense";
    case MetricId::MseVsDense: return "mse_vs_dense";
    case MetricId::EnergyDistance: return "energy_distance";
    }
    return "?";
}

inline MetricId parse_metric(const std::string& s) {
    if (s == "ssim_vs_dense") return MetricId::SsimVsDense;
    if (s == "mse_vs_dense") return MetricId::MseVsDense;
    if (s == "energy_distance") return MetricId::EnergyDistance;
    throw Error(ErrorKind::InvalidConfig, "unknown metric '" + s + "'");
}

inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimSigma = 1.5;

/// Normalized 7x7 Gaussian window, sigma 1.5.
inline const std::array<double, kSsimWindow * kSsimWindow>& ssim_window() {
    static const auto w = [] {
        std::array<double, kSsimWindow * kSsimWindow> k{};
        const int r = kSsimWindow / 2;
        double sum = 0.0;
        for (int y = 0; y < kSsimWindow; ++y)
            for (int x = 0; x < kSsimWindow; ++x) {
                const double v = std::exp(-((x - r) * (x - r) + (y - r) * (y - r)) / (2.0 * kSsimSigma * kSsimSigma));
                k[static_cast<std::size_t>(y * kSsimWindow + x)] = v;
                sum += v;
            }
        for (auto& v : k) v /= sum;
        return k;
    }();
    return w;
}

/// Mean SSIM over all valid 7x7 windows of two side x side images with
/// values in [-1, 1] (mapped to [0, 1], dynamic range 1).
inline double ssim(std::span<const float> a, std::span<const float> b, int side = toydiff::kImageSide) {
    if (a.size() != b.size() || static_cast<int>(a.size()) != side * side)
        throw Error(ErrorKind::InvalidShape, "ssim needs two images of equal shape");
    if (side < kSsimWindow) throw Error(ErrorKind::InvalidShape, "image smaller than the SSIM window");
#ifdef __clang__
#pragma clang fp contract(off)
#endif
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto& w = ssim_window();
    auto px = [side](std::span<const float> img, int x, int y) {
        return (static_cast<double>(img[static_cast<std::size_t>(y * side + x)]) + 1.0) * 0.5;
    };
    const int n = side - kSsimWindow + 1;
    double total = 0.0;
    for (int oy = 0; oy < n; ++oy)
        for (int ox = 0; ox < n; ++ox) {
            double mu_a = 0.0, mu_b = 0.0, e_aa = 0.0, e_bb = 0.0, e_ab = 0.0;
            for (int y = 0; y < kSsimWindow; ++y)
                for (int x = 0; x < kSsimWindow; ++x) {
                    const double k = w[static_cast<std::size_t>(y * kSsimWindow + x)];
                    const double va = px(a, ox + x, oy + y), vb = px(b, ox + x, oy + y);
                    mu_a += k * va;
                    mu_b += k * vb;
                    e_aa += k * (va * va);
                    e_bb += k * (vb * vb);
                    e_ab += k * (va * vb);
                }
            const double var_a = e_aa - mu_a * mu_a, var_b = e_bb - mu_b * mu_b, cov = e_ab - mu_a * mu_b;
            total += ((2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)) /
                     ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    return total / (n * n);
}

inline double mse(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size() || a.empty()) throw Error(ErrorKind::InvalidShape, "mse needs two non-empty images of equal shape");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

/// A set of equally sized flattened images stored back to back.
struct SampleSet {
    std::span<const float> data;
    std::size_t dim = 0;

    std::size_t count() const { return dim == 0 ? 0 : data.size() / dim; }
    std::span<const float> at(std::size_t i) const { return data.subspan(i * dim, dim); }
};

inline double mean_pair_distance(const SampleSet& a, const SampleSet& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.count(); ++i)
        for (std::size_t j = 0; j < b.count(); ++j) {
            const auto x = a.at(i), y = b.at(j);
            double d = 0.0;
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double v = static_cast<double>(x[k]) - y[k];
                d += v * v;
            }
            s += std::sqrt(d);
        }
    return s / static_cast<double>(a.count() * b.count());
}

/// 2 E|a - b| - E|a - a'| - E|b - b'| with all pairs (including i = j) in
/// each mean, which keeps the value non-negative for finite samples.
inline double energy_distance(const SampleSet& a, const SampleSet& b) {
    if (a.count() == 0 || b.count() == 0) throw Error(ErrorKind::InvalidInput, "energy distance needs non-empty sets");
    if (a.dim != b.dim || a.data.size() % a.dim != 0 || b.data.size() % b.dim != 0)
        throw Error(ErrorKind::InvalidShape, "sample sets differ in dimension");
    const double v = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    return std::max(0.0, v);
}

/// Fixed (seed, label) pairs shared by every fitness evaluation.
struct FixedBatch {
    std::vector<std::uint64_t> seeds;
    std::vector<int> labels;

    int size() const noexcept { return static_cast<int>(seeds.size()); }
    friend bool operator==(const FixedBatch&, const FixedBatch&) = default;
};

inline FixedBatch make_fixed_batch(int k, std::uint64_t seed, int classes = toydiff::kNumClasses) {
    if (k < 1) throw Error(ErrorKind::InvalidConfig, "fitness sample count must be positive");
    FixedBatch fb;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < k; ++i) {
        fb.seeds.push_back(rng());
        fb.labels.push_back(i % classes);
    }
    return fb;
}

/// Dense-model samples for a fixed batch, keyed by the backbone checksum and
/// sampler settings. `reference_set` holds the distribution that
/// energy_distance compares against (e.g. training images); it is not
/// persisted.
struct ReferenceCache {
    std::uint32_t model_checksum = 0;
    int T = 0;
    toydiff::SamplerConfig sampler;
    FixedBatch batch;
    int pixels = 0;
    std::vector<float> images;
    std::vector<float> reference_set;

    bool matches(std::uint32_t checksum, int t, const toydiff::SamplerConfig& cfg, const FixedBatch& fb) const {
        return checksum == model_checksum && t == T && cfg.num_steps == sampler.num_steps && cfg.eta == sampler.eta &&
               fb == batch;
    }
};

inline ReferenceCache build_reference(const toydiff::DenoiserModel& model, const toydiff::NoiseSchedule& sched,
                                      const toydiff::SamplerConfig& cfg, const FixedBatch& fb) {
    ReferenceCache ref;
    ref.model_checksum = toydiff::model_checksum(model);
    ref.T = sched.T;
    ref.sampler = cfg;
    ref.batch = fb;
    ref.pixels = model.config().pixels();
    ref.images = toydiff::DdimSampler(sched, cfg).sample_batch(model, fb.seeds, fb.labels, toydiff::dense_plan);
    return ref;
}

inline void save_reference(const ReferenceCache& r, const std::filesystem::path& path) {
    io::Writer w(path);
    w.put_magic("DFESREFC");
    w.put<std::uint32_t>(1);
    w.put<std::uint32_t>(r.model_checksum);
    w.put<std::int32_t>(r.T);
    w.put<std::int32_t>(r.sampler.num_steps);
    w.put<double>(r.sampler.eta);
    w.put<std::int32_t>(r.batch.size());
    w.put<std::int32_t>(r.pixels);
    w.put_array<std::uint64_t>(r.batch.seeds);
    w.put_array<int>(r.batch.labels);
    w.put_array<float>(r.images);
    w.close();
}

inline ReferenceCache load_reference(const std::filesystem::path& path) {
    io::Reader in(path);
    in.expect_magic("DFESREFC");
    if (in.get<std::uint32_t>() != 1) throw Error(ErrorKind::CorruptFile, "unsupported reference cache version");
    ReferenceCache r;
    r.model_checksum = in.get<std::uint32_t>();
    r.T = in.get<std::int32_t>();
    r.sampler.num_steps = in.get<std::int32_t>();
    r.sampler.eta = in.get<double>();
    const int k = in.get<std::int32_t>();
    r.pixels = in.get<std::int32_t>();
    if (k < 0 || k > (1 << 20) || r.pixels <= 0 || r.pixels > (1 << 20)) throw Error(ErrorKind::CorruptFile, "bad reference header");
    r.batch.seeds = in.get_array<std::uint64_t>(static_cast<std::size_t>(k));
    r.batch.labels = in.get_array<int>(static_cast<std::size_t>(k));
    r.images = in.get_array<float>(static_cast<std::size_t>(k) * static_cast<std::size_t>(r.pixels));
    return r;
}

/// Mean metric of `images` (K x pixels, clipped) against the reference;
/// oriented so that higher is better (mse and energy distance are negated).
inline double fitness_eval(MetricId metric, std::span<const float> images, const ReferenceCache* ref) {
    if (!ref) throw Error(ErrorKind::MissingReference, "no reference cache for metric " + to_string(metric));
    const auto px = static_cast<std::size_t>(ref->pixels);
    if (px == 0 || images.empty() || images.size() % px != 0) throw Error(ErrorKind::InvalidShape, "sample batch shape mismatch");
    const std::size_t k = images.size() / px;
    if (metric == MetricId::EnergyDistance) {
        if (ref->reference_set.empty()) throw Error(ErrorKind::MissingReference, "energy distance needs a reference sample set");
        return -energy_distance({images, px}, {ref->reference_set, px});
    }
    if (ref->images.size() != images.size())
        throw Error(ErrorKind::MissingReference, "reference cache does not cover this batch");
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(px))));
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const auto a = images.subspan(i * px, px);
        const auto b = std::span<const float>(ref->images).subspan(i * px, px);
        s += metric == MetricId::SsimVsDense ? ssim(a, b, side) : -mse(a, b);
    }
    return s / static_cast<double>(k);
}

}  // namespace diffes::fitness

#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC pop_options
#endif
