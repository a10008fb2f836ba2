#pragma once

// Stage partition of the timestep axis, per-stage calibration sets and
// layer-input capture.
//
// Calibration file layout (little-endian):
//   magic "DFESCALB", u32 version, i32 stage, i32 size, u64 seed, i32 pixels
//   i32[size] timesteps, i32[size] labels, f32[size * pixels] latents

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/io.hpp"
#include "diffes/linalg.hpp"
#include "diffes/toydiff/dataset.hpp"
#include "diffes/toydiff/model.hpp"
#include "diffes/toydiff/schedule.hpp"

namespace diffes::calib {

struct Interval {
    int lo = 0;  // inclusive
    int hi = 0;  // inclusive
    int length() const noexcept { return hi - lo + 1; }
    bool contains(int t) const noexcept { return t >= lo && t <= hi; }
};

/// n equal-length intervals covering [1, T]. Stage 0 holds the highest
/// timesteps (sampling starts there); when n does not divide T the first
/// T % n stages are one step longer.
class StagePartition {
public:
    StagePartition() = default;
    StagePartition(int T, int n) : T_(T) {
        if (n < 1 || T < n) throw Error(ErrorKind::InvalidConfig, "stage count must lie in [1, T]");
        const int base = T / n, extra = T % n;
        int hi = T;
        for (int s = 0; s < n; ++s) {
            const int len = base + (s < extra ? 1 : 0);
            intervals_.push_back({hi - len + 1, hi});
            hi -= len;
        }
    }

    int stages() const noexcept { return static_cast<int>(intervals_.size()); }
    int T() const noexcept { return T_; }
    const Interval& interval(int stage) const { return intervals_.at(static_cast<std::size_t>(stage)); }
    const std::vector<Interval>& intervals() const noexcept { return intervals_; }

    int stage_of(int t) const {
        if (t < 1 || t > T_) throw Error(ErrorKind::InvalidTimestep, "timestep " + std::to_string(t) + " outside [1, T]");
        for (int s = 0; s < stages(); ++s)
            if (intervals_[static_cast<std::size_t>(s)].contains(t)) return s;
        throw Error(ErrorKind::InvalidTimestep, "timestep not covered by partition");
    }

    /// Stage of every sampler step, given the sampler's timestep sequence.
    /// Throws unless each stage receives the same number of steps.
    std::vector<int> step_stages(std::span<const int> timesteps) const {
        std::vector<int> out;
        std::vector<int> count(static_cast<std::size_t>(stages()), 0);
        for (int t : timesteps) {
            out.push_back(stage_of(t));
            ++count[static_cast<std::size_t>(out.back())];
        }
        for (int c : count)
            if (c != count.front())
                throw Error(ErrorKind::InvalidConfig, "sampling steps do not divide evenly into the stages");
        return out;
    }

private:
    int T_ = 0;
    std::vector<Interval> intervals_;
};

inline constexpr int kDefaultCalibrationSize = 1024;

struct CalibrationSet {
    int stage = 0;
    std::uint64_t seed = 0;
    int pixels = 0;
    std::vector<int> timesteps;
    std::vector<int> labels;
    std::vector<float> latents;  // size x pixels

    int size() const noexcept { return static_cast<int>(timesteps.size()); }
    std::span<const float> latent(int i) const {
        return std::span<const float>(latents).subspan(static_cast<std::size_t>(i * pixels), static_cast<std::size_t>(pixels));
    }
    friend bool operator==(const CalibrationSet&, const CalibrationSet&) = default;
};

/// Per-stage generator seed so that stages drawn from one base seed are
/// independent of each other.
inline std::uint64_t stage_seed(std::uint64_t seed, int stage) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stage), 0xCA11B0u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// One (image, t, noise) draw per sample: the image is picked uniformly from
/// the dataset and t uniformly from the stage interval.
inline CalibrationSet build_stage_calibration(const toydiff::ToyDataset& data, int stage, const StagePartition& part,
                                              const toydiff::NoiseSchedule& sched, int size, std::uint64_t seed) {
    if (data.empty()) throw Error(ErrorKind::InvalidConfig, "calibration needs a non-empty dataset");
    if (size < 1) throw Error(ErrorKind::InvalidConfig, "calibration size must be positive");
    if (part.T() != sched.T) throw Error(ErrorKind::InvalidConfig, "partition and schedule disagree on T");
    const Interval iv = part.interval(stage);
    CalibrationSet c;
    c.stage = stage;
    c.seed = seed;
    c.pixels = static_cast<int>(data.images.front().size());
    std::mt19937_64 rng(stage_seed(seed, stage));
    std::uniform_int_distribution<std::size_t> pick_image(0, data.size() - 1);
    std::uniform_int_distribution<int> pick_t(iv.lo, iv.hi);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> noise(static_cast<std::size_t>(c.pixels));
    c.latents.resize(static_cast<std::size_t>(size) * noise.size());
    for (int i = 0; i < size; ++i) {
        const std::size_t idx = pick_image(rng);
        const int t = pick_t(rng);
        for (auto& v : noise) v = normal(rng);
        c.timesteps.push_back(t);
        c.labels.push_back(data.labels[idx]);
        toydiff::forward_noise(data.images[idx], t, noise, sched,
                               std::span<float>(c.latents).subspan(static_cast<std::size_t>(i) * noise.size(), noise.size()));
    }
    return c;
}

inline void save_calibration(const CalibrationSet& c, const std::filesystem::path& path) {
    io::Writer w(path);
    w.put_magic("DFESCALB");
    w.put<std::uint32_t>(1);
    w.put<std::int32_t>(c.stage);
    w.put<std::int32_t>(c.size());
    w.put<std::uint64_t>(c.seed);
    w.put<std::int32_t>(c.pixels);
    w.put_array<int>(c.timesteps);
    w.put_array<int>(c.labels);
    w.put_array<float>(c.latents);
    w.close();
}

inline CalibrationSet load_calibration(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("DFESCALB");
    if (r.get<std::uint32_t>() != 1) throw Error(ErrorKind::CorruptFile, "unsupported calibration version");
    CalibrationSet c;
    c.stage = r.get<std::int32_t>();
    const int size = r.get<std::int32_t>();
    c.seed = r.get<std::uint64_t>();
    c.pixels = r.get<std::int32_t>();
    if (size < 0 || c.pixels <= 0 || c.pixels > (1 << 20)) throw Error(ErrorKind::CorruptFile, "bad calibration header");
    c.timesteps = r.get_array<int>(static_cast<std::size_t>(size));
    c.labels = r.get_array<int>(static_cast<std::size_t>(size));
    c.latents = r.get_array<float>(static_cast<std::size_t>(size) * static_cast<std::size_t>(c.pixels));
    return c;
}

/// Input matrix X (d_in x columns) of every prunable layer. Each sample
/// contributes one column per token.
struct ActivationBundle {
    int stage = 0;
    int samples = 0;
    std::map<toydiff::LayerId, linalg::Matrix> inputs;

    const linalg::Matrix& at(toydiff::LayerId id) const {
        auto it = inputs.find(id);
        if (it == inputs.end()) throw Error(ErrorKind::InvalidInput, "no activations captured for " + id.name());
        return it->second;
    }
};

namespace detail {

// Copies a rows x dim token-major buffer into columns [col, col + rows) of x.
inline void scatter_columns(const std::vector<float>& src, int rows, int dim, linalg::Matrix& x, std::size_t col) {
    for (int r = 0; r < rows; ++r)
        for (int i = 0; i < dim; ++i)
            x(static_cast<std::size_t>(i), col + static_cast<std::size_t>(r)) = src[static_cast<std::size_t>(r * dim + i)];
}

}  // namespace detail

inline ActivationBundle capture_activations(const toydiff::DenoiserModel& model, const CalibrationSet& calib,
                                            int batch = 64) {
    using toydiff::LayerKind;
    const auto& cfg = model.config();
    if (calib.pixels != cfg.pixels()) throw Error(ErrorKind::InvalidShape, "calibration image size does not match model");
    const int T = cfg.tokens();
    const auto cols = static_cast<std::size_t>(calib.size()) * static_cast<std::size_t>(T);
    ActivationBundle bundle;
    bundle.stage = calib.stage;
    bundle.samples = calib.size();
    for (auto id : model.layer_ids()) {
        const int d_in = model.layer_weight(id).cols;
        bundle.inputs.emplace(id, linalg::Matrix(static_cast<std::size_t>(d_in), cols));
    }
    toydiff::ForwardCache cache;
    for (int start = 0; start < calib.size(); start += batch) {
        const int n = std::min(batch, calib.size() - start);
        const auto s = static_cast<std::size_t>(start);
        const auto images = std::span<const float>(calib.latents).subspan(s * static_cast<std::size_t>(calib.pixels),
                                                                           static_cast<std::size_t>(n * calib.pixels));
        model.forward(images, std::span<const int>(calib.timesteps).subspan(s, static_cast<std::size_t>(n)),
                      std::span<const int>(calib.labels).subspan(s, static_cast<std::size_t>(n)), nullptr, cache);
        const std::size_t col = s * static_cast<std::size_t>(T);
        const int rows = n * T;
        for (int b = 0; b < cfg.blocks; ++b) {
            const auto& bc = cache.blocks[static_cast<std::size_t>(b)];
            detail::scatter_columns(bc.a, rows, cfg.embed, bundle.inputs.at({b, LayerKind::AttnQkv}), col);
            detail::scatter_columns(bc.concat, rows, cfg.embed, bundle.inputs.at({b, LayerKind::AttnOut}), col);
            detail::scatter_columns(bc.m, rows, cfg.embed, bundle.inputs.at({b, LayerKind::MlpFc1}), col);
            detail::scatter_columns(bc.g, rows, cfg.hidden, bundle.inputs.at({b, LayerKind::MlpFc2}), col);
        }
    }
    return bundle;
}

}  // namespace diffes::calib
