#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "diffes/fitness.hpp"
#include "test_util.hpp"

using namespace diffes;
using namespace diffes::fitness;

namespace {

std::vector<float> random_image(std::mt19937_64& rng, int side = 16) {
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> img(static_cast<std::size_t>(side * side));
    for (auto& v : img) v = u(rng);
    return img;
}

// SSIM written from the textbook definition: separable Gaussian built
// from 1-D taps, moments as weighted sums over each window.
double ssim_oracle(const std::vector<float>& a, const std::vector<float>& b, int side) {
    double g[7], gs = 0.0;
    for (int i = 0; i < 7; ++i) gs += g[i] = std::exp(-(i - 3) * (i - 3) / 4.5);
    for (double& v : g) v /= gs;
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    const int n = side - 6;
    for (int oy = 0; oy < n; ++oy)
        for (int ox = 0; ox < n; ++ox) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int y = 0; y < 7; ++y)
                for (int x = 0; x < 7; ++x) {
                    const double w = g[y] * g[x];
                    const double va = (a[static_cast<std::size_t>((oy + y) * side + ox + x)] + 1.0) / 2.0;
                    const double vb = (b[static_cast<std::size_t>((oy + y) * side + ox + x)] + 1.0) / 2.0;
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cab = sab - ma * mb;
            total += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    return total / (n * n);
}

}  // namespace

TEST(SsimWindow, NormalizedSymmetricGaussian) {
    const auto& w = ssim_window();
    double sum = 0.0;
    for (double v : w) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-15);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
            EXPECT_DOUBLE_EQ(w[static_cast<std::size_t>(y * 7 + x)], w[static_cast<std::size_t>(x * 7 + y)]);
            EXPECT_DOUBLE_EQ(w[static_cast<std::size_t>(y * 7 + x)], w[static_cast<std::size_t>((6 - y) * 7 + x)]);
        }
    EXPECT_NEAR(w[0] / w[24], std::exp(-4.0), 1e-14);
    EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), 24);
}

TEST(Ssim, SelfIdentityAndSymmetryAreExact) {
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 100; ++rep) {
        const auto a = random_image(rng), b = random_image(rng);
        EXPECT_EQ(ssim(a, a), 1.0);
        EXPECT_EQ(ssim(a, b), ssim(b, a));
    }
}

TEST(Ssim, MatchesTextbookOracle) {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 20; ++rep) {
        const auto a = random_image(rng);
        auto b = a;
        for (auto& v : b) v = std::clamp(v + 0.3f * (random_image(rng, 1)[0]), -1.0f, 1.0f);
        EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b, 16), 1e-12);
    }
    const auto a = random_image(rng, 9), b = random_image(rng, 9);
    EXPECT_NEAR(ssim(a, b, 9), ssim_oracle(a, b, 9), 1e-12);
}

TEST(Ssim, HandComputedCases) {
    // constant images only have a luminance term
    const std::vector<float> zero(256, 0.0f), one(256, 1.0f);
    EXPECT_EQ(ssim(zero, zero), 1.0);
    EXPECT_NEAR(ssim(zero, one), (2 * 0.5 * 1.0 + 1e-4) / (0.25 + 1.0 + 1e-4), 1e-13);  // 49-term window sums
    // negating a noisy image flips the structure term
    std::mt19937_64 rng(3);
    const auto a = random_image(rng);
    auto b = a;
    for (auto& v : b) v = -v;
    EXPECT_LT(ssim(a, b), -0.5);
    EXPECT_GE(ssim(a, b), -1.0);
}

TEST(Ssim, RejectsBadShapes) {
    const std::vector<float> a(256), b(255), tiny(25);
    EXPECT_THROW(ssim(a, b), Error);
    EXPECT_THROW(ssim(tiny, tiny, 5), Error);
}

TEST(Mse, HandComputed) {
    const std::vector<float> a{0.0f, 1.0f, -1.0f, 0.5f}, b{0.0f, 0.0f, 1.0f, 0.5f};
    EXPECT_DOUBLE_EQ(mse(a, b), (1.0 + 4.0) / 4.0);
    EXPECT_EQ(mse(a, a), 0.0);
    EXPECT_THROW(mse(a, std::vector<float>{1.0f}), Error);
}

TEST(EnergyDistance, HandComputedCases) {
    const std::vector<float> a{0.0f, 2.0f}, b{1.0f}, c{0.0f}, d{3.0f};
    // point masses: 2|x - y|
    EXPECT_DOUBLE_EQ(energy_distance({c, 1}, {d, 1}), 6.0);
    // E|a-b| = 1, E|a-a'| = 1, E|b-b'| = 0
    EXPECT_DOUBLE_EQ(energy_distance({a, 1}, {b, 1}), 1.0);
    EXPECT_EQ(energy_distance({a, 1}, {a, 1}), 0.0);
    // 2-D: {(0,0)} vs {(3,4)}
    const std::vector<float> p{0.0f, 0.0f}, q{3.0f, 4.0f};
    EXPECT_DOUBLE_EQ(energy_distance({p, 2}, {q, 2}), 10.0);
}

TEST(EnergyDistance, SymmetricNonNegativeAndSeparating) {
    std::mt19937_64 rng(4);
    std::normal_distribution<float> nd;
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<float> x(40 * 8), y(30 * 8);
        for (auto& v : x) v = nd(rng);
        for (auto& v : y) v = nd(rng) + (rep % 2 ? 2.0f : 0.0f);
        const double xy = energy_distance({x, 8}, {y, 8}), yx = energy_distance({y, 8}, {x, 8});
        EXPECT_NEAR(xy, yx, 1e-12);
        EXPECT_GE(xy, 0.0);
        if (rep % 2) {
            EXPECT_GT(xy, 1.0);
        }
    }
    const std::vector<float> e;
    EXPECT_THROW(energy_distance({e, 8}, {e, 8}), Error);
    const std::vector<float> x8(8), x4(4);
    EXPECT_THROW(energy_distance({x8, 8}, {x4, 4}), Error);
}

TEST(FixedBatch, DeterministicWithCyclingLabels) {
    const auto a = make_fixed_batch(10, 3), b = make_fixed_batch(10, 3), c = make_fixed_batch(10, 4);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.seeds, c.seeds);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.labels[static_cast<std::size_t>(i)], i % 4);
    EXPECT_THROW(make_fixed_batch(0, 1), Error);
}

TEST(FitnessEval, MetricsAgainstTheReference) {
    std::mt19937_64 rng(5);
    ReferenceCache ref;
    ref.pixels = 256;
    std::vector<float> imgs;
    for (int i = 0; i < 3; ++i) {
        const auto r = random_image(rng), x = random_image(rng);
        ref.images.insert(ref.images.end(), r.begin(), r.end());
        imgs.insert(imgs.end(), x.begin(), x.end());
    }
    auto img = [&](const std::vector<float>& v, int i) { return std::span<const float>(v).subspan(static_cast<std::size_t>(i * 256), 256); };
    double s = 0.0, m = 0.0;
    for (int i = 0; i < 3; ++i) {
        s += ssim(img(imgs, i), img(ref.images, i));
        m += mse(img(imgs, i), img(ref.images, i));
    }
    EXPECT_DOUBLE_EQ(fitness_eval(MetricId::SsimVsDense, imgs, &ref), s / 3);
    EXPECT_DOUBLE_EQ(fitness_eval(MetricId::MseVsDense, imgs, &ref), -m / 3);
    EXPECT_EQ(fitness_eval(MetricId::SsimVsDense, ref.images, &ref), 1.0);

    auto expect_missing = [&](MetricId id, std::span<const float> x, const ReferenceCache* r) {
        try {
            fitness_eval(id, x, r);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::MissingReference);
        }
    };
    expect_missing(MetricId::SsimVsDense, imgs, nullptr);
    expect_missing(MetricId::EnergyDistance, imgs, &ref);
    expect_missing(MetricId::SsimVsDense, std::span<const float>(imgs).first(512), &ref);
    ref.reference_set = ref.images;
    EXPECT_DOUBLE_EQ(fitness_eval(MetricId::EnergyDistance, imgs, &ref), -energy_distance({imgs, 256}, {ref.images, 256}));
    EXPECT_THROW(parse_metric("fid"), Error);
    EXPECT_EQ(parse_metric(to_string(MetricId::MseVsDense)), MetricId::MseVsDense);
}

TEST(ReferenceCache, BuildsDenseSamplesAndRoundTrips) {
    const auto& m = test::trained_model();
    const toydiff::SamplerConfig cfg{};
    const auto fb = make_fixed_batch(3, 9);
    const auto ref = build_reference(m, test::default_schedule(), cfg, fb);
    ASSERT_EQ(ref.images.size(), 3u * 256u);
    for (int i = 0; i < 3; ++i) {
        toydiff::SamplerConfig one = cfg;
        one.seed = fb.seeds[static_cast<std::size_t>(i)];
        const auto x = toydiff::sample(m, one, test::default_schedule(), fb.labels[static_cast<std::size_t>(i)]);
        EXPECT_TRUE(std::equal(x.begin(), x.end(), ref.images.begin() + i * 256));
    }
    const auto path = std::filesystem::temp_directory_path() / ("diffes_test_ref_" + std::to_string(::getpid()) + ".bin");
    save_reference(ref, path);
    const auto back = load_reference(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.images, ref.images);
    EXPECT_TRUE(back.matches(toydiff::model_checksum(m), 1000, cfg, fb));
    EXPECT_FALSE(back.matches(toydiff::model_checksum(m) ^ 1u, 1000, cfg, fb));
    EXPECT_FALSE(back.matches(toydiff::model_checksum(m), 1000, {10, 0.0, 0}, fb));
    EXPECT_FALSE(back.matches(toydiff::model_checksum(m), 1000, cfg, make_fixed_batch(3, 10)));
}
