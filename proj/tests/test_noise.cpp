#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "nlmf/errors.hpp"
#include "nlmf/noise.hpp"
#include "testutil.hpp"

using namespace nlmf;

namespace {

// Uniform ramp covering [0, 1] with n samples.
Tensor ramp_image(int n) {
    Tensor t(Shape{1, 1, 1, n});
    for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(i) / static_cast<float>(n - 1);
    return t;
}

struct Moments {
    double mean, var;
};

Moments sample_moments(double x, double a, double b, int n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor clean = Tensor::full(Shape{1, 1, 1, n}, static_cast<float>(x));
    Tensor noisy = sample_poisson_gaussian(clean, a, b, rng);
    double s = 0, s2 = 0;
    for (float v : noisy.data) {
        s += v;
        s2 += static_cast<double>(v) * v;
    }
    const double mean = s / n;
    return {mean, (s2 - n * mean * mean) / (n - 1)};
}

NoiseProfile two_point_profile() {
    NoiseProfile p;
    p.sensor_id = "synthetic";
    p.points = {{100, 1e-3, 1e-5}, {400, 4e-3, 1.6e-4}};
    return p;
}

} // namespace

TEST_CASE("sampler with a = b = 0 is the identity") {
    Rng rng(1);
    Tensor clean = ramp_image(1000);
    Tensor noisy = sample_poisson_gaussian(clean, 0.0, 0.0, rng);
    CHECK(max_abs_diff(noisy, clean) == 0.0f);
}

TEST_CASE("sampler rejects negative coefficients") {
    Rng rng(2);
    Tensor clean = ramp_image(10);
    CHECK_THROWS_AS(sample_poisson_gaussian(clean, -1e-3, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_poisson_gaussian(clean, 0.0, -1e-6, rng), std::invalid_argument);
}

TEST_CASE("sampler matches the compound mean and variance") {
    const double a = 0.01, b = 1e-4;
    const int n = 1000000;
    int point = 0;
    for (double x : {0.0, 0.25, 0.5, 1.0}) {
        const Moments m = sample_moments(x, a, b, n, 100 + static_cast<std::uint64_t>(point++));
        const double want_var = a * x + b;
        CHECK(std::abs(m.mean - x) < 3.0 * std::sqrt(want_var / n));
        CHECK(std::abs(m.var - want_var) / want_var < 0.02);
    }
}

TEST_CASE("at zero intensity only the readout term remains") {
    const Moments m = sample_moments(0.0, 0.01, 1e-4, 1000000, 7);
    CHECK(std::abs(m.var - 1e-4) / 1e-4 < 0.02);
}

TEST_CASE("paired estimation recovers pure gaussian noise on a ramp") {
    const double b = (10.0 / 255.0) * (10.0 / 255.0);
    Rng rng(11);
    Tensor clean = ramp_image(1000000);
    Tensor noisy = sample_poisson_gaussian(clean, 0.0, b, rng);
    NlfFit fit = estimate_nlf_paired(clean, noisy, 16);
    CHECK(std::abs(fit.a) <= 0.15 * b);
    CHECK(std::abs(fit.b - b) / b < 0.10);
}

TEST_CASE("paired estimation recovers poisson-gaussian coefficients on a ramp") {
    const double a = 0.01, b = 1e-4;
    Rng rng(12);
    Tensor clean = ramp_image(1000000);
    Tensor noisy = sample_poisson_gaussian(clean, a, b, rng);
    NlfFit fit = estimate_nlf_paired(clean, noisy, 16);
    CHECK(std::abs(fit.a - a) / a < 0.05);
    CHECK(std::abs(fit.b - b) / b < 0.20);
}

TEST_CASE("paired estimation of a zero residual gives a = b = 0") {
    Tensor clean = ramp_image(100000);
    NlfFit fit = estimate_nlf_paired(clean, clean, 8);
    CHECK(fit.a == 0.0);
    CHECK(fit.b == 0.0);
}

TEST_CASE("paired estimation round-trips a coefficient grid") {
    int seed = 50;
    for (double a : {0.0, 1e-3, 1e-2})
        for (double b : {1e-5, 1e-4, 1e-3}) {
            Rng rng(static_cast<std::uint64_t>(seed++));
            Tensor clean = ramp_image(1000000);
            Tensor noisy = sample_poisson_gaussian(clean, a, b, rng);
            NlfFit fit = estimate_nlf_paired(clean, noisy, 16);
            if (a > 0) CHECK(std::abs(fit.a - a) / a < 0.05);
            // the readout term is only identifiable where it is not swamped
            // by shot noise in the lowest bins
            if (b >= a * 0.04) CHECK(std::abs(fit.b - b) / b < 0.20);
        }
}

TEST_CASE("paired estimation reports failure without enough support") {
    Tensor clean = Tensor::full(Shape{1, 1, 8, 8}, 0.5f); // a single thin bin
    CHECK_THROWS_AS(estimate_nlf_paired(clean, clean, 16), NumericError);
}

TEST_CASE("single-image estimation recovers readout noise on a flat field") {
    const double sigma = 20.0 / 255.0;
    Rng rng(13);
    Tensor clean = Tensor::full(Shape{1, 1, 512, 512}, 0.5f);
    Tensor noisy = sample_poisson_gaussian(clean, 0.0, sigma * sigma, rng);
    NlfFit fit = estimate_nlf_single(noisy, 16);
    CHECK(fit.a == 0.0); // degenerate intensity spread falls back to a flat line
    CHECK(std::abs(fit.b - sigma * sigma) / (sigma * sigma) < 0.20);
}

TEST_CASE("single-image estimation tracks the noise curve on textured content") {
    const double a = 0.01, b = 1e-4;
    const int H = 512, W = 512;
    Tensor clean(Shape{1, 1, H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double v = 0.05 + 0.85 * static_cast<double>(i) / (H - 1);
            if (j >= W / 2) v += 0.04 * std::sin(0.9 * j) * std::sin(1.3 * i);
            clean.at4(0, 0, i, j) = static_cast<float>(v);
        }
    Rng rng(14);
    Tensor noisy = sample_poisson_gaussian(clean, a, b, rng);
    NlfFit fit = estimate_nlf_single(noisy, 12);
    for (const NlfBin& bin : fit.bins) {
        if (!bin.used) continue;
        const double want = std::sqrt(a * bin.mean + b);
        const double got = std::sqrt(std::max(fit.a * bin.mean + fit.b, 0.0));
        CHECK(std::abs(got - want) / want < 0.25);
    }
}

TEST_CASE("single-image estimation of a noiseless gradient is zero") {
    const int H = 256, W = 256;
    Tensor clean(Shape{1, 1, H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            clean.at4(0, 0, i, j) = 0.2f + 0.5f * static_cast<float>(i) / (H - 1);
    NlfFit fit = estimate_nlf_single(clean, 8);
    CHECK(std::abs(fit.a) < 1e-6);
    CHECK(std::abs(fit.b) < 1e-6);
}

TEST_CASE("single-image estimation needs a minimum image size") {
    CHECK_THROWS_AS(estimate_nlf_single(Tensor(Shape{1, 1, 32, 32}), 8), std::invalid_argument);
}

TEST_CASE("iso interpolation is exact at knots and log-linear between them") {
    const NoiseProfile p = two_point_profile();
    auto [a100, b100] = interpolate_iso(p, 100);
    CHECK(a100 == 1e-3);
    CHECK(b100 == 1e-5);
    auto [a200, b200] = interpolate_iso(p, 200);
    CHECK(a200 == doctest::Approx(2e-3).epsilon(1e-9));
    CHECK(b200 == doctest::Approx(4e-5).epsilon(1e-9));
    CHECK_THROWS_AS(interpolate_iso(p, 50), std::invalid_argument);
    CHECK_THROWS_AS(interpolate_iso(p, 800), std::invalid_argument);
}

TEST_CASE("iso interpolation with a zero coefficient falls back to linear") {
    NoiseProfile p;
    p.sensor_id = "lin";
    p.points = {{100, 0.0, 1e-5}, {400, 4e-3, 1.6e-4}};
    auto [a, b] = interpolate_iso(p, 200);
    CHECK(a == doctest::Approx(2e-3).epsilon(1e-9)); // linear in a
    CHECK(b == doctest::Approx(4e-5).epsilon(1e-9)); // still log-linear in b
}

TEST_CASE("single-point profiles only support their own iso") {
    NoiseProfile p;
    p.sensor_id = "one";
    p.points = {{320, 2e-3, 3e-5}};
    auto [a, b] = interpolate_iso(p, 320);
    CHECK(a == 2e-3);
    CHECK(b == 3e-5);
    CHECK_THROWS_AS(interpolate_iso(p, 321), std::invalid_argument);
}

TEST_CASE("iso interpolation is monotone between monotone knots") {
    const NoiseProfile p = two_point_profile();
    double prev_a = 0, prev_b = 0;
    for (int iso = 100; iso <= 400; iso += 10) {
        auto [a, b] = interpolate_iso(p, iso);
        CHECK(a >= prev_a);
        CHECK(b >= prev_b);
        prev_a = a;
        prev_b = b;
    }
}

TEST_CASE("noise map formula and clamping") {
    Tensor x(Shape{4}, {1.0f, 0.5f, 0.0f, -0.25f});
    Tensor m = build_noise_map(x, 0.01, 1e-4);
    CHECK(m.data[0] == doctest::Approx(std::sqrt(0.0101)));
    CHECK(m.data[1] == doctest::Approx(std::sqrt(0.0051)));
    CHECK(m.data[2] == doctest::Approx(0.01));
    CHECK(m.data[3] == doctest::Approx(0.01)); // negative intensities clamp to sqrt(b)

    Tensor flat = build_noise_map(x, 0.0, 4e-4);
    for (float v : flat.data) CHECK(v == doctest::Approx(0.02));

    Rng rng(15);
    Tensor r = testutil::rand_tensor<float>({1, 4, 16, 16}, rng, -0.2, 1.2);
    Tensor mm = build_noise_map(r, 0.02, 9e-4);
    for (float v : mm.data) CHECK(v >= std::sqrt(9e-4f) - 1e-7f);
}

TEST_CASE("training noise draws stay inside the sensor's range") {
    NoiseProfile p = two_point_profile();
    Rng rng(16);
    for (int i = 0; i < 200; ++i) {
        NoiseDraw d = sample_training_noise({p}, rng);
        CHECK(d.iso >= 100.0);
        CHECK(d.iso <= 400.0);
        CHECK(d.sensor_id == "synthetic");
    }

    NoiseProfile single;
    single.sensor_id = "one";
    single.points = {{320, 2e-3, 3e-5}};
    NoiseDraw d = sample_training_noise({single}, rng);
    CHECK(d.iso == 320.0);
    CHECK(d.a == 2e-3);
}

TEST_CASE("sensor choice is uniform") {
    NoiseProfile p1 = two_point_profile();
    NoiseProfile p2 = p1;
    p2.sensor_id = "other";
    Rng rng(17);
    int first = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        if (sample_training_noise({p1, p2}, rng).sensor_id == "synthetic") ++first;
    // binomial 3-sigma band around n/2
    const double sigma = std::sqrt(n * 0.25);
    CHECK(std::abs(first - n / 2) < 3.0 * sigma);
}

TEST_CASE("profile json round trip and validation") {
    const NoiseProfile p = two_point_profile();
    NoiseProfile back = noise_profile_from_json(noise_profile_to_json(p));
    CHECK(back.sensor_id == p.sensor_id);
    REQUIRE(back.points.size() == 2);
    CHECK(back.points[1].a == 4e-3);

    CHECK_THROWS_AS(noise_profile_from_json("{\"sensor_id\": \"x\", \"points\": []}"), DataError);
    CHECK_THROWS_AS(
        noise_profile_from_json("{\"sensor_id\": \"x\", \"points\": [{\"iso\": 100, \"a\": -1, \"b\": 1}]}"),
        DataError);
    CHECK_THROWS_AS(noise_profile_from_json("{\"sensor_id\": \"x\", \"points\": [{\"iso\": 400, \"a\": 1e-3, "
                                            "\"b\": 1e-5}, {\"iso\": 100, \"a\": 1e-3, \"b\": 1e-5}]}"),
                    DataError);
}
