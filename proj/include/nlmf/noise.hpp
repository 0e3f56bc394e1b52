#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nlmf/rng.hpp"
#include "nlmf/tensor.hpp"

namespace nlmf {

// One calibration point of a sensor's noise level function sigma^2(x) = a*x + b,
// in black-level-subtracted, saturation-normalized [0, 1] intensity units.
struct NoisePoint {
    double iso = 0;
    double a = 0; // shot coefficient
    double b = 0; // readout variance
};

struct NoiseProfile {
    std::string sensor_id;
    std::vector<NoisePoint> points; // sorted by ISO, unique ISO values

    void validate() const;
    double min_iso() const { return points.front().iso; }
    double max_iso() const { return points.back().iso; }
};

NoiseProfile noise_profile_from_json(const std::string& json_text);
std::string noise_profile_to_json(const NoiseProfile& p);
NoiseProfile load_noise_profile(const std::string& path);
void save_noise_profile(const std::string& path, const NoiseProfile& p);
// Accepts a single JSON file or a directory of them.
std::vector<NoiseProfile> load_noise_profiles(const std::string& path);

// Draw x_noisy ~ a * Poisson(x/a) + N(0, b) per pixel (pure Gaussian when
// a = 0; the Poisson mean clamps negative intensities at 0). The output is
// deliberately not clipped to [0, 1].
Tensor sample_poisson_gaussian(const Tensor& clean, double a, double b, Rng& rng);

struct NlfBin {
    double mean = 0;          // mean intensity of the bin
    double variance = 0;      // measured noise variance
    std::int64_t count = 0;   // samples (or blocks) behind the measurement
    bool used = false;        // survived outlier/support filtering
};

struct NlfFit {
    double a = 0;
    double b = 0;
    std::vector<NlfBin> bins;
};

// Estimate (a, b) from a clean/noisy pair: bin residual variances by clean
// intensity, drop thin and near-saturation bins, weighted least squares.
NlfFit estimate_nlf_paired(const Tensor& clean, const Tensor& noisy, int n_bins);

// Single-image estimate: 8x8 block statistics of the high-frequency residual,
// low-quantile flat-block selection per intensity bin, then the same line fit.
NlfFit estimate_nlf_single(const Tensor& noisy, int n_bins);

// Piecewise-linear interpolation of log a and log b against log ISO; a zero
// coefficient at either bracket falls back to linear interpolation for that
// coefficient. No extrapolation outside the profile's ISO range.
std::pair<double, double> interpolate_iso(const NoiseProfile& profile, double iso);

// Per-pixel noise standard deviation sqrt(a * max(x, 0) + b) computed from the
// noisy intensities.
Tensor build_noise_map(const Tensor& noisy, double a, double b);

struct NoiseDraw {
    std::string sensor_id;
    double iso = 0;
    double a = 0;
    double b = 0;
};

// Uniform sensor choice, log-uniform ISO within the sensor's range.
NoiseDraw sample_training_noise(const std::vector<NoiseProfile>& profiles, Rng& rng);

} // namespace nlmf
