#include "nlmf/noise.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nlmf/errors.hpp"

namespace nlmf {

namespace fs = std::filesystem;

void NoiseProfile::validate() const {
    if (sensor_id.empty()) throw DataError("noise profile: empty sensor_id");
    if (points.empty()) throw DataError("noise profile " + sensor_id + ": no points");
    for (std::size_t i = 0; i < points.size(); ++i) {
        const NoisePoint& p = points[i];
        if (!(p.iso > 0)) throw DataError("noise profile " + sensor_id + ": ISO must be positive");
        if (p.a < 0 || p.b < 0 || p.a + p.b <= 0)
            throw DataError("noise profile " + sensor_id + ": requires a, b >= 0 and a + b > 0");
        if (i > 0 && !(points[i - 1].iso < p.iso))
            throw DataError("noise profile " + sensor_id + ": points must be sorted by ISO with unique values");
    }
}

NoiseProfile noise_profile_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("noise profile: invalid JSON: ") + e.what());
    }
    NoiseProfile p;
    try {
        p.sensor_id = j.at("sensor_id").get<std::string>();
        for (const auto& jp : j.at("points"))
            p.points.push_back(NoisePoint{jp.at("iso").get<double>(), jp.at("a").get<double>(), jp.at("b").get<double>()});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("noise profile: bad field: ") + e.what());
    }
    p.validate();
    return p;
}

std::string noise_profile_to_json(const NoiseProfile& p) {
    nlohmann::json j;
    j["sensor_id"] = p.sensor_id;
    j["points"] = nlohmann::json::array();
    for (const NoisePoint& pt : p.points) j["points"].push_back({{"iso", pt.iso}, {"a", pt.a}, {"b", pt.b}});
    return j.dump(2);
}

NoiseProfile load_noise_profile(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open noise profile: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return noise_profile_from_json(ss.str());
}

void save_noise_profile(const std::string& path, const NoiseProfile& p) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write noise profile: " + path);
    os << noise_profile_to_json(p) << "\n";
}

std::vector<NoiseProfile> load_noise_profiles(const std::string& path) {
    std::vector<NoiseProfile> out;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) out.push_back(load_noise_profile(f.string()));
    } else {
        out.push_back(load_noise_profile(path));
    }
    if (out.empty()) throw DataError("no noise profiles found in " + path);
    return out;
}

Tensor sample_poisson_gaussian(const Tensor& clean, double a, double b, Rng& rng) {
    if (a < 0 || b < 0) throw std::invalid_argument("sample_poisson_gaussian: a and b must be >= 0");
    Tensor out(clean.shape);
    const double sigma_read = std::sqrt(b);
    for (std::int64_t i = 0; i < clean.size(); ++i) {
        const double x = static_cast<double>(clean.data[static_cast<std::size_t>(i)]);
        double v;
        if (a > 0) {
            v = a * static_cast<double>(rng.poisson(std::max(x, 0.0) / a));
        } else {
            v = x;
        }
        if (b > 0) v += sigma_read * rng.normal();
        out.data[static_cast<std::size_t>(i)] = static_cast<float>(v);
    }
    return out;
}

namespace {

struct BinAcc {
    double sum_x = 0;
    double sum_r = 0;
    double sum_r2 = 0;
    std::int64_t n = 0;
};

// Weighted least squares through (mean, variance) points; weights are the
// sample counts. A degenerate intensity spread cannot support a slope, so the
// fit falls back to a flat line through the weighted mean variance.
void fit_line(std::vector<NlfBin>& bins, double& a, double& b) {
    double sw = 0, sx = 0, sy = 0;
    for (const NlfBin& bin : bins)
        if (bin.used) {
            sw += static_cast<double>(bin.count);
            sx += static_cast<double>(bin.count) * bin.mean;
            sy += static_cast<double>(bin.count) * bin.variance;
        }
    const double mx = sx / sw, my = sy / sw;
    double sxx = 0, sxy = 0;
    for (const NlfBin& bin : bins)
        if (bin.used) {
            const double w = static_cast<double>(bin.count);
            sxx += w * (bin.mean - mx) * (bin.mean - mx);
            sxy += w * (bin.mean - mx) * (bin.variance - my);
        }
    const double spread = std::sqrt(sxx / sw);
    if (spread < 0.05) {
        a = 0;
        b = std::max(my, 0.0);
        return;
    }
    a = sxy / sxx;
    b = my - a * mx;
    if (b < 0) b = 0;
}

} // namespace

NlfFit estimate_nlf_paired(const Tensor& clean, const Tensor& noisy, int n_bins) {
    if (clean.shape != noisy.shape)
        throw std::invalid_argument("estimate_nlf_paired: clean " + shape_str(clean.shape) + " and noisy " +
                                    shape_str(noisy.shape) + " must have equal shapes");
    if (n_bins < 2) throw std::invalid_argument("estimate_nlf_paired: n_bins must be >= 2");

    std::vector<BinAcc> acc(static_cast<std::size_t>(n_bins));
    double max_intensity = 0;
    for (std::int64_t i = 0; i < clean.size(); ++i) {
        const double x = static_cast<double>(clean.data[static_cast<std::size_t>(i)]);
        const double r = static_cast<double>(noisy.data[static_cast<std::size_t>(i)]) - x;
        max_intensity = std::max(max_intensity, x);
        int bi = static_cast<int>(x * n_bins);
        if (bi < 0 || bi > n_bins - 1) continue; // outside the nominal [0, 1] range
        if (x == 1.0) bi = n_bins - 1;
        BinAcc& ba = acc[static_cast<std::size_t>(bi)];
        ba.sum_x += x;
        ba.sum_r += r;
        ba.sum_r2 += r * r;
        ba.n += 1;
    }

    NlfFit fit;
    constexpr std::int64_t kMinSamples = 50;
    std::size_t used = 0;
    for (const BinAcc& ba : acc) {
        if (ba.n == 0) continue;
        NlfBin bin;
        bin.count = ba.n;
        bin.mean = ba.sum_x / static_cast<double>(ba.n);
        const double mean_r = ba.sum_r / static_cast<double>(ba.n);
        bin.variance = ba.n > 1 ? (ba.sum_r2 - static_cast<double>(ba.n) * mean_r * mean_r) / static_cast<double>(ba.n - 1)
                                : 0.0;
        bin.variance = std::max(bin.variance, 0.0);
        bin.used = ba.n >= kMinSamples && bin.mean <= 0.9 * max_intensity;
        used += bin.used ? 1u : 0u;
        fit.bins.push_back(bin);
    }
    if (used < 2) throw NumericError("estimate_nlf_paired: fewer than 2 usable intensity bins");
    fit_line(fit.bins, fit.a, fit.b);
    return fit;
}

namespace {

// One-time calibration on unit-variance Gaussian fields (40 x 512x512 images,
// 8x8 blocks, residual against a replicate-padded 3x3 box smoothing): the
// 0.5% lower quantile of block sample variances. Block variances divided by
// this constant estimate the true noise variance on flat content.
constexpr double kBlockVarQ005 = 0.5148;
constexpr int kBlockSize = 8;
constexpr double kFlatQuantile = 0.005;

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0;
    const double h = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double f = h - static_cast<double>(lo);
    return sorted[lo] + f * (sorted[hi] - sorted[lo]);
}

} // namespace

NlfFit estimate_nlf_single(const Tensor& noisy, int n_bins) {
    if (n_bins < 2) throw std::invalid_argument("estimate_nlf_single: n_bins must be >= 2");
    if (noisy.rank() < 2) throw std::invalid_argument("estimate_nlf_single: expected an image tensor");
    const int W = noisy.dim(noisy.rank() - 1);
    const int H = noisy.dim(noisy.rank() - 2);
    const std::int64_t n_images = noisy.size() / (static_cast<std::int64_t>(H) * W);
    if (H < 64 || W < 64) throw std::invalid_argument("estimate_nlf_single: image must be at least 64x64");

    // Residual against a 3x3 box smoothing, replicate borders.
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<double> residual(static_cast<std::size_t>(plane));
    std::vector<std::vector<double>> bin_vars(static_cast<std::size_t>(n_bins));
    std::vector<double> bin_mean_sum(static_cast<std::size_t>(n_bins), 0.0);

    for (std::int64_t img = 0; img < n_images; ++img) {
        const float* src = noisy.ptr() + img * plane;
        auto at = [&](int i, int j) {
            i = std::clamp(i, 0, H - 1);
            j = std::clamp(j, 0, W - 1);
            return static_cast<double>(src[static_cast<std::int64_t>(i) * W + j]);
        };
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double s = 0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) s += at(i + di, j + dj);
                residual[static_cast<std::size_t>(static_cast<std::int64_t>(i) * W + j)] = at(i, j) - s / 9.0;
            }

        for (int bi = 0; bi + kBlockSize <= H; bi += kBlockSize)
            for (int bj = 0; bj + kBlockSize <= W; bj += kBlockSize) {
                double sum = 0, rsum = 0, rsum2 = 0;
                for (int i = bi; i < bi + kBlockSize; ++i)
                    for (int j = bj; j < bj + kBlockSize; ++j) {
                        sum += at(i, j);
                        const double r = residual[static_cast<std::size_t>(static_cast<std::int64_t>(i) * W + j)];
                        rsum += r;
                        rsum2 += r * r;
                    }
                constexpr double n = static_cast<double>(kBlockSize * kBlockSize);
                const double mean = sum / n;
                const double var = std::max(0.0, (rsum2 - rsum * rsum / n) / (n - 1.0));
                if (mean > 0.9) continue; // near saturation
                int bidx = static_cast<int>(mean * n_bins);
                if (bidx < 0 || bidx > n_bins - 1) continue;
                bin_vars[static_cast<std::size_t>(bidx)].push_back(var);
                bin_mean_sum[static_cast<std::size_t>(bidx)] += mean;
            }
    }

    NlfFit fit;
    constexpr std::int64_t kMinBlocks = 50;
    std::size_t used = 0;
    for (int bi = 0; bi < n_bins; ++bi) {
        auto& vars = bin_vars[static_cast<std::size_t>(bi)];
        if (vars.empty()) continue;
        NlfBin bin;
        bin.count = static_cast<std::int64_t>(vars.size());
        bin.mean = bin_mean_sum[static_cast<std::size_t>(bi)] / static_cast<double>(vars.size());
        std::sort(vars.begin(), vars.end());
        bin.variance = quantile_sorted(vars, kFlatQuantile) / kBlockVarQ005;
        bin.used = bin.count >= kMinBlocks;
        used += bin.used ? 1u : 0u;
        fit.bins.push_back(bin);
    }
    if (used < 2) throw NumericError("estimate_nlf_single: fewer than 2 usable intensity bins");
    fit_line(fit.bins, fit.a, fit.b);
    return fit;
}

std::pair<double, double> interpolate_iso(const NoiseProfile& profile, double iso) {
    profile.validate();
    const auto& pts = profile.points;
    if (iso < profile.min_iso() || iso > profile.max_iso())
        throw std::invalid_argument("interpolate_iso: ISO " + std::to_string(iso) + " outside profile range [" +
                                    std::to_string(profile.min_iso()) + ", " + std::to_string(profile.max_iso()) + "]");
    for (const NoisePoint& p : pts)
        if (p.iso == iso) return {p.a, p.b};

    std::size_t hi = 1;
    while (pts[hi].iso < iso) ++hi;
    const NoisePoint& p0 = pts[hi - 1];
    const NoisePoint& p1 = pts[hi];
    const double t = (std::log(iso) - std::log(p0.iso)) / (std::log(p1.iso) - std::log(p0.iso));
    auto lerp_coeff = [t](double c0, double c1) {
        if (c0 > 0 && c1 > 0) return std::exp(std::log(c0) + t * (std::log(c1) - std::log(c0)));
        return c0 + t * (c1 - c0);
    };
    return {lerp_coeff(p0.a, p1.a), lerp_coeff(p0.b, p1.b)};
}

Tensor build_noise_map(const Tensor& noisy, double a, double b) {
    if (a < 0 || b < 0) throw std::invalid_argument("build_noise_map: a and b must be >= 0");
    Tensor out(noisy.shape);
    for (std::int64_t i = 0; i < noisy.size(); ++i) {
        const double x = std::max(static_cast<double>(noisy.data[static_cast<std::size_t>(i)]), 0.0);
        out.data[static_cast<std::size_t>(i)] = static_cast<float>(std::sqrt(a * x + b));
    }
    return out;
}

NoiseDraw sample_training_noise(const std::vector<NoiseProfile>& profiles, Rng& rng) {
    if (profiles.empty()) throw std::invalid_argument("sample_training_noise: empty profile list");
    const NoiseProfile& p = profiles[static_cast<std::size_t>(rng.below(profiles.size()))];
    NoiseDraw d;
    d.sensor_id = p.sensor_id;
    d.iso = p.min_iso() == p.max_iso()
                ? p.min_iso()
                : std::exp(rng.uniform(std::log(p.min_iso()), std::log(p.max_iso())));
    d.iso = std::clamp(d.iso, p.min_iso(), p.max_iso());
    std::tie(d.a, d.b) = interpolate_iso(p, d.iso);
    return d;
}

} // namespace nlmf
