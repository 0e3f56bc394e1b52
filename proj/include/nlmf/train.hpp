#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlmf/network.hpp"
#include "nlmf/noise.hpp"
#include "nlmf/params.hpp"
#include "nlmf/rng.hpp"

namespace nlmf {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    int crop_size = 128;
    int batch_size = 4;
    std::int64_t total_steps = 1000;
    double lr_start = 1e-4;
    double lr_end = 5e-7;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_interval = 500;

    void validate(int scales) const;
};

TrainConfig train_config_from_json(const std::string& json_text);

// Single-cycle cosine annealing from lr_start to lr_end, no restarts.
double cosine_lr(std::int64_t step, const TrainConfig& cfg);

// Mean of absolute differences; helper over the taped op for plain tensors.
double l1_loss_value(const Tensor& pred, const Tensor& target);

// 10 * log10(peak^2 / MSE), capped at the 99 dB sentinel.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

// Bias-corrected Adam update for every parameter; `step` counts updates
// starting at 1. Gradients are zeroed afterwards. A NaN gradient aborts the
// step before any parameter is touched.
void adam_step(ParamStore& store, double lr, const AdamConfig& adam, std::int64_t step);

struct TrainingSample {
    Tensor noisy, noise_map, clean;
    int transform = 0; // dihedral element applied to the crop
    int crop_y = 0, crop_x = 0;
    NoiseDraw noise;
};

// Random crop, dihedral augmentation, synthetic sensor noise; the noise map
// is computed from the noisy values. `clean_packed` is 4 x h x w or
// 1 x 4 x h x w in normalized units.
TrainingSample make_training_sample(const Tensor& clean_packed, const std::vector<NoiseProfile>& profiles,
                                    int crop_size, Rng& rng);

struct ValItem {
    Tensor noisy, noise_map, clean;
};

// Fixed noisy realizations of full validation images.
std::vector<ValItem> make_validation_set(const std::vector<Tensor>& clean_images,
                                         const std::vector<NoiseProfile>& profiles, std::uint64_t seed);

double validate(const ParamStore& store, const NetworkConfig& cfg, const std::vector<ValItem>& items);

struct TrainState {
    std::int64_t step = 0;
    ParamStore store;
    Rng rng{0};
    double best_psnr = -1;
    std::int64_t best_step = -1;
};

struct TrainResult {
    TrainState state;
    std::vector<double> loss_history;
    double last_psnr = -1;
};

// Step-indexed training loop with periodic checkpointing and validation.
// With a non-empty out_dir, writes step_<N>/ checkpoints plus train.log lines
// {"step", "lr", "loss"}. Resumes from `resume` when given.
TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg, const std::vector<Tensor>& train_images,
                  const std::vector<Tensor>& val_images, const std::vector<NoiseProfile>& profiles,
                  const std::string& out_dir, const TrainState* resume = nullptr);

// Checkpoint directory: manifest.json + one NTF per parameter (plus .m/.v
// moment files) + rng.txt.
void save_checkpoint(const std::string& dir, const ParamStore& store, const NetworkConfig& cfg,
                     const std::string& extra_json = "{}");

struct Checkpoint {
    ParamStore store;
    NetworkConfig config;
    std::string extra_json;
};

Checkpoint load_checkpoint(const std::string& dir);

void save_train_state(const std::string& dir, const TrainState& state, const NetworkConfig& cfg);
TrainState load_train_state(const std::string& dir, NetworkConfig* cfg_out = nullptr);

} // namespace nlmf
