#include "nlmf/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "nlmf/errors.hpp"
#include "nlmf/ops.hpp"
#include "nlmf/raw.hpp"

namespace nlmf {

namespace fs = std::filesystem;

void TrainConfig::validate(int scales) const {
    if (!(lr_end < lr_start)) throw std::invalid_argument("train config: lr_end must be < lr_start");
    if (crop_size % 2 != 0) throw std::invalid_argument("train config: crop_size must be even");
    const int min_crop = (1 << (scales - 1)) * 8;
    if (crop_size < min_crop)
        throw std::invalid_argument("train config: crop_size must be >= " + std::to_string(min_crop) + " for " +
                                    std::to_string(scales) + " scales");
    if (batch_size < 1 || total_steps < 1) throw std::invalid_argument("train config: batch_size and total_steps must be >= 1");
}

TrainConfig train_config_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("train config: invalid JSON: ") + e.what());
    }
    TrainConfig cfg;
    try {
        if (j.contains("crop_size")) cfg.crop_size = j.at("crop_size").get<int>();
        if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
        if (j.contains("total_steps")) cfg.total_steps = j.at("total_steps").get<std::int64_t>();
        if (j.contains("lr_start")) cfg.lr_start = j.at("lr_start").get<double>();
        if (j.contains("lr_end")) cfg.lr_end = j.at("lr_end").get<double>();
        if (j.contains("adam_beta1")) cfg.adam.beta1 = j.at("adam_beta1").get<double>();
        if (j.contains("adam_beta2")) cfg.adam.beta2 = j.at("adam_beta2").get<double>();
        if (j.contains("adam_eps")) cfg.adam.eps = j.at("adam_eps").get<double>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("checkpoint_interval")) cfg.checkpoint_interval = j.at("checkpoint_interval").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("train config: bad field: ") + e.what());
    }
    return cfg;
}

double cosine_lr(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps)
        throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                    std::to_string(cfg.total_steps) + "]");
    if (step == 0) return cfg.lr_start;
    if (step == cfg.total_steps) return cfg.lr_end;
    const double t = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + std::cos(3.141592653589793238462643 * t));
}

double l1_loss_value(const Tensor& pred, const Tensor& target) {
    if (pred.shape != target.shape)
        throw std::invalid_argument("l1_loss: shape mismatch " + shape_str(pred.shape) + " vs " + shape_str(target.shape));
    double acc = 0;
    for (std::int64_t i = 0; i < pred.size(); ++i)
        acc += std::abs(static_cast<double>(pred.data[static_cast<std::size_t>(i)]) -
                        static_cast<double>(target.data[static_cast<std::size_t>(i)]));
    return acc / static_cast<double>(pred.size());
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
    if (a.shape != b.shape)
        throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double mse = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data[static_cast<std::size_t>(i)]) -
                         static_cast<double>(b.data[static_cast<std::size_t>(i)]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    constexpr double kCap = 99.0;
    if (mse <= 0) return kCap;
    const double p = 10.0 * std::log10(peak * peak / mse);
    return std::min(p, kCap);
}

void adam_step(ParamStore& store, double lr, const AdamConfig& adam, std::int64_t step) {
    if (step < 1) throw std::invalid_argument("adam_step: step counts from 1");
    for (const auto& name : store.names()) {
        const ParamEntry<float>& e = store.at(name);
        for (float g : e.grad.data)
            if (std::isnan(g)) throw NumericError("adam_step aborted: NaN gradient in " + name);
    }
    const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(step));
    for (const auto& name : store.names()) {
        ParamEntry<float>& e = store.at(name);
        for (std::int64_t i = 0; i < e.value.size(); ++i) {
            const std::size_t ii = static_cast<std::size_t>(i);
            const double g = static_cast<double>(e.grad.data[ii]);
            const double m = adam.beta1 * static_cast<double>(e.m.data[ii]) + (1.0 - adam.beta1) * g;
            const double v = adam.beta2 * static_cast<double>(e.v.data[ii]) + (1.0 - adam.beta2) * g * g;
            e.m.data[ii] = static_cast<float>(m);
            e.v.data[ii] = static_cast<float>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            e.value.data[ii] -= static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + adam.eps));
        }
    }
    store.zero_grads();
}

namespace {

Tensor as_batched(const Tensor& t) {
    if (t.rank() == 4) return t;
    if (t.rank() == 3) return Tensor(Shape{1, t.dim(0), t.dim(1), t.dim(2)}, t.data);
    throw std::invalid_argument("expected a 3-d or 4-d packed image, got " + shape_str(t.shape));
}

Tensor crop4(const Tensor& t, int y, int x, int size) {
    const int B = t.dim(0), C = t.dim(1);
    Tensor out(Shape{B, C, size, size});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j) out.at4(b, c, i, j) = t.at4(b, c, y + i, x + j);
    return out;
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    const int C = items[0].dim(1), H = items[0].dim(2), W = items[0].dim(3);
    Tensor out(Shape{static_cast<int>(items.size()), C, H, W});
    const std::int64_t one = static_cast<std::int64_t>(C) * H * W;
    for (std::size_t b = 0; b < items.size(); ++b)
        std::copy_n(items[b].ptr(), one, out.ptr() + static_cast<std::int64_t>(b) * one);
    return out;
}

} // namespace

TrainingSample make_training_sample(const Tensor& clean_packed, const std::vector<NoiseProfile>& profiles,
                                    int crop_size, Rng& rng) {
    const Tensor img = as_batched(clean_packed);
    const int H = img.dim(2), W = img.dim(3);
    if (H < crop_size || W < crop_size)
        throw std::invalid_argument("make_training_sample: image " + std::to_string(H) + "x" + std::to_string(W) +
                                    " smaller than crop " + std::to_string(crop_size));
    TrainingSample s;
    s.crop_y = static_cast<int>(rng.below(static_cast<std::uint64_t>(H - crop_size + 1)));
    s.crop_x = static_cast<int>(rng.below(static_cast<std::uint64_t>(W - crop_size + 1)));
    s.transform = static_cast<int>(rng.below(8));
    s.clean = dihedral_transform(crop4(img, s.crop_y, s.crop_x, crop_size), s.transform);
    s.noise = sample_training_noise(profiles, rng);
    s.noisy = sample_poisson_gaussian(s.clean, s.noise.a, s.noise.b, rng);
    s.noise_map = build_noise_map(s.noisy, s.noise.a, s.noise.b);
    return s;
}

std::vector<ValItem> make_validation_set(const std::vector<Tensor>& clean_images,
                                         const std::vector<NoiseProfile>& profiles, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ValItem> items;
    for (const Tensor& clean : clean_images) {
        ValItem it;
        it.clean = as_batched(clean);
        const NoiseDraw d = sample_training_noise(profiles, rng);
        it.noisy = sample_poisson_gaussian(it.clean, d.a, d.b, rng);
        it.noise_map = build_noise_map(it.noisy, d.a, d.b);
        items.push_back(std::move(it));
    }
    return items;
}

double validate(const ParamStore& store, const NetworkConfig& cfg, const std::vector<ValItem>& items) {
    if (items.empty()) throw std::invalid_argument("validate: empty validation set");
    double acc = 0;
    for (const ValItem& it : items) {
        const Tensor out = denoise_image(store, cfg, it.noisy, it.noise_map);
        acc += psnr(out, it.clean);
    }
    return acc / static_cast<double>(items.size());
}

TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg, const std::vector<Tensor>& train_images,
                  const std::vector<Tensor>& val_images, const std::vector<NoiseProfile>& profiles,
                  const std::string& out_dir, const TrainState* resume) {
    net_cfg.validate();
    cfg.validate(net_cfg.scales);
    if (train_images.empty()) throw std::invalid_argument("train: no training images");
    if (net_cfg.mode != "raw") throw std::invalid_argument("train: training loop expects a raw-mode network");

    TrainResult res;
    if (resume) {
        res.state = *resume;
    } else {
        res.state.step = 0;
        res.state.store = init_params(net_cfg, cfg.seed);
        res.state.rng = Rng(cfg.seed + 0x9e3779b97f4a7c15ull);
    }

    std::ofstream log;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        log.open(out_dir + "/train.log", resume ? std::ios::app : std::ios::trunc);
        if (!log) throw DataError("cannot open train log in " + out_dir);
    }

    const std::vector<ValItem> val_set =
        val_images.empty() ? std::vector<ValItem>{} : make_validation_set(val_images, profiles, cfg.seed + 1);

    auto checkpoint_now = [&](std::int64_t step) {
        if (out_dir.empty()) return;
        std::ostringstream dir;
        dir << out_dir << "/step_" << std::setw(6) << std::setfill('0') << step;
        save_train_state(dir.str(), res.state, net_cfg);
    };

    while (res.state.step < cfg.total_steps) {
        const double lr = cosine_lr(res.state.step, cfg);

        std::vector<Tensor> noisy_items, map_items, clean_items;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Tensor& img = train_images[static_cast<std::size_t>(res.state.rng.below(train_images.size()))];
            TrainingSample s = make_training_sample(img, profiles, cfg.crop_size, res.state.rng);
            noisy_items.push_back(std::move(s.noisy));
            map_items.push_back(std::move(s.noise_map));
            clean_items.push_back(std::move(s.clean));
        }
        const Tensor input = concat_channels(stack_batch(noisy_items), stack_batch(map_items));
        const Tensor target = stack_batch(clean_items);

        Tape<float> tape;
        BoundNetwork<float> bn = bind_network(tape, res.state.store, net_cfg, true);
        Value in = tape.constant(input);
        Value out = network_forward(tape, bn.params, net_cfg, in);
        Value loss = l1_loss(tape, out, tape.constant(target));
        tape.backward(loss);
        pull_gradients(tape, bn.bound, res.state.store);

        res.state.step += 1;
        adam_step(res.state.store, lr, cfg.adam, res.state.step);

        const double loss_v = static_cast<double>(tape.val(loss).data[0]);
        res.loss_history.push_back(loss_v);
        if (log) {
            nlohmann::json line{{"step", res.state.step}, {"lr", lr}, {"loss", loss_v}};
            log << line.dump() << "\n";
        }

        const bool at_checkpoint = res.state.step % cfg.checkpoint_interval == 0 || res.state.step == cfg.total_steps;
        if (at_checkpoint) {
            if (!val_set.empty()) {
                const double p = validate(res.state.store, net_cfg, val_set);
                res.last_psnr = p;
                if (p > res.state.best_psnr) {
                    res.state.best_psnr = p;
                    res.state.best_step = res.state.step;
                }
                if (log) {
                    nlohmann::json line{{"step", res.state.step}, {"val_psnr", p}};
                    log << line.dump() << "\n";
                }
            }
            checkpoint_now(res.state.step);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

namespace {

std::string param_path(const std::string& dir, const std::string& name, const char* suffix) {
    return dir + "/" + name + suffix;
}

} // namespace

void save_checkpoint(const std::string& dir, const ParamStore& store, const NetworkConfig& cfg,
                     const std::string& extra_json) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "nlmf-checkpoint-v1";
    manifest["network"] = nlohmann::json::parse(network_config_to_json(cfg));
    manifest["extra"] = nlohmann::json::parse(extra_json);
    manifest["params"] = nlohmann::json::array();
    for (const auto& name : store.names()) {
        const ParamEntry<float>& e = store.at(name);
        manifest["params"].push_back({{"name", name}, {"shape", e.value.shape}});
        save_ntf(param_path(dir, name, ".ntf"), e.value);
        save_ntf(param_path(dir, name, ".m.ntf"), e.m);
        save_ntf(param_path(dir, name, ".v.ntf"), e.v);
    }
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw DataError("cannot write checkpoint manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw DataError("cannot open checkpoint manifest: " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint manifest " + dir + ": " + e.what());
    }
    Checkpoint ck;
    ck.config = network_config_from_json(manifest.at("network").dump());
    ck.extra_json = manifest.value("extra", nlohmann::json::object()).dump();
    try {
        for (const auto& jp : manifest.at("params")) {
            const std::string name = jp.at("name").get<std::string>();
            const Shape shape = jp.at("shape").get<Shape>();
            ParamEntry<float>& e = ck.store.add(name, load_ntf(param_path(dir, name, ".ntf")));
            if (e.value.shape != shape)
                throw DataError("checkpoint " + dir + ": parameter " + name + " has shape " +
                                shape_str(e.value.shape) + ", manifest says " + shape_str(shape));
            if (fs::exists(param_path(dir, name, ".m.ntf"))) e.m = load_ntf(param_path(dir, name, ".m.ntf"));
            if (fs::exists(param_path(dir, name, ".v.ntf"))) e.v = load_ntf(param_path(dir, name, ".v.ntf"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint manifest " + dir + ": " + e.what());
    }
    return ck;
}

void save_train_state(const std::string& dir, const TrainState& state, const NetworkConfig& cfg) {
    nlohmann::json extra;
    extra["step"] = state.step;
    extra["best_psnr"] = state.best_psnr;
    extra["best_step"] = state.best_step;
    save_checkpoint(dir, state.store, cfg, extra.dump());
    std::ofstream os(dir + "/rng.txt");
    if (!os) throw DataError("cannot write rng state in " + dir);
    os << state.rng.serialize() << "\n";
}

TrainState load_train_state(const std::string& dir, NetworkConfig* cfg_out) {
    Checkpoint ck = load_checkpoint(dir);
    if (cfg_out) *cfg_out = ck.config;
    TrainState st;
    st.store = std::move(ck.store);
    const nlohmann::json extra = nlohmann::json::parse(ck.extra_json);
    st.step = extra.value("step", std::int64_t{0});
    st.best_psnr = extra.value("best_psnr", -1.0);
    st.best_step = extra.value("best_step", std::int64_t{-1});
    std::ifstream is(dir + "/rng.txt");
    if (!is) throw DataError("cannot open rng state: " + dir + "/rng.txt");
    std::string rng_state((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    st.rng.deserialize(rng_state);
    return st;
}

} // namespace nlmf
