#include "nlmf/gradsuite.hpp"

#include <functional>
#include <unordered_map>

#include "nlmf/fdcheck.hpp"
#include "nlmf/nlfemf.hpp"
#include "nlmf/ops.hpp"

namespace nlmf {

namespace {

using StoreD = ParamStoreT<double>;
using Lookup = std::function<Value(const std::string&)>;

TensorT<double> rand_tensor(const Shape& s, Rng& rng, double lo, double hi) {
    TensorT<double> t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

struct Fixture {
    std::string name;
    std::function<void(Rng&, StoreD&)> setup;
    std::function<Value(Tape<double>&, const Lookup&)> build;
    // Wide nets always hold some activation near its kink, so the global
    // proximity skip only makes sense for the small op-level fixtures; the
    // large ones rely on the per-scalar step-shrinking recheck instead.
    double kink_tol = 1e-3;
};

// Loss used by value-output fixtures: sum of the output against a fixed
// random projection, smooth in every input.
Value projected_sum(Tape<double>& t, Value out, const Lookup& v) { return sum(t, mul(t, out, v("proj"))); }

GradSuiteEntry check_fixture(const Fixture& f, const GradSuiteOptions& opts) {
    GradSuiteEntry entry;
    entry.fixture = f.name;
    std::uint64_t salt = 0;
    for (char c : f.name) salt = salt * 131 + static_cast<unsigned char>(c);

    for (int attempt = 0; attempt < opts.max_redraws; ++attempt) {
        Rng rng(opts.seed + salt + 0xabcd37ull * static_cast<std::uint64_t>(attempt));
        StoreD store;
        f.setup(rng, store);

        auto run = [&](StoreD& st, bool want_grads) -> FdEval {
            Tape<double> tape;
            std::unordered_map<std::string, Value> vals;
            for (const auto& n : st.names()) vals.emplace(n, tape.leaf(st.at(n).value, want_grads));
            Value loss = f.build(tape, [&](const std::string& n) { return vals.at(n); });
            FdEval ev{tape.val(loss).data[0], tape.min_kink_distance()};
            if (want_grads) {
                tape.backward(loss);
                for (const auto& n : st.names()) {
                    const TensorT<double>& g = tape.grad(vals.at(n));
                    std::copy(g.data.begin(), g.data.end(), st.at(n).grad.data.begin());
                }
                if (opts.inject_error) st.at(st.names().front()).grad.data[0] += 0.05;
            }
            return ev;
        };

        FdReport rep = fd_check(store, run, opts.h, 1e-3, std::min(f.kink_tol, opts.kink_tol), opts.tolerance);
        if (rep.skipped_near_kink) continue;
        entry.max_rel_err = rep.max_rel_err;
        entry.worst_param = rep.worst_param;
        entry.pass = rep.max_rel_err < opts.tolerance;
        if (entry.pass || attempt >= 2) return entry;
    }
    if (entry.worst_param.empty()) {
        entry.pass = false;
        entry.worst_param = "(no kink-free draw found)";
        entry.max_rel_err = std::numeric_limits<double>::infinity();
    }
    return entry;
}

Fixture fixture_conv2d_grouped() {
    return Fixture{
        "conv2d_grouped",
        [](Rng& rng, StoreD& st) {
            st.add("x", rand_tensor({2, 4, 5, 5}, rng, -1, 1));
            st.add("w", rand_tensor({6, 2, 3, 3}, rng, -0.5, 0.5));
            st.add("b", rand_tensor({6}, rng, -0.5, 0.5));
            st.add("proj", rand_tensor({2, 6, 5, 5}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            return projected_sum(t, conv2d(t, v("x"), v("w"), v("b"), 1, 1, 2), v);
        }};
}

Fixture fixture_conv2d_strided() {
    return Fixture{
        "conv2d_strided",
        [](Rng& rng, StoreD& st) {
            st.add("x", rand_tensor({1, 2, 6, 6}, rng, -1, 1));
            st.add("w", rand_tensor({3, 2, 2, 2}, rng, -0.5, 0.5));
            st.add("b", rand_tensor({3}, rng, -0.5, 0.5));
            st.add("proj", rand_tensor({1, 3, 3, 3}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            return projected_sum(t, conv2d(t, v("x"), v("w"), v("b"), 2, 0, 1), v);
        }};
}

Fixture fixture_conv_transpose2d() {
    return Fixture{
        "conv_transpose2d",
        [](Rng& rng, StoreD& st) {
            st.add("x", rand_tensor({1, 3, 3, 3}, rng, -1, 1));
            st.add("w", rand_tensor({3, 2, 2, 2}, rng, -0.5, 0.5));
            st.add("b", rand_tensor({2}, rng, -0.5, 0.5));
            st.add("proj", rand_tensor({1, 2, 6, 6}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            return projected_sum(t, conv_transpose2d(t, v("x"), v("w"), v("b"), 2), v);
        }};
}

Fixture fixture_grid_sample() {
    return Fixture{
        "grid_sample_bilinear",
        [](Rng& rng, StoreD& st) {
            st.add("f", rand_tensor({1, 3, 5, 6}, rng, -1, 1));
            st.add("coords", rand_tensor({1, 2, 5, 6}, rng, -0.7, 6.2));
            st.add("proj", rand_tensor({1, 3, 5, 6}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            return projected_sum(t, grid_sample_bilinear(t, v("f"), v("coords")), v);
        }};
}

Fixture fixture_gather_neighbors() {
    return Fixture{
        "gather_neighbors",
        [](Rng& rng, StoreD& st) {
            st.add("f", rand_tensor({1, 3, 6, 6}, rng, -1, 1));
            st.add("off", rand_tensor({1, 4, 6, 6}, rng, -1.7, 1.7));
            st.add("proj", rand_tensor({1, 6, 6, 6}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            return projected_sum(t, gather_neighbors(t, v("f"), v("off")), v);
        }};
}

Fixture fixture_activations() {
    return Fixture{
        "activations",
        [](Rng& rng, StoreD& st) {
            st.add("x", rand_tensor({1, 2, 4, 4}, rng, -2, 2));
            st.add("proj", rand_tensor({1, 2, 4, 4}, rng, -1, 1));
            st.add("proj2", rand_tensor({1, 2, 4, 4}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            Value y = leaky_relu(t, v("x"), 0.1);
            y = gelu(t, y);
            y = sigmoid(t, y);
            y = tanh_scaled(t, y, 3.0);
            Value z = relu(t, v("x"));
            return add(t, projected_sum(t, y, v), sum(t, mul(t, z, v("proj2"))));
        }};
}

Fixture fixture_convnext() {
    return Fixture{
        "convnext_block",
        [](Rng& rng, StoreD& st) {
            st.add("x", rand_tensor({1, 3, 5, 5}, rng, -1, 1));
            st.add("cn.dw.weight", rand_tensor({3, 1, 7, 7}, rng, -0.15, 0.15));
            st.add("cn.dw.bias", rand_tensor({3}, rng, -0.2, 0.2));
            st.add("cn.pw1.weight", rand_tensor({12, 3, 1, 1}, rng, -0.5, 0.5));
            st.add("cn.pw1.bias", rand_tensor({12}, rng, -0.2, 0.2));
            st.add("cn.pw2.weight", rand_tensor({3, 12, 1, 1}, rng, -0.5, 0.5));
            st.add("cn.pw2.bias", rand_tensor({3}, rng, -0.2, 0.2));
            st.add("proj", rand_tensor({1, 3, 5, 5}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            ConvNeXtParams p;
            p.dw = {v("cn.dw.weight"), v("cn.dw.bias")};
            p.pw1 = {v("cn.pw1.weight"), v("cn.pw1.bias")};
            p.pw2 = {v("cn.pw2.weight"), v("cn.pw2.bias")};
            return projected_sum(t, convnext_forward(t, p, v("x")), v);
        }};
}

NlfemfParams nlfemf_params_from(const Lookup& v, const std::string& prefix, bool with_offsets) {
    NlfemfParams p;
    if (with_offsets)
        for (int i = 0; i < 6; ++i) {
            p.offset.conv[static_cast<std::size_t>(i)] = {v(prefix + ".offset_cnn.conv" + std::to_string(i) + ".weight"),
                                                          v(prefix + ".offset_cnn.conv" + std::to_string(i) + ".bias")};
        }
    p.transform_in = {v(prefix + ".transform_in.weight"), v(prefix + ".transform_in.bias")};
    p.transform_out = {v(prefix + ".transform_out.weight"), v(prefix + ".transform_out.bias")};
    for (int i = 0; i < 3; ++i)
        p.mod[static_cast<std::size_t>(i)] = {v(prefix + ".mod_cnn.conv" + std::to_string(i) + ".weight"),
                                              v(prefix + ".mod_cnn.conv" + std::to_string(i) + ".bias")};
    p.aggregate = {v(prefix + ".aggregate.weight"), v(prefix + ".aggregate.bias")};
    return p;
}

void add_nlfemf_params(Rng& rng, StoreD& st, const std::string& prefix, const NLFeMFConfig& cfg, bool with_offsets) {
    const int ck = cfg.channels * cfg.neighbors;
    if (with_offsets) {
        const int h = cfg.offset_hidden;
        st.add(prefix + ".offset_cnn.conv0.weight", rand_tensor({h, cfg.channels, 3, 3}, rng, -0.3, 0.3));
        st.add(prefix + ".offset_cnn.conv0.bias", rand_tensor({h}, rng, -0.1, 0.1));
        for (int i = 1; i < 5; ++i) {
            st.add(prefix + ".offset_cnn.conv" + std::to_string(i) + ".weight", rand_tensor({h, h, 3, 3}, rng, -0.3, 0.3));
            st.add(prefix + ".offset_cnn.conv" + std::to_string(i) + ".bias", rand_tensor({h}, rng, -0.1, 0.1));
        }
        st.add(prefix + ".offset_cnn.conv5.weight", rand_tensor({2 * cfg.neighbors, h, 3, 3}, rng, -0.3, 0.3));
        st.add(prefix + ".offset_cnn.conv5.bias", rand_tensor({2 * cfg.neighbors}, rng, -0.1, 0.1));
    }
    st.add(prefix + ".transform_in.weight", rand_tensor({ck, cfg.neighbors, 1, 1}, rng, -0.5, 0.5));
    st.add(prefix + ".transform_in.bias", rand_tensor({ck}, rng, -0.2, 0.2));
    st.add(prefix + ".transform_out.weight", rand_tensor({ck, cfg.neighbors, 1, 1}, rng, -0.5, 0.5));
    st.add(prefix + ".transform_out.bias", rand_tensor({ck}, rng, -0.2, 0.2));
    for (int i = 0; i < 3; ++i) {
        st.add(prefix + ".mod_cnn.conv" + std::to_string(i) + ".weight", rand_tensor({ck, 1, 3, 3}, rng, -0.3, 0.3));
        st.add(prefix + ".mod_cnn.conv" + std::to_string(i) + ".bias", rand_tensor({ck}, rng, -0.1, 0.1));
    }
    st.add(prefix + ".aggregate.weight", rand_tensor({cfg.channels, ck, 1, 1}, rng, -0.5, 0.5));
    st.add(prefix + ".aggregate.bias", rand_tensor({cfg.channels}, rng, -0.2, 0.2));
}

NLFeMFConfig small_block_config() {
    NLFeMFConfig cfg;
    cfg.channels = 3;
    cfg.neighbors = 2;
    cfg.radius = 2;
    cfg.offset_hidden = 3;
    return cfg;
}

Fixture fixture_collaborative_filter() {
    return Fixture{
        "collaborative_filter",
        [](Rng& rng, StoreD& st) {
            st.add("stack", rand_tensor({1, 6, 4, 4}, rng, -1, 1));
            add_nlfemf_params(rng, st, "blk", small_block_config(), false);
            st.add("proj", rand_tensor({1, 6, 4, 4}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            NlfemfParams p = nlfemf_params_from(v, "blk", false);
            return projected_sum(t, collaborative_filter(t, p, v("stack"), 2), v);
        }};
}

Fixture fixture_aggregate() {
    return Fixture{
        "aggregate",
        [](Rng& rng, StoreD& st) {
            st.add("stack", rand_tensor({1, 6, 4, 4}, rng, -1, 1));
            add_nlfemf_params(rng, st, "blk", small_block_config(), false);
            st.add("proj", rand_tensor({1, 3, 4, 4}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            NlfemfParams p = nlfemf_params_from(v, "blk", false);
            return projected_sum(t, aggregate(t, p, v("stack"), 2), v);
        }};
}

Fixture fixture_nlfemf_block() {
    return Fixture{
        "nlfemf_block",
        [](Rng& rng, StoreD& st) {
            st.add("x", rand_tensor({1, 3, 6, 6}, rng, 0, 1));
            add_nlfemf_params(rng, st, "blk", small_block_config(), true);
            st.add("proj", rand_tensor({1, 3, 6, 6}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) {
            NlfemfParams p = nlfemf_params_from(v, "blk", true);
            return projected_sum(t, nlfemf_forward(t, p, small_block_config(), v("x")), v);
        },
        2e-4};
}

Fixture fixture_l1_loss() {
    return Fixture{
        "l1_loss",
        [](Rng& rng, StoreD& st) {
            st.add("pred", rand_tensor({1, 3, 4, 4}, rng, -1, 1));
            st.add("target", rand_tensor({1, 3, 4, 4}, rng, -1, 1));
        },
        [](Tape<double>& t, const Lookup& v) { return l1_loss(t, v("pred"), v("target")); }};
}

Fixture fixture_micro_network() {
    const NetworkConfig cfg = micro_network_config();
    return Fixture{
        "micro_network",
        [cfg](Rng& rng, StoreD& st) {
            StoreD init = init_params<double>(cfg, rng.next());
            for (const auto& name : init.names()) {
                TensorT<double> t = init.at(name).value;
                // The check needs a generic point: zero-initialized final
                // offset layers would pin every sampling coordinate onto the
                // integer grid, and zero biases let clamped patches produce
                // preactivations exactly at the ReLU kink.
                if (name.find("offset_cnn.conv5") != std::string::npos)
                    for (auto& x : t.data) x = rng.uniform(-0.3, 0.3);
                else if (name.ends_with(".bias"))
                    for (auto& x : t.data) x = rng.uniform(-0.05, 0.05);
                st.add(name, std::move(t));
            }
            st.add("__input", rand_tensor({1, 8, 8, 8}, rng, 0, 1));
            st.add("__target", rand_tensor({1, 4, 8, 8}, rng, 0, 1));
        },
        [cfg](Tape<double>& t, const Lookup& v) {
            struct LookupSink {
                const Lookup& v;
                Value operator()(const std::string& name, const Shape&, ParamInit) { return v(name); }
            } sink{v};
            NetParams np = declare_network(cfg, sink);
            Value out = network_forward(t, np, cfg, v("__input"));
            return l1_loss(t, out, v("__target"));
        },
        1e-6};
}

} // namespace

NetworkConfig micro_network_config() {
    NetworkConfig cfg;
    cfg.scales = 2;
    cfg.k_per_scale = {2, 2};
    cfg.c_per_scale = {4, 8};
    cfg.search_radius = 2;
    cfg.mode = "raw";
    return cfg;
}

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& opts) {
    const Fixture fixtures[] = {
        fixture_conv2d_grouped(),  fixture_conv2d_strided(), fixture_conv_transpose2d(),
        fixture_grid_sample(),     fixture_gather_neighbors(), fixture_activations(),
        fixture_convnext(),        fixture_collaborative_filter(), fixture_aggregate(),
        fixture_nlfemf_block(),    fixture_l1_loss(),        fixture_micro_network(),
    };
    std::vector<GradSuiteEntry> out;
    for (const Fixture& f : fixtures) out.push_back(check_fixture(f, opts));
    return out;
}

} // namespace nlmf
