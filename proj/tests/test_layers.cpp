#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "nlmf/fdcheck.hpp"
#include "nlmf/network.hpp"
#include "nlmf/train.hpp"
#include "testutil.hpp"

using namespace nlmf;
using testutil::rand_tensor;

namespace {

NetworkConfig tiny_config() {
    NetworkConfig cfg;
    cfg.scales = 1;
    cfg.k_per_scale = {2};
    cfg.c_per_scale = {4};
    cfg.search_radius = 2;
    return cfg;
}

} // namespace

TEST_CASE("init_params is deterministic under a fixed seed") {
    const NetworkConfig cfg = tiny_config();
    ParamStore a = init_params(cfg, 99);
    ParamStore b = init_params(cfg, 99);
    REQUIRE(a.names() == b.names());
    for (const auto& name : a.names()) {
        const auto& ta = a.at(name).value;
        const auto& tb = b.at(name).value;
        REQUIRE(ta.shape == tb.shape);
        for (std::int64_t i = 0; i < ta.size(); ++i)
            REQUIRE(ta.data[static_cast<std::size_t>(i)] == tb.data[static_cast<std::size_t>(i)]);
    }
    ParamStore c = init_params(cfg, 100);
    bool any_diff = false;
    for (const auto& name : a.names())
        if (max_abs_diff(a.at(name).value, c.at(name).value) > 0) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("offset predictor final layer starts at exactly zero") {
    ParamStore store = init_params(tiny_config(), 5);
    for (const char* part : {".weight", ".bias"})
        for (float v : store.at(std::string("enc0.nlfemf.offset_cnn.conv5") + part).value.data) CHECK(v == 0.0f);
    // earlier layers are not zero
    CHECK(max_abs(store.at("enc0.nlfemf.offset_cnn.conv0.weight").value) > 0.0f);
}

TEST_CASE("weight init respects the fan-in bound") {
    NetworkConfig cfg = tiny_config();
    cfg.c_per_scale = {16};
    cfg.k_per_scale = {2};
    ParamStore store = init_params(cfg, 17);
    // a 3x3 convolution reading 16 channels: bound 1/sqrt(144)
    const auto& w = store.at("enc0.nlfemf.offset_cnn.conv1.weight").value;
    REQUIRE(w.shape == Shape{16, 16, 3, 3});
    const float bound = 1.0f / 12.0f;
    for (float v : w.data) {
        CHECK(v <= bound);
        CHECK(v >= -bound);
    }
    for (float v : store.at("head.bias").value.data) CHECK(v == 0.0f);
}

TEST_CASE("convnext block with zero weights is the identity") {
    Rng rng(21);
    ParamStoreT<float> store;
    InitSink<float> init{store, rng};
    declare_convnext(init, "cn", 5);
    testutil::set_zero_convnext(store, "cn");
    for (const Shape& s : {Shape{1, 5, 6, 6}, Shape{2, 5, 7, 9}}) {
        Tensor x = rand_tensor<float>(s, rng);
        Tape<float> t;
        std::vector<std::pair<std::string, Value>> bound;
        BindSink<float> bind{t, store, bound, false};
        ConvNeXtParams p = declare_convnext(bind, "cn", 5);
        Tensor y = t.val(convnext_forward(t, p, t.constant(x)));
        CHECK(y.shape == x.shape);
        CHECK(max_abs_diff(y, x) == 0.0f);
    }
}

TEST_CASE("convnext block preserves shape and rejects channel mismatch") {
    Rng rng(22);
    ParamStoreT<float> store;
    InitSink<float> init{store, rng};
    declare_convnext(init, "cn", 3);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    BindSink<float> bind{t, store, bound, false};
    ConvNeXtParams p = declare_convnext(bind, "cn", 3);
    Tensor x = rand_tensor<float>({1, 3, 5, 8}, rng);
    CHECK(t.val(convnext_forward(t, p, t.constant(x))).shape == x.shape);
    CHECK_THROWS_AS(convnext_forward(t, p, t.constant(Tensor(Shape{1, 4, 5, 8}))), std::invalid_argument);
}

TEST_CASE("convnext gradients match finite differences") {
    Rng rng(23);
    ParamStoreT<double> store;
    {
        Rng prng(24);
        InitSink<double> init{store, prng};
        declare_convnext(init, "cn", 3);
        for (const auto& n : store.names())
            if (n.ends_with(".bias"))
                for (auto& v : store.at(n).value.data) v = prng.uniform(-0.1, 0.1);
    }
    store.add("x", rand_tensor<double>({1, 3, 5, 5}, rng));
    store.add("proj", rand_tensor<double>({1, 3, 5, 5}, rng));
    auto run = [](ParamStoreT<double>& st, bool wg) {
        Tape<double> t;
        std::vector<std::pair<std::string, Value>> bound;
        BindSink<double> bind{t, st, bound, wg};
        ConvNeXtParams p = declare_convnext(bind, "cn", 3);
        Value x = t.leaf(st.at("x").value, wg);
        Value proj = t.leaf(st.at("proj").value, wg);
        bound.emplace_back("x", x);
        bound.emplace_back("proj", proj);
        Value loss = sum(t, mul(t, convnext_forward(t, p, x), proj));
        FdEval ev{t.val(loss).data[0], t.min_kink_distance()};
        if (wg) {
            t.backward(loss);
            for (auto& [n, v] : bound)
                std::copy(t.grad(v).data.begin(), t.grad(v).data.end(), st.at(n).grad.data.begin());
        }
        return ev;
    };
    FdReport rep = fd_check(store, run, 1e-4, 1e-3, 1e-6, 1e-4);
    REQUIRE(!rep.skipped_near_kink);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("count_params matches a hand enumeration of the minimal config") {
    NetworkConfig cfg;
    cfg.scales = 1;
    cfg.k_per_scale = {1};
    cfg.c_per_scale = {1};
    cfg.search_radius = 3;
    // head 3x3 8->1: 73; convnext(1): 50+8+5 = 63 twice; offset cnn: 10*5+20 = 70;
    // transforms: 2+2; modulation: 3*10; aggregate: 2; tail 3x3 1->4: 40.
    const std::int64_t expected = 73 + 63 + (70 + 2 + 2 + 30 + 2) + 63 + 40;
    CHECK(count_params(cfg) == expected);
    CHECK(count_params(cfg) == 345);
}

TEST_CASE("count_params equals the store's scalar count and grows with K and C") {
    NetworkConfig cfg = tiny_config();
    CHECK(count_params(cfg) == init_params(cfg, 1).scalar_count());

    NetworkConfig more_k = cfg;
    more_k.k_per_scale = {4};
    CHECK(count_params(more_k) > count_params(cfg));
    NetworkConfig more_c = cfg;
    more_c.c_per_scale = {8};
    CHECK(count_params(more_c) > count_params(cfg));
}

TEST_CASE("default three-scale configuration lands in the few-million range") {
    const NetworkConfig cfg;
    const std::int64_t n = count_params(cfg);
    CHECK(n > 1000000);
    CHECK(n < 20000000);
}

TEST_CASE("param store round-trips through a checkpoint bit-exactly") {
    const NetworkConfig cfg = tiny_config();
    ParamStore store = init_params(cfg, 31);
    // make moments non-trivial
    Rng rng(32);
    for (const auto& n : store.names()) {
        for (auto& v : store.at(n).m.data) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto& v : store.at(n).v.data) v = static_cast<float>(rng.uniform(0, 1));
    }
    const std::string dir = (std::filesystem::temp_directory_path() / "nlmf_ckpt_test").string();
    std::filesystem::remove_all(dir);
    save_checkpoint(dir, store, cfg);
    Checkpoint ck = load_checkpoint(dir);
    REQUIRE(ck.store.names() == store.names());
    for (const auto& n : store.names()) {
        CHECK(max_abs_diff(ck.store.at(n).value, store.at(n).value) == 0.0f);
        CHECK(max_abs_diff(ck.store.at(n).m, store.at(n).m) == 0.0f);
        CHECK(max_abs_diff(ck.store.at(n).v, store.at(n).v) == 0.0f);
    }
    CHECK(ck.config.scales == cfg.scales);
    CHECK(ck.config.k_per_scale == cfg.k_per_scale);
    std::filesystem::remove_all(dir);
}

TEST_CASE("store cast to double preserves values exactly") {
    ParamStore store = init_params(tiny_config(), 77);
    ParamStoreT<double> d = cast_store<double>(store);
    for (const auto& n : store.names())
        for (std::int64_t i = 0; i < store.at(n).value.size(); ++i)
            CHECK(static_cast<double>(store.at(n).value.data[static_cast<std::size_t>(i)]) ==
                  d.at(n).value.data[static_cast<std::size_t>(i)]);
}
