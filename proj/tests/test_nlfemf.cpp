#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "nlmf/fdcheck.hpp"
#include "nlmf/nlfemf.hpp"
#include "testutil.hpp"

using namespace nlmf;
using testutil::rand_tensor;

namespace {

NLFeMFConfig block_cfg(int c, int k, int r, Matching m = Matching::learned_offsets) {
    NLFeMFConfig cfg;
    cfg.channels = c;
    cfg.neighbors = k;
    cfg.radius = r;
    cfg.offset_hidden = c;
    cfg.matching = m;
    return cfg;
}

template <class T>
ParamStoreT<T> make_block_store(const NLFeMFConfig& cfg, std::uint64_t seed) {
    ParamStoreT<T> store;
    Rng rng(seed);
    InitSink<T> init{store, rng};
    declare_nlfemf(init, "blk", cfg);
    return store;
}

template <class T>
void randomize_store(ParamStoreT<T>& store, std::uint64_t seed, double scale) {
    Rng rng(seed);
    for (const auto& n : store.names())
        for (auto& v : store.at(n).value.data) v = static_cast<T>(rng.uniform(-scale, scale));
}

template <class T>
NlfemfParams bind_block(Tape<T>& t, const ParamStoreT<T>& store, const NLFeMFConfig& cfg,
                        std::vector<std::pair<std::string, Value>>& bound, bool rg = false) {
    BindSink<T> bind{t, store, bound, rg};
    return declare_nlfemf(bind, "blk", cfg);
}

} // namespace

TEST_CASE("freshly initialized offsets are exactly zero") {
    const NLFeMFConfig cfg = block_cfg(3, 4, 5);
    ParamStore store = make_block_store<float>(cfg, 3);
    Rng rng(4);
    Tensor x = rand_tensor<float>({2, 3, 6, 6}, rng);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    Tensor off = t.val(predict_offsets(t, p.offset, t.constant(x), cfg.radius));
    CHECK(off.shape == Shape{2, 8, 6, 6});
    for (float v : off.data) CHECK(v == 0.0f);
}

TEST_CASE("predicted offsets always stay inside the search radius") {
    const NLFeMFConfig cfg = block_cfg(4, 3, 5);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        // fan-in-scaled random draws with a re-randomized final layer
        ParamStore store = make_block_store<float>(cfg, seed);
        Rng prng(seed * 31 + 7);
        for (const char* part : {".weight", ".bias"})
            for (auto& v : store.at(std::string("blk.offset_cnn.conv5") + part).value.data)
                v = static_cast<float>(prng.uniform(-0.5, 0.5));
        Rng rng(seed + 1000);
        Tensor x = rand_tensor<float>({1, 4, 7, 7}, rng, -2.0, 2.0);
        Tape<float> t;
        std::vector<std::pair<std::string, Value>> bound;
        NlfemfParams p = bind_block(t, store, cfg, bound);
        Tensor off = t.val(predict_offsets(t, p.offset, t.constant(x), cfg.radius));
        CHECK(max_abs(off) < static_cast<float>(cfg.radius));
        CHECK(max_abs(off) > 0.0f);
    }
    // saturating parameter scales still never leave the closed window
    ParamStore store = make_block_store<float>(cfg, 99);
    randomize_store(store, 100, 0.8);
    Rng rng(101);
    Tensor x = rand_tensor<float>({1, 4, 7, 7}, rng, -2.0, 2.0);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    CHECK(max_abs(t.val(predict_offsets(t, p.offset, t.constant(x), cfg.radius))) <=
          static_cast<float>(cfg.radius));
}

TEST_CASE("collaborative filter with identity transforms and saturated modulation is the identity") {
    const NLFeMFConfig cfg = block_cfg(3, 4, 2);
    ParamStore store = make_block_store<float>(cfg, 8);
    testutil::set_identity_nlfemf(store, "blk", cfg.channels, cfg.neighbors);
    Rng rng(9);
    Tensor stack = rand_tensor<float>({1, 12, 5, 5}, rng);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    Tensor y = t.val(collaborative_filter(t, p, t.constant(stack), cfg.neighbors));
    CHECK(max_abs_diff(y, stack) < 1e-6f);
}

TEST_CASE("collaborative filter with suppressed modulation collapses to the output bias") {
    const NLFeMFConfig cfg = block_cfg(3, 4, 2);
    ParamStore store = make_block_store<float>(cfg, 10);
    testutil::set_identity_nlfemf(store, "blk", cfg.channels, cfg.neighbors);
    auto& mb = store.at("blk.mod_cnn.conv2.bias").value;
    std::fill(mb.data.begin(), mb.data.end(), -20.0f);
    Rng rng(11);
    Tensor stack = rand_tensor<float>({1, 12, 5, 5}, rng);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    Tensor y = t.val(collaborative_filter(t, p, t.constant(stack), cfg.neighbors));
    CHECK(max_abs(y) < 1e-6f);
}

TEST_CASE("grouped transform never mixes distinct feature channels") {
    const NLFeMFConfig cfg = block_cfg(4, 3, 2);
    ParamStore store = make_block_store<float>(cfg, 12);
    randomize_store(store, 13, 0.6);
    Rng rng(14);
    const int ck = cfg.channels * cfg.neighbors;
    Tensor stack = rand_tensor<float>({1, ck, 4, 4}, rng);

    auto transform = [&](const Tensor& s) {
        Tape<float> t;
        std::vector<std::pair<std::string, Value>> bound;
        NlfemfParams p = bind_block(t, store, cfg, bound);
        return t.val(conv2d(t, t.constant(s), p.transform_in.w, p.transform_in.b, 1, 0, cfg.channels));
    };
    const Tensor base = transform(stack);
    for (int c = 0; c < cfg.channels; ++c) {
        Tensor perturbed = stack;
        for (int k = 0; k < cfg.neighbors; ++k)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) perturbed.at4(0, c * cfg.neighbors + k, i, j) += 0.37f;
        const Tensor out = transform(perturbed);
        for (int cc = 0; cc < cfg.channels; ++cc) {
            float delta = 0;
            for (int k = 0; k < cfg.neighbors; ++k)
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        delta = std::max(delta, std::abs(out.at4(0, cc * cfg.neighbors + k, i, j) -
                                                         base.at4(0, cc * cfg.neighbors + k, i, j)));
            if (cc == c)
                CHECK(delta > 0.0f);
            else
                CHECK(delta == 0.0f); // cross-group sensitivity is structurally zero
        }
    }
}

TEST_CASE("aggregation with hand-set averaging weights equals the per-channel neighbor mean") {
    const NLFeMFConfig cfg = block_cfg(3, 4, 2);
    ParamStore store = make_block_store<float>(cfg, 15);
    testutil::set_identity_nlfemf(store, "blk", cfg.channels, cfg.neighbors);
    Rng rng(16);
    Tensor stack = rand_tensor<float>({1, 12, 3, 3}, rng);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    Tensor y = t.val(aggregate(t, p, t.constant(stack), cfg.neighbors));
    REQUIRE(y.shape == Shape{1, 3, 3, 3});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                float mean = 0;
                for (int k = 0; k < 4; ++k) mean += stack.at4(0, c * 4 + k, i, j);
                mean /= 4.0f;
                CHECK(y.at4(0, c, i, j) == doctest::Approx(mean).epsilon(1e-5));
            }
}

TEST_CASE("aggregation with zero weights yields its bias; random weights match a per-pixel matvec") {
    const NLFeMFConfig cfg = block_cfg(2, 3, 2);
    ParamStore store = make_block_store<float>(cfg, 17);
    randomize_store(store, 18, 0.7);
    Rng rng(19);
    Tensor stack = rand_tensor<float>({1, 6, 4, 4}, rng);

    {
        ParamStore zs = make_block_store<float>(cfg, 17);
        auto& zw = zs.at("blk.aggregate.weight").value;
        std::fill(zw.data.begin(), zw.data.end(), 0.0f);
        auto& b = zs.at("blk.aggregate.bias").value;
        b.data = {1.5f, -2.5f};
        Tape<float> t;
        std::vector<std::pair<std::string, Value>> bound;
        NlfemfParams p = bind_block(t, zs, cfg, bound);
        Tensor y = t.val(aggregate(t, p, t.constant(stack), cfg.neighbors));
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) CHECK(y.at4(0, c, i, j) == b.data[static_cast<std::size_t>(c)]);
    }

    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    Tensor y = t.val(aggregate(t, p, t.constant(stack), cfg.neighbors));
    const auto& w = store.at("blk.aggregate.weight").value; // 2 x 6 x 1 x 1
    const auto& b = store.at("blk.aggregate.bias").value;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                float acc = b.data[static_cast<std::size_t>(c)];
                for (int s = 0; s < 6; ++s) acc += w.at4(c, s, 0, 0) * stack.at4(0, s, i, j);
                CHECK(std::abs(y.at4(0, c, i, j) - acc) < 1e-5f);
            }
}

TEST_CASE("identity configuration makes the whole block reproduce its input") {
    const NLFeMFConfig cfg = block_cfg(3, 4, 3);
    ParamStore store = make_block_store<float>(cfg, 20);
    testutil::set_identity_nlfemf(store, "blk", cfg.channels, cfg.neighbors);
    Rng rng(21);
    Tensor x = rand_tensor<float>({2, 3, 6, 7}, rng);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound);
    Tensor y = t.val(nlfemf_forward(t, p, cfg, t.constant(x)));
    CHECK(max_abs_diff(y, x) < 1e-5f);
}

TEST_CASE("block output shape equals input shape for assorted sizes") {
    const NLFeMFConfig cfg = block_cfg(2, 3, 2);
    ParamStore store = make_block_store<float>(cfg, 22);
    randomize_store(store, 23, 0.4);
    Rng rng(24);
    for (int hw : {8, 9, 16}) {
        Tensor x = rand_tensor<float>({1, 2, hw, hw}, rng);
        Tape<float> t;
        std::vector<std::pair<std::string, Value>> bound;
        NlfemfParams p = bind_block(t, store, cfg, bound);
        CHECK(t.val(nlfemf_forward(t, p, cfg, t.constant(x))).shape == x.shape);
    }
}

TEST_CASE("block gradients match finite differences end to end") {
    const NLFeMFConfig cfg = block_cfg(4, 3, 2);
    auto run = [&cfg](ParamStoreT<double>& st, bool wg) {
        Tape<double> t;
        std::vector<std::pair<std::string, Value>> bound;
        BindSink<double> bind{t, st, bound, wg};
        NlfemfParams p = declare_nlfemf(bind, "blk", cfg);
        Value x = t.leaf(st.at("x").value, wg);
        Value proj = t.leaf(st.at("proj").value, wg);
        bound.emplace_back("x", x);
        bound.emplace_back("proj", proj);
        Value loss = sum(t, mul(t, nlfemf_forward(t, p, cfg, x), proj));
        FdEval ev{t.val(loss).data[0], t.min_kink_distance()};
        if (wg) {
            t.backward(loss);
            for (auto& [n, v] : bound)
                std::copy(t.grad(v).data.begin(), t.grad(v).data.end(), st.at(n).grad.data.begin());
        }
        return ev;
    };
    // draws landing too close to a sampling or activation kink are excluded
    bool checked = false;
    for (std::uint64_t attempt = 0; attempt < 25 && !checked; ++attempt) {
        ParamStoreT<double> store = make_block_store<double>(cfg, 25 + attempt);
        randomize_store(store, 26 + attempt * 131, 0.4);
        Rng rng(27 + attempt);
        store.add("x", rand_tensor<double>({1, 4, 6, 6}, rng, 0.0, 1.0));
        store.add("proj", rand_tensor<double>({1, 4, 6, 6}, rng));
        FdReport rep = fd_check(store, run, 1e-4, 1e-3, 2e-4, 1e-4);
        if (rep.skipped_near_kink) continue;
        checked = true;
        CHECK(rep.max_rel_err < 1e-4);
    }
    CHECK(checked);
}

TEST_CASE("gradients stay finite for inputs in the unit range") {
    const NLFeMFConfig cfg = block_cfg(3, 2, 2);
    ParamStore store = make_block_store<float>(cfg, 28);
    randomize_store(store, 29, 0.6);
    Rng rng(30);
    Tensor x = rand_tensor<float>({1, 3, 8, 8}, rng, 0.0, 1.0);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    NlfemfParams p = bind_block(t, store, cfg, bound, true);
    Value xv = t.leaf(x, true);
    Value y = nlfemf_forward(t, p, cfg, xv);
    t.backward(sum(t, y));
    CHECK(all_finite(t.grad(xv)));
    for (auto& [n, v] : bound) CHECK(all_finite(t.grad(v)));
}

TEST_CASE("local window matching reproduces constant-offset gathering exactly") {
    NLFeMFConfig cfg = block_cfg(2, 15, 9, Matching::local_window);
    const auto [wh, ww] = NLFeMFConfig::local_window_dims(cfg.neighbors, cfg.radius);
    CHECK(wh == 3);
    CHECK(ww == 5);

    Rng rng(31);
    Tensor x = rand_tensor<float>({1, 2, 6, 6}, rng);
    Tensor offsets = local_window_offsets<float>(cfg, 1, 6, 6);
    CHECK(offsets.shape == Shape{1, 30, 6, 6});

    Tape<float> t;
    Tensor stack = t.val(gather_neighbors(t, t.constant(x), t.constant(offsets)));
    // integer window displacements with border clamping, checked by hand
    int k = 0;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -2; dx <= 2; ++dx, ++k)
            for (int c = 0; c < 2; ++c)
                for (int i = 0; i < 6; ++i)
                    for (int j = 0; j < 6; ++j) {
                        const int si = std::clamp(i + dy, 0, 5);
                        const int sj = std::clamp(j + dx, 0, 5);
                        CHECK(stack.at4(0, c * 15 + k, i, j) == x.at4(0, c, si, sj));
                    }
}

TEST_CASE("local window requires an odd factorization within the radius") {
    CHECK(NLFeMFConfig::local_window_dims(9, 9) == std::pair<int, int>{3, 3});
    CHECK(NLFeMFConfig::local_window_dims(7, 9) == std::pair<int, int>{1, 7});
    CHECK_THROWS_AS(NLFeMFConfig::local_window_dims(4, 9), std::invalid_argument);
    CHECK_THROWS_AS(NLFeMFConfig::local_window_dims(15, 1), std::invalid_argument);
}

TEST_CASE("nl block with zero convnext weights and identity core is the identity") {
    const NLFeMFConfig cfg = block_cfg(3, 2, 2);
    ParamStoreT<float> store;
    Rng rng(33);
    InitSink<float> init{store, rng};
    declare_nl_block(init, "nb", cfg);
    testutil::set_zero_convnext(store, "nb.pre");
    testutil::set_zero_convnext(store, "nb.post");
    testutil::set_identity_nlfemf(store, "nb.nlfemf", cfg.channels, cfg.neighbors);

    Tensor x = rand_tensor<float>({1, 3, 7, 5}, rng);
    Tape<float> t;
    std::vector<std::pair<std::string, Value>> bound;
    BindSink<float> bind{t, store, bound, false};
    NlBlockParams p = declare_nl_block(bind, "nb", cfg);
    Tensor y = t.val(nl_block_forward(t, p, cfg, t.constant(x)));
    CHECK(y.shape == x.shape);
    CHECK(max_abs_diff(y, x) < 1e-5f);
}
