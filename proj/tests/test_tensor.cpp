#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "nlmf/errors.hpp"
#include "nlmf/rng.hpp"
#include "nlmf/tensor.hpp"
#include "testutil.hpp"

using namespace nlmf;

TEST_CASE("shape validation") {
    CHECK_THROWS_AS(Tensor(Shape{}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor(Shape{2, 0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
    Tensor t(Shape{2, 3});
    CHECK(t.size() == 6);
    CHECK(t.data[5] == 0.0f);
}

TEST_CASE("concat_channels") {
    Tensor a = Tensor::full(Shape{1, 2, 2, 2}, 1.0f);
    Tensor b = Tensor::full(Shape{1, 3, 2, 2}, 2.0f);
    Tensor c = concat_channels(a, b);
    CHECK(c.shape == Shape{1, 5, 2, 2});
    CHECK(c.at4(0, 1, 1, 1) == 1.0f);
    CHECK(c.at4(0, 2, 0, 0) == 2.0f);
    CHECK_THROWS_AS(concat_channels(a, Tensor(Shape{1, 1, 3, 2})), std::invalid_argument);
}

TEST_CASE("ntf round trip is bit-exact") {
    Rng rng(11);
    Tensor t = testutil::rand_tensor<float>({2, 3, 4, 5}, rng, -100.0, 100.0);
    t.data[0] = -0.0f;
    t.data[1] = 1e-38f;
    const std::string path = (std::filesystem::temp_directory_path() / "nlmf_test_tensor.ntf").string();
    save_ntf(path, t);
    Tensor u = load_ntf(path);
    REQUIRE(u.shape == t.shape);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        std::uint32_t ba, bb;
        std::memcpy(&ba, &t.data[static_cast<std::size_t>(i)], 4);
        std::memcpy(&bb, &u.data[static_cast<std::size_t>(i)], 4);
        REQUIRE(ba == bb);
    }
    std::filesystem::remove(path);
}

TEST_CASE("ntf rejects garbage") {
    const std::string path = (std::filesystem::temp_directory_path() / "nlmf_test_bad.ntf").string();
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("not a tensor at all", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_ntf(path), DataError);
    CHECK_THROWS_AS(load_ntf("/nonexistent/nowhere.ntf"), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("rng determinism and serialization") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
    const std::string state = a.serialize();
    const double expect_next = [&] {
        Rng c(0);
        c.deserialize(state);
        return c.uniform();
    }();
    CHECK(a.uniform() == expect_next);
}
