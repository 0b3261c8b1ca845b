#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fd_check.hpp"
#include "groupalign/checkpoint.hpp"
#include "groupalign/personalization.hpp"

using namespace groupalign;

namespace {

// Overwrite a named parameter through the shared tensor handle.
void set_param(const NamedParams& params, const std::string& name, std::vector<double> values) {
    for (const auto& [n, t] : params)
        if (n == name) {
            REQUIRE(t.numel() == values.size());
            Tensor h = t;
            h.data() = std::move(values);
            return;
        }
    FAIL("no parameter named ", name);
}

}  // namespace

TEST_CASE("embed concatenates the selected rows") {
    Rng rng(1);
    CrossNetwork net({3, 4}, 2, 0, rng);
    auto params = net.named_params("p");
    set_param(params, "p/embed/0", {9, 9, 1, 2, 9, 9});        // row 1 = [1,2]
    set_param(params, "p/embed/1", {9, 9, 9, 9, 9, 9, 3, 4});  // row 3 = [3,4]

    UserProfile profile{{1, 3}};
    Tensor u0 = net.embed(profile);
    REQUIRE(u0.rank() == 1);
    REQUIRE(u0.numel() == 4);
    CHECK(u0.data() == std::vector<double>{1, 2, 3, 4});

    Tensor again = net.embed(profile);
    CHECK(u0.data() == again.data());

    CHECK_THROWS_AS(net.embed(UserProfile{{1}}), DimensionError);
    CHECK_THROWS_AS(net.embed(UserProfile{{1, 9}}), IndexError);
}

TEST_CASE("embed gradient reaches only the selected rows") {
    Rng rng(2);
    CrossNetwork net({3, 4}, 2, 0, rng);
    sum(square(net.embed(UserProfile{{2, 0}}))).backward();

    auto params = net.named_params("p");
    for (const auto& [name, t] : params) {
        if (name == "p/embed/0") {
            for (int r = 0; r < 3; ++r) {
                bool selected = r == 2;
                for (int c = 0; c < 2; ++c) CHECK((t.grad()[r * 2 + c] != 0.0) == selected);
            }
        }
        if (name == "p/embed/1") {
            for (int r = 0; r < 4; ++r) {
                bool selected = r == 0;
                for (int c = 0; c < 2; ++c) CHECK((t.grad()[r * 2 + c] != 0.0) == selected);
            }
        }
    }
}

TEST_CASE("crossing layers follow the residual rank-1 form") {
    Rng rng(3);

    SUBCASE("zero w and b is the identity, bitwise") {
        CrossNetwork net({2}, 3, 2, rng);
        auto params = net.named_params("p");
        set_param(params, "p/cross/0/w", {0, 0, 0});
        set_param(params, "p/cross/1/w", {0, 0, 0});
        Tensor u0 = net.embed(UserProfile{{1}});
        Tensor u = net.forward(u0);
        for (std::size_t i = 0; i < u0.numel(); ++i) CHECK(u.data()[i] == u0.data()[i]);
    }

    SUBCASE("hand-evaluated single layer") {
        CrossNetwork net({1}, 2, 1, rng);
        auto params = net.named_params("p");
        set_param(params, "p/embed/0", {1, 2});
        set_param(params, "p/cross/0/w", {1, 0});
        Tensor u = net.user_vector(UserProfile{{0}});
        CHECK(u.data()[0] == doctest::Approx(2.0).epsilon(1e-15));
        CHECK(u.data()[1] == doctest::Approx(4.0).epsilon(1e-15));
    }

    SUBCASE("the non-residual term is linear in w") {
        CrossNetwork net({2}, 4, 1, rng);
        Tensor u0 = net.embed(UserProfile{{0}});
        Tensor base = net.forward(u0);
        auto params = net.named_params("p");
        Tensor w;
        for (auto& [n, t] : params)
            if (n == "p/cross/0/w") w = t;
        for (auto& x : w.data()) x *= 3.0;
        Tensor scaled = net.forward(u0);
        for (std::size_t i = 0; i < u0.numel(); ++i) {
            double term = base.data()[i] - u0.data()[i];
            CHECK(scaled.data()[i] - u0.data()[i] == doctest::Approx(3.0 * term).epsilon(1e-12));
        }
    }

    SUBCASE("output length equals input length for every depth") {
        for (int depth = 0; depth < 4; ++depth) {
            CrossNetwork net({3, 2}, 3, depth, rng);
            CHECK(net.user_vector(UserProfile{{0, 1}}).numel() == 6);
        }
    }

    SUBCASE("length mismatch is rejected") {
        CrossNetwork net({2}, 3, 1, rng);
        CHECK_THROWS_AS(net.forward(Tensor::zeros({4})), DimensionError);
    }
}

TEST_CASE("distinct profiles give distinct user vectors") {
    Rng rng(4);
    CrossNetwork net({5, 7, 3}, 4, 2, rng);
    Tensor a = net.user_vector(UserProfile{{0, 2, 1}});
    Tensor b = net.user_vector(UserProfile{{0, 2, 2}});
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) differs = differs || a.data()[i] != b.data()[i];
    CHECK(differs);
}

TEST_CASE("fresh adaptive networks output exact zeros") {
    Rng rng(5);
    AdaptiveNetwork ada(6, 4, rng);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> v(6);
        for (auto& x : v) x = rng.uniform(-10, 10);
        Tensor out = ada.forward(Tensor::from_vector(std::move(v), {6}));
        for (double y : out.data()) CHECK(y == 0.0);
    }

    CHECK_THROWS_AS(ada.forward(Tensor::zeros({5})), DimensionError);
}

TEST_CASE("perturbing the final layer breaks the zero output") {
    Rng rng(6);
    AdaptiveNetwork ada(3, 3, rng);
    auto params = ada.named_params("ada");
    Tensor final_layer;
    for (auto& [n, t] : params)
        if (n == "ada/layer1") final_layer = t;
    REQUIRE(final_layer.defined());
    final_layer.data()[0] = 0.5;
    Tensor out = ada.forward(Tensor::from_vector({1, -2, 0.5}, {3}));
    bool nonzero = false;
    for (double y : out.data()) nonzero = nonzero || y != 0.0;
    CHECK(nonzero);
}

TEST_CASE("final-layer gradient is nonzero at zero-init") {
    Rng rng(7);
    AdaptiveNetwork ada(4, 2, rng);
    Tensor u = Tensor::from_vector({0.3, -1.0, 0.7, 2.0}, {4});

    auto loss_fn = [&] { return sum(square(add_const(ada.forward(u), 1.0))); };
    CHECK(fdtest::max_rel_grad_err(loss_fn, ada.params()) < 1e-4);

    for (auto p : ada.params()) p.zero_grad();
    loss_fn().backward();
    Tensor final_layer;
    for (auto& [n, t] : ada.named_params("ada"))
        if (n == "ada/layer1") final_layer = t;
    double norm = 0.0;
    for (double g : final_layer.grad()) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("cross network gradients match finite differences") {
    Rng rng(8);
    CrossNetwork net({3, 2}, 3, 2, rng);
    UserProfile profile{{1, 0}};
    auto loss_fn = [&] { return sum(square(net.user_vector(profile))); };
    CHECK(fdtest::max_rel_grad_err(loss_fn, net.params()) < 1e-4);
}

TEST_CASE("personalization parameters roundtrip through checkpoints") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "groupalign_pers_test";
    fs::create_directories(dir);
    std::string path = (dir / "pers.ckpt").string();

    Rng rng(9);
    CrossNetwork net({3, 4}, 2, 2, rng);
    AdaptiveNetwork ada(8, 5, rng);
    NamedParams params = net.named_params("personalization");
    for (auto& p : ada.named_params("personalization/ada/attn/0")) params.push_back(p);
    save_checkpoint(path, params);

    Rng rng2(10);
    CrossNetwork net2({3, 4}, 2, 2, rng2);
    AdaptiveNetwork ada2(8, 5, rng2);
    NamedParams params2 = net2.named_params("personalization");
    for (auto& p : ada2.named_params("personalization/ada/attn/0")) params2.push_back(p);
    load_checkpoint(path, params2);

    UserProfile profile{{2, 3}};
    Tensor a = net.user_vector(profile);
    Tensor b = net2.user_vector(profile);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    fs::remove_all(dir);
}
