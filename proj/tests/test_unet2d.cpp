#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mpseg/unet2d.hpp"
#include "gradcheck_fixture.hpp"
#include "test_util.hpp"

using namespace mpseg;
using namespace mpseg::nn;

namespace {

UNetConfig small(int depth = 2, int base = 4, std::uint64_t seed = 0) {
    UNetConfig c;
    c.in_channels = 3;
    c.num_classes = 4;
    c.depth = depth;
    c.base_filters = base;
    c.seed = seed;
    return c;
}

Tensor4 random_batch(int n, int c, int h, int w, std::uint64_t seed) {
    Tensor4 t(n, c, h, w);
    Rng rng(seed);
    for (double& x : t.data) {
        x = rng.uniform(-1.0, 1.0);
    }
    return t;
}

std::size_t conv_params(int in, int out, int k) { return static_cast<std::size_t>(out) * in * k * k + out; }

} // namespace

TEST_CASE("parameter count for depth 1, base 4") {
    const UNet net = build_unet(small(1, 4));
    const std::size_t expected = conv_params(3, 4, 3) + conv_params(4, 4, 3)   // encoder
                                 + conv_params(4, 8, 3) + conv_params(8, 8, 3) // bottleneck
                                 + conv_params(8, 4, 3)                        // up conv
                                 + conv_params(8, 4, 3) + conv_params(4, 4, 3) // decoder after concat
                                 + conv_params(4, 4, 1);                       // logits
    CHECK(expected == 1892);
    CHECK(net.parameter_count() == expected);
}

TEST_CASE("initialisation is seeded, biases start at zero") {
    const UNet a = build_unet(small(2, 4, 3));
    const UNet b = build_unet(small(2, 4, 3));
    const UNet c = build_unet(small(2, 4, 4));
    CHECK(a.flat_parameters() == b.flat_parameters());
    CHECK(a.flat_parameters() != c.flat_parameters());
    for (const auto& layer : a.layers()) {
        for (double x : layer.bias) {
            CHECK(x == 0.0);
        }
    }
}

TEST_CASE("invalid configs") {
    for (auto mutate : std::vector<std::function<void(UNetConfig&)>>{
             [](UNetConfig& c) { c.depth = 0; }, [](UNetConfig& c) { c.base_filters = 0; },
             [](UNetConfig& c) { c.num_classes = 1; }, [](UNetConfig& c) { c.in_channels = 0; },
             [](UNetConfig& c) { c.kernel_size = 5; }}) {
        UNetConfig c = small();
        mutate(c);
        try {
            build_unet(c);
            FAIL("expected InvalidConfig");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::InvalidConfig);
        }
    }
}

TEST_CASE("forward contract") {
    UNet net = build_unet(small(2, 4));
    SUBCASE("shape") {
        const Tensor4 out = net.forward(random_batch(2, 3, 32, 32, 1), false);
        CHECK(out.n == 2);
        CHECK(out.c == 4);
        CHECK(out.h == 32);
        CHECK(out.w == 32);
    }
    SUBCASE("zero input and zero final layer give zero logits") {
        auto& last = net.layers().back();
        std::fill(last.weight.begin(), last.weight.end(), 0.0);
        const Tensor4 out = net.forward(Tensor4(1, 3, 16, 16), false);
        for (double v : out.data) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("doubling one interior pixel moves some logit") {
        Tensor4 x = random_batch(1, 3, 32, 32, 2);
        for (double& v : x.data) {
            v = std::abs(v) + 0.1;
        }
        const Tensor4 before = net.forward(x, false);
        for (int ch = 0; ch < 3; ++ch) {
            x.at(0, ch, 15, 17) *= 2.0;
        }
        const Tensor4 after = net.forward(x, false);
        double diff = 0.0;
        for (std::size_t i = 0; i < before.data.size(); ++i) {
            diff = std::max(diff, std::abs(before.data[i] - after.data[i]));
        }
        CHECK(diff > 0.0);
    }
    SUBCASE("shape errors") {
        CHECK_THROWS_AS(net.forward(Tensor4(1, 2, 16, 16), false), Error);
        try {
            net.forward(Tensor4(1, 3, 18, 16), false);
            FAIL("expected ShapeError");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::ShapeError);
        }
    }
    SUBCASE("predict agrees with forward") {
        const Tensor4 x = random_batch(2, 3, 16, 16, 5);
        CHECK(net.predict(x).data == net.forward(x, false).data);
    }
}

TEST_CASE("softmax") {
    Tensor4 eq(1, 4, 2, 2, 3.5);
    for (double p : softmax(eq).data) {
        CHECK(p == doctest::Approx(0.25));
    }
    Tensor4 big(1, 2, 1, 1);
    big.at(0, 0, 0, 0) = 1000.0;
    const Tensor4 p = softmax(big);
    CHECK(p.at(0, 0, 0, 0) == doctest::Approx(1.0));
    CHECK(p.at(0, 1, 0, 0) == doctest::Approx(0.0));
    CHECK(std::isfinite(p.at(0, 1, 0, 0)));

    Tensor4 r = random_batch(3, 5, 4, 4, 9);
    for (double& v : r.data) {
        v *= 30.0;
    }
    const Tensor4 q = softmax(r);
    for (int b = 0; b < 3; ++b) {
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) {
                double s = 0.0;
                for (int c = 0; c < 5; ++c) {
                    CHECK(q.at(b, c, i, j) >= 0.0);
                    CHECK(q.at(b, c, i, j) <= 1.0);
                    s += q.at(b, c, i, j);
                }
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
        }
    }
}

TEST_CASE("backward accumulation") {
    UNet net = build_unet(small(2, 4, 1));
    const Tensor4 x = random_batch(2, 3, 16, 16, 3);
    SUBCASE("zero upstream gradient leaves zero gradients") {
        const Tensor4 out = net.forward(x, true);
        net.zero_grad();
        net.backward(Tensor4(out.n, out.c, out.h, out.w));
        for (double g : net.flat_gradients()) {
            CHECK(g == 0.0);
        }
    }
    SUBCASE("two calls accumulate twice the gradient") {
        const Tensor4 out = net.forward(x, true);
        const Tensor4 up = random_batch(out.n, out.c, out.h, out.w, 8);
        net.zero_grad();
        net.backward(up);
        const auto once = net.flat_gradients();
        net.backward(up);
        const auto twice = net.flat_gradients();
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK(twice[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
        }
    }
    SUBCASE("backward without a cached forward") {
        UNet fresh = build_unet(small(2, 4, 1));
        try {
            fresh.backward(Tensor4(1, 4, 16, 16));
            FAIL("expected MissingActivations");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::MissingActivations);
        }
    }
}

TEST_CASE("gradient check, 2 levels, 4 filters, eps 1e-3") {
    Tensor4 x;
    std::vector<int> labels;
    testutil::quadrant_image(x, labels);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        UNet net = build_unet(small(2, 4, seed));
        testutil::settle(net, x);
        GradientCheckOptions opt;
        opt.seed = seed;
        const double err = gradient_check(net, x, labels, opt);
        worst = std::max(worst, err);
    }
    MESSAGE("worst relative error " << worst);
    CHECK(worst < 1e-3);
}

TEST_CASE("gradient check edge cases") {
    Tensor4 x;
    std::vector<int> labels;
    testutil::quadrant_image(x, labels);
    UNet net = build_unet(small(2, 4, 0));
    testutil::settle(net, x);

    GradientCheckOptions none;
    none.n_samples = 0;
    CHECK(gradient_check(net, x, labels, none) == 0.0);

    // corrupt the stored gradient of the final biases
    GradientCheckOptions mutated;
    const std::size_t total = net.parameter_count();
    for (std::size_t i = total - 4; i < total; ++i) {
        mutated.indices.push_back(i);
    }
    mutated.after_backward = [](UNet& n) {
        for (double& g : n.layers().back().grad_bias) {
            g *= 2.0;
        }
    };
    CHECK(gradient_check(net, x, labels, mutated) > 0.3);
}

TEST_CASE("forward and gradients are deterministic") {
    const Tensor4 x = random_batch(2, 3, 16, 16, 4);
    auto run = [&] {
        UNet net = build_unet(small(2, 4, 6));
        const Tensor4 out = net.forward(x, true);
        net.zero_grad();
        net.backward(out);
        return std::make_pair(out.data, net.flat_gradients());
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoint") {
    testutil::TempDir tmp("unet");
    UNet net = build_unet(small(2, 4, 2));
    save_checkpoint(net, tmp / "a.mpseg");
    const UNet back = load_checkpoint(tmp / "a.mpseg");
    CHECK(back.config().depth == 2);
    CHECK(back.config().base_filters == 4);
    const auto p = net.flat_parameters();
    const auto q = back.flat_parameters();
    REQUIRE(p.size() == q.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(q[i] == static_cast<double>(static_cast<float>(p[i])));
    }
    {
        std::ifstream in(tmp / "a.mpseg", std::ios::binary);
        char magic[6];
        in.read(magic, 6);
        CHECK(std::string(magic, 6) == "MPSEG1");
    }
    {
        std::ofstream out(tmp / "bad.mpseg", std::ios::binary);
        out << "NOTACHECKPOINT";
    }
    try {
        load_checkpoint(tmp / "bad.mpseg");
        FAIL("expected BadCheckpoint");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BadCheckpoint);
    }
}
