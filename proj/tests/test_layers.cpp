#include <catch2/catch_amalgamated.hpp>

#include "exprbench/layers.hpp"

#include "testutil.hpp"

using namespace exprbench;

namespace {

template <class T>
ConvParams<T> make_conv(int in_c, int out_c, int k, int stride, PadSpec pad,
                        T wfill = T(0)) {
    ConvParams<T> p;
    p.in_channels = in_c;
    p.out_channels = out_c;
    p.kh = p.kw = k;
    p.stride = stride;
    p.pad = pad;
    p.weights = Tensor<T>(out_c, in_c, k, k, wfill);
    p.bias.assign(static_cast<std::size_t>(out_c), T(0));
    return p;
}

} // namespace

TEST_CASE("conv output dims match the Tang first layer", "[conv]") {
    // 42x42 input, 5x5 kernel, stride 1, pad 2 -> 42x42
    auto p = make_conv<float>(1, 32, 5, 1, PadSpec::symmetric(2));
    Tensor<float> x(1, 1, 42, 42, 1.0f);
    auto y = conv2d_forward(x, p);
    REQUIRE(y.shape() == std::array<int, 4>{1, 32, 42, 42});
}

TEST_CASE("conv identity on 1x1", "[conv]") {
    auto p = make_conv<float>(1, 1, 1, 1, PadSpec{});
    p.weights[0] = 1.0f;
    Tensor<float> x(1, 1, 1, 1);
    x[0] = 3.25f;
    auto y = conv2d_forward(x, p);
    REQUIRE(y.size() == 1);
    REQUIRE(y[0] == 3.25f);
}

TEST_CASE("conv sliding sum hand example", "[conv]") {
    // 3x3 ones (*) 2x2 ones, stride 1, no pad -> 2x2 of 4
    auto p = make_conv<double>(1, 1, 2, 1, PadSpec{}, 1.0);
    Tensor<double> x(1, 1, 3, 3, 1.0);
    auto y = conv2d_forward(x, p);
    REQUIRE(y.shape() == std::array<int, 4>{1, 1, 2, 2});
    for (std::size_t k = 0; k < y.size(); ++k)
        REQUIRE(y[k] == 4.0);

    // constant-1 upstream grad: every weight sees four 1-valued positions
    Tensor<double> g(1, 1, 2, 2, 1.0);
    auto grads = conv2d_backward(g, x, p);
    for (std::size_t k = 0; k < grads.grad_w.size(); ++k)
        REQUIRE(grads.grad_w[k] == 4.0);
    REQUIRE(grads.grad_b[0] == 4.0);
}

TEST_CASE("conv validation errors", "[conv]") {
    auto p = make_conv<float>(2, 4, 3, 1, PadSpec{});
    Tensor<float> wrong_channels(1, 3, 8, 8);
    REQUIRE_THROWS_AS(conv2d_forward(wrong_channels, p),
                      std::invalid_argument);
    Tensor<float> too_small(1, 2, 2, 2);
    REQUIRE_THROWS_AS(conv2d_forward(too_small, p), std::invalid_argument);
}

TEST_CASE("conv zero grad and zero weights", "[conv]") {
    Rng rng(9);
    auto p = make_conv<double>(2, 3, 3, 1, PadSpec::symmetric(1));
    p.weights = random_uniform<double>(p.weights.shape(), -1, 1, rng);
    p.bias = {0.5, -1.0, 2.0};
    Tensor<double> x = random_uniform<double>({2, 2, 5, 5}, -1, 1, rng);

    auto y = conv2d_forward(x, p);
    Tensor<double> zero_g(y.shape());
    auto grads = conv2d_backward(zero_g, x, p);
    REQUIRE(grads.grad_x.reduce_max() == 0.0);
    REQUIRE(grads.grad_w.reduce_max() == 0.0);

    // all-zero weights: output is the bias broadcast
    auto pz = make_conv<double>(2, 3, 3, 1, PadSpec::symmetric(1));
    pz.bias = {0.5, -1.0, 2.0};
    auto yb = conv2d_forward(x, pz);
    for (int oc = 0; oc < 3; ++oc)
        for (int yy = 0; yy < 5; ++yy)
            for (int xx = 0; xx < 5; ++xx)
                REQUIRE(yb.at(0, oc, yy, xx) == pz.bias[(std::size_t)oc]);
}

TEST_CASE("conv is linear in its input with zero bias", "[conv]") {
    Rng rng(17);
    auto p = make_conv<double>(2, 3, 3, 2, PadSpec::top_left(1));
    p.weights = random_uniform<double>(p.weights.shape(), -1, 1, rng);
    Tensor<double> x = random_uniform<double>({1, 2, 7, 7}, -1, 1, rng);
    Tensor<double> y = random_uniform<double>({1, 2, 7, 7}, -1, 1, rng);
    const double a = 1.7, b = -0.6;
    auto mix = x.zip(y, [&](double u, double v) { return a * u + b * v; });
    auto lhs = conv2d_forward(mix, p);
    auto fx = conv2d_forward(x, p);
    auto fy = conv2d_forward(y, p);
    auto rhs = fx.zip(fy, [&](double u, double v) { return a * u + b * v; });
    for (std::size_t k = 0; k < lhs.size(); ++k)
        REQUIRE_THAT(lhs[k], Catch::Matchers::WithinAbs(rhs[k], 1e-12));
}

TEST_CASE("maxpool shapes and backward routing", "[pool]") {
    // Tang layer 2: 42 -> 21 under 3x3(2,1)
    Tensor<float> x(1, 32, 42, 42, 0.0f);
    PoolGeom g{3, 3, 2, PadSpec::symmetric(1)};
    auto r = maxpool_forward(x, g);
    REQUIRE(r.out.shape() == std::array<int, 4>{1, 32, 21, 21});

    // unique argmax routes the gradient to one cell
    Tensor<float> w(1, 1, 2, 2);
    w[0] = 1;
    w[1] = 2;
    w[2] = 3;
    w[3] = 4;
    PoolGeom whole{2, 2, 1, PadSpec{}};
    auto rr = maxpool_forward(w, whole);
    REQUIRE(rr.out[0] == 4.0f);
    Tensor<float> gr(1, 1, 1, 1, 1.0f);
    auto gx = maxpool_backward(gr, w.shape(), whole, rr.picked);
    REQUIRE(gx[0] == 0.0f);
    REQUIRE(gx[1] == 0.0f);
    REQUIRE(gx[2] == 0.0f);
    REQUIRE(gx[3] == 1.0f);
}

TEST_CASE("maxpool tie-break picks the first cell in window order", "[pool]") {
    Tensor<float> w(1, 1, 2, 2, 5.0f);
    PoolGeom geom{2, 2, 1, PadSpec{}};
    auto r = maxpool_forward(w, geom);
    Tensor<float> gr(1, 1, 1, 1, 1.0f);
    auto gx = maxpool_backward(gr, w.shape(), geom, r.picked);
    REQUIRE(gx[0] == 1.0f);
    REQUIRE(gx[1] == 0.0f);
    REQUIRE(gx[2] == 0.0f);
    REQUIRE(gx[3] == 0.0f);
}

TEST_CASE("maxpool shift equivariance", "[pool]") {
    Rng rng(21);
    Tensor<double> x = random_uniform<double>({2, 2, 9, 9}, -1, 1, rng);
    PoolGeom g{3, 3, 2, PadSpec::symmetric(1)};
    const double c = 2.75;
    auto shifted = x.map([&](double v) { return v + c; });
    auto a = maxpool_forward(shifted, g).out;
    auto b = maxpool_forward(x, g).out.map([&](double v) { return v + c; });
    for (std::size_t k = 0; k < a.size(); ++k)
        REQUIRE_THAT(a[k], Catch::Matchers::WithinAbs(b[k], 1e-12));
}

TEST_CASE("avgpool semantics", "[pool]") {
    // constant input with pad 0 stays constant
    Tensor<double> x(1, 1, 6, 6, 3.5);
    PoolGeom g{2, 2, 2, PadSpec{}};
    auto y = avgpool_forward(x, g);
    for (std::size_t k = 0; k < y.size(); ++k)
        REQUIRE(y[k] == 3.5);

    // padded cells count as zeros but the divisor stays kh*kw
    Tensor<double> one(1, 1, 1, 1, 4.0);
    PoolGeom padded{2, 2, 1, PadSpec::top_left(1)};
    auto z = avgpool_forward(one, padded);
    REQUIRE(z.size() == 1);
    REQUIRE(z[0] == 1.0); // 4 / (2*2)

    // backward spreads the gradient uniformly
    Tensor<double> gr(1, 1, 3, 3, 9.0);
    PoolGeom g3{3, 3, 1, PadSpec::symmetric(1)};
    Tensor<double> src(1, 1, 3, 3, 1.0);
    auto gx = avgpool_backward(gr, src.shape(), g3);
    double total_in = 0, total_out = 0;
    for (std::size_t k = 0; k < gx.size(); ++k)
        total_in += gx[k];
    for (std::size_t k = 0; k < gr.size(); ++k)
        total_out += gr[k];
    // mass is conserved up to the padded cells' share
    REQUIRE(total_in <= total_out);
    REQUIRE(gx.at(0, 0, 1, 1) == 9.0); // center cell sees all 9 windows / 9
}

TEST_CASE("stochastic pooling degenerate and eval cases", "[pool]") {
    PoolGeom g{2, 2, 2, PadSpec{}};
    Tensor<double> x(1, 1, 2, 2);
    x[0] = 5;
    Rng rng(33);
    for (int i = 0; i < 20; ++i) {
        auto r = stochpool_forward(x, g, Mode::train, &rng);
        REQUIRE(r.out[0] == 5.0);
        REQUIRE(r.picked[0] == 0);
    }

    Tensor<double> zeros(1, 1, 2, 2, 0.0);
    auto tz = stochpool_forward(zeros, g, Mode::train, &rng);
    REQUIRE(tz.out[0] == 0.0);
    auto ez = stochpool_forward(zeros, g, Mode::eval, nullptr);
    REQUIRE(ez.out[0] == 0.0);

    // eval mode weighted average: window [1,3] -> 1*(1/4) + 3*(3/4) = 2.5
    Tensor<double> w(1, 1, 1, 2);
    w[0] = 1;
    w[1] = 3;
    PoolGeom g12{1, 2, 1, PadSpec{}};
    auto ev = stochpool_forward(w, g12, Mode::eval, nullptr);
    REQUIRE_THAT(ev.out[0], Catch::Matchers::WithinAbs(2.5, 1e-12));

    Tensor<double> neg(1, 1, 1, 2);
    neg[0] = -1;
    neg[1] = 2;
    REQUIRE_THROWS_AS(stochpool_forward(neg, g12, Mode::train, &rng),
                      std::invalid_argument);
}

TEST_CASE("stochastic pooling sampling frequencies", "[pool]") {
    Tensor<double> w(1, 1, 1, 2);
    w[0] = 1;
    w[1] = 3;
    PoolGeom g{1, 2, 1, PadSpec{}};
    Rng rng(8);
    const int draws = 100000;
    int first = 0;
    for (int i = 0; i < draws; ++i) {
        auto r = stochpool_forward(w, g, Mode::train, &rng);
        if (r.picked[0] == 0)
            ++first;
    }
    double freq = static_cast<double>(first) / draws;
    REQUIRE_THAT(freq, Catch::Matchers::WithinAbs(0.25, 0.01));
}

TEST_CASE("stochastic pooling eval output stays within window bounds",
          "[pool]") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> x = random_uniform<double>({1, 2, 6, 6}, 0, 5, rng);
        PoolGeom g{3, 3, 3, PadSpec{}};
        auto r = stochpool_forward(x, g, Mode::eval, nullptr);
        for (int ch = 0; ch < 2; ++ch)
            for (int oy = 0; oy < 2; ++oy)
                for (int ox = 0; ox < 2; ++ox) {
                    double lo = 1e18, hi = -1e18;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            double v = x.at(0, ch, oy * 3 + ky, ox * 3 + kx);
                            lo = std::min(lo, v);
                            hi = std::max(hi, v);
                        }
                    double out = r.out.at(0, ch, oy, ox);
                    REQUIRE(out >= lo - 1e-12);
                    REQUIRE(out <= hi + 1e-12);
                }
    }
}

TEST_CASE("lrn forward formula", "[lrn]") {
    // alpha = 0 -> out = x / k^beta
    Tensor<double> x(1, 4, 2, 2, 2.0);
    LrnParams p{5, 0.0, 0.75, 2.0};
    auto y = lrn_forward(x, p);
    const double expect = 2.0 / std::pow(2.0, 0.75);
    for (std::size_t k = 0; k < y.size(); ++k)
        REQUIRE_THAT(y[k], Catch::Matchers::WithinAbs(expect, 1e-12));

    // single channel, n=1, k=1, alpha=1, beta=1, x=1 -> 1/2
    Tensor<double> one(1, 1, 1, 1, 1.0);
    LrnParams q{1, 1.0, 1.0, 1.0};
    auto z = lrn_forward(one, q);
    REQUIRE_THAT(z[0], Catch::Matchers::WithinAbs(0.5, 1e-15));

    REQUIRE_THROWS_AS(lrn_forward(one, LrnParams{2, 1.0, 1.0, 1.0}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(lrn_forward(one, LrnParams{1, 1.0, -1.0, 1.0}),
                      std::invalid_argument);
}

TEST_CASE("fc identity and validation", "[fc]") {
    FcParams<double> p;
    p.in_units = 4;
    p.out_units = 4;
    p.weights = Tensor<double>(4, 4, 1, 1);
    for (int i = 0; i < 4; ++i)
        p.weights.at(i, i, 0, 0) = 1.0;
    p.bias.assign(4, 0.0);
    Tensor<double> x(1, 1, 2, 2);
    for (int k = 0; k < 4; ++k)
        x[static_cast<std::size_t>(k)] = k + 0.5;
    auto y = fc_forward(x, p);
    REQUIRE(y.shape() == std::array<int, 4>{1, 4, 1, 1});
    for (int k = 0; k < 4; ++k)
        REQUIRE(y[static_cast<std::size_t>(k)] == k + 0.5);

    Tensor<double> wrong(1, 1, 3, 1);
    REQUIRE_THROWS_AS(fc_forward(wrong, p), std::invalid_argument);
}

TEST_CASE("relu and dropout", "[relu][dropout]") {
    Tensor<double> x(1, 1, 1, 2);
    x[0] = -3;
    x[1] = 3;
    auto y = relu_forward(x);
    REQUIRE(y[0] == 0.0);
    REQUIRE(y[1] == 3.0);

    // p = 0: the mask is exactly 1 everywhere, identity in both modes
    Rng rng(2);
    auto m0 = dropout_mask<double>({1, 1, 4, 4}, 0.0, rng);
    for (std::size_t k = 0; k < m0.size(); ++k)
        REQUIRE(m0[k] == 1.0);

    // train-mode mask entries are exactly 0 or 1/(1-p)
    auto m = dropout_mask<double>({1, 1, 32, 32}, 0.25, rng);
    int kept = 0;
    for (std::size_t k = 0; k < m.size(); ++k) {
        bool zero = m[k] == 0.0;
        bool scaled = m[k] == 1.0 / 0.75;
        REQUIRE((zero || scaled));
        kept += scaled ? 1 : 0;
    }
    REQUIRE(kept > 0);

    REQUIRE_THROWS_AS(dropout_mask<double>({1, 1, 2, 2}, 1.0, rng),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(dropout_mask<double>({1, 1, 2, 2}, -0.1, rng),
                      std::invalid_argument);
}

TEST_CASE("inverted dropout is unbiased at p=0.5", "[dropout]") {
    Rng rng(12);
    Tensor<double> x(1, 1, 8, 8, 2.0);
    double acc = 0.0;
    const int trials = 4000;
    for (int t = 0; t < trials; ++t) {
        auto m = dropout_mask<double>(x.shape(), 0.5, rng);
        acc += static_cast<double>(dropout_forward(x, m).reduce_sum());
    }
    double mean = acc / (trials * 64.0);
    REQUIRE_THAT(mean / 2.0, Catch::Matchers::WithinAbs(1.0, 0.02));
}

TEST_CASE("softmax cross entropy", "[softmax]") {
    // uniform logits: p = 1/7 each, loss = ln 7
    Tensor<double> logits(1, 7, 1, 1, 0.0);
    std::vector<int> labels = {3};
    auto r = softmax_xent(logits, std::span<const int>(labels));
    REQUIRE_THAT(r.loss, Catch::Matchers::WithinAbs(std::log(7.0), 1e-9));
    for (int j = 0; j < 7; ++j)
        REQUIRE_THAT(r.probs[static_cast<std::size_t>(j)],
                     Catch::Matchers::WithinAbs(1.0 / 7.0, 1e-9));

    // saturated true logit: loss ~ 0, grad ~ 0
    Tensor<double> sat(1, 7, 1, 1, 0.0);
    sat.at(0, 2, 0, 0) = 1000.0;
    std::vector<int> lab2 = {2};
    auto s = softmax_xent(sat, std::span<const int>(lab2));
    REQUIRE(s.loss < 1e-9);
    for (std::size_t k = 0; k < s.grad.size(); ++k)
        REQUIRE(std::abs(s.grad[k]) < 1e-9);

    std::vector<int> bad = {9};
    REQUIRE_THROWS_AS(softmax_xent(logits, std::span<const int>(bad)),
                      std::invalid_argument);
    Tensor<double> inf(1, 7, 1, 1, 0.0);
    inf[0] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(softmax_xent(inf, std::span<const int>(labels)),
                      std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and shift invariance", "[softmax]") {
    Rng rng(14);
    Tensor<double> logits = random_uniform<double>({8, 7, 1, 1}, -4, 4, rng);
    std::vector<int> labels(8);
    for (int i = 0; i < 8; ++i)
        labels[static_cast<std::size_t>(i)] =
            static_cast<int>(rng.next_below(7));
    auto a = softmax_xent(logits, std::span<const int>(labels));
    for (int i = 0; i < 8; ++i) {
        double sum = 0;
        for (int j = 0; j < 7; ++j)
            sum += a.probs.at(i, j, 0, 0);
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
    auto shifted = logits.map([](double v) { return v + 13.5; });
    auto b = softmax_xent(shifted, std::span<const int>(labels));
    REQUIRE_THAT(a.loss, Catch::Matchers::WithinAbs(b.loss, 1e-6));
}
