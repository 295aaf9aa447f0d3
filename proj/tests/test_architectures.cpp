#include <catch2/catch_amalgamated.hpp>

#include "exprbench/architectures.hpp"
#include "exprbench/network.hpp"

#include "testutil.hpp"

using namespace exprbench;

namespace {

std::vector<LayerSpec> table_rows(const ArchitectureSpec& spec) {
    std::vector<LayerSpec> rows;
    for (const LayerSpec& l : spec.layers)
        if (l.kind != LayerKind::relu && l.kind != LayerKind::dropout)
            rows.push_back(l);
    return rows;
}

} // namespace

TEST_CASE("tang layer sequence follows the table", "[arch]") {
    auto spec = builtin("tang");
    auto rows = table_rows(spec);
    REQUIRE(rows.size() == 8);
    REQUIRE(rows[0].kind == LayerKind::conv);
    REQUIRE(rows[0].kh == 5);
    REQUIRE(rows[0].pad == 2);
    REQUIRE(rows[0].units == 32);
    REQUIRE(rows[1].kind == LayerKind::maxp);
    REQUIRE(rows[1].stride == 2);
    REQUIRE(rows[2].kind == LayerKind::conv);
    REQUIRE(rows[2].kh == 4);
    REQUIRE(rows[2].units == 32);
    REQUIRE(rows[3].kind == LayerKind::maxp);
    REQUIRE(rows[4].kind == LayerKind::conv);
    REQUIRE(rows[4].kh == 5);
    REQUIRE(rows[5].kind == LayerKind::maxp);
    REQUIRE(rows[5].pad_top_left_only); // the asterisked pad
    REQUIRE(rows[6].kind == LayerKind::fc);
    REQUIRE(rows[6].units == 3072);
    REQUIRE(rows[7].kind == LayerKind::out);
    REQUIRE(rows[7].units == 7);

    // ReLU + dropout attach to every conv and fc block
    int relu = 0, drop = 0;
    for (const LayerSpec& l : spec.layers) {
        relu += l.kind == LayerKind::relu;
        drop += l.kind == LayerKind::dropout;
    }
    REQUIRE(relu == 4);
    REQUIRE(drop == 4);
}

TEST_CASE("yu pooling is stochastic everywhere", "[arch]") {
    auto spec = builtin("yu");
    int pools = 0;
    for (const LayerSpec& l : spec.layers)
        if (l.kind == LayerKind::maxp || l.kind == LayerKind::avgp ||
            l.kind == LayerKind::stochp) {
            ++pools;
            REQUIRE(l.kind == LayerKind::stochp);
        }
    REQUIRE(pools == 3);
}

TEST_CASE("imagenet ends with the 5x5 valid conv into 1024 maps", "[arch]") {
    auto spec = builtin("imagenet");
    const LayerSpec* last_conv = nullptr;
    for (const LayerSpec& l : spec.layers)
        if (l.kind == LayerKind::conv)
            last_conv = &l;
    REQUIRE(last_conv != nullptr);
    REQUIRE(last_conv->kh == 5);
    REQUIRE(last_conv->pad == 0);
    REQUIRE(last_conv->units == 1024);

    auto shapes = infer_shapes(spec);
    // the final conv output collapses to 1x1@1024
    bool found = false;
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].kind == LayerKind::conv &&
            spec.layers[i].units == 1024) {
            REQUIRE(shapes[i] == std::array<int, 3>{1024, 1, 1});
            found = true;
        }
    REQUIRE(found);

    REQUIRE_THROWS_AS(builtin("lenet"), std::invalid_argument);
}

TEST_CASE("spatial traces match the floor arithmetic", "[arch][trace]") {
    REQUIRE(spatial_trace(builtin("tang")) ==
            std::vector<int>{42, 42, 21, 20, 10, 10, 5, 3072, 7});
    REQUIRE(spatial_trace(builtin("yu")) ==
            std::vector<int>{42, 42, 21, 21, 21, 11, 11, 11, 5, 1024, 1024, 7});
    REQUIRE(spatial_trace(builtin("kahou")) ==
            std::vector<int>{42, 42, 20, 20, 20, 10, 10, 10, 5, 3072, 7});
    REQUIRE(spatial_trace(builtin("imagenet")) ==
            std::vector<int>{42, 42, 20, 20, 20, 10, 10, 10, 10, 10, 5, 1, 1024,
                             7});
}

TEST_CASE("flattened fc inputs", "[arch]") {
    // tang: 5*5*32 = 800, kahou/yu: 5*5*128 = 3200, imagenet: 1*1*1024
    auto check_fc_in = [](const std::string& name, int expect) {
        auto spec = builtin(name);
        auto shapes = infer_shapes(spec);
        for (std::size_t i = 0; i < spec.layers.size(); ++i)
            if (spec.layers[i].kind == LayerKind::fc) {
                auto in = i == 0 ? std::array<int, 3>{1, 42, 42}
                                 : shapes[i - 1];
                REQUIRE(in[0] * in[1] * in[2] == expect);
                return;
            }
        FAIL("no fc layer");
    };
    check_fc_in("tang", 800);
    check_fc_in("yu", 3200);
    check_fc_in("kahou", 3200);
    check_fc_in("imagenet", 1024);
}

TEST_CASE("shape inference rejects oversized windows", "[arch]") {
    ArchitectureSpec bad;
    bad.name = "bad";
    LayerSpec conv;
    conv.kind = LayerKind::conv;
    conv.kh = conv.kw = 50;
    conv.stride = 1;
    conv.pad = 0;
    conv.units = 4;
    bad.layers.push_back(conv);
    LayerSpec out;
    out.kind = LayerKind::out;
    out.units = 7;
    bad.layers.push_back(out);
    REQUIRE_THROWS_AS(infer_shapes(bad), std::invalid_argument);
}

TEST_CASE("parameter counts are stable", "[arch]") {
    REQUIRE(parameter_count(builtin("tang")) == 2525063);
    REQUIRE(parameter_count(builtin("yu")) == 4605783);
    REQUIRE(parameter_count(builtin("kahou")) == 9967431);
    REQUIRE(parameter_count(builtin("imagenet")) == 3912967);
}

TEST_CASE("glorot initialization bounds and determinism", "[arch][init]") {
    // fc 800 -> 3072: bound = sqrt(6/3872) ~ 0.03937
    ArchitectureSpec spec;
    spec.name = "fcprobe";
    spec.in_channels = 1;
    spec.in_h = 20;
    spec.in_w = 40; // flatten 800
    LayerSpec fc;
    fc.kind = LayerKind::fc;
    fc.units = 3072;
    spec.layers.push_back(fc);
    LayerSpec out;
    out.kind = LayerKind::out;
    out.units = 7;
    spec.layers.push_back(out);
    spec.classes = 7;

    Rng rng(42);
    auto blocks = init_params<double>(spec, rng);
    const double bound = std::sqrt(6.0 / (800.0 + 3072.0));
    REQUIRE_THAT(bound, Catch::Matchers::WithinAbs(0.03937, 5e-5));
    double lo = 1e9, hi = -1e9;
    for (std::size_t k = 0; k < blocks[0].w.size(); ++k) {
        lo = std::min(lo, blocks[0].w[k]);
        hi = std::max(hi, blocks[0].w[k]);
        REQUIRE(std::abs(blocks[0].w[k]) <= bound);
    }
    REQUIRE(lo < -0.9 * bound); // spread actually fills the interval
    REQUIRE(hi > 0.9 * bound);
    for (double b : blocks[0].b)
        REQUIRE(b == 0.0);

    Rng rng2(42);
    auto blocks2 = init_params<double>(spec, rng2);
    REQUIRE(blocks[0].w == blocks2[0].w);
}

TEST_CASE("forward smoke test over all builtins", "[arch][network]") {
    for (const std::string& name : builtin_names()) {
        DYNAMIC_SECTION(name) {
            Rng rng(7);
            Network<float> net(builtin(name), rng);
            Tensor<float> x =
                random_uniform<float>({50, 1, 42, 42}, -1, 1, rng);
            Tensor<float> logits = net.forward(x, Mode::eval);
            REQUIRE(logits.shape() == std::array<int, 4>{50, 7, 1, 1});
            for (std::size_t k = 0; k < logits.size(); ++k)
                REQUIRE(std::isfinite(logits[k]));
            REQUIRE(net.num_parameters() == parameter_count(builtin(name)));
        }
    }
}

TEST_CASE("architecture text round trips", "[arch][format]") {
    for (const std::string& name : builtin_names()) {
        DYNAMIC_SECTION(name) {
            auto spec = builtin(name);
            auto parsed = parse_spec(format_spec(spec), name);
            REQUIRE(parsed == spec);
        }
    }
    REQUIRE_THROWS_AS(parse_spec("conv 5x5 s1\nout 7\n"),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(parse_spec("warp 3\nout 7\n"), std::invalid_argument);
    REQUIRE_THROWS_AS(parse_spec("fc 10\n"), std::invalid_argument);

    // asterisk padding survives the round trip
    auto spec = parse_spec("input 1x10x10\nmaxp 3x3 s2 p1*\nout 7\n", "p");
    REQUIRE(spec.layers[0].pad_top_left_only);
    REQUIRE(spatial_trace(spec) == std::vector<int>{10, 5, 7});
}

TEST_CASE("table 3 deviations list the four known cells", "[arch]") {
    const auto& devs = table3_deviations();
    REQUIRE(devs.size() == 4);
    auto has = [&](const std::string& net, int layer) {
        for (const auto& d : devs)
            if (d.network == net && d.layer == layer)
                return true;
        return false;
    };
    REQUIRE(has("tang", 5));
    REQUIRE(has("yu", 4));
    REQUIRE(has("kahou", 2));
    REQUIRE(has("kahou", 4));
}
