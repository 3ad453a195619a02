#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "iexplain/classifier.hpp"
#include "iexplain/errors.hpp"
#include "iexplain/rng.hpp"
#include "iexplain/volume.hpp"
#include "oracles.hpp"

using namespace iexplain;

namespace {

MiniVolume random_mini(int w, int h, std::uint64_t seed) {
    MiniVolume mini;
    mini.volume = Volume(w, h, kMiniDepth);
    mini.center_slice = kMiniHalf;
    Rng rng(seed);
    for (float& v : mini.volume.data) v = rng.next_float();
    return mini;
}

}  // namespace

TEST_CASE("classifier: parameter count for the default architecture") {
    const ClassifierParams p = init_params(8, 16, 1);
    // conv1 27*8+8, conv2 27*8*16+16, fc 16+1.
    CHECK(p.param_count() == 224 + 3472 + 17);
    CHECK(p.param_count() == 3713);
    CHECK_NOTHROW(p.validate());
}

TEST_CASE("classifier: forward agrees with the plain-loop oracle") {
    // The default channel pair takes the blocked kernels; any other pair runs
    // the generic path. The width sweep crosses the block boundaries so the
    // scalar edge handling in the blocked kernels gets exercised too.
    struct Arch {
        int c1, c2;
    };
    for (const Arch a : {Arch{8, 16}, Arch{4, 6}}) {
        for (int w : {4, 5, 17, 18, 19, 26, 33}) {
            const ClassifierParams p = init_params(a.c1, a.c2, 11);
            const MiniVolume mini =
                random_mini(w, w % 2 == 0 ? w : w + 3, 100 + static_cast<std::uint64_t>(w));
            const double want = oracle::forward_logit(p, mini);
            const double got64 = forward_logit_f64(p, mini);
            CHECK(got64 == doctest::Approx(want).epsilon(1e-12));
            const Prediction pred = forward(p, mini);
            CHECK(static_cast<double>(pred.logit) == doctest::Approx(want).epsilon(2e-4));
            CHECK(pred.prob == doctest::Approx(1.0 / (1.0 + std::exp(-pred.logit))).epsilon(1e-6));
        }
    }
}

TEST_CASE("classifier: input shape preconditions") {
    const ClassifierParams p = init_params(8, 16, 1);
    MiniVolume bad;
    bad.volume = Volume(3, 8, kMiniDepth);  // in-plane < 4
    bad.center_slice = kMiniHalf;
    CHECK_THROWS_AS(forward(p, bad), ShapeError);
    bad.volume = Volume(8, 8, kMiniDepth + 1);
    CHECK_THROWS_AS(forward(p, bad), ShapeError);
}

TEST_CASE("classifier: gradient matches central differences") {
    const ClassifierParams p = init_params(8, 16, 5);
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const MiniVolume mini = random_mini(12, 12, seed);
        const double err = finite_diff_check(p, mini, 1e-4, 128, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("classifier: gradient support stays inside the pool-winner cones") {
    // Each of the 16 global-max winners reaches at most 27 conv2 taps, one
    // pool1 winner per tap, and 27 input voxels per winner: 16 * 27 * 27
    // voxels can carry gradient, every other voxel gets exactly zero.
    const ClassifierParams p = init_params(8, 16, 7);
    const MiniVolume mini = random_mini(64, 64, 4);
    const Volume g = input_gradient(p, mini);
    std::size_t nonzero = 0;
    for (float v : g.data) nonzero += v != 0.0f;
    CHECK(nonzero > 0);
    CHECK(nonzero <= 16u * 27u * 27u);
    CHECK(nonzero < g.size() / 2);
}

TEST_CASE("classifier: max pool ties break to the lowest linear index") {
    // Identity network: both convs are delta kernels on channel 0 and the
    // head reads channel 0, so logit = max over the twice-pooled input. A
    // constant input then ties every pool window and the global max; with
    // lowest-index tie-breaking the full gradient lands on voxel (0,0,0).
    ClassifierParams p;
    p.c1 = 8;
    p.c2 = 16;
    p.conv1_w.assign(27u * 8u, 0.0f);
    p.conv1_b.assign(8u, 0.0f);
    p.conv2_w.assign(27u * 8u * 16u, 0.0f);
    p.conv2_b.assign(16u, 0.0f);
    p.fc_w.assign(16u, 0.0f);
    const int k_center = ((0 + 1) * 3 + 0 + 1) * 3 + 0 + 1;  // tap (0,0,0)
    p.conv1_w[static_cast<std::size_t>(k_center) * 8u + 0u] = 1.0f;
    p.conv2_w[(static_cast<std::size_t>(k_center) * 8u + 0u) * 16u + 0u] = 1.0f;
    p.fc_w[0] = 1.0f;

    MiniVolume mini;
    mini.volume = Volume(8, 8, kMiniDepth, 0.5f);
    mini.center_slice = kMiniHalf;
    CHECK(forward_logit_f64(p, mini) == doctest::Approx(0.5).epsilon(1e-12));

    const Volume g = input_gradient(p, mini);
    CHECK(g.at(0, 0, 0) == doctest::Approx(1.0f));
    std::size_t nonzero = 0;
    for (float v : g.data) nonzero += v != 0.0f;
    CHECK(nonzero == 1);
}

TEST_CASE("classifier: f32 and f64 gradients agree in the aggregate") {
    const ClassifierParams p = init_params(8, 16, 13);
    const MiniVolume mini = random_mini(10, 14, 8);
    const Volume g32 = input_gradient(p, mini);
    const std::vector<double> g64 = input_gradient_f64(p, mini);
    REQUIRE(g64.size() == g32.size());
    double s32 = 0.0, s64 = 0.0;
    for (std::size_t i = 0; i < g64.size(); ++i) {
        s32 += static_cast<double>(g32.data[i]);
        s64 += g64[i];
    }
    CHECK(s32 == doctest::Approx(s64).epsilon(1e-3));
}

TEST_CASE("train: drives the loss down on a separable toy problem") {
    // Two constant-intensity studies: bright slices labeled 1, dark labeled 0.
    Volume bright(8, 8, kMiniDepth, 0.9f);
    Volume dark(8, 8, kMiniDepth, 0.1f);
    std::vector<SliceSample> data;
    for (int z = 0; z < kMiniDepth; ++z) {
        data.push_back({&bright, z, 1});
        data.push_back({&dark, z, 0});
    }
    TrainConfig cfg;
    cfg.iterations = 120;
    cfg.batch_size = 8;
    cfg.cutout_prob = 0.0;
    cfg.learning_rate = 0.05;
    std::vector<float> curve;
    const ClassifierParams p = train(data, cfg, &curve);
    REQUIRE(curve.size() == 120);
    CHECK(curve.back() < 0.2f);
    CHECK(curve.back() < curve.front());

    const MiniVolume mb{bright, kMiniHalf};
    const MiniVolume md{dark, kMiniHalf};
    CHECK(forward(p, mb).prob > 0.7f);
    CHECK(forward(p, md).prob < 0.3f);
}

TEST_CASE("train: deterministic given the seed") {
    Volume a(8, 8, kMiniDepth, 0.8f);
    Volume b(8, 8, kMiniDepth, 0.2f);
    std::vector<SliceSample> data;
    for (int z = 0; z < kMiniDepth; ++z) {
        data.push_back({&a, z, 1});
        data.push_back({&b, z, 0});
    }
    TrainConfig cfg;
    cfg.iterations = 15;
    const ClassifierParams p1 = train(data, cfg);
    const ClassifierParams p2 = train(data, cfg);
    CHECK(p1.conv1_w == p2.conv1_w);
    CHECK(p1.conv2_w == p2.conv2_w);
    CHECK(p1.fc_w == p2.fc_w);
    CHECK(p1.fc_b == p2.fc_b);

    cfg.seed = 8;
    const ClassifierParams p3 = train(data, cfg);
    CHECK(p1.conv1_w != p3.conv1_w);
}

TEST_CASE("train: refuses single-class data and bad configs") {
    Volume v(8, 8, kMiniDepth, 0.5f);
    std::vector<SliceSample> all_pos{{&v, 0, 1}, {&v, 1, 1}};
    TrainConfig cfg;
    cfg.iterations = 1;
    CHECK_THROWS_AS(train(all_pos, cfg), DataError);

    TrainConfig bad;
    bad.iterations = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.batch_size = 1;  // degenerate but legal
    CHECK_NOTHROW(bad.validate());
}

TEST_CASE("init_params: reproducible and correctly sized") {
    const ClassifierParams a = init_params(8, 16, 42);
    const ClassifierParams b = init_params(8, 16, 42);
    CHECK(a.conv1_w == b.conv1_w);
    CHECK(a.conv2_w == b.conv2_w);
    CHECK(a.conv1_w.size() == 27u * 8u);
    CHECK(a.conv2_w.size() == 27u * 8u * 16u);
    CHECK(a.fc_w.size() == 16u);
    for (float v : a.conv1_b) CHECK(v == 0.0f);
}
