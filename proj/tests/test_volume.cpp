#include <cstdint>
#include <set>
#include <vector>

#include "doctest.h"
#include "iexplain/errors.hpp"
#include "iexplain/rng.hpp"
#include "iexplain/volume.hpp"

using namespace iexplain;

TEST_CASE("rng: streams are deterministic and split is order-free") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    // split depends only on (key, stream id), not on prior draws.
    Rng c(7);
    c.next_u64();
    c.next_u64();
    Rng d(7);
    CHECK(c.split(3).next_u64() == d.split(3).next_u64());
    CHECK(c.split(3).next_u64() != d.split(4).next_u64());
}

TEST_CASE("rng: uniform ranges hold") {
    Rng r(1);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.next_double();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const int k = r.uniform_int(-3, 5);
        CHECK(k >= -3);
        CHECK(k <= 5);
        const double v = r.uniform(2.5, 2.5);
        CHECK(v == 2.5);
    }
}

TEST_CASE("rng: normal has sane first moments") {
    Rng r(9);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("volume: x-fastest indexing") {
    Volume v(4, 3, 2);
    CHECK(v.size() == 24);
    CHECK(v.index(1, 0, 0) == 1);
    CHECK(v.index(0, 1, 0) == 4);
    CHECK(v.index(0, 0, 1) == 12);
    v.at(3, 2, 1) = 5.0f;
    CHECK(v.data[23] == 5.0f);
    CHECK(v.in_bounds(3, 2, 1));
    CHECK_FALSE(v.in_bounds(4, 0, 0));
    CHECK_FALSE(v.in_bounds(0, -1, 0));
}

TEST_CASE("volume: finite and binary guards") {
    Volume v(2, 2, 1, 1.0f);
    CHECK_NOTHROW(v.require_finite("t"));
    CHECK_NOTHROW(v.require_binary("t"));
    v.data[1] = 0.5f;
    CHECK_FALSE(v.is_binary());
    CHECK_THROWS_AS(v.require_binary("t"), DataError);
    v.data[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(v.require_finite("t"), DataError);
}

TEST_CASE("hu_window: clamps and maps the window linearly") {
    Volume v(3, 1, 1);
    v.data = {-500.0f, 100.0f, 900.0f};  // below, center, above
    const Volume w = hu_window(v);       // center 100, width 400 -> [-100, 300]
    CHECK(w.data[0] == 0.0f);
    CHECK(w.data[1] == doctest::Approx(0.5f));
    CHECK(w.data[2] == 1.0f);

    v.data = {-100.0f, 300.0f, 0.0f};
    const Volume e = hu_window(v);
    CHECK(e.data[0] == doctest::Approx(0.0f));
    CHECK(e.data[1] == doctest::Approx(1.0f));
    CHECK(e.data[2] == doctest::Approx(0.25f));
}

TEST_CASE("extract_minivolume: centered stack with edge replication") {
    Volume study(4, 4, 10);
    for (int z = 0; z < 10; ++z) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) study.at(x, y, z) = static_cast<float>(z);
        }
    }

    const MiniVolume mid = extract_minivolume(study, 5);
    CHECK(mid.center_slice == 5);
    CHECK(mid.volume.depth == kMiniDepth);
    for (int k = 0; k < kMiniDepth; ++k) {
        CHECK(mid.volume.at(0, 0, k) == static_cast<float>(5 - kMiniHalf + k));
    }

    // Clamped at the bottom: slices [-3, 3] replicate slice 0.
    const MiniVolume lo = extract_minivolume(study, 0);
    CHECK(lo.volume.at(0, 0, 0) == 0.0f);
    CHECK(lo.volume.at(0, 0, kMiniHalf) == 0.0f);
    CHECK(lo.volume.at(0, 0, kMiniDepth - 1) == 3.0f);

    const MiniVolume hi = extract_minivolume(study, 9);
    CHECK(hi.volume.at(0, 0, kMiniHalf) == 9.0f);
    CHECK(hi.volume.at(0, 0, kMiniDepth - 1) == 9.0f);

    CHECK_THROWS_AS(extract_minivolume(study, -1), IndexError);
    CHECK_THROWS_AS(extract_minivolume(study, 10), IndexError);
}

TEST_CASE("apply_mask: zeroes exactly the masked voxels") {
    Rng rng(3);
    Volume v(5, 4, 3);
    Volume seg(5, 4, 3);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v.data[i] = rng.next_float();
        seg.data[i] = rng.next_double() < 0.3 ? 1.0f : 0.0f;
    }
    const Volume out = apply_mask(v, seg);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (seg.data[i] != 0.0f) {
            CHECK(out.data[i] == 0.0f);
        } else {
            CHECK(out.data[i] == v.data[i]);
        }
    }

    Volume bad(5, 4, 3, 0.5f);
    CHECK_THROWS_AS(apply_mask(v, bad), DataError);
    Volume wrong(4, 4, 3);
    CHECK_THROWS_AS(apply_mask(v, wrong), ShapeError);
}
