#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "iexplain/classifier.hpp"
#include "iexplain/clustering.hpp"
#include "iexplain/errors.hpp"
#include "iexplain/evaluation.hpp"
#include "iexplain/io_formats.hpp"
#include "iexplain/rng.hpp"
#include "iexplain/volume.hpp"

using namespace iexplain;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("iexplain_io_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }

    static int& counter() {
        static int n = 0;
        return n;
    }
};

Volume random_volume(int w, int h, int d, std::uint64_t seed) {
    Volume v(w, h, d);
    Rng rng(seed);
    for (float& x : v.data) x = rng.next_float();
    return v;
}

}  // namespace

TEST_CASE("fnv1a64: reference vectors") {
    // Published FNV-1a test vectors.
    CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
    CHECK(fnv1a64_hex("foobar", 6) == "85944171f73967e8");
}

TEST_CASE("volume io: f32 round trip with sidecar raw payload") {
    TempDir dir;
    Volume v = random_volume(7, 5, 3, 1);
    v.spacing = {0.7f, 0.7f, 2.5f};
    const std::string path = dir.file("vol.json");
    save_volume(v, ValueSemantics::windowed, path);
    CHECK(fs::exists(dir.file("vol.raw")));

    const auto [loaded, header] = load_volume(path);
    CHECK(loaded.data == v.data);
    CHECK(loaded.width == 7);
    CHECK(loaded.spacing == v.spacing);
    CHECK(header.value_semantics == "windowed");
    CHECK(header.dtype == "f32");
    CHECK(header.dims == std::array<int, 3>{7, 5, 3});
}

TEST_CASE("volume io: masks take the u8 payload and stay binary") {
    TempDir dir;
    Volume m(6, 4, 2);
    m.at(1, 1, 0) = 1.0f;
    m.at(5, 3, 1) = 1.0f;
    const std::string path = dir.file("mask.json");
    save_volume(m, ValueSemantics::mask, path);

    const auto [loaded, header] = load_volume(path);
    CHECK(header.dtype == "u8");
    CHECK(loaded.data == m.data);
    // u8 payload is one byte per voxel.
    CHECK(fs::file_size(dir.file("mask.raw")) == m.size());

    Volume not_binary(2, 2, 1, 0.5f);
    CHECK_THROWS_AS(save_volume(not_binary, ValueSemantics::mask, dir.file("bad.json")),
                    DataError);
}

TEST_CASE("volume io: corruption is detected by kind") {
    TempDir dir;
    const Volume v = random_volume(5, 5, 2, 2);
    const std::string path = dir.file("vol.json");
    save_volume(v, ValueSemantics::hu, path);

    SUBCASE("missing file") {
        try {
            load_volume(dir.file("absent.json"));
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind == IoError::Kind::missing_file);
        }
    }
    SUBCASE("flipped payload byte fails the checksum") {
        std::fstream raw(dir.file("vol.raw"), std::ios::in | std::ios::out | std::ios::binary);
        raw.seekp(10);
        char b;
        raw.seekg(10);
        raw.get(b);
        b = static_cast<char>(b ^ 0x40);
        raw.seekp(10);
        raw.put(b);
        raw.close();
        try {
            load_volume(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind == IoError::Kind::checksum_mismatch);
        }
    }
    SUBCASE("truncated payload fails on length") {
        fs::resize_file(dir.file("vol.raw"), 11);
        try {
            load_volume(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind == IoError::Kind::length_mismatch);
        }
    }
    SUBCASE("wrong magic") {
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        in.close();
        j["magic"] = "NOPE";
        std::ofstream out(path);
        out << j.dump();
        out.close();
        try {
            load_volume(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind == IoError::Kind::bad_magic);
        }
    }
    SUBCASE("future version") {
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        in.close();
        j["version"] = 99;
        std::ofstream out(path);
        out << j.dump();
        out.close();
        try {
            load_volume(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind == IoError::Kind::version_mismatch);
        }
    }
    SUBCASE("schema violation") {
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        in.close();
        j.erase("dims");
        std::ofstream out(path);
        out << j.dump();
        out.close();
        try {
            load_volume(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind == IoError::Kind::schema_violation);
        }
    }
}

TEST_CASE("volume io: provenance objects survive the round trip") {
    TempDir dir;
    const Volume v = random_volume(4, 4, 2, 3);
    nlohmann::json prov;
    prov["run_config_hash"] = "deadbeef";
    prov["study_id"] = "study_007";
    const std::string path = dir.file("vol.json");
    save_volume(v, ValueSemantics::heatmap, path, prov);
    const auto [loaded, header] = load_volume(path);
    CHECK(header.provenance["run_config_hash"] == "deadbeef");
    CHECK(header.provenance["study_id"] == "study_007");
}

TEST_CASE("cluster set io: RLE round trip with stats") {
    TempDir dir;
    Volume m(12, 9, 4);
    Rng rng(7);
    for (float& v : m.data) v = rng.next_double() < 0.3 ? 1.0f : 0.0f;
    const ClusterSet cs = connected_components(m);
    REQUIRE(!cs.clusters.empty());

    nlohmann::json prov;
    prov["study_id"] = "s1";
    const std::string path = dir.file("clusters.json");
    save_cluster_set(cs, path, prov);

    nlohmann::json got_prov;
    const ClusterSet loaded = load_cluster_set(path, &got_prov);
    CHECK(got_prov["study_id"] == "s1");
    CHECK(loaded.source_dims == cs.source_dims);
    REQUIRE(loaded.clusters.size() == cs.clusters.size());
    for (std::size_t i = 0; i < cs.clusters.size(); ++i) {
        CHECK(loaded.clusters[i].id == cs.clusters[i].id);
        CHECK(loaded.clusters[i].voxels == cs.clusters[i].voxels);
        CHECK(loaded.clusters[i].stats.voxel_count == cs.clusters[i].stats.voxel_count);
        CHECK(loaded.clusters[i].stats.centroid[0] ==
              doctest::Approx(cs.clusters[i].stats.centroid[0]));
        CHECK(loaded.clusters[i].stats.bbox_min == cs.clusters[i].stats.bbox_min);
        CHECK(loaded.clusters[i].stats.bbox_max == cs.clusters[i].stats.bbox_max);
    }

    // Empty set round trip.
    ClusterSet empty;
    empty.source_dims = {3, 3, 3};
    save_cluster_set(empty, dir.file("empty.json"));
    const ClusterSet e = load_cluster_set(dir.file("empty.json"));
    CHECK(e.clusters.empty());
    CHECK(e.source_dims == std::array<int, 3>{3, 3, 3});
}

TEST_CASE("classifier io: exact weight round trip") {
    TempDir dir;
    const ClassifierParams p = init_params(8, 16, 77);
    const std::string path = dir.file("model.json");
    nlohmann::json prov;
    prov["run_config_hash"] = "cafe";
    save_classifier(p, path, prov);

    const ClassifierParams q = load_classifier(path);
    CHECK(q.c1 == p.c1);
    CHECK(q.c2 == p.c2);
    CHECK(q.input_depth == p.input_depth);
    CHECK(q.conv1_w == p.conv1_w);
    CHECK(q.conv1_b == p.conv1_b);
    CHECK(q.conv2_w == p.conv2_w);
    CHECK(q.conv2_b == p.conv2_b);
    CHECK(q.fc_w == p.fc_w);
    CHECK(q.fc_b == p.fc_b);

    // The weight blob participates in the checksum.
    std::fstream raw(dir.file("model.raw"), std::ios::in | std::ios::out | std::ios::binary);
    raw.seekp(0);
    raw.put('\x7f');
    raw.close();
    CHECK_THROWS_AS(load_classifier(path), IoError);
}

TEST_CASE("metrics io: report round trip including optionals") {
    TempDir dir;
    MetricsReport m;
    m.tp = 5;
    m.fp = 2;
    m.fn = 3;
    m.rates = prf(5, 2, 3);
    m.per_study = {{"a", 3, 1, 1}, {"b", 2, 1, 2}};
    m.auc_roc = 0.9375;
    const std::string path = dir.file("metrics.json");
    save_metrics(m, path);
    const MetricsReport r = load_metrics(path);
    CHECK(r.tp == 5);
    CHECK(r.fp == 2);
    CHECK(r.fn == 3);
    CHECK(r.rates.sensitivity.value() == doctest::Approx(m.rates.sensitivity.value()));
    CHECK(r.rates.f1 == doctest::Approx(m.rates.f1));
    REQUIRE(r.per_study.size() == 2);
    CHECK(r.per_study[1].study_id == "b");
    CHECK(r.per_study[1].fn == 2);
    CHECK(r.auc_roc.value() == doctest::Approx(0.9375));

    MetricsReport none;
    none.rates = prf(0, 0, 0);
    save_metrics(none, dir.file("none.json"));
    const MetricsReport rn = load_metrics(dir.file("none.json"));
    CHECK_FALSE(rn.rates.sensitivity.has_value());
    CHECK_FALSE(rn.auc_roc.has_value());
}

TEST_CASE("manifest io: entries, labels, and referential checks") {
    TempDir dir;
    const Volume v = random_volume(6, 6, 3, 9);
    Volume gt(6, 6, 3);
    gt.at(2, 2, 1) = 1.0f;
    save_volume(v, ValueSemantics::hu, dir.file("s0.json"));
    save_volume(gt, ValueSemantics::mask, dir.file("s0_gt.json"));

    DatasetManifest m;
    m.dims = {6, 6, 3};
    m.positivity = 1.0;
    m.seed = 4;
    ManifestEntry e;
    e.id = "s0";
    e.volume_path = "s0.json";
    e.gt_path = "s0_gt.json";
    e.positive = true;
    e.slice_labels = {0, 1, 0};
    m.entries.push_back(e);
    const std::string path = dir.file("manifest.json");
    save_manifest(m, path);

    const DatasetManifest got = load_manifest(path);
    REQUIRE(got.entries.size() == 1);
    CHECK(got.dims == m.dims);
    CHECK(got.seed == 4);
    CHECK(got.entries[0].id == "s0");
    CHECK(got.entries[0].slice_labels == std::vector<std::uint8_t>{0, 1, 0});
    CHECK(got.entries[0].positive);

    // A manifest referencing a missing study fails the referential check
    // unless the caller opts out.
    fs::remove(dir.file("s0.json"));
    fs::remove(dir.file("s0.raw"));
    try {
        load_manifest(path);
        FAIL("expected IoError");
    } catch (const IoError& e2) {
        CHECK(e2.kind == IoError::Kind::referential);
    }
    CHECK_NOTHROW(load_manifest(path, false));
}

TEST_CASE("atomic writes: no partial file is left behind on failure") {
    TempDir dir;
    const Volume v = random_volume(4, 4, 1, 5);
    // Writing into a directory that does not exist must fail cleanly.
    CHECK_THROWS_AS(
        save_volume(v, ValueSemantics::hu, (dir.path / "nodir" / "x.json").string()),
        IoError);
    // And must not leave temp files in the parent.
    std::size_t residue = 0;
    for (const auto& entry : fs::directory_iterator(dir.path)) {
        (void)entry;
        ++residue;
    }
    CHECK(residue == 0);
}

TEST_CASE("path helpers") {
    CHECK(parent_dir("/a/b/c.json") == "/a/b");
    CHECK(parent_dir("c.json").empty());
    CHECK(join_path("/a/b", "c.json") == "/a/b/c.json");
    CHECK(join_path("", "c.json") == "c.json");
}
