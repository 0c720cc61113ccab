#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

#include "mpseg/parallel.hpp"
#include "mpseg/phantom.hpp"
#include "mpseg/volume_io.hpp"
#include "test_util.hpp"

using namespace mpseg;
using namespace mpseg::phantom;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("noiseless easy phantom hits the table exactly") {
    PhantomConfig cfg;
    cfg.noise_std = 0.0;
    const auto s = generate_subject(cfg, 2);
    REQUIRE(s.image.channels() == 4);
    for (int k = 0; k < 32; ++k) {
        for (int j = 0; j < 32; ++j) {
            for (int i = 0; i < 32; ++i) {
                const int label = s.mask.at(i, j, k);
                const bool brain = s.geometry.brain.contains({double(i), double(j), double(k)});
                for (int c = 0; c < 4; ++c) {
                    const float v = s.image.at(c, i, j, k);
                    if (!brain) {
                        CHECK(v == 0.0f);
                    } else {
                        CHECK(v == static_cast<float>(region_intensity(label, c, Difficulty::Easy)));
                    }
                }
            }
        }
    }
    CHECK(region_intensity(3, 0, Difficulty::Easy) == 1.0);  // ET bright on channel 0
    CHECK(region_intensity(2, 3, Difficulty::Easy) == 1.0);  // ED bright on channel 3
    CHECK(region_intensity(0, 1, Difficulty::Easy) == 0.5);
}

TEST_CASE("medium difficulty halves the contrast") {
    for (int label = 0; label < 4; ++label) {
        for (int c = 0; c < 4; ++c) {
            const double easy = region_intensity(label, c, Difficulty::Easy) - 0.5;
            const double medium = region_intensity(label, c, Difficulty::Medium) - 0.5;
            CHECK(medium == doctest::Approx(0.5 * easy));
        }
    }
}

TEST_CASE("labels nest inside their ellipsoids") {
    PhantomConfig cfg;
    for (int idx = 0; idx < 6; ++idx) {
        const auto s = generate_subject(cfg, idx);
        const auto& geo = s.geometry;
        std::set<int> labels;
        std::size_t brain = 0;
        std::size_t tumour = 0;
        for (int k = 0; k < 32; ++k) {
            for (int j = 0; j < 32; ++j) {
                for (int i = 0; i < 32; ++i) {
                    const Vec3 p{double(i), double(j), double(k)};
                    const int l = s.mask.at(i, j, k);
                    labels.insert(l);
                    brain += geo.brain.contains(p);
                    tumour += l != 0;
                    if (l == 1) {
                        CHECK(geo.enhancing.contains(p));
                        CHECK(geo.core.contains(p));
                    }
                    if (l == 3) {
                        CHECK(geo.enhancing.contains(p));
                    }
                    if (l != 0) {
                        CHECK(geo.edema.contains(p));
                        CHECK(geo.brain.contains(p));
                    }
                }
            }
        }
        CHECK(labels == std::set<int>{0, 1, 2, 3});
        const double frac = static_cast<double>(tumour) / static_cast<double>(brain);
        CHECK(frac >= 0.01);
        CHECK(frac <= 0.15);
    }
}

TEST_CASE("subjects are a pure function of (seed, index)") {
    PhantomConfig cfg;
    cfg.seed = 9;
    const auto a = generate_subject(cfg, 4);
    const auto b = generate_subject(cfg, 4);
    CHECK(a.image == b.image);
    CHECK(a.mask == b.mask);
    const auto c = generate_subject(cfg, 5);
    CHECK(!(c.mask == a.mask));
    PhantomConfig other = cfg;
    other.seed = 10;
    CHECK(!(generate_subject(other, 4).image == a.image));
}

TEST_CASE("config validation") {
    PhantomConfig cfg;
    cfg.grid_size = 8;
    CHECK_THROWS_AS(generate_subject(cfg, 0), Error);
    cfg = PhantomConfig{};
    cfg.noise_std = -1.0;
    try {
        generate_subject(cfg, 0);
        FAIL("expected InvalidConfig");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidConfig);
    }
}

TEST_CASE("dataset layout, manifest and reload") {
    testutil::TempDir tmp("ph");
    PhantomConfig cfg;
    const auto m = generate_dataset(12, cfg, tmp.path());
    REQUIRE(m.subject_ids.size() == 12);

    std::set<std::string> dirs;
    for (const auto& entry : fs::directory_iterator(tmp.path())) {
        if (entry.is_directory()) {
            dirs.insert(entry.path().filename().string());
            CHECK(std::distance(fs::directory_iterator(entry.path()), fs::directory_iterator{}) == 5);
        }
    }
    CHECK(dirs == std::set<std::string>(m.subject_ids.begin(), m.subject_ids.end()));

    const auto j = nlohmann::json::parse(slurp(m.manifest_path));
    REQUIRE(j.at("subjects").size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
        const auto& s = j["subjects"][i];
        CHECK(s.at("id").get<std::string>() == m.subject_ids[i]);
        for (const char* key : {"t1c", "t1n", "t2f", "t2w", "seg"}) {
            CHECK(fs::exists(tmp.path() / s.at("files").at(key).get<std::string>()));
        }
    }

    const auto rec = io::find_subject(tmp.path(), m.subject_ids[3]);
    const auto loaded = io::load_subject(rec, 4);
    const auto truth = generate_subject(cfg, 3);
    CHECK(loaded.image == truth.image);
    CHECK(*loaded.seg == truth.mask);
}

TEST_CASE("parallel generation writes the same bytes") {
    testutil::TempDir a("ph");
    testutil::TempDir b("ph");
    PhantomConfig cfg;
    cfg.grid_size = 16;
    set_thread_count(1);
    generate_dataset(4, cfg, a.path());
    set_thread_count(3);
    generate_dataset(4, cfg, b.path());
    set_thread_count(1);
    for (int i = 0; i < 4; ++i) {
        const std::string id = subject_id(i);
        for (const char* suffix : {"-t1c.nii.gz", "-t2w.nii.gz", "-seg.nii.gz"}) {
            CHECK(slurp(a.path() / id / (id + suffix)) == slurp(b.path() / id / (id + suffix)));
        }
    }
    CHECK(slurp(a.path() / "manifest.json") == slurp(b.path() / "manifest.json"));
}
