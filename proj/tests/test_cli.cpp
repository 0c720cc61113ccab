#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "mpseg/commands.hpp"
#include "mpseg/phantom.hpp"
#include "mpseg/pipeline.hpp"
#include "mpseg/unet2d.hpp"
#include "mpseg/volume_io.hpp"
#include "test_util.hpp"

using namespace mpseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome invoke(std::vector<std::string> args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
}

std::string seg(const fs::path& root, const std::string& id) {
    return (root / id / (id + "-seg.nii.gz")).string();
}

} // namespace

TEST_CASE("phantom command writes a dataset, byte-identical on rerun") {
    testutil::TempDir a("cli");
    testutil::TempDir b("cli");
    const auto r = invoke({"phantom", "--n", "3", "--size", "16", "--seed", "4", "--out", a.path().string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("manifest.json") != std::string::npos);
    REQUIRE(invoke({"phantom", "--n", "3", "--size", "16", "--seed", "4", "--out", b.path().string()}).code == 0);
    for (int i = 0; i < 3; ++i) {
        const std::string id = phantom::subject_id(i);
        for (const char* m : {"t1c", "t1n", "t2f", "t2w", "seg"}) {
            const std::string name = id + "-" + m + ".nii.gz";
            CHECK(slurp(a.path() / id / name) == slurp(b.path() / id / name));
        }
    }
}

TEST_CASE("usage errors exit with 2") {
    const auto r = invoke({"phantom", "--n", "3"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--out") != std::string::npos);
    CHECK(invoke({"no-such-command"}).code == 2);
    CHECK(invoke({"phantom", "--n", "3", "--out", "/tmp/x", "--difficulty", "brutal"}).code == 2);
}

TEST_CASE("the installed binary reports exit codes") {
    const std::string bin = MPSEG_CLI_PATH;
    const int ok = std::system((bin + " --help > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(ok) == 0);
    const int bad = std::system((bin + " phantom --n 2 > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(bad) == 2);
}

TEST_CASE("evaluate against ground truth") {
    testutil::TempDir data("cli");
    phantom::PhantomConfig cfg;
    cfg.grid_size = 16;
    const auto m = phantom::generate_dataset(3, cfg, data.path());

    SUBCASE("prediction equal to ground truth scores 1.000") {
        testutil::TempDir pred("cli");
        for (const auto& id : m.subject_ids) {
            fs::copy_file(seg(data.path(), id), pred / (id + ".nii.gz"));
        }
        const auto r = invoke({"evaluate", "--pred", pred.path().string(), "--gt", data.path().string(), "--format",
                               "csv"});
        REQUIRE(r.code == 0);
        CHECK(r.out.find("Mean,1.000,1.000,1.000") != std::string::npos);
        CHECK(r.out.find("Std,0.000,0.000,0.000") != std::string::npos);
        CHECK(fs::exists(pred / "scores.csv"));
        CHECK(fs::exists(pred / "report.csv"));
    }

    SUBCASE("half overlap scores 0.5") {
        // 8 WT voxels against 8 shifted by 4: |A^B| = 4, Dice = 8/16
        testutil::TempDir gt("cli");
        testutil::TempDir pred("cli");
        GridSpec g;
        g.dims = {20, 1, 1};
        SegmentationMask a(g);
        SegmentationMask b(g);
        for (int i = 0; i < 8; ++i) {
            a.at(i, 0, 0) = 2;
            b.at(i + 4, 0, 0) = 2;
        }
        fs::create_directories(gt / "S1");
        io::write_mask(a, gt / "S1" / "S1-seg.nii.gz");
        io::write_mask(b, pred / "S1.nii.gz");
        const auto r = invoke({"evaluate", "--pred", pred.path().string(), "--gt", gt.path().string(), "--format",
                            "csv"});
        REQUIRE(r.code == 0);
        const auto scores = metrics::scores_from_csv(slurp(pred / "scores.csv"));
        REQUIRE(scores.size() == 1);
        CHECK(scores[0].dice.wt == 0.5);
        // no TC or ET anywhere: both empty counts as agreement
        CHECK(scores[0].dice.tc == 1.0);
        CHECK(scores[0].dice.et == 1.0);
    }

    SUBCASE("id mismatch names the missing subjects") {
        testutil::TempDir pred("cli");
        fs::copy_file(seg(data.path(), m.subject_ids[0]), pred / (m.subject_ids[0] + ".nii.gz"));
        fs::copy_file(seg(data.path(), m.subject_ids[1]), pred / "Stranger.nii.gz");
        const auto r = invoke({"evaluate", "--pred", pred.path().string(), "--gt", data.path().string()});
        CHECK(r.code != 0);
        CHECK(r.err.find(m.subject_ids[1]) != std::string::npos);
        CHECK(r.err.find(m.subject_ids[2]) != std::string::npos);
        CHECK(r.err.find("Stranger") != std::string::npos);
        CHECK(!fs::exists(pred / "scores.csv"));
    }
}

TEST_CASE("report command") {
    testutil::TempDir dir("cli");
    spit(dir / "scores.csv", "subject_id,dice_et,dice_tc,dice_wt\nA,0.2,1,0\nB,0.4,1,0.5\nC,0.6,1,1\n");
    const auto r = invoke({"report", "--scores", (dir / "scores.csv").string(), "--title", "Pooled"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("Pooled") != std::string::npos);
    CHECK(r.out.find("0.400") != std::string::npos);
    CHECK(r.out.find("0.200") != std::string::npos);
}

TEST_CASE("predict writes a mask on the input grid") {
    testutil::TempDir data("cli");
    testutil::TempDir model("cli");
    phantom::PhantomConfig cfg;
    cfg.grid_size = 16;
    const auto m = phantom::generate_dataset(1, cfg, data.path());

    nn::UNetConfig net_cfg;
    net_cfg.in_channels = 3;
    net_cfg.depth = 1;
    net_cfg.base_filters = 4;
    nn::save_checkpoint(nn::build_unet(net_cfg), model / "checkpoint.mpseg");
    pipeline::RunConfig run;
    run.views.count = 2;
    spit(model / "views.json", pipeline::view_spec(run).to_json());

    const fs::path out = model / "pred.nii.gz";
    const auto r = invoke({"predict", "--checkpoint", (model / "checkpoint.mpseg").string(), "--subject",
                        (data / m.subject_ids[0]).string(), "--out", out.string()});
    REQUIRE(r.code == 0);
    const auto pred = io::read_mask(out);
    const auto gt = io::read_mask(seg(data.path(), m.subject_ids[0]));
    CHECK(pred.grid.dims == gt.grid.dims);
    CHECK(pred.grid.spacing == gt.grid.spacing);
    for (auto l : pred.labels) {
        CHECK(l >= 0);
        CHECK(l <= 3);
    }
}

TEST_CASE("bad inputs surface readable errors") {
    testutil::TempDir dir("cli");
    spit(dir / "junk.mpseg", "definitely not a checkpoint");
    spit(dir / "views.json", "{}");
    const auto r = invoke({"predict", "--checkpoint", (dir / "junk.mpseg").string(), "--subject",
                        (dir / "S").string(), "--out", (dir / "o.nii.gz").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("checkpoint") != std::string::npos);

    // cv on a dataset that does not exist: nonzero and no reports left behind
    spit(dir / "cfg.json", R"({"dataset_root": ")" + (dir / "nowhere").string() + R"(", "output_dir": ")" +
                               (dir / "run").string() + R"("})");
    const auto cv = invoke({"cv", "--config", (dir / "cfg.json").string()});
    CHECK(cv.code != 0);
    CHECK(!cv.err.empty());
    CHECK(!fs::exists(dir / "run" / "report.md"));

    spit(dir / "typo.json", R"({"epochz": 3})");
    CHECK(invoke({"cv", "--config", (dir / "typo.json").string()}).code == 2);
}
