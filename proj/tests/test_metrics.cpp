#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpseg/metrics.hpp"
#include "test_util.hpp"

using namespace mpseg;
using namespace mpseg::metrics;

namespace {

SegmentationMask cube4() {
    GridSpec g;
    g.dims = {4, 4, 4};
    SegmentationMask m(g);
    // 0..3 repeating, every label present
    for (std::size_t o = 0; o < m.size(); ++o) {
        m.labels[o] = static_cast<std::int16_t>(o % 4);
    }
    return m;
}

std::size_t count(const std::vector<std::uint8_t>& m) {
    std::size_t n = 0;
    for (auto v : m) {
        n += v;
    }
    return n;
}

} // namespace

TEST_CASE("region masks nest") {
    const auto seg = cube4();
    const auto et = region_mask(seg, region_spec(Region::ET));
    const auto tc = region_mask(seg, region_spec(Region::TC));
    const auto wt = region_mask(seg, region_spec(Region::WT));
    for (std::size_t o = 0; o < seg.size(); ++o) {
        CHECK(wt[o] == (seg.labels[o] != 0));
        CHECK(et[o] <= tc[o]);
        CHECK(tc[o] <= wt[o]);
    }
    CHECK(count(et) == 16);
    CHECK(count(tc) == 32);
    CHECK(count(wt) == 48);

    SegmentationMask bg(seg.grid);
    for (Region r : kRegions) {
        CHECK(count(region_mask(bg, region_spec(r))) == 0);
    }

    SegmentationMask odd = seg;
    odd.labels[3] = 7;
    try {
        region_mask(odd, region_spec(Region::WT));
        FAIL("expected UnknownLabel");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnknownLabel);
    }
}

TEST_CASE("dice oracles") {
    std::vector<std::uint8_t> a(20, 0);
    std::vector<std::uint8_t> b(20, 0);
    CHECK(dice(a, b) == 1.0);
    for (int i = 0; i < 8; ++i) {
        a[static_cast<std::size_t>(i)] = 1;
        b[static_cast<std::size_t>(i + 4)] = 1;
    }
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, b) == 0.5);
    CHECK(dice(a, b) == dice(b, a));
    std::vector<std::uint8_t> c(20, 0);
    CHECK(dice(a, c) == 0.0);
    CHECK(dice(c, a) == 0.0);
    for (int i = 12; i < 20; ++i) {
        c[static_cast<std::size_t>(i)] = 1;
    }
    CHECK(dice(a, c) == 0.0);
    try {
        dice(a, std::vector<std::uint8_t>(5, 0));
        FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ShapeMismatch);
    }
}

TEST_CASE("evaluate_subject") {
    const auto gt = cube4();
    const auto same = evaluate_subject(gt, gt);
    CHECK(same.et == 1.0);
    CHECK(same.tc == 1.0);
    CHECK(same.wt == 1.0);

    auto relabeled = gt;
    for (auto& l : relabeled.labels) {
        if (l == 3) {
            l = 2;
        }
    }
    const auto r = evaluate_subject(relabeled, gt);
    CHECK(r.et == 0.0);
    CHECK(r.tc < 1.0);
    CHECK(r.wt == 1.0);

    const auto none = evaluate_subject(SegmentationMask(gt.grid), gt);
    CHECK(none.et == 0.0);
    CHECK(none.tc == 0.0);
    CHECK(none.wt == 0.0);

    // WT ignores any relabelling within {1,2,3}
    auto shuffled = gt;
    for (auto& l : shuffled.labels) {
        if (l != 0) {
            l = static_cast<std::int16_t>(l % 3 + 1);
        }
    }
    CHECK(evaluate_subject(shuffled, gt).wt == 1.0);
}

TEST_CASE("aggregate") {
    const auto one = aggregate_report({{0.5, 0.5, 0.5}});
    CHECK(one.mean == std::array<double, 3>{0.5, 0.5, 0.5});
    CHECK(one.stddev == std::array<double, 3>{0.0, 0.0, 0.0});

    const auto three = aggregate_report({{0.2, 1.0, 0.0}, {0.4, 1.0, 0.5}, {0.6, 1.0, 1.0}});
    CHECK(std::abs(three.mean[0] - 0.4) < 1e-12);
    CHECK(std::abs(three.stddev[0] - 0.2) < 1e-12);
    CHECK(three.stddev[1] == 0.0);
    CHECK(three.mean[2] >= 0.0);
    CHECK(three.mean[2] <= 1.0);

    try {
        aggregate_report({});
        FAIL("expected EmptyList");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::EmptyList);
    }
}

TEST_CASE("rendering") {
    DiceReport r;
    r.mean = {0.259, 0.382, 0.478};
    r.stddev = {0.377, 0.370, 0.370};
    const std::string md = render_report(r, ReportFormat::Markdown, "PED");
    for (const char* s : {"0.259", "0.382", "0.478", "0.377", "0.370", "Dice_ET", "Dice_TC", "Dice_WT", "Mean",
                          "Std", "PED"}) {
        CHECK(md.find(s) != std::string::npos);
    }

    const std::string csv = render_report(r, ReportFormat::Csv);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.rfind("stat,Dice_ET,Dice_TC,Dice_WT", 0) == 0);
    CHECK(csv.find("Mean,0.259,0.382,0.478") != std::string::npos);
    CHECK(csv.find("Std,0.377,0.370,0.370") != std::string::npos);

    const std::string single = render_report(aggregate_report({{1.0, 0.25, 0.5}}), ReportFormat::Markdown);
    CHECK(single.find("nan") == std::string::npos);
    CHECK(single.find("0.000") != std::string::npos);

    CHECK(parse_report_format("csv") == ReportFormat::Csv);
    CHECK(parse_report_format("markdown") == ReportFormat::Markdown);
    CHECK_THROWS_AS(parse_report_format("html"), Error);
}

TEST_CASE("per-subject score csv") {
    const std::vector<SubjectScore> scores{{"A", {0.1, 0.2, 0.3}}, {"B", {1.0, 0.5, 0.0}}};
    const std::string text = scores_to_csv(scores);
    CHECK(text.rfind("subject_id,dice_et,dice_tc,dice_wt\n", 0) == 0);
    const auto back = scores_from_csv(text);
    REQUIRE(back.size() == 2);
    CHECK(back[1].subject_id == "B");
    CHECK(back[0].dice.tc == doctest::Approx(0.2));
}
