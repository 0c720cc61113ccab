#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "mpseg/volume.hpp"

namespace mpseg::metrics {

/// Raw label codes. Defaults follow BraTS 2023: NCR=1, ED=2, ET=3.
struct LabelScheme {
    std::int16_t background = 0;
    std::int16_t ncr = 1;
    std::int16_t ed = 2;
    std::int16_t et = 3;

    bool contains(std::int16_t label) const {
        return label == background || label == ncr || label == ed || label == et;
    }
};

enum class Region { ET, TC, WT };

inline constexpr std::array<Region, 3> kRegions{Region::ET, Region::TC, Region::WT};

std::string region_name(Region region);

struct RegionSpec {
    Region region;
    std::set<std::int16_t> member_labels;
};

/// ET = {et}, TC = {ncr, et}, WT = {ncr, ed, et}.
RegionSpec region_spec(Region region, const LabelScheme& scheme = {});

/// Binary mask of voxels whose label is a member of `region`. Labels outside
/// the scheme raise UnknownLabel.
std::vector<std::uint8_t> region_mask(const SegmentationMask& seg, const RegionSpec& region,
                                      const LabelScheme& scheme = {});

/// 2|a∩b| / (|a| + |b|); 1 when both masks are empty, 0 when only one is.
double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

struct DiceTriple {
    double et = 0.0;
    double tc = 0.0;
    double wt = 0.0;

    double get(Region r) const { return r == Region::ET ? et : (r == Region::TC ? tc : wt); }
};

DiceTriple evaluate_subject(const SegmentationMask& pred, const SegmentationMask& gt, const LabelScheme& scheme = {});

struct SubjectScore {
    std::string subject_id;
    DiceTriple dice;
};

struct DiceReport {
    std::vector<DiceTriple> subjects;
    std::array<double, 3> mean{}; ///< ET, TC, WT
    std::array<double, 3> stddev{}; ///< sample standard deviation (n-1)
};

DiceReport aggregate_report(const std::vector<DiceTriple>& triples);

enum class ReportFormat { Csv, Markdown };

ReportFormat parse_report_format(const std::string& name);

/// Columns Dice_ET, Dice_TC, Dice_WT; rows Mean and Std; three decimals.
/// A non-empty title is printed as a heading line in Markdown only.
std::string render_report(const DiceReport& report, ReportFormat format, const std::string& title = "");

/// subject_id,dice_et,dice_tc,dice_wt with one row per subject.
std::string scores_to_csv(const std::vector<SubjectScore>& scores);
std::vector<SubjectScore> scores_from_csv(const std::string& text);

} // namespace mpseg::metrics
