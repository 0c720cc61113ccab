#include "mpseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace mpseg::metrics {

std::string region_name(Region region) {
    switch (region) {
    case Region::ET: return "ET";
    case Region::TC: return "TC";
    case Region::WT: return "WT";
    }
    return "?";
}

RegionSpec region_spec(Region region, const LabelScheme& scheme) {
    switch (region) {
    case Region::ET: return {region, {scheme.et}};
    case Region::TC: return {region, {scheme.ncr, scheme.et}};
    case Region::WT: return {region, {scheme.ncr, scheme.ed, scheme.et}};
    }
    throw Error(ErrorKind::InvalidConfig, "unknown region");
}

std::vector<std::uint8_t> region_mask(const SegmentationMask& seg, const RegionSpec& region,
                                      const LabelScheme& scheme) {
    std::vector<std::uint8_t> mask(seg.size(), 0);
    for (std::size_t i = 0; i < seg.size(); ++i) {
        const std::int16_t label = seg.labels[i];
        if (!scheme.contains(label)) {
            throw Error(ErrorKind::UnknownLabel, "label " + std::to_string(label) + " is not in the label scheme");
        }
        mask[i] = region.member_labels.count(label) ? 1 : 0;
    }
    return mask;
}

double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) {
        throw Error(ErrorKind::ShapeMismatch, "dice needs masks of equal size");
    }
    std::size_t na = 0;
    std::size_t nb = 0;
    std::size_t both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0;
        const bool y = b[i] != 0;
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

DiceTriple evaluate_subject(const SegmentationMask& pred, const SegmentationMask& gt, const LabelScheme& scheme) {
    if (pred.grid.dims != gt.grid.dims || pred.size() != gt.size()) {
        throw Error(ErrorKind::ShapeMismatch, "prediction and ground truth grids differ");
    }
    DiceTriple t;
    for (Region r : kRegions) {
        const RegionSpec spec = region_spec(r, scheme);
        const double d = dice(region_mask(pred, spec, scheme), region_mask(gt, spec, scheme));
        (r == Region::ET ? t.et : (r == Region::TC ? t.tc : t.wt)) = d;
    }
    return t;
}

DiceReport aggregate_report(const std::vector<DiceTriple>& triples) {
    if (triples.empty()) {
        throw Error(ErrorKind::EmptyList, "cannot aggregate an empty score list");
    }
    DiceReport report;
    report.subjects = triples;
    const double n = static_cast<double>(triples.size());
    for (std::size_t r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (const auto& t : triples) {
            sum += t.get(kRegions[r]);
        }
        const double mean = sum / n;
        double sq = 0.0;
        for (const auto& t : triples) {
            const double d = t.get(kRegions[r]) - mean;
            sq += d * d;
        }
        report.mean[r] = mean;
        report.stddev[r] = triples.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    }
    return report;
}

ReportFormat parse_report_format(const std::string& name) {
    if (name == "csv") {
        return ReportFormat::Csv;
    }
    if (name == "markdown" || name == "md") {
        return ReportFormat::Markdown;
    }
    throw Error(ErrorKind::InvalidConfig, "unknown report format '" + name + "' (expected csv or markdown)");
}

namespace {

std::string fixed3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

} // namespace

std::string render_report(const DiceReport& report, ReportFormat format, const std::string& title) {
    std::ostringstream out;
    if (format == ReportFormat::Csv) {
        out << "stat,Dice_ET,Dice_TC,Dice_WT\n";
        out << "Mean," << fixed3(report.mean[0]) << ',' << fixed3(report.mean[1]) << ',' << fixed3(report.mean[2])
            << '\n';
        out << "Std," << fixed3(report.stddev[0]) << ',' << fixed3(report.stddev[1]) << ',' << fixed3(report.stddev[2]) << '\n';
        return out.str();
    }
    if (!title.empty()) {
        out << "### " << title << "\n\n";
    }
    out << "|      | Dice_ET | Dice_TC | Dice_WT |\n";
    out << "|------|---------|---------|---------|\n";
    out << "| Mean | " << fixed3(report.mean[0]) << "   | " << fixed3(report.mean[1]) << "   | "
        << fixed3(report.mean[2]) << "   |\n";
    out << "| Std  | " << fixed3(report.stddev[0]) << "   | " << fixed3(report.stddev[1]) << "   | "
        << fixed3(report.stddev[2]) << "   |\n";
    return out.str();
}

std::string scores_to_csv(const std::vector<SubjectScore>& scores) {
    std::ostringstream out;
    out << "subject_id,dice_et,dice_tc,dice_wt\n";
    char buf[128];
    for (const auto& s : scores) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", s.dice.et, s.dice.tc, s.dice.wt);
        out << s.subject_id << ',' << buf << '\n';
    }
    return out.str();
}

std::vector<SubjectScore> scores_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<SubjectScore> scores;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (header) {
            header = false;
            if (line.rfind("subject_id", 0) == 0) {
                continue;
            }
        }
        std::istringstream row(line);
        std::string id, et, tc, wt;
        if (!std::getline(row, id, ',') || !std::getline(row, et, ',') || !std::getline(row, tc, ',') ||
            !std::getline(row, wt, ',')) {
            throw Error(ErrorKind::InvalidConfig, "malformed score row: " + line);
        }
        try {
            scores.push_back({id, {std::stod(et), std::stod(tc), std::stod(wt)}});
        } catch (const std::exception&) {
            throw Error(ErrorKind::InvalidConfig, "non-numeric score row: " + line);
        }
    }
    return scores;
}

} // namespace mpseg::metrics
