// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.
//
//   acceptance            all eight
//   acceptance 1 4 7      just those
//
// MPSEG_ACCEPT_DIR keeps the phantom data and cv runs in a fixed place
// instead of a throwaway temp directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <unistd.h>

#include "gradcheck_fixture.hpp"
#include "mpseg/fusion.hpp"
#include "mpseg/metrics.hpp"
#include "mpseg/multiplanar.hpp"
#include "mpseg/parallel.hpp"
#include "mpseg/phantom.hpp"
#include "mpseg/pipeline.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/unet2d.hpp"

using namespace mpseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

Vec3 random_axis(Rng& rng) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

GridSpec cube(int n) {
    GridSpec g;
    g.dims = {n, n, n};
    return g;
}

// ---------------------------------------------------------------- 1

void gradient(Verdict& v) {
    nn::UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.num_classes = 4;
    cfg.depth = 2;
    cfg.base_filters = 4;
    nn::Tensor4 x;
    std::vector<int> labels;
    testutil::quadrant_image(x, labels);

    const auto t0 = Clock::now();
    nn::UNet net = nn::build_unet(cfg);
    testutil::settle(net, x);
    nn::GradientCheckOptions opt;
    opt.epsilon = 1e-3;
    opt.n_samples = 200;
    const double err = nn::gradient_check(net, x, labels, opt);
    const double secs = seconds_since(t0);
    v.detail << "max rel err " << err << ", " << secs << " s";
    v.require(err < 1e-3, "error >= 1e-3");
    v.require(secs < 60.0, "slower than 60 s");
}

// ---------------------------------------------------------------- 2

void resampling(Verdict& v) {
    const GridSpec g = cube(32);
    Volume rnd(1, g);
    Volume affine(1, g);
    Rng rng(11);
    for (int k = 0; k < 32; ++k) {
        for (int j = 0; j < 32; ++j) {
            for (int i = 0; i < 32; ++i) {
                rnd.at(0, i, j, k) = static_cast<float>(rng.uniform(-1.0, 1.0));
                affine.at(0, i, j, k) = static_cast<float>(i + 2 * j + 3 * k);
            }
        }
    }
    planar::ResampleOptions opt;
    opt.iso_spacing = 1.0;

    const auto axial = planar::resample_to_view(rnd, {0, 0, 1}, opt);
    const auto& e = axial.geometry.extent;
    const int off = (e[0] - 32) / 2;
    double worst_id = 0.0;
    for (int k = 0; k < 32; ++k) {
        for (int j = 0; j < 32; ++j) {
            for (int i = 0; i < 32; ++i) {
                worst_id = std::max(worst_id, std::abs(axial.at(0, k + off, i + off, j + off) - rnd.at(0, i, j, k)));
            }
        }
    }
    v.detail << "axial identity " << worst_id;
    v.require(worst_id < 1e-6, "axial identity");

    double worst_aff = 0.0;
    std::size_t interior = 0;
    for (int t = 0; t < 10; ++t) {
        const Vec3 axis = random_axis(rng);
        const auto st = planar::resample_to_view(affine, axis, opt);
        const auto& ex = st.geometry.extent;
        for (int s = 0; s < ex[0]; ++s) {
            for (int r = 0; r < ex[1]; ++r) {
                for (int c = 0; c < ex[2]; ++c) {
                    const Vec3 p = st.geometry.sample_position(s, r, c);
                    if (std::min({p[0], p[1], p[2]}) < 0.0 || std::max({p[0], p[1], p[2]}) > 31.0) {
                        continue;
                    }
                    ++interior;
                    worst_aff = std::max(worst_aff, std::abs(st.at(0, s, r, c) - (p[0] + 2 * p[1] + 3 * p[2])));
                }
            }
        }
    }
    v.detail << ", affine field " << worst_aff << " over " << interior << " interior samples";
    v.require(worst_aff < 1e-5, "affine field");
    v.require(interior > 10000, "too few interior samples");
}

// ---------------------------------------------------------------- 3

void round_trip(Verdict& v) {
    const GridSpec g = cube(32);
    Volume blob(2, g);
    double lo = 1.0;
    double hi = 0.0;
    for (int k = 0; k < 32; ++k) {
        for (int j = 0; j < 32; ++j) {
            for (int i = 0; i < 32; ++i) {
                const double r2 = (i - 15.5) * (i - 15.5) + (j - 14.0) * (j - 14.0) + (k - 17.0) * (k - 17.0);
                const double p = 0.9 * std::exp(-r2 / (2.0 * 6.0 * 6.0));
                blob.at(1, i, j, k) = static_cast<float>(p);
                blob.at(0, i, j, k) = static_cast<float>(1.0 - p);
                lo = std::min(lo, p);
                hi = std::max(hi, p);
            }
        }
    }
    planar::ResampleOptions opt;
    opt.iso_spacing = 1.0;
    double worst_mae = 0.0;
    double worst_sum = 0.0;
    for (const Vec3& axis : {Vec3{0, 0, 1}, Vec3{0, 1, 0}, Vec3{1, 0, 0}}) {
        const auto st = planar::resample_to_view(blob, axis, opt);
        const auto back = planar::backproject(st, st.geometry, g);
        double mae = 0.0;
        for (std::size_t o = 0; o < g.size(); ++o) {
            mae += std::abs(back.at(1, o) - blob.data()[g.size() + o]);
            worst_sum = std::max(worst_sum, std::abs(back.at(0, o) + back.at(1, o) - 1.0));
        }
        worst_mae = std::max(worst_mae, mae / static_cast<double>(g.size()) / (hi - lo));
    }
    v.detail << "MAE/range " << worst_mae << ", class-sum deviation " << worst_sum;
    v.require(worst_mae < 0.02, "MAE");
    v.require(worst_sum <= 1e-6, "class sums");
}

// ---------------------------------------------------------------- 4

void dice_oracles(Verdict& v) {
    using metrics::dice;
    std::vector<std::uint8_t> a(20, 0);
    std::vector<std::uint8_t> b(20, 0);
    std::vector<std::uint8_t> far(20, 0);
    const std::vector<std::uint8_t> empty(20, 0);
    for (int i = 0; i < 8; ++i) {
        a[static_cast<std::size_t>(i)] = 1;
        b[static_cast<std::size_t>(i + 4)] = 1;
        far[static_cast<std::size_t>(i + 12)] = 1;
    }
    v.require(dice(a, a) == 1.0, "identity");
    v.require(dice(a, far) == 0.0, "disjoint");
    v.require(dice(a, b) == 0.5, "8/8/4 overlap");
    v.require(dice(empty, empty) == 1.0, "empty/empty");
    v.require(dice(empty, a) == 0.0 && dice(a, empty) == 0.0, "empty/nonempty");
    const auto r = metrics::aggregate_report({{0.2, 0.2, 0.2}, {0.4, 0.4, 0.4}, {0.6, 0.6, 0.6}});
    for (int i = 0; i < 3; ++i) {
        v.require(std::abs(r.mean[static_cast<std::size_t>(i)] - 0.4) <= 1e-12, "mean");
        v.require(std::abs(r.stddev[static_cast<std::size_t>(i)] - 0.2) <= 1e-12, "sample std");
    }
    v.detail << "aggregate mean " << r.mean[0] << ", std " << r.stddev[0];
}

// ---------------------------------------------------------------- 7

void report_structure(Verdict& v) {
    metrics::DiceReport ped;
    ped.mean = {0.259, 0.382, 0.478};
    ped.stddev = {0.377, 0.370, 0.370};
    const std::string md = metrics::render_report(ped, metrics::ReportFormat::Markdown, "PED");
    const std::string want_md = "### PED\n\n"
                                "|      | Dice_ET | Dice_TC | Dice_WT |\n"
                                "|------|---------|---------|---------|\n"
                                "| Mean | 0.259   | 0.382   | 0.478   |\n"
                                "| Std  | 0.377   | 0.370   | 0.370   |\n";
    const std::string csv = metrics::render_report(ped, metrics::ReportFormat::Csv);
    const std::string want_csv = "stat,Dice_ET,Dice_TC,Dice_WT\nMean,0.259,0.382,0.478\nStd,0.377,0.370,0.370\n";
    v.require(md == want_md, "markdown text");
    v.require(csv == want_csv, "csv text");
    v.detail << "PED block renders verbatim in markdown and csv";
}

// ---------------------------------------------------------------- 5, 6, 8

struct CvFixture {
    fs::path root;
    pipeline::RunConfig config;
    std::optional<pipeline::CvResult> first;
    double first_seconds = 0.0;
};

pipeline::RunConfig phantom_cv_config(const fs::path& data, const fs::path& out) {
    pipeline::RunConfig c;
    c.dataset_root = data;
    c.output_dir = out;
    c.views.count = 3;
    c.unet.depth = 2;
    c.unet.base_filters = 8;
    c.train.epochs = 30;
    c.train.learning_rate = 2e-3;
    c.train.early_stop_patience = 6;
    c.train.class_weights = {1.0, 3.0, 3.0, 3.0};
    c.threads = 1;
    return c;
}

CvFixture& cv_fixture(const fs::path& root) {
    static CvFixture fx;
    if (fx.first) {
        return fx;
    }
    fx.root = root;
    phantom::PhantomConfig pc;
    pc.grid_size = 32;
    pc.seed = 1;
    pc.difficulty = phantom::Difficulty::Easy;
    const fs::path data = root / "phantoms";
    fs::remove_all(data);
    phantom::generate_dataset(12, pc, data);

    fx.config = phantom_cv_config(data, root / "cv_a");
    fs::remove_all(fx.config.output_dir);
    set_thread_count(1);
    const auto t0 = Clock::now();
    fx.first = pipeline::run_cv(fx.config);
    fx.first_seconds = seconds_since(t0);
    return fx;
}

void phantom_cv(Verdict& v, const fs::path& root) {
    auto& fx = cv_fixture(root);
    const auto& p = fx.first->pooled;
    v.detail << "pooled WT " << p.mean[2] << " TC " << p.mean[1] << " ET " << p.mean[0] << ", "
             << fx.first_seconds << " s on " << thread_count() << " thread(s)";
    v.require(p.mean[2] >= 0.80, "WT < 0.80");
    v.require(p.mean[1] >= 0.70, "TC < 0.70");
    v.require(p.mean[0] >= 0.60, "ET < 0.60");
    v.require(fx.first_seconds <= 1200.0, "over 20 minutes");
    v.require(fx.config.train.epochs <= 30, "epoch cap");
}

void fusion_guarantee(Verdict& v, const fs::path& root) {
    auto& fx = cv_fixture(root);
    const auto& cfg = fx.config;
    double min_gain = 1e9;
    for (const auto& fold : fx.first->folds) {
        const nn::UNet net = nn::load_checkpoint(fold.dir / "checkpoint.mpseg");
        const auto views = pipeline::ViewSpec::from_json(pipeline::read_text(fold.dir / "views.json"));
        std::vector<std::vector<planar::ProbabilityVolume>> vols;
        std::vector<SegmentationMask> labels;
        for (const auto& id : fold.split.val_ids) {
            auto s = pipeline::load_normalized(cfg.dataset_root, id, cfg.modalities, cfg.modality_order, true);
            vols.push_back(pipeline::view_probabilities(net, s.image, views));
            labels.push_back(*s.mask);
        }
        fusion::FitOptions fo;
        fo.iterations = cfg.fusion.iterations;
        fo.step = cfg.fusion.step;
        const auto fit = fusion::fit_fusion_weights(vols, labels, fo);
        const double uniform = fusion::fusion_objective(
            vols, labels, fusion::FusionWeights::uniform(static_cast<int>(views.axes.size()), cfg.unet.num_classes));
        const double got = fusion::fusion_objective(vols, labels, fit.weights);
        v.require(fit.weights.is_convex(), "weights not convex");
        v.require(got >= uniform, "objective below uniform");
        v.require(got == fit.objective, "reported objective differs from recomputed");
        min_gain = std::min(min_gain, got - uniform);
    }
    v.detail << "smallest gain over uniform " << min_gain;

    // one perfect view against one noise view on a real phantom
    phantom::PhantomConfig pc;
    pc.seed = 1;
    std::vector<std::vector<planar::ProbabilityVolume>> vols;
    std::vector<SegmentationMask> labels;
    Rng rng(17);
    for (int i = 0; i < 2; ++i) {
        const auto s = phantom::generate_subject(pc, i);
        planar::ProbabilityVolume perfect(4, s.mask.grid);
        planar::ProbabilityVolume noise(4, s.mask.grid);
        for (std::size_t o = 0; o < s.mask.size(); ++o) {
            perfect.at(s.mask.labels[o], o) = 1.0;
            double sum = 0.0;
            for (int c = 0; c < 4; ++c) {
                noise.at(c, o) = rng.uniform(0.01, 1.0);
                sum += noise.at(c, o);
            }
            for (int c = 0; c < 4; ++c) {
                noise.at(c, o) /= sum;
            }
        }
        vols.push_back({perfect, noise});
        labels.push_back(s.mask);
    }
    const auto fit = fusion::fit_fusion_weights(vols, labels);
    bool ordered = true;
    for (int c = 1; c < 4; ++c) {
        ordered = ordered && fit.weights.at(0, c) > fit.weights.at(1, c);
    }
    v.require(ordered, "perfect view does not dominate");
    v.detail << ", perfect-view weights " << fit.weights.at(0, 1) << "/" << fit.weights.at(0, 2) << "/"
             << fit.weights.at(0, 3);
}

void determinism(Verdict& v, const fs::path& root) {
    auto& fx = cv_fixture(root);
    pipeline::RunConfig again = pipeline::load_run_config(fx.first->manifest_path);
    again.output_dir = root / "cv_b";
    fs::remove_all(again.output_dir);
    set_thread_count(1);
    const auto second = pipeline::run_cv(again);
    const auto& a = *fx.first;

    v.require(a.view_axes == second.view_axes, "view axes differ");
    bool splits = a.folds.size() == second.folds.size();
    for (std::size_t f = 0; splits && f < a.folds.size(); ++f) {
        const auto& x = a.folds[f].split;
        const auto& y = second.folds[f].split;
        splits = x.train_ids == y.train_ids && x.val_ids == y.val_ids && x.test_ids == y.test_ids;
    }
    v.require(splits, "fold splits differ");

    double worst = 0.0;
    bool same_ids = a.scores.size() == second.scores.size();
    for (std::size_t i = 0; same_ids && i < a.scores.size(); ++i) {
        same_ids = a.scores[i].subject_id == second.scores[i].subject_id;
        worst = std::max({worst, std::abs(a.scores[i].dice.et - second.scores[i].dice.et),
                          std::abs(a.scores[i].dice.tc - second.scores[i].dice.tc),
                          std::abs(a.scores[i].dice.wt - second.scores[i].dice.wt)});
    }
    v.require(same_ids, "subject lists differ");
    v.require(worst <= 1e-6, "per-subject Dice differ");
    v.detail << "max per-subject Dice difference " << worst << " over " << a.scores.size() << " subjects";
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) {
        wanted.insert(std::atoi(argv[i]));
    }
    if (wanted.empty()) {
        wanted = {1, 2, 3, 4, 5, 6, 7, 8};
    }

    const char* keep = std::getenv("MPSEG_ACCEPT_DIR");
    const fs::path root = keep ? fs::path(keep) : fs::temp_directory_path() / ("mpseg_accept_" + std::to_string(::getpid()));
    fs::create_directories(root);

    const std::map<int, std::pair<std::string, std::function<void(Verdict&)>>> criteria{
        {1, {"gradient check", gradient}},
        {2, {"resampling identity and affine field", resampling}},
        {3, {"resample/backproject round trip", round_trip}},
        {4, {"Dice oracles and aggregation", dice_oracles}},
        {5, {"phantom cross-validation", [&](Verdict& v) { phantom_cv(v, root); }}},
        {6, {"fusion never worse than uniform", [&](Verdict& v) { fusion_guarantee(v, root); }}},
        {7, {"report structure", report_structure}},
        {8, {"single-threaded cv determinism", [&](Verdict& v) { determinism(v, root); }}},
    };

    int failed = 0;
    for (int n : wanted) {
        const auto it = criteria.find(n);
        if (it == criteria.end()) {
            std::cerr << "no criterion " << n << "\n";
            return 2;
        }
        Verdict v;
        try {
            it->second.second(v);
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail << "threw: " << e.what();
        }
        failed += v.pass ? 0 : 1;
        std::cout << "criterion " << n << " (" << it->second.first << "): " << (v.pass ? "PASS" : "FAIL") << " - "
                  << v.detail.str() << std::endl;
    }
    if (!keep) {
        std::error_code ec;
        fs::remove_all(root, ec);
    }
    return failed == 0 ? 0 : 1;
}
