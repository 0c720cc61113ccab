#include "mpseg/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include <CLI11.hpp>

#include "mpseg/parallel.hpp"
#include "mpseg/phantom.hpp"
#include "mpseg/pipeline.hpp"
#include "mpseg/volume_io.hpp"

namespace mpseg::cli {

namespace fs = std::filesystem;
using pipeline::RunConfig;

namespace {

struct RunOverrides {
    std::string data;
    std::string out;
    int epochs = 0;
    std::string format;
};

void add_overrides(CLI::App* cmd, RunOverrides& o) {
    cmd->add_option("--data", o.data, "Dataset root (overrides config)");
    cmd->add_option("--out", o.out, "Output directory (overrides config)");
    cmd->add_option("--epochs", o.epochs, "Epochs per fold (overrides config)");
    cmd->add_option("--format", o.format, "Report format: markdown or csv");
}

RunConfig resolve_config(const std::string& path, const RunOverrides& o) {
    RunConfig config = pipeline::load_run_config(path);
    if (!o.data.empty()) {
        config.dataset_root = o.data;
    }
    if (!o.out.empty()) {
        config.output_dir = o.out;
    }
    if (o.epochs > 0) {
        config.train.epochs = o.epochs;
    }
    if (!o.format.empty()) {
        config.report_format = o.format;
    }
    return config;
}

// --threads beats MPSEG_THREADS, which beats the config file.
void apply_threads(int flag, std::optional<int> from_config) {
    if (flag > 0) {
        set_thread_count(flag);
    } else if (std::getenv("MPSEG_THREADS") == nullptr && from_config) {
        set_thread_count(*from_config);
    }
}

std::vector<train::FoldSplit> folds_for(const RunConfig& config) {
    std::vector<std::string> ids;
    for (const auto& r : io::discover_subjects(config.dataset_root, config.modality_order)) {
        ids.push_back(r.subject_id);
    }
    return train::make_folds(ids, config.cv_seed);
}

const train::FoldSplit& pick_fold(const std::vector<train::FoldSplit>& folds, int fold) {
    if (fold < 0 || fold >= static_cast<int>(folds.size())) {
        throw Error(ErrorKind::InvalidConfig, "fold must be 0, 1 or 2");
    }
    return folds[static_cast<std::size_t>(fold)];
}

std::vector<pipeline::Subject> load_ids(const RunConfig& config, const std::vector<std::string>& ids) {
    std::vector<pipeline::Subject> out;
    for (const auto& id : ids) {
        out.push_back(
            pipeline::load_normalized(config.dataset_root, id, config.modalities, config.modality_order, true));
    }
    return out;
}

// <dir>/<id>.nii[.gz] files, or <dir>/<id>/<id>-seg.nii[.gz] subject folders.
std::map<std::string, fs::path> find_masks(const fs::path& dir) {
    std::map<std::string, fs::path> found;
    if (!fs::is_directory(dir)) {
        throw Error(ErrorKind::IoFailure, "'" + dir.string() + "' is not a directory");
    }
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file()) {
            for (const std::string ext : {".nii.gz", ".nii"}) {
                if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0) {
                    found.emplace(name.substr(0, name.size() - ext.size()), entry.path());
                    break;
                }
            }
        } else if (entry.is_directory()) {
            for (const std::string ext : {".nii.gz", ".nii"}) {
                const fs::path p = entry.path() / (name + "-seg" + ext);
                if (fs::exists(p)) {
                    found.emplace(name, p);
                    break;
                }
            }
        }
    }
    return found;
}

std::string join(const std::vector<std::string>& items) {
    std::string s;
    for (const auto& i : items) {
        s += (s.empty() ? "" : ", ") + i;
    }
    return s;
}

int cmd_phantom(int n, int size, std::uint64_t seed, double noise, const std::string& difficulty,
                const std::string& out_dir, std::ostream& out) {
    phantom::PhantomConfig config;
    config.grid_size = size;
    config.seed = seed;
    config.noise_std = noise;
    if (difficulty == "easy") {
        config.difficulty = phantom::Difficulty::Easy;
    } else if (difficulty == "medium") {
        config.difficulty = phantom::Difficulty::Medium;
    } else {
        throw Error(ErrorKind::InvalidConfig, "difficulty must be easy or medium");
    }
    const auto manifest = phantom::generate_dataset(n, config, out_dir);
    out << manifest.manifest_path.string() << "\n";
    return 0;
}

int cmd_train(const RunConfig& config, int fold, const std::string& out_dir, std::ostream& out) {
    config.validate(true);
    const auto folds = folds_for(config);
    const auto& split = pick_fold(folds, fold);
    const fs::path dir = out_dir.empty() ? config.output_dir / ("fold" + std::to_string(fold)) : fs::path(out_dir);
    fs::create_directories(dir);
    const auto views = pipeline::view_spec(config);
    const auto model = pipeline::train_model(config, views, load_ids(config, split.train_ids),
                                             load_ids(config, split.val_ids), pipeline::fold_net_seed(config, fold),
                                             pipeline::fold_train_seed(config, fold));
    nn::save_checkpoint(model.net, dir / "checkpoint.mpseg");
    pipeline::write_text(dir / "history.csv", model.history.to_csv());
    pipeline::write_text(dir / "views.json", views.to_json() + "\n");
    out << (dir / "checkpoint.mpseg").string() << "\n";
    return 0;
}

fs::path views_path_for(const std::string& views, const std::string& checkpoint) {
    return views.empty() ? fs::path(checkpoint).parent_path() / "views.json" : fs::path(views);
}

int cmd_fuse_fit(const RunConfig& config, int fold, const std::string& checkpoint, const std::string& views_file,
                 const std::string& out_path, std::ostream& out) {
    config.validate(true);
    const auto folds = folds_for(config);
    const auto& split = pick_fold(folds, fold);
    const nn::UNet net = nn::load_checkpoint(checkpoint);
    const auto views = pipeline::ViewSpec::from_json(pipeline::read_text(views_path_for(views_file, checkpoint)));
    const auto fit = pipeline::fit_weights(config, net, views, load_ids(config, split.val_ids));
    const fs::path dest = out_path.empty() ? fs::path(checkpoint).parent_path() / "fusion_weights.json"
                                           : fs::path(out_path);
    pipeline::write_text(dest, fit.weights.to_json());
    out << "objective " << fit.objective << " (uniform " << fit.uniform_objective << ")\n" << dest.string() << "\n";
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& weights_file, const std::string& views_file,
                const std::string& subject_dir, const std::string& out_path, std::ostream& out) {
    const nn::UNet net = nn::load_checkpoint(checkpoint);
    const auto views = pipeline::ViewSpec::from_json(pipeline::read_text(views_path_for(views_file, checkpoint)));
    std::optional<fusion::FusionWeights> weights;
    if (!weights_file.empty()) {
        weights = fusion::FusionWeights::from_json(pipeline::read_text(weights_file));
        if (weights->views != static_cast<int>(views.axes.size()) || weights->classes != net.config().num_classes) {
            throw Error(ErrorKind::ShapeMismatch, "fusion weights do not match the model's views and classes");
        }
    }
    fs::path dir = fs::path(subject_dir);
    if (dir.filename().empty()) {
        dir = dir.parent_path();
    }
    const auto subject =
        pipeline::load_normalized(dir.parent_path(), dir.filename().string(), views.modalities, views.modality_order,
                                  false);
    const auto mask = pipeline::predict_mask(net, subject.image, views, weights);
    io::write_mask(mask, out_path);
    out << out_path << "\n";
    return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& gt_dir, const std::string& format_name,
                 const std::string& out_dir, std::ostream& out, std::ostream& err) {
    const auto format = metrics::parse_report_format(format_name);
    const auto preds = find_masks(pred_dir);
    const auto gts = find_masks(gt_dir);
    std::vector<std::string> no_pred;
    std::vector<std::string> no_gt;
    for (const auto& [id, _] : gts) {
        if (!preds.count(id)) {
            no_pred.push_back(id);
        }
    }
    for (const auto& [id, _] : preds) {
        if (!gts.count(id)) {
            no_gt.push_back(id);
        }
    }
    if (!no_pred.empty() || !no_gt.empty()) {
        if (!no_pred.empty()) {
            err << "missing predictions for: " << join(no_pred) << "\n";
        }
        if (!no_gt.empty()) {
            err << "missing ground truth for: " << join(no_gt) << "\n";
        }
        return 1;
    }
    if (gts.empty()) {
        throw Error(ErrorKind::EmptyList, "no subjects found in " + gt_dir);
    }
    std::vector<metrics::SubjectScore> scores;
    std::vector<metrics::DiceTriple> triples;
    for (const auto& [id, gt_path] : gts) {
        const auto dice = metrics::evaluate_subject(io::read_mask(preds.at(id)), io::read_mask(gt_path));
        scores.push_back({id, dice});
        triples.push_back(dice);
    }
    const std::string report = metrics::render_report(metrics::aggregate_report(triples), format);
    const fs::path dest = out_dir.empty() ? fs::path(pred_dir) : fs::path(out_dir);
    fs::create_directories(dest);
    pipeline::write_text(dest / "scores.csv", metrics::scores_to_csv(scores));
    pipeline::write_text(dest / ("report" + pipeline::report_extension(format)), report);
    out << metrics::scores_to_csv(scores) << "\n" << report;
    return 0;
}

int cmd_cv(const RunConfig& config, std::ostream& out) {
    const auto result = pipeline::run_cv(config);
    out << pipeline::read_text(result.pooled_report_path);
    out << "manifest: " << result.manifest_path.string() << "\n";
    return 0;
}

int cmd_report(const std::string& scores_path, const std::string& format_name, const std::string& title,
               const std::string& out_path, std::ostream& out) {
    const auto format = metrics::parse_report_format(format_name);
    const auto scores = metrics::scores_from_csv(pipeline::read_text(scores_path));
    std::vector<metrics::DiceTriple> triples;
    for (const auto& s : scores) {
        triples.push_back(s.dice);
    }
    const std::string report = metrics::render_report(metrics::aggregate_report(triples), format, title);
    if (!out_path.empty()) {
        pipeline::write_text(out_path, report);
    }
    out << report;
    return 0;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-planar U-Net segmentation pipeline"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (also MPSEG_THREADS)");

    // phantom
    auto* phantom_cmd = app.add_subcommand("phantom", "Generate a synthetic dataset");
    int n = 0;
    int size = 32;
    std::uint64_t phantom_seed = 1;
    double noise = 0.05;
    std::string difficulty = "easy";
    std::string phantom_out;
    phantom_cmd->add_option("--n", n, "Number of subjects")->required();
    phantom_cmd->add_option("--size", size, "Cube edge in voxels");
    phantom_cmd->add_option("--seed", phantom_seed, "Generator seed");
    phantom_cmd->add_option("--noise", noise, "Gaussian noise std");
    phantom_cmd->add_option("--difficulty", difficulty, "easy or medium");
    phantom_cmd->add_option("--out", phantom_out, "Output directory")->required();
    phantom_cmd->add_option("--threads", threads, "Worker threads");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train one fold's network");
    std::string config_path;
    int fold = 0;
    RunOverrides train_over;
    train_cmd->add_option("--config", config_path, "Run config or run manifest")->required();
    train_cmd->add_option("--fold", fold, "Fold index (0-2)");
    add_overrides(train_cmd, train_over);
    train_cmd->add_option("--threads", threads, "Worker threads");

    // fuse-fit
    auto* fuse_cmd = app.add_subcommand("fuse-fit", "Fit fusion weights on a fold's validation split");
    std::string checkpoint;
    std::string views_file;
    std::string weights_out;
    RunOverrides fuse_over;
    fuse_cmd->add_option("--config", config_path, "Run config or run manifest")->required();
    fuse_cmd->add_option("--fold", fold, "Fold index (0-2)");
    fuse_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
    fuse_cmd->add_option("--views", views_file, "views.json (default: next to checkpoint)");
    fuse_cmd->add_option("--weights-out", weights_out, "Output weights JSON");
    fuse_cmd->add_option("--data", fuse_over.data, "Dataset root (overrides config)");
    fuse_cmd->add_option("--threads", threads, "Worker threads");

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "Segment one subject");
    std::string weights_file;
    std::string subject_dir;
    std::string predict_out;
    predict_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
    predict_cmd->add_option("--weights", weights_file, "Fusion weights JSON (default: mean fusion)");
    predict_cmd->add_option("--views", views_file, "views.json (default: next to checkpoint)");
    predict_cmd->add_option("--subject", subject_dir, "Subject directory")->required();
    predict_cmd->add_option("--out", predict_out, "Output mask path")->required();
    predict_cmd->add_option("--threads", threads, "Worker threads");

    // evaluate
    auto* eval_cmd = app.add_subcommand("evaluate", "Dice of predicted masks against ground truth");
    std::string pred_dir;
    std::string gt_dir;
    std::string format = "markdown";
    std::string eval_out;
    eval_cmd->add_option("--pred", pred_dir, "Prediction directory")->required();
    eval_cmd->add_option("--gt", gt_dir, "Ground-truth dataset directory")->required();
    eval_cmd->add_option("--format", format, "markdown or csv");
    eval_cmd->add_option("--out", eval_out, "Where to write scores.csv and the report (default: --pred)");
    eval_cmd->add_option("--threads", threads, "Worker threads");

    // cv
    auto* cv_cmd = app.add_subcommand("cv", "Full 3-fold cross-validation run");
    RunOverrides cv_over;
    cv_cmd->add_option("--config", config_path, "Run config or run manifest")->required();
    add_overrides(cv_cmd, cv_over);
    cv_cmd->add_option("--threads", threads, "Worker threads");

    // report
    auto* report_cmd = app.add_subcommand("report", "Render a Dice report from a per-subject CSV");
    std::string scores_path;
    std::string title;
    std::string report_out;
    report_cmd->add_option("--scores", scores_path, "Per-subject scores CSV")->required();
    report_cmd->add_option("--format", format, "markdown or csv");
    report_cmd->add_option("--title", title, "Heading (markdown only)");
    report_cmd->add_option("--out", report_out, "Also write the report here");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        for (auto* sub : app.get_subcommands()) {
            err << sub->help();
        }
        return 2;
    }

    try {
        if (*phantom_cmd) {
            apply_threads(threads, std::nullopt);
            return cmd_phantom(n, size, phantom_seed, noise, difficulty, phantom_out, out);
        }
        if (*train_cmd) {
            const RunConfig config = resolve_config(config_path, train_over);
            apply_threads(threads, config.threads);
            return cmd_train(config, fold, train_over.out, out);
        }
        if (*fuse_cmd) {
            const RunConfig config = resolve_config(config_path, fuse_over);
            apply_threads(threads, config.threads);
            return cmd_fuse_fit(config, fold, checkpoint, views_file, weights_out, out);
        }
        if (*predict_cmd) {
            apply_threads(threads, std::nullopt);
            return cmd_predict(checkpoint, weights_file, views_file, subject_dir, predict_out, out);
        }
        if (*eval_cmd) {
            apply_threads(threads, std::nullopt);
            return cmd_evaluate(pred_dir, gt_dir, format, eval_out, out, err);
        }
        if (*cv_cmd) {
            const RunConfig config = resolve_config(config_path, cv_over);
            apply_threads(threads, config.threads);
            return cmd_cv(config, out);
        }
        if (*report_cmd) {
            return cmd_report(scores_path, format, title, report_out, out);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.kind() == ErrorKind::InvalidConfig ? 2 : 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args, std::cout, std::cerr);
}

} // namespace mpseg::cli
