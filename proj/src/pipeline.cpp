#include "mpseg/pipeline.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "mpseg/rng.hpp"
#include "mpseg/volume_io.hpp"

namespace mpseg::pipeline {

using nlohmann::ordered_json;

namespace {

const char* optimizer_name(train::OptimizerKind k) {
    return k == train::OptimizerKind::Adam ? "adam" : "sgd";
}

train::OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "adam") {
        return train::OptimizerKind::Adam;
    }
    if (name == "sgd" || name == "sgd_momentum") {
        return train::OptimizerKind::SgdMomentum;
    }
    throw Error(ErrorKind::InvalidConfig, "unknown optimizer '" + name + "'");
}

ordered_json config_json(const RunConfig& c) {
    ordered_json j;
    j["dataset_root"] = c.dataset_root.string();
    j["modalities"] = c.modalities;
    j["modality_order"] = c.modality_order;
    j["views"] = {{"count", c.views.count},
                  {"seed", c.views.seed},
                  {"min_angle_deg", c.views.min_angle_deg},
                  {"iso_spacing", c.views.iso_spacing},
                  {"margin_frac", c.views.margin_frac}};
    j["unet"] = {{"depth", c.unet.depth},
                 {"base_filters", c.unet.base_filters},
                 {"num_classes", c.unet.num_classes},
                 {"kernel_size", c.unet.kernel_size},
                 {"seed", c.unet.seed}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"optimizer", optimizer_name(c.train.optimizer)},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"momentum", c.train.momentum},
                  {"adam_epsilon", c.train.adam_epsilon},
                  {"early_stop_patience", c.train.early_stop_patience},
                  {"class_weights", c.train.class_weights},
                  {"bg_retention", c.train.bg_retention},
                  {"seed", c.train.seed}};
    j["fusion"] = {{"mode", c.fusion.mode}, {"iterations", c.fusion.iterations}, {"step", c.fusion.step}};
    j["cv_seed"] = c.cv_seed;
    j["output_dir"] = c.output_dir.string();
    j["report_format"] = c.report_format;
    j["threads"] = c.threads;
    return j;
}

void reject_unknown(const ordered_json& given, const ordered_json& known, const std::string& where) {
    if (!given.is_object()) {
        throw Error(ErrorKind::InvalidConfig, where + " must be a JSON object");
    }
    for (const auto& item : given.items()) {
        if (!known.contains(item.key())) {
            throw Error(ErrorKind::InvalidConfig, "unknown config key '" + where + item.key() + "'");
        }
        if (known.at(item.key()).is_object()) {
            reject_unknown(item.value(), known.at(item.key()), where + item.key() + ".");
        }
    }
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

ordered_json axes_json(const std::vector<Vec3>& axes) {
    ordered_json out = ordered_json::array();
    for (const auto& a : axes) {
        out.push_back({a[0], a[1], a[2]});
    }
    return out;
}

ordered_json report_json(const metrics::DiceReport& r) {
    return {{"mean", {{"ET", r.mean[0]}, {"TC", r.mean[1]}, {"WT", r.mean[2]}}},
            {"std", {{"ET", r.stddev[0]}, {"TC", r.stddev[1]}, {"WT", r.stddev[2]}}}};
}

} // namespace

RunConfig::RunConfig() : modality_order(io::canonical_modalities()) {
    unet.in_channels = modalities;
}

void RunConfig::validate(bool check_paths) const {
    if (modalities < 1 || modalities > static_cast<int>(modality_order.size())) {
        throw Error(ErrorKind::InvalidConfig, "modalities must be between 1 and the modality_order length");
    }
    if (views.count < 1) {
        throw Error(ErrorKind::InvalidConfig, "views.count must be at least 1");
    }
    if (!(views.margin_frac >= 0.0) || !(views.iso_spacing >= 0.0)) {
        throw Error(ErrorKind::InvalidConfig, "views.margin_frac and views.iso_spacing must be nonnegative");
    }
    if (fusion.mode != "fit" && fusion.mode != "mean") {
        throw Error(ErrorKind::InvalidConfig, "fusion.mode must be 'fit' or 'mean'");
    }
    if (fusion.iterations < 0 || !(fusion.step > 0.0)) {
        throw Error(ErrorKind::InvalidConfig, "fusion.iterations must be >= 0 and fusion.step > 0");
    }
    if (threads < 1) {
        throw Error(ErrorKind::InvalidConfig, "threads must be at least 1");
    }
    metrics::parse_report_format(report_format);
    nn::UNetConfig u = unet;
    u.in_channels = modalities;
    u.validate();
    train.validate();
    if (!train.class_weights.empty() && static_cast<int>(train.class_weights.size()) != unet.num_classes) {
        throw Error(ErrorKind::InvalidConfig, "train.class_weights needs one entry per class");
    }
    if (check_paths) {
        if (dataset_root.empty() || !fs::is_directory(dataset_root)) {
            throw Error(ErrorKind::IoFailure, "dataset root '" + dataset_root.string() + "' does not exist");
        }
    }
}

std::string RunConfig::to_json() const { return config_json(*this).dump(2); }

RunConfig RunConfig::from_json(const std::string& text) {
    ordered_json given;
    try {
        given = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidConfig, std::string("config is not valid JSON: ") + ex.what());
    }
    const RunConfig defaults;
    ordered_json j = config_json(defaults);
    reject_unknown(given, j, "");
    j.merge_patch(given);
    try {
        RunConfig c;
        c.dataset_root = j.at("dataset_root").get<std::string>();
        c.modalities = j.at("modalities").get<int>();
        c.modality_order = j.at("modality_order").get<std::vector<std::string>>();
        const auto& v = j.at("views");
        c.views.count = v.at("count").get<int>();
        c.views.seed = v.at("seed").get<std::uint64_t>();
        c.views.min_angle_deg = v.at("min_angle_deg").get<double>();
        c.views.iso_spacing = v.at("iso_spacing").get<double>();
        c.views.margin_frac = v.at("margin_frac").get<double>();
        const auto& u = j.at("unet");
        c.unet.in_channels = c.modalities;
        c.unet.depth = u.at("depth").get<int>();
        c.unet.base_filters = u.at("base_filters").get<int>();
        c.unet.num_classes = u.at("num_classes").get<int>();
        c.unet.kernel_size = u.at("kernel_size").get<int>();
        c.unet.seed = u.at("seed").get<std::uint64_t>();
        const auto& t = j.at("train");
        c.train.epochs = t.at("epochs").get<int>();
        c.train.batch_size = t.at("batch_size").get<int>();
        c.train.learning_rate = t.at("learning_rate").get<double>();
        c.train.optimizer = parse_optimizer(t.at("optimizer").get<std::string>());
        c.train.beta1 = t.at("beta1").get<double>();
        c.train.beta2 = t.at("beta2").get<double>();
        c.train.momentum = t.at("momentum").get<double>();
        c.train.adam_epsilon = t.at("adam_epsilon").get<double>();
        c.train.early_stop_patience = t.at("early_stop_patience").get<int>();
        c.train.class_weights = t.at("class_weights").get<std::vector<double>>();
        c.train.bg_retention = t.at("bg_retention").get<double>();
        c.train.seed = t.at("seed").get<std::uint64_t>();
        const auto& f = j.at("fusion");
        c.fusion.mode = f.at("mode").get<std::string>();
        c.fusion.iterations = f.at("iterations").get<int>();
        c.fusion.step = f.at("step").get<double>();
        c.cv_seed = j.at("cv_seed").get<std::uint64_t>();
        c.output_dir = j.at("output_dir").get<std::string>();
        c.report_format = j.at("report_format").get<std::string>();
        c.threads = j.at("threads").get<int>();
        return c;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidConfig, std::string("bad config value: ") + ex.what());
    }
}

std::string RunConfig::hash() const {
    ordered_json j = config_json(*this);
    j.erase("output_dir");
    j.erase("threads");
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a(j.dump()));
    return buf;
}

RunConfig load_run_config(const fs::path& path) {
    const std::string text = read_text(path);
    try {
        const auto j = ordered_json::parse(text);
        if (j.is_object() && j.contains("config") && j.contains("config_hash")) {
            return RunConfig::from_json(j.at("config").dump());
        }
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidConfig, path.string() + " is not valid JSON: " + ex.what());
    }
    return RunConfig::from_json(text);
}

std::string ViewSpec::to_json() const {
    ordered_json j;
    j["axes"] = axes_json(axes);
    j["iso_spacing"] = options.iso_spacing;
    j["margin_frac"] = options.margin_frac;
    j["modalities"] = modalities;
    j["modality_order"] = modality_order;
    return j.dump(2);
}

ViewSpec ViewSpec::from_json(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        ViewSpec v;
        for (const auto& a : j.at("axes")) {
            v.axes.push_back({a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()});
        }
        v.options.iso_spacing = j.at("iso_spacing").get<double>();
        v.options.margin_frac = j.at("margin_frac").get<double>();
        v.modalities = j.at("modalities").get<int>();
        v.modality_order = j.at("modality_order").get<std::vector<std::string>>();
        if (v.axes.empty()) {
            throw Error(ErrorKind::InvalidConfig, "view spec lists no axes");
        }
        return v;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidConfig, std::string("bad view spec: ") + ex.what());
    }
}

ViewSpec view_spec(const RunConfig& config) {
    ViewSpec v;
    v.axes = planar::sample_views(config.views.count, config.views.seed, config.views.min_angle_deg);
    v.options.iso_spacing = config.views.iso_spacing;
    v.options.margin_frac = config.views.margin_frac;
    v.modalities = config.modalities;
    v.modality_order = config.modality_order;
    return v;
}

Subject load_normalized(const fs::path& root, const std::string& id, int modalities,
                        const std::vector<std::string>& order, bool need_mask) {
    const auto record = io::find_subject(root, id, order);
    auto loaded = io::load_subject(record, modalities, order);
    if (need_mask && !loaded.seg) {
        throw Error(ErrorKind::MissingModality, "subject " + id + " has no segmentation");
    }
    return {id, io::normalize_channels(loaded.image), std::move(loaded.seg)};
}

std::vector<planar::ProbabilityVolume> view_probabilities(const nn::UNet& net, const Volume& image,
                                                          const ViewSpec& views) {
    if (image.channels() != net.config().in_channels) {
        throw Error(ErrorKind::ShapeMismatch, "image has " + std::to_string(image.channels()) +
                                                  " channels but the network expects " +
                                                  std::to_string(net.config().in_channels));
    }
    std::vector<planar::ProbabilityVolume> out;
    out.reserve(views.axes.size());
    for (const auto& axis : views.axes) {
        const auto geometry = planar::make_view_geometry(image.grid(), axis, views.options);
        const auto stack = planar::resample_to_view(image, geometry);
        const auto probs = train::predict_stack(net, stack);
        out.push_back(planar::backproject(probs, geometry, image.grid()));
    }
    return out;
}

SegmentationMask predict_mask(const nn::UNet& net, const Volume& image, const ViewSpec& views,
                              const std::optional<fusion::FusionWeights>& weights) {
    const auto vols = view_probabilities(net, image, views);
    const auto fused = weights ? fusion::apply_fusion(vols, *weights) : fusion::mean_fusion(vols);
    SegmentationMask mask = fusion::argmax_labels(fused);
    mask.grid = image.grid();
    return mask;
}

TrainedModel train_model(const RunConfig& config, const ViewSpec& views, const std::vector<Subject>& train_subjects,
                         const std::vector<Subject>& val_subjects, std::uint64_t net_seed, std::uint64_t train_seed) {
    auto labeled = [](const std::vector<Subject>& subjects) {
        std::vector<train::LabeledSubject> out;
        for (const auto& s : subjects) {
            out.push_back({s.id, &s.image, &*s.mask});
        }
        return out;
    };
    const train::SliceDataset train_set(labeled(train_subjects), views.axes, views.options);
    const train::SliceDataset val_set(labeled(val_subjects), views.axes, views.options);

    nn::UNetConfig unet = config.unet;
    unet.in_channels = config.modalities;
    unet.seed = net_seed;
    TrainedModel model{nn::build_unet(unet), {}};
    train::TrainConfig tc = config.train;
    tc.seed = train_seed;
    model.history = train::train(model.net, train_set, val_set, tc);
    return model;
}

fusion::FitResult fit_weights(const RunConfig& config, const nn::UNet& net, const ViewSpec& views,
                              const std::vector<Subject>& val_subjects) {
    std::vector<std::vector<planar::ProbabilityVolume>> vols;
    std::vector<SegmentationMask> labels;
    for (const auto& s : val_subjects) {
        vols.push_back(view_probabilities(net, s.image, views));
        labels.push_back(*s.mask);
    }
    if (config.fusion.mode == "mean") {
        fusion::FitResult r;
        r.weights = fusion::FusionWeights::uniform(static_cast<int>(views.axes.size()), net.config().num_classes);
        r.uniform_objective = fusion::fusion_objective(vols, labels, r.weights);
        r.objective = r.uniform_objective;
        return r;
    }
    return fusion::fit_fusion_weights(vols, labels, {config.fusion.iterations, config.fusion.step});
}

std::uint64_t fold_net_seed(const RunConfig& config, int fold) {
    return Rng::derive(config.unet.seed, static_cast<std::uint64_t>(fold), 0x6e6574).next_u64();
}

std::uint64_t fold_train_seed(const RunConfig& config, int fold) {
    return Rng::derive(config.train.seed, static_cast<std::uint64_t>(fold), 0x747261).next_u64();
}

std::string report_extension(metrics::ReportFormat format) {
    return format == metrics::ReportFormat::Csv ? ".csv" : ".md";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CvResult run_cv(const RunConfig& config) {
    config.validate(true);
    const auto format = metrics::parse_report_format(config.report_format);
    const std::string ext = report_extension(format);

    std::vector<std::string> ids;
    for (const auto& r : io::discover_subjects(config.dataset_root, config.modality_order)) {
        ids.push_back(r.subject_id);
    }
    const auto splits = train::make_folds(ids, config.cv_seed);
    const ViewSpec views = view_spec(config);

    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) {
        throw Error(ErrorKind::IoFailure, "cannot create " + config.output_dir.string() + ": " + ec.message());
    }

    auto load_all = [&](const std::vector<std::string>& list) {
        std::vector<Subject> out;
        for (const auto& id : list) {
            out.push_back(load_normalized(config.dataset_root, id, config.modalities, config.modality_order, true));
        }
        return out;
    };

    CvResult result;
    result.view_axes = views.axes;
    ordered_json folds_json = ordered_json::array();
    for (const auto& split : splits) {
        const int f = split.fold_index;
        FoldResult fold;
        fold.split = split;
        fold.dir = config.output_dir / ("fold" + std::to_string(f));
        fs::create_directories(fold.dir / "predictions", ec);
        if (ec) {
            throw Error(ErrorKind::IoFailure, "cannot create " + fold.dir.string() + ": " + ec.message());
        }

        const auto train_subjects = load_all(split.train_ids);
        const auto val_subjects = load_all(split.val_ids);
        std::cerr << "fold " << f << ": training on " << train_subjects.size() << " subjects\n";
        const std::uint64_t net_seed = fold_net_seed(config, f);
        const std::uint64_t train_seed = fold_train_seed(config, f);
        const TrainedModel model = train_model(config, views, train_subjects, val_subjects, net_seed, train_seed);
        nn::save_checkpoint(model.net, fold.dir / "checkpoint.mpseg");
        write_text(fold.dir / "history.csv", model.history.to_csv());
        write_text(fold.dir / "views.json", views.to_json() + "\n");

        fold.fit = fit_weights(config, model.net, views, val_subjects);
        write_text(fold.dir / "fusion_weights.json", fold.fit.weights.to_json());

        std::vector<metrics::DiceTriple> triples;
        for (const auto& id : split.test_ids) {
            const Subject s = load_normalized(config.dataset_root, id, config.modalities, config.modality_order, true);
            const SegmentationMask pred = predict_mask(model.net, s.image, views, fold.fit.weights);
            io::write_mask(pred, fold.dir / "predictions" / (id + ".nii.gz"));
            const auto dice = metrics::evaluate_subject(pred, *s.mask);
            fold.scores.push_back({id, dice});
            triples.push_back(dice);
            result.scores.push_back({id, dice});
        }
        fold.report = metrics::aggregate_report(triples);
        write_text(fold.dir / "scores.csv", metrics::scores_to_csv(fold.scores));
        write_text(fold.dir / ("report" + ext),
                   metrics::render_report(fold.report, format, "Fold " + std::to_string(f)));
        std::cerr << "fold " << f << ": WT " << fold.report.mean[2] << " TC " << fold.report.mean[1] << " ET "
                  << fold.report.mean[0] << "\n";

        folds_json.push_back({{"fold", f},
                              {"train", split.train_ids},
                              {"val", split.val_ids},
                              {"test", split.test_ids},
                              {"net_seed", net_seed},
                              {"train_seed", train_seed},
                              {"best_epoch", model.history.best_epoch},
                              {"epochs_run", model.history.epochs()},
                              {"fusion_objective", fold.fit.objective},
                              {"uniform_objective", fold.fit.uniform_objective},
                              {"report", report_json(fold.report)},
                              {"artifacts",
                               {{"dir", fold.dir.string()},
                                {"checkpoint", (fold.dir / "checkpoint.mpseg").string()},
                                {"history", (fold.dir / "history.csv").string()},
                                {"views", (fold.dir / "views.json").string()},
                                {"fusion_weights", (fold.dir / "fusion_weights.json").string()},
                                {"predictions", (fold.dir / "predictions").string()},
                                {"scores", (fold.dir / "scores.csv").string()},
                                {"report", (fold.dir / ("report" + ext)).string()}}}});
        result.folds.push_back(std::move(fold));
    }

    std::vector<metrics::DiceTriple> all;
    for (const auto& s : result.scores) {
        all.push_back(s.dice);
    }
    result.pooled = metrics::aggregate_report(all);
    write_text(config.output_dir / "scores.csv", metrics::scores_to_csv(result.scores));
    result.pooled_report_path = config.output_dir / ("report" + ext);
    write_text(result.pooled_report_path, metrics::render_report(result.pooled, format, "Pooled"));

    ordered_json manifest;
    manifest["config"] = config_json(config);
    manifest["config_hash"] = config.hash();
    manifest["seeds"] = {{"cv_seed", config.cv_seed},
                         {"view_seed", config.views.seed},
                         {"unet_seed", config.unet.seed},
                         {"train_seed", config.train.seed}};
    manifest["view_axes"] = axes_json(views.axes);
    manifest["folds"] = folds_json;
    manifest["pooled"] = report_json(result.pooled);
    manifest["artifacts"] = {{"scores", (config.output_dir / "scores.csv").string()},
                             {"report", result.pooled_report_path.string()}};
    result.manifest_path = config.output_dir / "run_manifest.json";
    write_text(result.manifest_path, manifest.dump(2) + "\n");
    return result;
}

} // namespace mpseg::pipeline
