#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpseg/fusion.hpp"
#include "mpseg/metrics.hpp"
#include "mpseg/multiplanar.hpp"
#include "mpseg/training.hpp"
#include "mpseg/unet2d.hpp"
#include "mpseg/volume.hpp"

namespace mpseg::pipeline {

namespace fs = std::filesystem;

struct ViewsConfig {
    int count = 6;
    std::uint64_t seed = 0;
    double min_angle_deg = 30.0;
    double iso_spacing = 0.0;
    double margin_frac = 0.05;
};

struct FusionConfig {
    std::string mode = "fit"; ///< "fit" or "mean"
    int iterations = 100;
    double step = 0.5;
};

/// Everything a cross-validation run depends on. JSON schema mirrors the
/// field names; see README.
struct RunConfig {
    fs::path dataset_root;
    int modalities = 3;
    std::vector<std::string> modality_order;
    ViewsConfig views;
    nn::UNetConfig unet;
    train::TrainConfig train;
    FusionConfig fusion;
    std::uint64_t cv_seed = 0;
    fs::path output_dir = "mpseg_run";
    std::string report_format = "markdown";
    int threads = 1;

    RunConfig();

    /// InvalidConfig on bad values; with `check_paths`, IoFailure when the
    /// dataset root does not exist.
    void validate(bool check_paths) const;

    std::string to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static RunConfig from_json(const std::string& text);

    /// FNV-1a over the canonical JSON, excluding output_dir and threads.
    std::string hash() const;
};

/// Reads a config file, or the "config" member of a run manifest.
RunConfig load_run_config(const fs::path& path);

/// Axes plus resampling settings a trained model was built against.
struct ViewSpec {
    std::vector<Vec3> axes;
    planar::ResampleOptions options;
    int modalities = 3;
    std::vector<std::string> modality_order;

    std::string to_json() const;
    static ViewSpec from_json(const std::string& text);
};

ViewSpec view_spec(const RunConfig& config);

struct Subject {
    std::string id;
    Volume image; ///< normalised, first k modalities
    std::optional<SegmentationMask> mask;
};

Subject load_normalized(const fs::path& root, const std::string& id, int modalities,
                        const std::vector<std::string>& order, bool need_mask);

/// One back-projected probability volume per view axis.
std::vector<planar::ProbabilityVolume> view_probabilities(const nn::UNet& net, const Volume& image,
                                                          const ViewSpec& views);

/// Fused argmax mask; `weights` absent means mean fusion.
SegmentationMask predict_mask(const nn::UNet& net, const Volume& image, const ViewSpec& views,
                              const std::optional<fusion::FusionWeights>& weights);

struct TrainedModel {
    nn::UNet net;
    train::TrainHistory history;
};

TrainedModel train_model(const RunConfig& config, const ViewSpec& views, const std::vector<Subject>& train_subjects,
                         const std::vector<Subject>& val_subjects, std::uint64_t net_seed, std::uint64_t train_seed);

fusion::FitResult fit_weights(const RunConfig& config, const nn::UNet& net, const ViewSpec& views,
                              const std::vector<Subject>& val_subjects);

/// Seeds a fold uses, derived from the config so every fold differs.
std::uint64_t fold_net_seed(const RunConfig& config, int fold);
std::uint64_t fold_train_seed(const RunConfig& config, int fold);

struct FoldResult {
    train::FoldSplit split;
    std::vector<metrics::SubjectScore> scores;
    metrics::DiceReport report;
    fusion::FitResult fit;
    fs::path dir;
};

struct CvResult {
    std::vector<FoldResult> folds;
    std::vector<Vec3> view_axes;
    std::vector<metrics::SubjectScore> scores; ///< every test prediction, fold order
    metrics::DiceReport pooled;
    fs::path manifest_path;
    fs::path pooled_report_path;
};

/// Full 3-fold run; writes per-fold artifacts, pooled report, and run_manifest.json.
CvResult run_cv(const RunConfig& config);

std::string report_extension(metrics::ReportFormat format);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

} // namespace mpseg::pipeline
