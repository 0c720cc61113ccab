#pragma once

#include <string>
#include <vector>

#include "mpseg/multiplanar.hpp"
#include "mpseg/volume.hpp"

namespace mpseg::fusion {

using planar::ProbabilityVolume;

/// Convex per-class view weights, stored (view, class) row-major.
struct FusionWeights {
    int views = 0;
    int classes = 0;
    std::vector<double> w;

    FusionWeights() = default;
    FusionWeights(int views_, int classes_, double fill)
        : views(views_), classes(classes_), w(static_cast<std::size_t>(views_) * classes_, fill) {}

    static FusionWeights uniform(int views, int classes) {
        return FusionWeights(views, classes, 1.0 / static_cast<double>(views));
    }

    double& at(int view, int cls) { return w[static_cast<std::size_t>(view) * classes + cls]; }
    double at(int view, int cls) const { return w[static_cast<std::size_t>(view) * classes + cls]; }

    /// Nonnegative entries with per-class sums of 1 within `tol`.
    bool is_convex(double tol = 1e-6) const;

    std::string to_json() const;
    static FusionWeights from_json(const std::string& text);
};

constexpr double kSoftDiceEpsilon = 1e-6;

ProbabilityVolume mean_fusion(const std::vector<ProbabilityVolume>& vols);

/// fused(c, x) = sum_v w[v, c] * vols[v](c, x)
ProbabilityVolume apply_fusion(const std::vector<ProbabilityVolume>& vols, const FusionWeights& weights);

/// (2 sum p_c y_c + eps) / (sum p_c + sum y_c + eps) per class, with y the
/// one-hot encoding of `labels`.
std::vector<double> soft_dice(const ProbabilityVolume& probs, const SegmentationMask& labels);

/// Same, against explicit one-hot planes stored (class, voxel).
std::vector<double> soft_dice(const ProbabilityVolume& probs, const std::vector<double>& onehot);

/// Mean over subjects and classes of the soft Dice of the fused prediction.
double fusion_objective(const std::vector<std::vector<ProbabilityVolume>>& val_vols,
                        const std::vector<SegmentationMask>& val_labels, const FusionWeights& weights);

struct FitOptions {
    int iterations = 100;
    double step = 0.5;
};

struct FitResult {
    FusionWeights weights;
    double objective = 0.0;
    double uniform_objective = 0.0;
};

/// Projected gradient ascent on fusion_objective from the uniform start;
/// returns the best iterate seen, so the result never scores below uniform.
FitResult fit_fusion_weights(const std::vector<std::vector<ProbabilityVolume>>& val_vols,
                             const std::vector<SegmentationMask>& val_labels, const FitOptions& options = {});

/// Per-voxel argmax, ties to the lowest class index.
SegmentationMask argmax_labels(const ProbabilityVolume& vol);

} // namespace mpseg::fusion
