#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mpseg/volume.hpp"

namespace mpseg::phantom {

enum class Difficulty { Easy, Medium };

struct PhantomConfig {
    int grid_size = 32;
    double noise_std = 0.05;
    Difficulty difficulty = Difficulty::Easy;
    std::uint64_t seed = 1;
    int n_modalities = 4;

    void validate() const;
};

/// Region intensities per channel (t1c, t1n, t2f, t2w) at easy difficulty.
/// Medium difficulty halves every region's offset from the brain row.
struct IntensityTable {
    static constexpr std::array<double, 4> brain{0.50, 0.50, 0.50, 0.50};
    static constexpr std::array<double, 4> ncr{0.20, 0.30, 0.70, 0.85};
    static constexpr std::array<double, 4> ed{0.55, 0.40, 0.90, 1.00};
    static constexpr std::array<double, 4> et{1.00, 0.60, 0.65, 0.60};
};

/// Mean intensity of `label` (0 = brain tissue) on `channel` for a difficulty.
double region_intensity(int label, int channel, Difficulty difficulty);

struct Ellipsoid {
    Vec3 center{};
    Vec3 radii{};

    /// Sum of squared normalised offsets; <= 1 inside.
    double level(const Vec3& p) const;
    bool contains(const Vec3& p) const { return level(p) <= 1.0; }
};

/// Ellipsoids the labels were rasterised from, in voxel coordinates.
struct PhantomGeometry {
    Ellipsoid brain;
    Ellipsoid edema;    ///< outer tumour boundary (WT support)
    Ellipsoid enhancing; ///< ET + NCR support
    Ellipsoid core;     ///< NCR support
};

struct PhantomSubject {
    Volume image; ///< n_modalities channels
    SegmentationMask mask;
    PhantomGeometry geometry;
};

/// Fully determined by (config.seed, subject_index).
PhantomSubject generate_subject(const PhantomConfig& config, int subject_index);

std::string subject_id(int subject_index);

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<std::string> subject_ids;
    std::filesystem::path manifest_path;
};

/// Writes <out>/<id>/<id>-{t1c,t1n,t2f,t2w,seg}.nii.gz and <out>/manifest.json.
DatasetManifest generate_dataset(int n_subjects, const PhantomConfig& config, const std::filesystem::path& out_dir);

} // namespace mpseg::phantom
