#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpseg/volume.hpp"

namespace mpseg::io {

namespace fs = std::filesystem;

/// NIfTI-1 datatype codes understood by read_nifti.
enum class NiftiDatatype : short {
    UInt8 = 2,
    Int16 = 4,
    Float32 = 16,
};

/// Reads a single-file NIfTI-1 volume (.nii or .nii.gz). Intensities are
/// mapped through scl_slope/scl_inter, with a zero slope read as 1.
Volume read_nifti(const fs::path& path);

/// Writes `volume` as little-endian float32 NIfTI-1 with vox_offset 352.
/// A ".gz" suffix gzip-compresses the output.
void write_nifti(const Volume& volume, const fs::path& path);

/// Mask helpers; masks travel through the same float32 container.
SegmentationMask read_mask(const fs::path& path);
void write_mask(const SegmentationMask& mask, const fs::path& path);

Volume mask_to_volume(const SegmentationMask& mask);
SegmentationMask volume_to_mask(const Volume& volume);

/// Modality order used to pick "the first k" channels. Alphabetical over the
/// BraTS 2023 file suffixes.
inline const std::vector<std::string>& canonical_modalities() {
    static const std::vector<std::string> order{"t1c", "t1n", "t2f", "t2w"};
    return order;
}

struct SubjectRecord {
    std::string subject_id;
    std::vector<std::pair<std::string, fs::path>> modality_paths;
    std::optional<fs::path> seg_path;
};

/// Locates <root>/<id>/<id>-<modality>.nii[.gz] and <id>-seg.nii[.gz].
/// Modalities are listed in `order`; absent files are simply omitted.
SubjectRecord find_subject(const fs::path& root, const std::string& subject_id,
                           const std::vector<std::string>& order = canonical_modalities());

/// All subject directories under `root`, sorted by id.
std::vector<SubjectRecord> discover_subjects(const fs::path& root,
                                             const std::vector<std::string>& order = canonical_modalities());

struct LoadedSubject {
    Volume image;
    std::optional<SegmentationMask> seg;
};

/// Stacks the first `use_first_k` modalities of `record` as channels.
LoadedSubject load_subject(const SubjectRecord& record, int use_first_k,
                           const std::vector<std::string>& order = canonical_modalities());

/// Zero-mean, unit-std per channel over nonzero voxels; constant or empty
/// channels become all zeros.
Volume normalize_channels(const Volume& volume);

} // namespace mpseg::io
