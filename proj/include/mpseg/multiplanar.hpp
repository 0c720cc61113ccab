#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mpseg/volume.hpp"

namespace mpseg::planar {

/// One slicing perspective: slice normal, in-plane frame, and the sampling
/// grid. Sample (s, r, c) sits at
///   center + (s - (S-1)/2)·h·axis + (r - (R-1)/2)·h·basis_u + (c - (C-1)/2)·h·basis_v
/// in millimetres, where h = iso_spacing and (S, R, C) = extent.
struct ViewGeometry {
    Vec3 axis{0, 0, 1};
    Vec3 basis_u{1, 0, 0};
    Vec3 basis_v{0, 1, 0};
    double iso_spacing = 1.0;
    Index3 extent{1, 1, 1};
    Vec3 center_offset{0, 0, 0};

    std::size_t plane_size() const {
        return static_cast<std::size_t>(extent[1]) * static_cast<std::size_t>(extent[2]);
    }
    std::size_t size() const { return static_cast<std::size_t>(extent[0]) * plane_size(); }

    /// Physical position (mm) of stack sample (s, r, c); fractional indices allowed.
    Vec3 sample_position(double s, double r, double c) const;
    /// Inverse of sample_position.
    Vec3 stack_coordinates(const Vec3& physical) const;

    /// Throws GeometryMismatch if the frame is not orthonormal and right-handed.
    void validate(double tol = 1e-9) const;
};

/// Per-channel stack of resampled planes, stored (channel, slice, row, col)
/// with col fastest.
struct PlaneStack {
    int channels = 0;
    ViewGeometry geometry;
    Index3 source_shape{0, 0, 0};
    std::vector<double> slices;

    PlaneStack() = default;
    PlaneStack(int channels_, const ViewGeometry& geom, const Index3& source)
        : channels(channels_), geometry(geom), source_shape(source),
          slices(static_cast<std::size_t>(channels_) * geom.size(), 0.0) {}

    std::size_t offset(int channel, int s, int r, int c) const {
        const auto& e = geometry.extent;
        return ((static_cast<std::size_t>(channel) * static_cast<std::size_t>(e[0]) + static_cast<std::size_t>(s)) *
                    static_cast<std::size_t>(e[1]) +
                static_cast<std::size_t>(r)) *
                   static_cast<std::size_t>(e[2]) +
               static_cast<std::size_t>(c);
    }
    double& at(int channel, int s, int r, int c) { return slices[offset(channel, s, r, c)]; }
    double at(int channel, int s, int r, int c) const { return slices[offset(channel, s, r, c)]; }
};

/// Nearest-neighbour label planes on a view grid, stored (slice, row, col).
struct LabelStack {
    ViewGeometry geometry;
    std::vector<std::int16_t> labels;

    std::int16_t at(int s, int r, int c) const {
        const auto& e = geometry.extent;
        return labels[(static_cast<std::size_t>(s) * static_cast<std::size_t>(e[1]) + static_cast<std::size_t>(r)) *
                          static_cast<std::size_t>(e[2]) +
                      static_cast<std::size_t>(c)];
    }
};

/// Class probabilities on a native voxel grid, stored (class, k, j, i) with i fastest.
struct ProbabilityVolume {
    int classes = 0;
    GridSpec grid;
    std::vector<double> probs;

    ProbabilityVolume() = default;
    ProbabilityVolume(int classes_, const GridSpec& g, double fill = 0.0)
        : classes(classes_), grid(g), probs(static_cast<std::size_t>(classes_) * g.size(), fill) {}

    std::size_t voxels() const { return grid.size(); }
    double& at(int cls, std::size_t voxel) { return probs[static_cast<std::size_t>(cls) * grid.size() + voxel]; }
    double at(int cls, std::size_t voxel) const { return probs[static_cast<std::size_t>(cls) * grid.size() + voxel]; }
    bool same_shape(const ProbabilityVolume& other) const {
        return classes == other.classes && grid.dims == other.grid.dims;
    }
};

/// First min(count, 3) axes are z, y, x; the rest are seeded uniform draws on
/// the sphere kept only if every pair (a ~ -a) is at least `min_pairwise_angle_deg` apart.
std::vector<Vec3> sample_views(int count, std::uint64_t seed, double min_pairwise_angle_deg);

/// Angle in degrees between two axes, treating a and -a as the same axis.
double axis_angle_deg(const Vec3& a, const Vec3& b);

/// Right-handed in-plane frame for `axis`; basis_u comes from the canonical
/// vector least aligned with the axis (ties x, then y, then z).
std::pair<Vec3, Vec3> plane_basis(const Vec3& axis);

/// Trilinear interpolation at voxel coordinates; grid nodes outside the
/// volume contribute zero.
double trilinear_sample(const Volume& volume, int channel, const Vec3& point);

struct ResampleOptions {
    double iso_spacing = 0.0; ///< <= 0 selects the largest native spacing
    double margin_frac = 0.05;
    std::size_t voxel_budget = std::size_t{256} * 256 * 256;
};

/// Sampling grid for `axis` that covers the volume's bounding sphere.
ViewGeometry make_view_geometry(const GridSpec& grid, const Vec3& axis, const ResampleOptions& options);

PlaneStack resample_to_view(const Volume& volume, const Vec3& axis, const ResampleOptions& options);
PlaneStack resample_to_view(const Volume& volume, const ViewGeometry& geometry);

LabelStack resample_labels(const SegmentationMask& mask, const ViewGeometry& geometry);

/// Interpolates per-class probabilities from the view grid back onto `target`.
/// Voxels that fall outside the stack are assigned to class 0.
ProbabilityVolume backproject(const PlaneStack& per_slice_probs, const ViewGeometry& geometry,
                              const GridSpec& target);

std::string geometry_to_json(const ViewGeometry& geometry);
ViewGeometry geometry_from_json(const std::string& text);

/// Caches a stack as <path> (NIfTI, dims col,row,slice x channels) plus
/// <path>.json holding the geometry.
void save_plane_stack(const PlaneStack& stack, const std::filesystem::path& path);
PlaneStack load_plane_stack(const std::filesystem::path& path);

} // namespace mpseg::planar
