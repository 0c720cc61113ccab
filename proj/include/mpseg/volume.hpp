#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mpseg/error.hpp"

namespace mpseg {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<int, 3>;

inline std::size_t voxel_count(const Index3& dims) {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
}

/// Spatial description of a voxel grid. Geometry is kept in voxel space plus
/// per-axis spacing; `origin` is carried through I/O but never rotates anything.
struct GridSpec {
    Index3 dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    std::size_t size() const { return voxel_count(dims); }
    /// Linear offset with i fastest, matching the on-disk NIfTI order.
    std::size_t offset(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims[1]) +
                static_cast<std::size_t>(j)) * static_cast<std::size_t>(dims[0]) +
               static_cast<std::size_t>(i);
    }
    bool same_grid(const GridSpec& other, double tol = 1e-6) const;
};

/// Multi-channel scalar volume. Storage order is (channel, k, j, i) with i
/// varying fastest, so channel c is a contiguous NIfTI-ordered block.
class Volume {
public:
    Volume() = default;
    Volume(int channels, const GridSpec& grid, float fill = 0.0f);

    int channels() const { return channels_; }
    const GridSpec& grid() const { return grid_; }
    const Index3& dims() const { return grid_.dims; }
    const Vec3& spacing() const { return grid_.spacing; }
    std::array<int, 4> shape() const { return {channels_, grid_.dims[0], grid_.dims[1], grid_.dims[2]}; }

    float& at(int c, int i, int j, int k) { return data_[channel_offset(c) + grid_.offset(i, j, k)]; }
    float at(int c, int i, int j, int k) const { return data_[channel_offset(c) + grid_.offset(i, j, k)]; }

    float* channel_data(int c) { return data_.data() + channel_offset(c); }
    const float* channel_data(int c) const { return data_.data() + channel_offset(c); }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    /// Throws MalformedHeader when an invariant (positive spacing, matching
    /// length, finite values) does not hold.
    void validate() const;

    bool operator==(const Volume& other) const;

private:
    std::size_t channel_offset(int c) const { return static_cast<std::size_t>(c) * grid_.size(); }

    int channels_ = 0;
    GridSpec grid_;
    std::vector<float> data_;
};

/// Integer label volume. Codes follow a LabelScheme (see metrics.hpp).
struct SegmentationMask {
    GridSpec grid;
    std::vector<std::int16_t> labels;

    SegmentationMask() = default;
    explicit SegmentationMask(const GridSpec& g, std::int16_t fill = 0)
        : grid(g), labels(g.size(), fill) {}

    std::int16_t& at(int i, int j, int k) { return labels[grid.offset(i, j, k)]; }
    std::int16_t at(int i, int j, int k) const { return labels[grid.offset(i, j, k)]; }
    std::size_t size() const { return labels.size(); }

    bool operator==(const SegmentationMask& other) const {
        return grid.dims == other.grid.dims && labels == other.labels;
    }
};

} // namespace mpseg
