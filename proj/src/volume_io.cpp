#include "mpseg/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace mpseg {

bool GridSpec::same_grid(const GridSpec& other, double tol) const {
    if (dims != other.dims) {
        return false;
    }
    for (int a = 0; a < 3; ++a) {
        if (std::abs(spacing[a] - other.spacing[a]) > tol) {
            return false;
        }
    }
    return true;
}

Volume::Volume(int channels, const GridSpec& grid, float fill)
    : channels_(channels), grid_(grid), data_(static_cast<std::size_t>(channels) * grid.size(), fill) {
    if (channels < 1 || grid.dims[0] < 1 || grid.dims[1] < 1 || grid.dims[2] < 1) {
        throw Error(ErrorKind::ShapeError, "volume shape must be positive");
    }
}

void Volume::validate() const {
    for (double s : grid_.spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw Error(ErrorKind::MalformedHeader, "spacing must be positive");
        }
    }
    if (data_.size() != static_cast<std::size_t>(channels_) * grid_.size()) {
        throw Error(ErrorKind::MalformedHeader, "data length does not match shape");
    }
    for (float v : data_) {
        if (!std::isfinite(v)) {
            throw Error(ErrorKind::MalformedHeader, "non-finite voxel value");
        }
    }
}

bool Volume::operator==(const Volume& other) const {
    // Spacing travels through 32-bit header fields, hence the tolerance.
    return channels_ == other.channels_ && grid_.same_grid(other.grid_, 1e-6) && data_ == other.data_;
}

namespace io {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

template <typename T>
T load_field(const unsigned char* base, std::size_t offset, bool swap) {
    T value;
    std::memcpy(&value, base + offset, sizeof(T));
    if (swap) {
        unsigned char tmp[sizeof(T)];
        std::memcpy(tmp, &value, sizeof(T));
        std::reverse(tmp, tmp + sizeof(T));
        std::memcpy(&value, tmp, sizeof(T));
    }
    return value;
}

template <typename T>
void store_field(unsigned char* base, std::size_t offset, T value) {
    static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
    std::memcpy(base + offset, &value, sizeof(T));
}

bool has_gz_suffix(const fs::path& path) {
    return path.extension() == ".gz";
}

std::vector<unsigned char> read_all_bytes(const fs::path& path) {
    if (!fs::exists(path)) {
        throw Error(ErrorKind::IoFailure, "no such file: " + path.string());
    }
    // gzread passes uncompressed files through untouched.
    gzFile file = gzopen(path.string().c_str(), "rb");
    if (file == nullptr) {
        throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
    }
    std::vector<unsigned char> out;
    unsigned char buffer[1 << 16];
    for (;;) {
        int n = gzread(file, buffer, sizeof(buffer));
        if (n < 0) {
            gzclose(file);
            throw Error(ErrorKind::IoFailure, "decompression failed: " + path.string());
        }
        if (n == 0) {
            break;
        }
        out.insert(out.end(), buffer, buffer + n);
    }
    gzclose(file);
    return out;
}

void write_all_bytes(const std::vector<unsigned char>& bytes, const fs::path& path) {
    if (has_gz_suffix(path)) {
        gzFile file = gzopen(path.string().c_str(), "wb6");
        if (file == nullptr) {
            throw Error(ErrorKind::IoFailure, "cannot open for writing: " + path.string());
        }
        int written = gzwrite(file, bytes.data(), static_cast<unsigned>(bytes.size()));
        int closed = gzclose(file);
        if (written != static_cast<int>(bytes.size()) || closed != Z_OK) {
            throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
        }
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::IoFailure, "cannot open for writing: " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
    }
}

fs::path first_existing(const fs::path& stem) {
    fs::path gz = stem;
    gz += ".nii.gz";
    if (fs::exists(gz)) {
        return gz;
    }
    fs::path plain = stem;
    plain += ".nii";
    if (fs::exists(plain)) {
        return plain;
    }
    return {};
}

} // namespace

Volume read_nifti(const fs::path& path) {
    const std::vector<unsigned char> bytes = read_all_bytes(path);
    if (bytes.size() < static_cast<std::size_t>(kHeaderSize)) {
        throw Error(ErrorKind::TruncatedFile, "header shorter than 348 bytes: " + path.string());
    }
    const unsigned char* h = bytes.data();

    const char* magic = reinterpret_cast<const char*>(h + 344);
    if (!(std::memcmp(magic, "n+1\0", 4) == 0 || std::memcmp(magic, "ni1\0", 4) == 0)) {
        throw Error(ErrorKind::MalformedHeader, "bad magic in " + path.string());
    }

    short dim0 = load_field<short>(h, 40, false);
    bool swap = false;
    if (dim0 < 1 || dim0 > 7) {
        swap = true;
        dim0 = load_field<short>(h, 40, true);
    }
    if (dim0 != 3 && dim0 != 4) {
        throw Error(ErrorKind::MalformedHeader, "dim[0] must be 3 or 4, got " + std::to_string(dim0));
    }

    Index3 dims{};
    for (int a = 0; a < 3; ++a) {
        dims[a] = load_field<short>(h, 42 + 2 * a, swap);
        if (dims[a] < 1) {
            throw Error(ErrorKind::MalformedHeader, "nonpositive dimension");
        }
    }
    int channels = 1;
    if (dim0 == 4) {
        channels = load_field<short>(h, 48, swap);
        if (channels < 1) {
            throw Error(ErrorKind::MalformedHeader, "nonpositive dim[4]");
        }
    }

    const short datatype = load_field<short>(h, 70, swap);
    std::size_t bytes_per_voxel = 0;
    switch (datatype) {
    case static_cast<short>(NiftiDatatype::UInt8): bytes_per_voxel = 1; break;
    case static_cast<short>(NiftiDatatype::Int16): bytes_per_voxel = 2; break;
    case static_cast<short>(NiftiDatatype::Float32): bytes_per_voxel = 4; break;
    default:
        throw Error(ErrorKind::UnsupportedDatatype, "datatype code " + std::to_string(datatype));
    }

    GridSpec grid;
    grid.dims = dims;
    for (int a = 0; a < 3; ++a) {
        const float pix = load_field<float>(h, 80 + 4 * a, swap);
        if (!(pix > 0.0f) || !std::isfinite(pix)) {
            throw Error(ErrorKind::MalformedHeader, "nonpositive pixdim");
        }
        grid.spacing[a] = pix;
    }
    const short qform_code = load_field<short>(h, 252, swap);
    const short sform_code = load_field<short>(h, 254, swap);
    for (int a = 0; a < 3; ++a) {
        if (qform_code > 0) {
            grid.origin[a] = load_field<float>(h, 268 + 4 * a, swap);
        } else if (sform_code > 0) {
            grid.origin[a] = load_field<float>(h, 280 + 16 * a + 12, swap);
        }
    }

    float slope = load_field<float>(h, 112, swap);
    const float intercept_raw = load_field<float>(h, 116, swap);
    if (slope == 0.0f || !std::isfinite(slope)) {
        slope = 1.0f;
    }
    const float intercept = std::isfinite(intercept_raw) ? intercept_raw : 0.0f;

    const float vox_offset_f = load_field<float>(h, 108, swap);
    std::size_t vox_offset = vox_offset_f >= static_cast<float>(kHeaderSize)
                                 ? static_cast<std::size_t>(vox_offset_f)
                                 : static_cast<std::size_t>(kVoxOffset);

    Volume volume(channels, grid);
    const std::size_t n = volume.data().size();
    if (bytes.size() < vox_offset + n * bytes_per_voxel) {
        throw Error(ErrorKind::TruncatedFile, "data section shorter than shape implies: " + path.string());
    }
    const unsigned char* raw = h + vox_offset;
    float* out = volume.data().data();
    for (std::size_t v = 0; v < n; ++v) {
        float value = 0.0f;
        switch (datatype) {
        case static_cast<short>(NiftiDatatype::UInt8):
            value = static_cast<float>(raw[v]);
            break;
        case static_cast<short>(NiftiDatatype::Int16):
            value = static_cast<float>(load_field<std::int16_t>(raw, 2 * v, swap));
            break;
        default:
            value = load_field<float>(raw, 4 * v, swap);
            break;
        }
        if (slope != 1.0f || intercept != 0.0f) {
            value = value * slope + intercept;
        }
        out[v] = value;
    }
    volume.validate();
    return volume;
}

void write_nifti(const Volume& volume, const fs::path& path) {
    volume.validate();
    const auto& grid = volume.grid();
    const std::size_t n = volume.data().size();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(kVoxOffset) + n * 4, 0);
    unsigned char* h = bytes.data();

    store_field<int>(h, 0, kHeaderSize);
    const short dim0 = volume.channels() > 1 ? 4 : 3;
    store_field<short>(h, 40, dim0);
    for (int a = 0; a < 3; ++a) {
        store_field<short>(h, 42 + 2 * a, static_cast<short>(grid.dims[a]));
    }
    store_field<short>(h, 48, static_cast<short>(volume.channels()));
    for (int a = 5; a < 8; ++a) {
        store_field<short>(h, 40 + 2 * a, 1);
    }
    store_field<short>(h, 70, static_cast<short>(NiftiDatatype::Float32));
    store_field<short>(h, 72, 32);
    store_field<float>(h, 76, 1.0f);
    for (int a = 0; a < 3; ++a) {
        store_field<float>(h, 80 + 4 * a, static_cast<float>(grid.spacing[a]));
    }
    store_field<float>(h, 92, 1.0f);
    store_field<float>(h, 108, static_cast<float>(kVoxOffset));
    store_field<float>(h, 112, 1.0f);
    store_field<float>(h, 116, 0.0f);
    h[123] = 2; // xyzt_units: millimeters
    store_field<short>(h, 252, 1);
    store_field<short>(h, 254, 1);
    for (int a = 0; a < 3; ++a) {
        store_field<float>(h, 268 + 4 * a, static_cast<float>(grid.origin[a]));
        store_field<float>(h, 280 + 16 * a + 4 * a, static_cast<float>(grid.spacing[a]));
        store_field<float>(h, 280 + 16 * a + 12, static_cast<float>(grid.origin[a]));
    }
    std::memcpy(h + 344, "n+1\0", 4);
    std::memcpy(h + kVoxOffset, volume.data().data(), n * 4);

    if (path.has_parent_path() && !fs::is_directory(path.parent_path())) {
        throw Error(ErrorKind::IoFailure, "directory does not exist: " + path.parent_path().string());
    }
    write_all_bytes(bytes, path);
}

Volume mask_to_volume(const SegmentationMask& mask) {
    Volume v(1, mask.grid);
    std::transform(mask.labels.begin(), mask.labels.end(), v.data().begin(),
                   [](std::int16_t l) { return static_cast<float>(l); });
    return v;
}

SegmentationMask volume_to_mask(const Volume& volume) {
    SegmentationMask mask(volume.grid());
    const float* src = volume.channel_data(0);
    for (std::size_t v = 0; v < mask.size(); ++v) {
        mask.labels[v] = static_cast<std::int16_t>(std::lround(src[v]));
    }
    return mask;
}

SegmentationMask read_mask(const fs::path& path) {
    return volume_to_mask(read_nifti(path));
}

void write_mask(const SegmentationMask& mask, const fs::path& path) {
    write_nifti(mask_to_volume(mask), path);
}

SubjectRecord find_subject(const fs::path& root, const std::string& subject_id,
                           const std::vector<std::string>& order) {
    SubjectRecord record;
    record.subject_id = subject_id;
    const fs::path dir = root / subject_id;
    for (const auto& modality : order) {
        fs::path found = first_existing(dir / (subject_id + "-" + modality));
        if (!found.empty()) {
            record.modality_paths.emplace_back(modality, found);
        }
    }
    fs::path seg = first_existing(dir / (subject_id + "-seg"));
    if (!seg.empty()) {
        record.seg_path = seg;
    }
    return record;
}

std::vector<SubjectRecord> discover_subjects(const fs::path& root, const std::vector<std::string>& order) {
    if (!fs::is_directory(root)) {
        throw Error(ErrorKind::IoFailure, "dataset root is not a directory: " + root.string());
    }
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) {
            ids.push_back(entry.path().filename().string());
        }
    }
    std::sort(ids.begin(), ids.end());
    std::vector<SubjectRecord> records;
    for (const auto& id : ids) {
        SubjectRecord r = find_subject(root, id, order);
        if (!r.modality_paths.empty()) {
            records.push_back(std::move(r));
        }
    }
    return records;
}

LoadedSubject load_subject(const SubjectRecord& record, int use_first_k, const std::vector<std::string>& order) {
    if (use_first_k < 1 || use_first_k > static_cast<int>(order.size())) {
        throw Error(ErrorKind::InvalidConfig, "use_first_k out of range: " + std::to_string(use_first_k));
    }
    std::set<std::string> seen;
    for (const auto& [name, p] : record.modality_paths) {
        if (!seen.insert(name).second) {
            throw Error(ErrorKind::InvalidConfig, "duplicate modality " + name + " for " + record.subject_id);
        }
    }

    std::vector<Volume> channels;
    for (int c = 0; c < use_first_k; ++c) {
        const std::string& wanted = order[static_cast<std::size_t>(c)];
        auto it = std::find_if(record.modality_paths.begin(), record.modality_paths.end(),
                               [&](const auto& entry) { return entry.first == wanted; });
        if (it == record.modality_paths.end()) {
            throw Error(ErrorKind::MissingModality, record.subject_id + " lacks modality " + wanted);
        }
        Volume v = read_nifti(it->second);
        if (!channels.empty() && !v.grid().same_grid(channels.front().grid())) {
            throw Error(ErrorKind::ShapeMismatch, record.subject_id + ": modality " + wanted +
                                                      " grid differs from " + order.front());
        }
        channels.push_back(std::move(v));
    }

    LoadedSubject out;
    out.image = Volume(use_first_k, channels.front().grid());
    const std::size_t n = out.image.grid().size();
    for (int c = 0; c < use_first_k; ++c) {
        // A 4D modality file contributes its first frame.
        std::copy_n(channels[static_cast<std::size_t>(c)].channel_data(0), n, out.image.channel_data(c));
    }
    if (record.seg_path) {
        SegmentationMask seg = read_mask(*record.seg_path);
        if (seg.grid.dims != out.image.dims()) {
            throw Error(ErrorKind::ShapeMismatch, record.subject_id + ": segmentation grid differs from image");
        }
        out.seg = std::move(seg);
    }
    return out;
}

Volume normalize_channels(const Volume& volume) {
    Volume out = volume;
    const std::size_t n = volume.grid().size();
    for (int c = 0; c < volume.channels(); ++c) {
        const float* src = volume.channel_data(c);
        float* dst = out.channel_data(c);
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t v = 0; v < n; ++v) {
            if (src[v] != 0.0f) {
                sum += src[v];
                ++count;
            }
        }
        if (count == 0) {
            std::fill(dst, dst + n, 0.0f);
            continue;
        }
        const double mean = sum / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t v = 0; v < n; ++v) {
            if (src[v] != 0.0f) {
                const double d = src[v] - mean;
                sq += d * d;
            }
        }
        const double sd = std::sqrt(sq / static_cast<double>(count));
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
            std::fill(dst, dst + n, 0.0f);
            continue;
        }
        // Background zeros stay zero so re-normalizing sees the same support.
        for (std::size_t v = 0; v < n; ++v) {
            dst[v] = src[v] != 0.0f ? static_cast<float>((src[v] - mean) / sd) : 0.0f;
        }
    }
    return out;
}

} // namespace io
} // namespace mpseg
