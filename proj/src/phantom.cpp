#include "mpseg/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "mpseg/parallel.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/volume_io.hpp"

namespace mpseg::phantom {

namespace fs = std::filesystem;

void PhantomConfig::validate() const {
    if (grid_size < 16) {
        throw Error(ErrorKind::InvalidConfig, "phantom grid_size must be at least 16");
    }
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
        throw Error(ErrorKind::InvalidConfig, "phantom noise_std must be nonnegative");
    }
    if (n_modalities < 1 || n_modalities > 4) {
        throw Error(ErrorKind::InvalidConfig, "phantom n_modalities must be in [1, 4]");
    }
}

double region_intensity(int label, int channel, Difficulty difficulty) {
    const double brain = IntensityTable::brain[static_cast<std::size_t>(channel)];
    double value = brain;
    switch (label) {
    case 1: value = IntensityTable::ncr[static_cast<std::size_t>(channel)]; break;
    case 2: value = IntensityTable::ed[static_cast<std::size_t>(channel)]; break;
    case 3: value = IntensityTable::et[static_cast<std::size_t>(channel)]; break;
    default: break;
    }
    if (difficulty == Difficulty::Medium) {
        value = brain + 0.5 * (value - brain);
    }
    return value;
}

double Ellipsoid::level(const Vec3& p) const {
    double q = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double d = (p[a] - center[a]) / radii[a];
        q += d * d;
    }
    return q;
}

std::string subject_id(int subject_index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "PHANTOM-%03d", subject_index);
    return buf;
}

namespace {

constexpr int kMaxPlacementTries = 200;

Ellipsoid scaled(const Ellipsoid& e, double f) {
    return {e.center, {e.radii[0] * f, e.radii[1] * f, e.radii[2] * f}};
}

// Checks points on the outer tumour surface against a shrunken brain so the
// halo never touches the skull boundary.
bool fits_inside(const Ellipsoid& inner, const Ellipsoid& outer) {
    constexpr int kTheta = 12;
    constexpr int kPhi = 24;
    for (int t = 0; t <= kTheta; ++t) {
        const double theta = std::numbers::pi * t / kTheta;
        for (int p = 0; p < kPhi; ++p) {
            const double phi = 2.0 * std::numbers::pi * p / kPhi;
            const Vec3 q{inner.center[0] + inner.radii[0] * std::sin(theta) * std::cos(phi),
                         inner.center[1] + inner.radii[1] * std::sin(theta) * std::sin(phi),
                         inner.center[2] + inner.radii[2] * std::cos(theta)};
            if (outer.level(q) > 0.85) {
                return false;
            }
        }
    }
    return true;
}

int label_at(const PhantomGeometry& g, const Vec3& p) {
    if (g.core.contains(p)) {
        return 1;
    }
    if (g.enhancing.contains(p)) {
        return 3;
    }
    if (g.edema.contains(p)) {
        return 2;
    }
    return 0;
}

} // namespace

PhantomSubject generate_subject(const PhantomConfig& config, int subject_index) {
    config.validate();
    const int n = config.grid_size;
    const double s = n / 32.0;
    Rng rng = Rng::derive(config.seed, static_cast<std::uint64_t>(subject_index), 0);

    GridSpec grid;
    grid.dims = {n, n, n};

    PhantomGeometry geom;
    const double mid = (n - 1) / 2.0;
    for (int a = 0; a < 3; ++a) {
        geom.brain.center[a] = mid + rng.uniform(-0.5, 0.5) * s;
    }
    geom.brain.radii = {rng.uniform(12.5, 14.0) * s, rng.uniform(11.5, 13.5) * s, rng.uniform(10.5, 12.5) * s};

    SegmentationMask mask(grid);
    std::vector<std::uint8_t> in_brain(grid.size(), 0);
    std::size_t brain_voxels = 0;
    for (int k = 0; k < n; ++k) {
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < n; ++i) {
                if (geom.brain.contains({double(i), double(j), double(k)})) {
                    in_brain[grid.offset(i, j, k)] = 1;
                    ++brain_voxels;
                }
            }
        }
    }

    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementTries && !placed; ++attempt) {
        Ellipsoid ed;
        ed.radii = {rng.uniform(4.5, 6.0) * s, rng.uniform(4.5, 6.0) * s, rng.uniform(4.5, 6.0) * s};
        for (int a = 0; a < 3; ++a) {
            const double room = std::max(0.0, geom.brain.radii[a] - ed.radii[a]);
            ed.center[a] = geom.brain.center[a] + rng.uniform(-1.0, 1.0) * room;
        }
        const double f_et = rng.uniform(0.65, 0.75);
        const double f_ncr = rng.uniform(0.25, 0.32);
        if (!fits_inside(ed, geom.brain)) {
            continue;
        }
        geom.edema = ed;
        geom.enhancing = scaled(ed, f_et);
        geom.core = scaled(ed, f_ncr);

        std::array<std::size_t, 4> counts{};
        for (int k = 0; k < n; ++k) {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < n; ++i) {
                    const std::size_t o = grid.offset(i, j, k);
                    const int label = in_brain[o] ? label_at(geom, {double(i), double(j), double(k)}) : 0;
                    mask.labels[o] = static_cast<std::int16_t>(label);
                    ++counts[static_cast<std::size_t>(label)];
                }
            }
        }
        const double wt = static_cast<double>(counts[1] + counts[2] + counts[3]);
        const double frac = wt / static_cast<double>(brain_voxels);
        if (frac < 0.01 || frac > 0.15) {
            continue;
        }
        if (n >= 32 && (counts[1] == 0 || counts[2] == 0 || counts[3] == 0)) {
            continue;
        }
        placed = true;
    }
    if (!placed) {
        throw Error(ErrorKind::TumorDoesNotFit,
                    "could not place a tumour inside the brain after " + std::to_string(kMaxPlacementTries) + " tries");
    }

    Volume image(config.n_modalities, grid, 0.0f);
    Rng noise = Rng::derive(config.seed, static_cast<std::uint64_t>(subject_index), 1);
    for (int c = 0; c < config.n_modalities; ++c) {
        float* data = image.channel_data(c);
        for (std::size_t o = 0; o < grid.size(); ++o) {
            if (!in_brain[o]) {
                continue;
            }
            double v = region_intensity(mask.labels[o], c, config.difficulty);
            if (config.noise_std > 0.0) {
                v += config.noise_std * noise.normal();
            }
            data[o] = static_cast<float>(v);
        }
    }
    return {std::move(image), std::move(mask), geom};
}

DatasetManifest generate_dataset(int n_subjects, const PhantomConfig& config, const fs::path& out_dir) {
    if (n_subjects < 1) {
        throw Error(ErrorKind::InvalidConfig, "phantom dataset needs at least one subject");
    }
    config.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw Error(ErrorKind::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
    }
    const auto& mods = io::canonical_modalities();

    parallel_for(static_cast<std::size_t>(n_subjects), [&](std::size_t idx) {
        const std::string id = subject_id(static_cast<int>(idx));
        const PhantomSubject subject = generate_subject(config, static_cast<int>(idx));
        const fs::path dir = out_dir / id;
        std::error_code mk;
        fs::create_directories(dir, mk);
        if (mk) {
            throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + mk.message());
        }
        for (int c = 0; c < config.n_modalities; ++c) {
            Volume channel(1, subject.image.grid());
            std::copy_n(subject.image.channel_data(c), subject.image.grid().size(), channel.channel_data(0));
            io::write_nifti(channel, dir / (id + "-" + mods[static_cast<std::size_t>(c)] + ".nii.gz"));
        }
        io::write_mask(subject.mask, dir / (id + "-seg.nii.gz"));
    });

    DatasetManifest manifest;
    manifest.root = out_dir;
    nlohmann::ordered_json j;
    j["phantom"] = {{"grid_size", config.grid_size},
                    {"noise_std", config.noise_std},
                    {"difficulty", config.difficulty == Difficulty::Easy ? "easy" : "medium"},
                    {"seed", config.seed},
                    {"n_modalities", config.n_modalities}};
    j["subjects"] = nlohmann::ordered_json::array();
    for (int idx = 0; idx < n_subjects; ++idx) {
        const std::string id = subject_id(idx);
        manifest.subject_ids.push_back(id);
        nlohmann::ordered_json files;
        for (int c = 0; c < config.n_modalities; ++c) {
            const std::string& m = mods[static_cast<std::size_t>(c)];
            files[m] = id + "/" + id + "-" + m + ".nii.gz";
        }
        files["seg"] = id + "/" + id + "-seg.nii.gz";
        j["subjects"].push_back({{"id", id}, {"files", files}});
    }
    manifest.manifest_path = out_dir / "manifest.json";
    std::ofstream out(manifest.manifest_path);
    if (!out) {
        throw Error(ErrorKind::IoFailure, "cannot write " + manifest.manifest_path.string());
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw Error(ErrorKind::IoFailure, "write failed for " + manifest.manifest_path.string());
    }
    return manifest;
}

} // namespace mpseg::phantom
