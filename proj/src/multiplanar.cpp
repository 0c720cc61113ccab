#include "mpseg/multiplanar.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "mpseg/parallel.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/volume_io.hpp"

namespace mpseg::planar {

namespace {

double dot(const Vec3& a, const Vec3& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm(const Vec3& a) {
    return std::sqrt(dot(a, a));
}

Vec3 scaled(const Vec3& a, double s) {
    return {a[0] * s, a[1] * s, a[2] * s};
}

Vec3 volume_center(const GridSpec& grid) {
    return {0.5 * (grid.dims[0] - 1) * grid.spacing[0], 0.5 * (grid.dims[1] - 1) * grid.spacing[1],
            0.5 * (grid.dims[2] - 1) * grid.spacing[2]};
}

constexpr int kDrawBudget = 100000;

} // namespace

Vec3 ViewGeometry::sample_position(double s, double r, double c) const {
    const double ds = (s - 0.5 * (extent[0] - 1)) * iso_spacing;
    const double dr = (r - 0.5 * (extent[1] - 1)) * iso_spacing;
    const double dc = (c - 0.5 * (extent[2] - 1)) * iso_spacing;
    Vec3 p;
    for (int a = 0; a < 3; ++a) {
        p[a] = center_offset[a] + ds * axis[a] + dr * basis_u[a] + dc * basis_v[a];
    }
    return p;
}

Vec3 ViewGeometry::stack_coordinates(const Vec3& physical) const {
    const Vec3 d{physical[0] - center_offset[0], physical[1] - center_offset[1], physical[2] - center_offset[2]};
    return {dot(d, axis) / iso_spacing + 0.5 * (extent[0] - 1), dot(d, basis_u) / iso_spacing + 0.5 * (extent[1] - 1),
            dot(d, basis_v) / iso_spacing + 0.5 * (extent[2] - 1)};
}

void ViewGeometry::validate(double tol) const {
    const auto fail = [](const std::string& what) { throw Error(ErrorKind::GeometryMismatch, what); };
    if (std::abs(norm(axis) - 1.0) > tol || std::abs(norm(basis_u) - 1.0) > tol ||
        std::abs(norm(basis_v) - 1.0) > tol) {
        fail("view frame vectors must be unit length");
    }
    if (std::abs(dot(axis, basis_u)) > tol || std::abs(dot(axis, basis_v)) > tol ||
        std::abs(dot(basis_u, basis_v)) > tol) {
        fail("view frame vectors must be orthogonal");
    }
    if (std::abs(dot(basis_u, cross(basis_v, axis)) - 1.0) > tol) {
        fail("view frame must be right-handed");
    }
    if (!(iso_spacing > 0.0) || extent[0] < 1 || extent[1] < 1 || extent[2] < 1) {
        fail("view grid must have positive spacing and extent");
    }
}

double axis_angle_deg(const Vec3& a, const Vec3& b) {
    const double c = std::min(1.0, std::abs(dot(a, b)) / (norm(a) * norm(b)));
    return std::acos(c) * 180.0 / std::numbers::pi;
}

std::vector<Vec3> sample_views(int count, std::uint64_t seed, double min_pairwise_angle_deg) {
    if (count < 1) {
        throw Error(ErrorKind::InvalidConfig, "view count must be at least 1");
    }
    if (!(min_pairwise_angle_deg >= 0.0 && min_pairwise_angle_deg < 90.0)) {
        throw Error(ErrorKind::InvalidConfig, "min pairwise angle must lie in [0, 90)");
    }
    const std::vector<Vec3> canonical{{0, 0, 1}, {0, 1, 0}, {1, 0, 0}};
    std::vector<Vec3> axes(canonical.begin(), canonical.begin() + std::min(count, 3));

    Rng rng(seed);
    while (static_cast<int>(axes.size()) < count) {
        bool accepted = false;
        for (int attempt = 0; attempt < kDrawBudget && !accepted; ++attempt) {
            Vec3 g{rng.normal(), rng.normal(), rng.normal()};
            const double n = norm(g);
            if (n < 1e-12) {
                continue;
            }
            g = scaled(g, 1.0 / n);
            accepted = std::all_of(axes.begin(), axes.end(), [&](const Vec3& a) {
                return axis_angle_deg(a, g) >= min_pairwise_angle_deg;
            });
            if (accepted) {
                axes.push_back(g);
            }
        }
        if (!accepted) {
            throw Error(ErrorKind::AngleInfeasible, "cannot place " + std::to_string(count) + " axes " +
                                                        std::to_string(min_pairwise_angle_deg) + " degrees apart");
        }
    }
    return axes;
}

std::pair<Vec3, Vec3> plane_basis(const Vec3& axis_in) {
    const double n = norm(axis_in);
    if (!(n > 1e-12) || !std::isfinite(n)) {
        throw Error(ErrorKind::DegenerateAxis, "view axis has zero length");
    }
    const Vec3 axis = scaled(axis_in, 1.0 / n);

    int least = 0;
    for (int a = 1; a < 3; ++a) {
        if (std::abs(axis[a]) < std::abs(axis[least])) {
            least = a;
        }
    }
    Vec3 e{0, 0, 0};
    e[least] = 1.0;
    // Gram-Schmidt step, then complete the frame so det[u, v, axis] = +1.
    Vec3 u{e[0] - axis[least] * axis[0], e[1] - axis[least] * axis[1], e[2] - axis[least] * axis[2]};
    u = scaled(u, 1.0 / norm(u));
    Vec3 v = cross(axis, u);
    v = scaled(v, 1.0 / norm(v));
    return {u, v};
}

double trilinear_sample(const Volume& volume, int channel, const Vec3& point) {
    const Index3& d = volume.dims();
    const double fx = std::floor(point[0]);
    const double fy = std::floor(point[1]);
    const double fz = std::floor(point[2]);
    if (fx < -1.0 || fy < -1.0 || fz < -1.0 || fx > d[0] - 1 || fy > d[1] - 1 || fz > d[2] - 1) {
        return 0.0;
    }
    const int x0 = static_cast<int>(fx);
    const int y0 = static_cast<int>(fy);
    const int z0 = static_cast<int>(fz);
    const double tx = point[0] - fx;
    const double ty = point[1] - fy;
    const double tz = point[2] - fz;
    const float* data = volume.channel_data(channel);
    const GridSpec& grid = volume.grid();

    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        const int z = z0 + dz;
        if (z < 0 || z >= d[2]) {
            continue;
        }
        const double wz = dz ? tz : 1.0 - tz;
        for (int dy = 0; dy < 2; ++dy) {
            const int y = y0 + dy;
            if (y < 0 || y >= d[1]) {
                continue;
            }
            const double wy = dy ? ty : 1.0 - ty;
            for (int dx = 0; dx < 2; ++dx) {
                const int x = x0 + dx;
                if (x < 0 || x >= d[0]) {
                    continue;
                }
                const double wx = dx ? tx : 1.0 - tx;
                acc += wx * wy * wz * static_cast<double>(data[grid.offset(x, y, z)]);
            }
        }
    }
    return acc;
}

ViewGeometry make_view_geometry(const GridSpec& grid, const Vec3& axis_in, const ResampleOptions& options) {
    double h = options.iso_spacing;
    if (h <= 0.0) {
        h = *std::max_element(grid.spacing.begin(), grid.spacing.end());
    }
    if (!(h > 0.0) || !std::isfinite(h)) {
        throw Error(ErrorKind::InvalidConfig, "iso_spacing must be positive");
    }
    if (!(options.margin_frac >= 0.0)) {
        throw Error(ErrorKind::InvalidConfig, "margin_frac must be nonnegative");
    }

    ViewGeometry g;
    const double n = norm(axis_in);
    if (!(n > 1e-12)) {
        throw Error(ErrorKind::DegenerateAxis, "view axis has zero length");
    }
    g.axis = scaled(axis_in, 1.0 / n);
    std::tie(g.basis_u, g.basis_v) = plane_basis(g.axis);
    g.iso_spacing = h;
    g.center_offset = volume_center(grid);

    const Vec3 physical{grid.dims[0] * grid.spacing[0], grid.dims[1] * grid.spacing[1], grid.dims[2] * grid.spacing[2]};
    const double diameter = norm(physical) * (1.0 + options.margin_frac);
    long cells = static_cast<long>(std::ceil(diameter / h - 1e-9));
    // Match the parity of the largest native dimension so canonical views at
    // native spacing land exactly on voxel centres.
    const int largest = *std::max_element(grid.dims.begin(), grid.dims.end());
    if ((cells - largest) % 2 != 0) {
        ++cells;
    }
    const double total = static_cast<double>(cells) * static_cast<double>(cells) * static_cast<double>(cells);
    if (total > static_cast<double>(options.voxel_budget)) {
        throw Error(ErrorKind::ExtentOverflow, "view grid of " + std::to_string(cells) + "^3 exceeds voxel budget");
    }
    const int c = static_cast<int>(cells);
    g.extent = {c, c, c};
    return g;
}

PlaneStack resample_to_view(const Volume& volume, const Vec3& axis, const ResampleOptions& options) {
    return resample_to_view(volume, make_view_geometry(volume.grid(), axis, options));
}

PlaneStack resample_to_view(const Volume& volume, const ViewGeometry& geometry) {
    PlaneStack stack(volume.channels(), geometry, volume.dims());
    const Vec3& sp = volume.spacing();
    const auto& e = geometry.extent;
    parallel_for(static_cast<std::size_t>(e[0]), [&](std::size_t si) {
        const int s = static_cast<int>(si);
        for (int r = 0; r < e[1]; ++r) {
            for (int c = 0; c < e[2]; ++c) {
                const Vec3 p = geometry.sample_position(s, r, c);
                const Vec3 voxel{p[0] / sp[0], p[1] / sp[1], p[2] / sp[2]};
                for (int ch = 0; ch < volume.channels(); ++ch) {
                    stack.at(ch, s, r, c) = trilinear_sample(volume, ch, voxel);
                }
            }
        }
    });
    return stack;
}

LabelStack resample_labels(const SegmentationMask& mask, const ViewGeometry& geometry) {
    LabelStack out;
    out.geometry = geometry;
    out.labels.assign(geometry.size(), 0);
    const Vec3& sp = mask.grid.spacing;
    const Index3& d = mask.grid.dims;
    const auto& e = geometry.extent;
    parallel_for(static_cast<std::size_t>(e[0]), [&](std::size_t si) {
        const int s = static_cast<int>(si);
        for (int r = 0; r < e[1]; ++r) {
            for (int c = 0; c < e[2]; ++c) {
                const Vec3 p = geometry.sample_position(s, r, c);
                const long x = std::lround(p[0] / sp[0]);
                const long y = std::lround(p[1] / sp[1]);
                const long z = std::lround(p[2] / sp[2]);
                if (x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2]) {
                    continue;
                }
                out.labels[(si * static_cast<std::size_t>(e[1]) + static_cast<std::size_t>(r)) *
                               static_cast<std::size_t>(e[2]) +
                           static_cast<std::size_t>(c)] =
                    mask.at(static_cast<int>(x), static_cast<int>(y), static_cast<int>(z));
            }
        }
    });
    return out;
}

ProbabilityVolume backproject(const PlaneStack& stack, const ViewGeometry& geometry, const GridSpec& target) {
    if (stack.geometry.extent != geometry.extent ||
        stack.slices.size() != static_cast<std::size_t>(stack.channels) * geometry.size() || stack.channels < 1) {
        throw Error(ErrorKind::GeometryMismatch, "probability stack shape disagrees with view extent");
    }
    const int classes = stack.channels;
    ProbabilityVolume out(classes, target);
    const auto& e = geometry.extent;
    const std::size_t plane = geometry.plane_size();
    const std::size_t class_stride = geometry.size();
    constexpr double kEdge = 1e-9;

    parallel_for(static_cast<std::size_t>(target.dims[2]), [&](std::size_t ki) {
        const int k = static_cast<int>(ki);
        std::vector<double> p(static_cast<std::size_t>(classes));
        for (int j = 0; j < target.dims[1]; ++j) {
            for (int i = 0; i < target.dims[0]; ++i) {
                const std::size_t voxel = target.offset(i, j, k);
                const Vec3 q = geometry.stack_coordinates(
                    {i * target.spacing[0], j * target.spacing[1], k * target.spacing[2]});
                bool inside = true;
                std::array<int, 3> lo{};
                std::array<double, 3> t{};
                for (int a = 0; a < 3; ++a) {
                    if (q[a] < -kEdge || q[a] > e[a] - 1 + kEdge) {
                        inside = false;
                        break;
                    }
                    const double qa = std::clamp(q[a], 0.0, static_cast<double>(e[a] - 1));
                    lo[a] = std::min(static_cast<int>(std::floor(qa)), std::max(0, e[a] - 2));
                    t[a] = qa - lo[a];
                }
                if (!inside) {
                    out.at(0, voxel) = 1.0;
                    continue;
                }
                std::fill(p.begin(), p.end(), 0.0);
                for (int ds = 0; ds < 2; ++ds) {
                    const int s = std::min(lo[0] + ds, e[0] - 1);
                    const double ws = ds ? t[0] : 1.0 - t[0];
                    for (int dr = 0; dr < 2; ++dr) {
                        const int r = std::min(lo[1] + dr, e[1] - 1);
                        const double wr = dr ? t[1] : 1.0 - t[1];
                        for (int dc = 0; dc < 2; ++dc) {
                            const int c = std::min(lo[2] + dc, e[2] - 1);
                            const double w = ws * wr * (dc ? t[2] : 1.0 - t[2]);
                            if (w == 0.0) {
                                continue;
                            }
                            const std::size_t base = static_cast<std::size_t>(s) * plane +
                                                     static_cast<std::size_t>(r) * static_cast<std::size_t>(e[2]) +
                                                     static_cast<std::size_t>(c);
                            for (int cls = 0; cls < classes; ++cls) {
                                p[static_cast<std::size_t>(cls)] +=
                                    w * stack.slices[static_cast<std::size_t>(cls) * class_stride + base];
                            }
                        }
                    }
                }
                double sum = 0.0;
                for (double v : p) {
                    sum += v;
                }
                if (!(sum > 0.0)) {
                    out.at(0, voxel) = 1.0;
                    continue;
                }
                for (int cls = 0; cls < classes; ++cls) {
                    out.at(cls, voxel) = p[static_cast<std::size_t>(cls)] / sum;
                }
            }
        }
    });
    return out;
}

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string vec_json(const Vec3& v) {
    return "[" + fmt17(v[0]) + ", " + fmt17(v[1]) + ", " + fmt17(v[2]) + "]";
}

Vec3 vec_from(const nlohmann::json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

} // namespace

std::string geometry_to_json(const ViewGeometry& g) {
    std::ostringstream out;
    out << "{\n"
        << "  \"axis\": " << vec_json(g.axis) << ",\n"
        << "  \"basis_u\": " << vec_json(g.basis_u) << ",\n"
        << "  \"basis_v\": " << vec_json(g.basis_v) << ",\n"
        << "  \"iso_spacing\": " << fmt17(g.iso_spacing) << ",\n"
        << "  \"extent\": [" << g.extent[0] << ", " << g.extent[1] << ", " << g.extent[2] << "],\n"
        << "  \"center_offset\": " << vec_json(g.center_offset) << "\n"
        << "}\n";
    return out.str();
}

ViewGeometry geometry_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        ViewGeometry g;
        g.axis = vec_from(j.at("axis"));
        g.basis_u = vec_from(j.at("basis_u"));
        g.basis_v = vec_from(j.at("basis_v"));
        g.iso_spacing = j.at("iso_spacing").get<double>();
        const auto& e = j.at("extent");
        g.extent = {e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<int>()};
        g.center_offset = vec_from(j.at("center_offset"));
        g.validate(1e-6);
        return g;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::GeometryMismatch, std::string("bad geometry record: ") + ex.what());
    }
}

void save_plane_stack(const PlaneStack& stack, const std::filesystem::path& path) {
    const auto& e = stack.geometry.extent;
    GridSpec grid;
    grid.dims = {e[2], e[1], e[0]};
    const double h = stack.geometry.iso_spacing;
    grid.spacing = {h, h, h};
    Volume v(stack.channels, grid);
    std::transform(stack.slices.begin(), stack.slices.end(), v.data().begin(),
                   [](double x) { return static_cast<float>(x); });
    io::write_nifti(v, path);

    std::filesystem::path sidecar = path;
    sidecar += ".json";
    std::ofstream out(sidecar);
    if (!out) {
        throw Error(ErrorKind::IoFailure, "cannot write " + sidecar.string());
    }
    out << geometry_to_json(stack.geometry);
}

PlaneStack load_plane_stack(const std::filesystem::path& path) {
    std::filesystem::path sidecar = path;
    sidecar += ".json";
    std::ifstream in(sidecar);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot read " + sidecar.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    const ViewGeometry geometry = geometry_from_json(buffer.str());
    const Volume v = io::read_nifti(path);
    const auto& e = geometry.extent;
    if (v.dims() != Index3{e[2], e[1], e[0]}) {
        throw Error(ErrorKind::GeometryMismatch, "cached stack shape disagrees with its geometry record");
    }
    PlaneStack stack(v.channels(), geometry, {0, 0, 0});
    std::transform(v.data().begin(), v.data().end(), stack.slices.begin(),
                   [](float x) { return static_cast<double>(x); });
    return stack;
}

} // namespace mpseg::planar
