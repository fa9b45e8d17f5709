#include "camoforge/overheadrender.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "camoforge/errors.hpp"
#include "camoforge/imageio.hpp"
#include "camoforge/runio.hpp"

namespace camoforge::render {

namespace {

using diffmath::Tape;
using diffmath::Tensor;

constexpr double kPlacementMargin = 3.0;  // meters kept clear of the image edge
constexpr double kMinSeparation = 5.6;    // center distance between vehicles
constexpr int kTex = camotex::kTexSize;

double deg(double d) { return d * M_PI / 180.0; }

std::array<double, 2> tilt_of(const CameraSpec& cam) {
    const double t = std::tan(cam.elevation_deviation);
    return {t * std::cos(cam.azimuth), t * std::sin(cam.azimuth)};
}

std::array<double, 3> light_of(const LightingSpec& l) {
    return {std::cos(l.sun_elevation) * std::cos(l.sun_azimuth),
            std::cos(l.sun_elevation) * std::sin(l.sun_azimuth), std::sin(l.sun_elevation)};
}

std::array<double, 3> cross3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

std::vector<double> uniform_noise_texture(uint64_t seed) {
    Rng rng(splitmix64(seed ^ 0x6e0123f5ULL));
    std::vector<double> v(static_cast<size_t>(3) * kTex * kTex);
    for (double& x : v) x = rng.u01();
    return v;
}

// Coarse-lattice value noise, bilinearly interpolated, in [-amp, amp].
std::vector<double> value_noise(Rng& rng, int size, int cell, double amp) {
    const int n = size / cell + 2;
    std::vector<double> lattice(static_cast<size_t>(n) * n);
    for (double& v : lattice) v = rng.uniform(-amp, amp);
    std::vector<double> out(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
        const double gy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(gy);
        const double fy = gy - y0;
        for (int x = 0; x < size; ++x) {
            const double gx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(gx);
            const double fx = gx - x0;
            const double a = lattice[y0 * n + x0], b = lattice[y0 * n + x0 + 1];
            const double c = lattice[(y0 + 1) * n + x0], d = lattice[(y0 + 1) * n + x0 + 1];
            out[static_cast<size_t>(y) * size + x] =
                (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
        }
    }
    return out;
}

void fill_rect(std::vector<double>& px, int size, int x0, int y0, int x1, int y1,
               const std::array<double, 3>& color) {
    x0 = std::clamp(x0, 0, size);
    y0 = std::clamp(y0, 0, size);
    x1 = std::clamp(x1, 0, size);
    y1 = std::clamp(y1, 0, size);
    const size_t plane = static_cast<size_t>(size) * size;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c) px[c * plane + static_cast<size_t>(y) * size + x] = color[c];
}

std::vector<double> make_tile(uint64_t seed, int id, int size) {
    Rng rng(splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * (id + 1))));
    const size_t plane = static_cast<size_t>(size) * size;
    std::vector<double> px(3 * plane, 0.0);
    const int theme = id % 3;
    if (theme == 0) {  // grass
        const std::array<double, 3> base{0.24, 0.36, 0.18};
        auto coarse = value_noise(rng, size, std::max(8, size / 12), 0.06);
        auto fine = value_noise(rng, size, 4, 0.03);
        for (size_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c) px[c * plane + p] = base[c] + coarse[p] + fine[p];
        if (rng.u01() < 0.5) {  // dirt patch
            int w = size / 4 + rng.uniform_int(size / 4), h = size / 5 + rng.uniform_int(size / 5);
            int x0 = rng.uniform_int(std::max(1, size - w)), y0 = rng.uniform_int(std::max(1, size - h));
            fill_rect(px, size, x0, y0, x0 + w, y0 + h, {0.42, 0.36, 0.26});
        }
    } else if (theme == 1) {  // asphalt with a lane line
        const double g = 0.30 + 0.04 * rng.uniform(-1.0, 1.0);
        auto n1 = value_noise(rng, size, std::max(8, size / 16), 0.03);
        for (size_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c) px[c * plane + p] = g + n1[p];
        const bool horizontal = rng.u01() < 0.5;
        const int off = size / 4 + rng.uniform_int(size / 2);
        if (horizontal)
            fill_rect(px, size, 0, off, size, off + std::max(1, size / 128), {0.78, 0.78, 0.72});
        else
            fill_rect(px, size, off, 0, off + std::max(1, size / 128), size, {0.78, 0.78, 0.72});
        const int walk = size / 10;
        fill_rect(px, size, 0, 0, size, walk, {0.46, 0.45, 0.43});
    } else {  // rooftops over grass
        const std::array<double, 3> base{0.26, 0.33, 0.2};
        auto n1 = value_noise(rng, size, std::max(8, size / 12), 0.05);
        for (size_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c) px[c * plane + p] = base[c] + n1[p];
        const std::array<std::array<double, 3>, 3> roof{{{0.58, 0.57, 0.55},
                                                         {0.42, 0.3, 0.24},
                                                         {0.3, 0.3, 0.33}}};
        const int n_blocks = 2 + static_cast<int>(rng.uniform_int(4));
        for (int b = 0; b < n_blocks; ++b) {
            int w = size / 6 + rng.uniform_int(size / 4), h = size / 6 + rng.uniform_int(size / 4);
            int x0 = rng.uniform_int(std::max(1, size - w)), y0 = rng.uniform_int(std::max(1, size - h));
            fill_rect(px, size, x0, y0, x0 + w, y0 + h, roof[rng.uniform_int(3)]);
        }
    }
    for (double& v : px) v = std::clamp(v, 0.02, 0.95);
    return px;
}

}  // namespace

FidelityProfile parse_profile(const std::string& name) {
    if (name == "train") return FidelityProfile::train;
    if (name == "transfer") return FidelityProfile::transfer;
    throw UsageError("unknown fidelity profile: " + name);
}

std::string profile_name(FidelityProfile p) {
    return p == FidelityProfile::train ? "train" : "transfer";
}

RenderConfig make_render_config(int image_size, FidelityProfile profile) {
    if (image_size < 16) throw ParameterError("image_size must be >= 16");
    RenderConfig cfg;
    cfg.image_size = image_size;
    cfg.profile = profile;
    if (profile == FidelityProfile::train) {
        cfg.supersample = 4;
        cfg.blur_sigma = 2.4;
    } else {
        cfg.supersample = 2;
        cfg.blur_sigma = 3.0;
    }
    return cfg;
}

BackgroundProvider::BackgroundProvider(uint64_t seed, int size, int count) : size_(size) {
    if (count < 1) throw ParameterError("background count must be >= 1");
    if (size < 8) throw ParameterError("background size must be >= 8");
    tiles_.reserve(count);
    for (int i = 0; i < count; ++i) tiles_.push_back(make_tile(seed, i, size));
}

BackgroundProvider::BackgroundProvider(const std::vector<std::string>& png_paths, int size)
    : size_(size) {
    if (png_paths.empty()) throw ParameterError("background tile list is empty");
    for (const auto& path : png_paths) {
        ImageU8 img = read_png(path);
        if (img.width != size || img.height != size)
            throw IoError("background tile " + path + " is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", expected " + std::to_string(size));
        tiles_.push_back(image_to_planar(img));
    }
}

const std::vector<double>& BackgroundProvider::tile(int id) const {
    if (id < 0 || id >= count())
        throw ParameterError("background id " + std::to_string(id) + " out of range");
    return tiles_[id];
}

std::vector<MeshEntry> make_mesh_pool(uint64_t seed) {
    const meshgeom::VehicleTemplate templates[] = {meshgeom::VehicleTemplate::sedan,
                                                   meshgeom::VehicleTemplate::van,
                                                   meshgeom::VehicleTemplate::hatchback};
    std::vector<MeshEntry> pool;
    int slot = 0;
    for (auto tmpl : templates)
        for (int j = 0; j < 2; ++j, ++slot) {
            MeshEntry e;
            e.mesh = meshgeom::generate_vehicle_mesh(splitmix64(seed ^ (0x51ed27bULL * (slot + 1))),
                                                     tmpl);
            e.topo = meshgeom::build_topology_map(e.mesh);
            e.original =
                camotex::make_original_texture(splitmix64(seed ^ (0xa5310fbULL * (slot + 1))));
            e.tex_const = diffmath::make_constant({3, kTex, kTex}, e.original.pixels);
            std::vector<double> flat;
            flat.reserve(e.mesh.vertices.size() * 3);
            for (const auto& v : e.mesh.vertices) flat.insert(flat.end(), v.begin(), v.end());
            e.verts_const = diffmath::make_constant(
                {static_cast<int>(e.mesh.vertices.size()), 3}, std::move(flat));
            pool.push_back(std::move(e));
        }
    return pool;
}

SceneSpec sample_scene(Rng& rng, const SceneSampleSpec& spec) {
    if (spec.n_backgrounds < 1) throw ParameterError("scene sampling needs backgrounds");
    if (spec.n_meshes < 1) throw ParameterError("scene sampling needs meshes");
    if (spec.min_vehicles < 0 || spec.max_vehicles < spec.min_vehicles ||
        spec.max_vehicles > 5)
        throw ParameterError("vehicle count range must satisfy 0 <= min <= max <= 5");

    SceneSpec scene;
    scene.background_id = static_cast<int>(rng.uniform_int(spec.n_backgrounds));

    // Uniform point on a square, re-projected to the hemisphere: the corner
    // reaches exactly the 20-degree deviation cap.
    const double s = std::tan(kMaxElevationDeviation) / std::sqrt(2.0);
    const double tx = rng.uniform(-s, s), ty = rng.uniform(-s, s);
    scene.camera.azimuth = std::atan2(ty, tx);
    scene.camera.elevation_deviation = std::atan(std::hypot(tx, ty));

    scene.lighting.sun_azimuth = rng.uniform(0.0, 2.0 * M_PI);
    if (spec.profile == FidelityProfile::train) {
        scene.lighting.sun_elevation = rng.uniform(deg(35.0), deg(75.0));
        scene.lighting.ambient = rng.uniform(0.4, 0.6);
    } else {
        scene.lighting.sun_elevation = rng.uniform(deg(25.0), deg(85.0));
        scene.lighting.ambient = rng.uniform(0.3, 0.7);
    }

    const int span = spec.max_vehicles - spec.min_vehicles + 1;
    const int n = spec.min_vehicles + static_cast<int>(rng.uniform_int(span));
    const double extent = spec.image_size * kGsd;
    if (n > 0 && extent <= 2.0 * kPlacementMargin)
        throw PlacementError("image footprint too small for vehicle placement");
    int rejections = 0;
    for (int i = 0; i < n; ++i) {
        VehiclePose pose;
        pose.mesh_id = static_cast<int>(rng.uniform_int(spec.n_meshes));
        pose.yaw = rng.uniform(0.0, 2.0 * M_PI);
        for (;;) {
            pose.x = rng.uniform(kPlacementMargin, extent - kPlacementMargin);
            pose.y = rng.uniform(kPlacementMargin, extent - kPlacementMargin);
            bool ok = true;
            for (const auto& other : scene.vehicles)
                if (std::hypot(pose.x - other.x, pose.y - other.y) < kMinSeparation) {
                    ok = false;
                    break;
                }
            if (ok) break;
            if (++rejections > 1000)
                throw PlacementError("could not place " + std::to_string(n) +
                                     " vehicles without overlap after 1000 rejections");
        }
        if (spec.noise_texture_fraction > 0.0 && rng.u01() < spec.noise_texture_fraction) {
            pose.noise_texture = true;
            pose.noise_seed = rng.next_u64();
        }
        scene.vehicles.push_back(pose);
    }
    return scene;
}

SceneInputs default_inputs(const std::vector<MeshEntry>& pool) {
    SceneInputs in;
    for (const auto& e : pool) {
        in.textures.push_back(e.tex_const);
        in.vertices.push_back(e.verts_const);
    }
    return in;
}

namespace {

struct PixelHit {
    int pix = 0;      // y * S + x in the supersampled raster
    int vehicle = 0;  // index into scene.vehicles
    int v0 = 0, v1 = 0, v2 = 0;  // render-vertex indices of the face
    double w0 = 0, w1 = 0, w2 = 0;
    double u = 0, v = 0;
    double shade = 1.0;
};

struct VehicleFrame {
    double c = 1.0, s = 0.0;  // cos/sin yaw
    double x = 0.0, y = 0.0;
    const meshgeom::Mesh* mesh = nullptr;
    Tensor texture;
    Tensor vertices;
};

inline std::array<double, 3> to_world(const VehicleFrame& f, const double* vt) {
    return {f.c * vt[0] - f.s * vt[1] + f.x, f.s * vt[0] + f.c * vt[1] + f.y, vt[2]};
}

// Bilinear read of one texture channel with clamp-to-edge coordinates.
inline double tex_read(const std::vector<double>& tex, int c, int yi, int xi) {
    return tex[(static_cast<size_t>(c) * kTex + yi) * kTex + xi];
}

struct TexSample {
    int x0, y0, x1, y1;
    double fx, fy;
};
inline TexSample tex_locate(double u, double v) {
    double x = std::clamp(u, 0.0, 1.0) * (kTex - 1);
    double y = std::clamp(v, 0.0, 1.0) * (kTex - 1);
    TexSample t;
    t.x0 = std::min(kTex - 2, static_cast<int>(x));
    t.y0 = std::min(kTex - 2, static_cast<int>(y));
    t.x1 = t.x0 + 1;
    t.y1 = t.y0 + 1;
    t.fx = x - t.x0;
    t.fy = y - t.y0;
    return t;
}
inline double tex_bilinear(const std::vector<double>& tex, int c, const TexSample& t) {
    return (1 - t.fy) * ((1 - t.fx) * tex_read(tex, c, t.y0, t.x0) +
                         t.fx * tex_read(tex, c, t.y0, t.x1)) +
           t.fy * ((1 - t.fx) * tex_read(tex, c, t.y1, t.x0) +
                   t.fx * tex_read(tex, c, t.y1, t.x1));
}

double face_shade(const std::array<double, 3>& w0, const std::array<double, 3>& w1,
                  const std::array<double, 3>& w2, const std::array<double, 3>& light,
                  const std::array<double, 2>& tilt, double ambient) {
    const std::array<double, 3> e1{w1[0] - w0[0], w1[1] - w0[1], w1[2] - w0[2]};
    const std::array<double, 3> e2{w2[0] - w0[0], w2[1] - w0[1], w2[2] - w0[2]};
    auto n = cross3(e1, e2);
    const double nn = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (nn < 1e-18) return ambient;
    const double face_cam = n[0] * tilt[0] + n[1] * tilt[1] + n[2];
    const double sign = face_cam >= 0.0 ? 1.0 : -1.0;
    const double d = sign * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nn;
    return ambient + (1.0 - ambient) * std::max(0.0, d);
}

}  // namespace

RasterResult rasterize(Tape& tape, const SceneSpec& scene, const std::vector<MeshEntry>& pool,
                       const SceneInputs& inputs, const RenderConfig& cfg) {
    if (inputs.textures.size() != pool.size() || inputs.vertices.size() != pool.size())
        throw ContractError("rasterize: scene inputs must align with the mesh pool");
    if (cfg.supersample < 1) throw ParameterError("supersample must be >= 1");
    if (scene.camera.elevation_deviation > kMaxElevationDeviation + 1e-12)
        throw ContractError("camera elevation deviation exceeds the 20-degree cap");

    const int out = cfg.image_size;
    const int S = out * cfg.supersample;
    const double g = scene.camera.gsd / cfg.supersample;  // meters per raster pixel
    const auto tilt = tilt_of(scene.camera);
    const auto light = light_of(scene.lighting);
    const double ambient = scene.lighting.ambient;

    std::vector<VehicleFrame> frames;
    for (const auto& pose : scene.vehicles) {
        if (pose.mesh_id < 0 || pose.mesh_id >= static_cast<int>(pool.size()))
            throw ContractError("scene references mesh " + std::to_string(pose.mesh_id) +
                                " outside the pool");
        VehicleFrame f;
        f.c = std::cos(pose.yaw);
        f.s = std::sin(pose.yaw);
        f.x = pose.x;
        f.y = pose.y;
        f.mesh = &pool[pose.mesh_id].mesh;
        f.texture = pose.noise_texture
                        ? diffmath::make_constant({3, kTex, kTex},
                                                  uniform_noise_texture(pose.noise_seed))
                        : inputs.textures[pose.mesh_id];
        f.vertices = inputs.vertices[pose.mesh_id];
        if (f.vertices->shape !=
            std::vector<int>{static_cast<int>(f.mesh->vertices.size()), 3})
            throw ContractError("vertex tensor shape does not match mesh " +
                                std::to_string(pose.mesh_id));
        frames.push_back(std::move(f));
    }

    // Z pass: winner face per covered supersampled pixel.
    std::vector<double> zbuf(static_cast<size_t>(S) * S,
                             -std::numeric_limits<double>::infinity());
    std::vector<int> win_face(static_cast<size_t>(S) * S, -1);
    std::vector<int8_t> win_vehicle(static_cast<size_t>(S) * S, -1);
    int degenerate = 0;

    std::vector<std::vector<std::array<double, 3>>> screen(frames.size());
    for (size_t vi = 0; vi < frames.size(); ++vi) {
        const VehicleFrame& f = frames[vi];
        const size_t nv = f.mesh->vertices.size();
        screen[vi].resize(nv);
        for (size_t k = 0; k < nv; ++k) {
            const double* vt = &f.vertices->value[k * 3];
            auto w = to_world(f, vt);
            screen[vi][k] = {(w[0] - w[2] * tilt[0]) / g, (w[1] - w[2] * tilt[1]) / g,
                             w[0] * tilt[0] + w[1] * tilt[1] + w[2]};
        }
        for (size_t fi = 0; fi < f.mesh->faces.size(); ++fi) {
            const auto& face = f.mesh->faces[fi];
            const auto &A = screen[vi][face[0]], &B = screen[vi][face[1]],
                       &C = screen[vi][face[2]];
            const double area2 =
                (B[0] - A[0]) * (C[1] - A[1]) - (B[1] - A[1]) * (C[0] - A[0]);
            if (std::abs(area2) < 1e-12) {
                ++degenerate;
                continue;
            }
            int x0 = std::max(0, static_cast<int>(std::floor(std::min({A[0], B[0], C[0]}) - 0.5)));
            int x1 = std::min(S - 1, static_cast<int>(std::ceil(std::max({A[0], B[0], C[0]}))));
            int y0 = std::max(0, static_cast<int>(std::floor(std::min({A[1], B[1], C[1]}) - 0.5)));
            int y1 = std::min(S - 1, static_cast<int>(std::ceil(std::max({A[1], B[1], C[1]}))));
            for (int y = y0; y <= y1; ++y) {
                const double qy = y + 0.5;
                for (int x = x0; x <= x1; ++x) {
                    const double qx = x + 0.5;
                    const double e0 = (C[0] - B[0]) * (qy - B[1]) - (C[1] - B[1]) * (qx - B[0]);
                    const double e1 = (A[0] - C[0]) * (qy - C[1]) - (A[1] - C[1]) * (qx - C[0]);
                    const double e2 = (B[0] - A[0]) * (qy - A[1]) - (B[1] - A[1]) * (qx - A[0]);
                    const double w0 = e0 / area2, w1 = e1 / area2, w2 = e2 / area2;
                    if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
                    const double depth = w0 * A[2] + w1 * B[2] + w2 * C[2];
                    const size_t p = static_cast<size_t>(y) * S + x;
                    if (depth > zbuf[p]) {
                        zbuf[p] = depth;
                        win_face[p] = static_cast<int>(fi);
                        win_vehicle[p] = static_cast<int8_t>(vi);
                    }
                }
            }
        }
    }

    // Shade pass: resolve winners into pixel hits and color values.
    std::vector<double> rgb(static_cast<size_t>(3) * S * S, 0.0);
    std::vector<double> alpha(static_cast<size_t>(3) * S * S, 0.0);
    std::vector<PixelHit> hits;
    const size_t plane = static_cast<size_t>(S) * S;
    for (size_t p = 0; p < plane; ++p) {
        if (win_face[p] < 0) continue;
        const int vi = win_vehicle[p];
        const VehicleFrame& f = frames[vi];
        const auto& face = f.mesh->faces[win_face[p]];
        const auto &A = screen[vi][face[0]], &B = screen[vi][face[1]], &C = screen[vi][face[2]];
        const double qx = static_cast<double>(p % S) + 0.5;
        const double qy = static_cast<double>(p / S) + 0.5;
        const double area2 = (B[0] - A[0]) * (C[1] - A[1]) - (B[1] - A[1]) * (C[0] - A[0]);
        PixelHit h;
        h.pix = static_cast<int>(p);
        h.vehicle = vi;
        h.v0 = face[0];
        h.v1 = face[1];
        h.v2 = face[2];
        h.w0 = ((C[0] - B[0]) * (qy - B[1]) - (C[1] - B[1]) * (qx - B[0])) / area2;
        h.w1 = ((A[0] - C[0]) * (qy - C[1]) - (A[1] - C[1]) * (qx - C[0])) / area2;
        h.w2 = ((B[0] - A[0]) * (qy - A[1]) - (B[1] - A[1]) * (qx - A[0])) / area2;
        const auto &uv0 = f.mesh->uvs[face[0]], &uv1 = f.mesh->uvs[face[1]],
                   &uv2 = f.mesh->uvs[face[2]];
        h.u = h.w0 * uv0[0] + h.w1 * uv1[0] + h.w2 * uv2[0];
        h.v = h.w0 * uv0[1] + h.w1 * uv1[1] + h.w2 * uv2[1];
        const double* p0 = &f.vertices->value[static_cast<size_t>(face[0]) * 3];
        const double* p1 = &f.vertices->value[static_cast<size_t>(face[1]) * 3];
        const double* p2 = &f.vertices->value[static_cast<size_t>(face[2]) * 3];
        h.shade = face_shade(to_world(f, p0), to_world(f, p1), to_world(f, p2), light, tilt,
                             ambient);
        const TexSample ts = tex_locate(h.u, h.v);
        for (int c = 0; c < 3; ++c) {
            rgb[c * plane + p] = h.shade * tex_bilinear(f.texture->value, c, ts);
            alpha[c * plane + p] = 1.0;
        }
        hits.push_back(h);
    }

    std::vector<Tensor> node_inputs;
    for (const auto& f : frames) {
        node_inputs.push_back(f.texture);
        node_inputs.push_back(f.vertices);
    }

    const SceneSpec scene_copy = scene;
    auto backward = [hits = std::move(hits), frames, S, tilt, light, ambient,
                     g](diffmath::Node& n) {
        const size_t pl = static_cast<size_t>(S) * S;
        for (const PixelHit& h : hits) {
            const VehicleFrame& f = frames[h.vehicle];
            double gc[3];
            for (int c = 0; c < 3; ++c) gc[c] = n.grad[c * pl + h.pix];
            const TexSample ts = tex_locate(h.u, h.v);
            const bool want_tex = f.texture->requires_grad;
            const bool want_vert = f.vertices->requires_grad;
            if (want_tex) {
                for (int c = 0; c < 3; ++c) {
                    const double gs = h.shade * gc[c];
                    auto& tg = f.texture->grad;
                    tg[(static_cast<size_t>(c) * kTex + ts.y0) * kTex + ts.x0] +=
                        gs * (1 - ts.fy) * (1 - ts.fx);
                    tg[(static_cast<size_t>(c) * kTex + ts.y0) * kTex + ts.x1] +=
                        gs * (1 - ts.fy) * ts.fx;
                    tg[(static_cast<size_t>(c) * kTex + ts.y1) * kTex + ts.x0] +=
                        gs * ts.fy * (1 - ts.fx);
                    tg[(static_cast<size_t>(c) * kTex + ts.y1) * kTex + ts.x1] +=
                        gs * ts.fy * ts.fx;
                }
            }
            if (!want_vert) continue;

            const auto& tex = f.texture->value;
            const double* p0 = &f.vertices->value[static_cast<size_t>(h.v0) * 3];
            const double* p1 = &f.vertices->value[static_cast<size_t>(h.v1) * 3];
            const double* p2 = &f.vertices->value[static_cast<size_t>(h.v2) * 3];
            const auto W0 = to_world(f, p0), W1 = to_world(f, p1), W2 = to_world(f, p2);

            std::array<std::array<double, 3>, 3> gworld{};  // per face vertex

            // Shading path: shade depends on the face normal.
            {
                double col_gc = 0.0;
                for (int c = 0; c < 3; ++c) col_gc += gc[c] * tex_bilinear(tex, c, ts);
                const std::array<double, 3> e1{W1[0] - W0[0], W1[1] - W0[1], W1[2] - W0[2]};
                const std::array<double, 3> e2{W2[0] - W0[0], W2[1] - W0[1], W2[2] - W0[2]};
                auto nr = cross3(e1, e2);
                const double nn = std::sqrt(nr[0] * nr[0] + nr[1] * nr[1] + nr[2] * nr[2]);
                if (nn > 1e-18) {
                    const double sgn =
                        (nr[0] * tilt[0] + nr[1] * tilt[1] + nr[2]) >= 0.0 ? 1.0 : -1.0;
                    const double ndl =
                        sgn * (nr[0] * light[0] + nr[1] * light[1] + nr[2] * light[2]) / nn;
                    if (ndl > 0.0) {
                        const double gshade = (1.0 - ambient) * col_gc;
                        // d(n_hat . l)/d(n_raw) through the normalization
                        std::array<double, 3> nhat{nr[0] / nn, nr[1] / nn, nr[2] / nn};
                        const double hl =
                            nhat[0] * light[0] + nhat[1] * light[1] + nhat[2] * light[2];
                        std::array<double, 3> gn;
                        for (int k = 0; k < 3; ++k)
                            gn[k] = gshade * sgn * (light[k] - nhat[k] * hl) / nn;
                        auto ge1 = cross3(e2, gn);
                        auto ge2 = cross3(gn, e1);
                        for (int k = 0; k < 3; ++k) {
                            gworld[1][k] += ge1[k];
                            gworld[2][k] += ge2[k];
                            gworld[0][k] -= ge1[k] + ge2[k];
                        }
                    }
                }
            }

            // UV-shift path: moving vertices slides the texture under the pixel.
            {
                double du_col = 0.0, dv_col = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double t00 = tex_read(tex, c, ts.y0, ts.x0);
                    const double t01 = tex_read(tex, c, ts.y0, ts.x1);
                    const double t10 = tex_read(tex, c, ts.y1, ts.x0);
                    const double t11 = tex_read(tex, c, ts.y1, ts.x1);
                    const double ddx = (1 - ts.fy) * (t01 - t00) + ts.fy * (t11 - t10);
                    const double ddy = (1 - ts.fx) * (t10 - t00) + ts.fx * (t11 - t01);
                    du_col += gc[c] * ddx;
                    dv_col += gc[c] * ddy;
                }
                const double gu = h.shade * du_col * (kTex - 1);
                const double gv = h.shade * dv_col * (kTex - 1);
                const auto& mesh = *f.mesh;
                const auto &uv0 = mesh.uvs[h.v0], &uv1 = mesh.uvs[h.v1], &uv2 = mesh.uvs[h.v2];
                const double gw[3] = {gu * uv0[0] + gv * uv0[1], gu * uv1[0] + gv * uv1[1],
                                      gu * uv2[0] + gv * uv2[1]};

                // Screen positions and the fixed pixel center.
                auto proj = [&](const std::array<double, 3>& w) -> std::array<double, 2> {
                    return {(w[0] - w[2] * tilt[0]) / g, (w[1] - w[2] * tilt[1]) / g};
                };
                const auto P0 = proj(W0), P1 = proj(W1), P2 = proj(W2);
                const double qx = static_cast<double>(h.pix % S) + 0.5;
                const double qy = static_cast<double>(h.pix / S) + 0.5;
                const double T = (P1[0] - P0[0]) * (P2[1] - P0[1]) -
                                 (P1[1] - P0[1]) * (P2[0] - P0[0]);
                if (std::abs(T) > 1e-12) {
                    const double w[3] = {h.w0, h.w1, h.w2};
                    // dT/dPk
                    const double dT[3][2] = {{P1[1] - P2[1], P2[0] - P1[0]},
                                             {P2[1] - P0[1], P0[0] - P2[0]},
                                             {P0[1] - P1[1], P1[0] - P0[0]}};
                    // dE_i/dPk for numerators E0=E(P1,P2,Q), E1=E(P2,P0,Q), E2=E(P0,P1,Q):
                    // E(A,B,Q): d/dA = (B.y - Q.y, Q.x - B.x), d/dB = (Q.y - A.y, A.x - Q.x).
                    double dE[3][3][2] = {};
                    dE[0][1][0] = P2[1] - qy; dE[0][1][1] = qx - P2[0];
                    dE[0][2][0] = qy - P1[1]; dE[0][2][1] = P1[0] - qx;
                    dE[1][2][0] = P0[1] - qy; dE[1][2][1] = qx - P0[0];
                    dE[1][0][0] = qy - P2[1]; dE[1][0][1] = P2[0] - qx;
                    dE[2][0][0] = P1[1] - qy; dE[2][0][1] = qx - P1[0];
                    dE[2][1][0] = qy - P0[1]; dE[2][1][1] = P0[0] - qx;
                    double gscreen[3][2] = {};
                    for (int i = 0; i < 3; ++i)
                        for (int k = 0; k < 3; ++k)
                            for (int d = 0; d < 2; ++d)
                                gscreen[k][d] += gw[i] * (dE[i][k][d] - w[i] * dT[k][d]) / T;
                    for (int k = 0; k < 3; ++k) {
                        gworld[k][0] += gscreen[k][0] / g;
                        gworld[k][1] += gscreen[k][1] / g;
                        gworld[k][2] -= (gscreen[k][0] * tilt[0] + gscreen[k][1] * tilt[1]) / g;
                    }
                }
            }

            // World -> mesh frame (inverse yaw rotation) and scatter.
            const int vidx[3] = {h.v0, h.v1, h.v2};
            for (int k = 0; k < 3; ++k) {
                const double gx = gworld[k][0], gy = gworld[k][1], gz = gworld[k][2];
                auto& vg = f.vertices->grad;
                vg[static_cast<size_t>(vidx[k]) * 3 + 0] += f.c * gx + f.s * gy;
                vg[static_cast<size_t>(vidx[k]) * 3 + 1] += -f.s * gx + f.c * gy;
                vg[static_cast<size_t>(vidx[k]) * 3 + 2] += gz;
            }
        }
    };

    RasterResult result;
    result.rgb = tape.record("rasterize", {3, S, S}, std::move(rgb), std::move(node_inputs),
                             std::move(backward));
    result.alpha = diffmath::make_constant({3, S, S}, std::move(alpha));
    result.degenerate_count = degenerate;
    for (size_t vi = 0; vi < frames.size(); ++vi) {
        const auto& cen = frames[vi].mesh->centroid;
        auto w = to_world(frames[vi], cen.data());
        Annotation a;
        a.vehicle_id = static_cast<int>(vi);
        a.cx = (w[0] - w[2] * tilt[0]) / scene.camera.gsd;
        a.cy = (w[1] - w[2] * tilt[1]) / scene.camera.gsd;
        if (a.cx < 0.0 || a.cx >= out || a.cy < 0.0 || a.cy >= out)
            throw PlacementError("vehicle center projected outside the image");
        result.annotations.push_back(a);
    }
    (void)scene_copy;
    return result;
}

Tensor composite(Tape& tape, const Tensor& bg, const Tensor& fg_rgb, const Tensor& alpha,
                 const RenderConfig& cfg) {
    using namespace diffmath;
    const int s = cfg.image_size, S = s * cfg.supersample;
    if (bg->shape != std::vector<int>{3, s, s})
        throw ContractError("composite: background must be [3," + std::to_string(s) + "," +
                            std::to_string(s) + "]");
    if (fg_rgb->shape != std::vector<int>{3, S, S} || alpha->shape != fg_rgb->shape)
        throw ContractError("composite: foreground/alpha must be supersampled to " +
                            std::to_string(S));
    Tensor bg_up = upsample_nearest(tape, bg, cfg.supersample);
    Tensor blended = add(tape, bg_up, mul(tape, alpha, sub(tape, fg_rgb, bg_up)));
    Tensor pooled = avg_pool(tape, blended, cfg.supersample, cfg.supersample);
    Tensor diff = gaussian_blur(tape, sub(tape, pooled, bg), cfg.blur_sigma);
    return clamp(tape, add(tape, bg, diff), 0.0, 1.0);
}

SceneRender render_scene_graph(Tape& tape, const SceneSpec& scene,
                               const std::vector<MeshEntry>& pool, const SceneInputs& inputs,
                               const BackgroundProvider& bgs, const RenderConfig& cfg) {
    if (bgs.size() != cfg.image_size)
        throw ContractError("background tiles are " + std::to_string(bgs.size()) +
                            " px, render expects " + std::to_string(cfg.image_size));
    Tensor bg = diffmath::make_constant({3, cfg.image_size, cfg.image_size},
                                        bgs.tile(scene.background_id));
    RasterResult rast = rasterize(tape, scene, pool, inputs, cfg);
    SceneRender r;
    r.image = composite(tape, bg, rast.rgb, rast.alpha, cfg);
    r.degenerate_count = rast.degenerate_count;
    r.annotations = std::move(rast.annotations);
    return r;
}

ScenePixels render_scene(const SceneSpec& scene, const std::vector<MeshEntry>& pool,
                         const BackgroundProvider& bgs, const RenderConfig& cfg) {
    Tape tape;
    SceneRender r = render_scene_graph(tape, scene, pool, default_inputs(pool), bgs, cfg);
    ScenePixels out;
    out.size = cfg.image_size;
    out.pixels = r.image->value;
    out.annotations = std::move(r.annotations);
    out.degenerate_count = r.degenerate_count;
    return out;
}

std::pair<ScenePixels, ScenePixels> render_matched_pair(const SceneSpec& scene,
                                                        const std::vector<MeshEntry>& pool,
                                                        const BackgroundProvider& bgs,
                                                        const Appearance& adv,
                                                        const RenderConfig& cfg) {
    if (!adv.displaced.empty() && adv.displaced.size() != pool.size())
        throw ContractError("displaced mesh list must align with the pool");
    ScenePixels original = render_scene(scene, pool, bgs, cfg);

    SceneInputs inputs = default_inputs(pool);
    if (adv.texture) {
        if (adv.texture->size != kTex)
            throw ContractError("adversarial texture must be " + std::to_string(kTex) + " px");
        Tensor shared = diffmath::make_constant({3, kTex, kTex}, adv.texture->pixels);
        for (auto& t : inputs.textures) t = shared;
    }
    std::vector<MeshEntry> displaced_pool;
    const std::vector<MeshEntry>* adv_pool = &pool;
    if (!adv.displaced.empty()) {
        displaced_pool = pool;  // shares textures/topo; swaps geometry
        for (size_t i = 0; i < pool.size(); ++i) {
            displaced_pool[i].mesh = adv.displaced[i];
            std::vector<double> flat;
            flat.reserve(adv.displaced[i].vertices.size() * 3);
            for (const auto& v : adv.displaced[i].vertices)
                flat.insert(flat.end(), v.begin(), v.end());
            inputs.vertices[i] = diffmath::make_constant(
                {static_cast<int>(adv.displaced[i].vertices.size()), 3}, std::move(flat));
        }
        adv_pool = &displaced_pool;
    }
    Tape tape;
    SceneRender r = render_scene_graph(tape, scene, *adv_pool, inputs, bgs, cfg);
    ScenePixels adversarial;
    adversarial.size = cfg.image_size;
    adversarial.pixels = r.image->value;
    adversarial.annotations = std::move(r.annotations);
    adversarial.degenerate_count = r.degenerate_count;
    return {std::move(original), std::move(adversarial)};
}

std::vector<DatasetRecord> generate_dataset(const DatasetConfig& cfg,
                                            const BackgroundProvider& bgs,
                                            const std::vector<MeshEntry>& pool) {
    namespace fs = std::filesystem;
    if (cfg.n_images < 1) throw UsageError("n_images must be >= 1");
    if (cfg.empty_fraction < 0.0 || cfg.empty_fraction > 1.0)
        throw UsageError("empty_fraction must lie in [0,1]");
    if (cfg.jobs < 1) throw UsageError("jobs must be >= 1");
    fs::create_directories(fs::path(cfg.out_dir) / "images");

    RenderConfig rcfg = make_render_config(cfg.image_size, cfg.profile);
    SceneSampleSpec sspec;
    sspec.n_backgrounds = bgs.count();
    sspec.n_meshes = static_cast<int>(pool.size());
    sspec.min_vehicles = cfg.min_vehicles;
    sspec.max_vehicles = cfg.max_vehicles;
    sspec.noise_texture_fraction = cfg.noise_texture_fraction;
    sspec.image_size = cfg.image_size;
    sspec.profile = cfg.profile;

    std::vector<DatasetRecord> records(cfg.n_images);
    std::vector<std::string> failures(cfg.jobs);
    auto worker = [&](int slot, int begin, int end) {
        try {
            for (int i = begin; i < end; ++i) {
                const uint64_t seed_i =
                    splitmix64(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
                Rng rng(seed_i);
                SceneSampleSpec local = sspec;
                if (rng.u01() < cfg.empty_fraction) {
                    local.min_vehicles = 0;
                    local.max_vehicles = 0;
                }
                SceneSpec scene = sample_scene(rng, local);
                ScenePixels px = render_scene(scene, pool, bgs, rcfg);
                char name[64];
                std::snprintf(name, sizeof(name), "images/img_%05d.png", i);
                write_png((fs::path(cfg.out_dir) / name).string(),
                          planar_to_image(px.pixels, px.size, px.size));
                DatasetRecord rec;
                rec.path = name;
                rec.seed = seed_i;
                for (const auto& a : px.annotations) rec.centers.push_back({a.cx, a.cy});
                records[i] = std::move(rec);
            }
        } catch (const std::exception& e) {
            failures[slot] = e.what();
        }
    };
    if (cfg.jobs == 1) {
        worker(0, 0, cfg.n_images);
    } else {
        std::vector<std::thread> threads;
        const int chunk = (cfg.n_images + cfg.jobs - 1) / cfg.jobs;
        for (int j = 0; j < cfg.jobs; ++j) {
            const int b = j * chunk, e = std::min(cfg.n_images, b + chunk);
            if (b >= e) break;
            threads.emplace_back(worker, j, b, e);
        }
        for (auto& t : threads) t.join();
    }
    for (const auto& f : failures)
        if (!f.empty()) throw IoError("dataset generation failed: " + f);

    // Manifest last, so an aborted run never leaves a partial manifest.
    std::string manifest;
    for (const auto& rec : records) {
        nlohmann::json j;
        j["path"] = rec.path;
        j["seed"] = rec.seed;
        nlohmann::json anns = nlohmann::json::array();
        for (const auto& c : rec.centers) anns.push_back({c[0], c[1]});
        j["annotations"] = anns;
        manifest += j.dump() + "\n";
    }
    write_text_file((fs::path(cfg.out_dir) / "manifest.jsonl").string(), manifest);
    return records;
}

std::vector<DatasetRecord> load_manifest(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string text = read_text_file((fs::path(dir) / "manifest.jsonl").string());
    std::vector<DatasetRecord> records;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw IoError("manifest line is not valid json: " + line);
        DatasetRecord rec;
        rec.path = j.at("path").get<std::string>();
        rec.seed = j.at("seed").get<uint64_t>();
        for (const auto& a : j.at("annotations"))
            rec.centers.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
        records.push_back(std::move(rec));
    }
    return records;
}

detectors::LabeledImage load_labeled_image(const std::string& dir, const DatasetRecord& rec) {
    namespace fs = std::filesystem;
    ImageU8 img = read_png((fs::path(dir) / rec.path).string());
    if (img.width != img.height) throw IoError("dataset image must be square: " + rec.path);
    detectors::LabeledImage li;
    li.size = img.width;
    li.pixels = image_to_planar(img);
    li.centers = rec.centers;
    return li;
}

}  // namespace camoforge::render
