#include "camoforge/meshgeom.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "camoforge/errors.hpp"
#include "camoforge/rng.hpp"
#include "camoforge/runio.hpp"

namespace camoforge::meshgeom {

namespace {

constexpr int kRings = 21;      // cross-sections along the length
constexpr int kProfile = 24;    // points around one cross-section (+1 seam copy)

double smoothstep(double a, double b, double t) {
    double u = (t - a) / (b - a);
    u = u < 0.0 ? 0.0 : (u > 1.0 ? 1.0 : u);
    return u * u * (3.0 - 2.0 * u);
}

// Rounded-rectangle profile shaping: signed |c|^(1/2).
double superellipse(double c) { return c >= 0.0 ? std::sqrt(c) : -std::sqrt(-c); }

struct TemplateSpec {
    double length, width, clearance;
    double (*height)(double t);
};

double sedan_height(double t) {
    return 0.55 + 0.90 * smoothstep(0.15, 0.42, t) - 0.50 * smoothstep(0.78, 0.95, t);
}
double van_height(double t) { return 0.80 + 1.10 * smoothstep(0.06, 0.28, t); }
double hatchback_height(double t) {
    return 0.55 + 0.95 * smoothstep(0.18, 0.48, t) - 0.20 * smoothstep(0.88, 1.0, t);
}

TemplateSpec template_spec(VehicleTemplate t) {
    switch (t) {
        case VehicleTemplate::sedan: return {4.6, 1.8, 0.25, sedan_height};
        case VehicleTemplate::van: return {4.8, 1.9, 0.30, van_height};
        case VehicleTemplate::hatchback: return {4.0, 1.7, 0.25, hatchback_height};
    }
    throw ParameterError("unknown vehicle template");
}

// Row/column permutation induced by reflecting a circular grid axis about pos.
std::vector<int> axis_permutation(double pos) {
    const int n = kLatentSize;
    long k = std::lround(2.0 * pos * n);
    std::vector<int> p(n);
    for (int r = 0; r < n; ++r) p[r] = static_cast<int>((((k - r) % n) + n) % n);
    return p;
}

// Full-grid cell permutations for the reflection group generated by the axes.
std::vector<std::vector<int>> group_permutations(const std::array<SymmetryAxis, 2>& axes) {
    const int n = kLatentSize;
    const int cells = n * n;
    std::vector<std::vector<int>> gens;
    for (const auto& ax : axes) {
        if (ax.dim != 0 && ax.dim != 1) throw ParameterError("symmetry axis dim must be 0 or 1");
        std::vector<int> ap = axis_permutation(ax.pos);
        std::vector<int> g(cells);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                g[r * n + c] = ax.dim == 1 ? ap[r] * n + c : r * n + ap[c];
        gens.push_back(std::move(g));
    }
    std::set<std::vector<int>> group;
    std::vector<int> ident(cells);
    for (int i = 0; i < cells; ++i) ident[i] = i;
    group.insert(ident);
    bool grew = true;
    while (grew) {
        grew = false;
        std::vector<std::vector<int>> snapshot(group.begin(), group.end());
        for (const auto& g : snapshot)
            for (const auto& gen : gens) {
                std::vector<int> comp(cells);
                for (int i = 0; i < cells; ++i) comp[i] = gen[g[i]];
                if (group.insert(std::move(comp)).second) grew = true;
            }
    }
    return {group.begin(), group.end()};
}

void check_latent_shape(const DisplacementField& f) {
    if (f.latent.size() != static_cast<size_t>(kLatentSize) * kLatentSize)
        throw ShapeError("displacement latent must be exactly 64x64");
}

}  // namespace

VehicleTemplate parse_template(const std::string& name) {
    if (name == "sedan") return VehicleTemplate::sedan;
    if (name == "van") return VehicleTemplate::van;
    if (name == "hatchback") return VehicleTemplate::hatchback;
    throw ParameterError("unknown vehicle template: " + name);
}

std::string template_name(VehicleTemplate t) {
    switch (t) {
        case VehicleTemplate::sedan: return "sedan";
        case VehicleTemplate::van: return "van";
        case VehicleTemplate::hatchback: return "hatchback";
    }
    return "?";
}

Region uv_region(double u, double v) {
    if (v < 0.08 || v > 0.92) return Region::underside;
    bool lower_side = (v >= 0.08 && v <= 0.16) || (v >= 0.84 && v <= 0.92);
    if (lower_side && ((u > 0.12 && u < 0.30) || (u > 0.70 && u < 0.88))) return Region::wheel;
    if ((u < 0.04 || u > 0.96) && ((v > 0.18 && v < 0.32) || (v > 0.68 && v < 0.82)))
        return Region::light;
    bool upper_side = (v > 0.32 && v < 0.45) || (v > 0.55 && v < 0.68);
    if (upper_side && u > 0.35 && u < 0.80) return Region::window;
    bool roof_band = v >= 0.45 && v <= 0.55;
    if (roof_band && ((u > 0.30 && u < 0.42) || (u > 0.78 && u < 0.88))) return Region::window;
    return Region::body;
}

void finalize_mesh(Mesh& mesh) {
    const int nv = static_cast<int>(mesh.vertices.size());
    if (nv < 3) throw TopologyError("mesh needs at least 3 vertices");
    if (nv > kVertexLimit)
        throw TopologyError("mesh has " + std::to_string(nv) + " vertices, limit is " +
                            std::to_string(kVertexLimit));
    if (mesh.faces.empty()) throw TopologyError("mesh has no faces");
    if (mesh.uvs.size() != mesh.vertices.size())
        throw TopologyError("mesh needs one uv per vertex");
    std::vector<bool> referenced(nv, false);
    for (const auto& f : mesh.faces)
        for (int idx : f) {
            if (idx < 0 || idx >= nv)
                throw TopologyError("face index " + std::to_string(idx) + " out of range");
            referenced[idx] = true;
        }
    for (int i = 0; i < nv; ++i)
        if (!referenced[i]) throw TopologyError("vertex " + std::to_string(i) + " unreferenced");
    for (const auto& uv : mesh.uvs)
        if (uv[0] < 0.0 || uv[0] > 1.0 || uv[1] < 0.0 || uv[1] > 1.0)
            throw TopologyError("uv coordinate outside [0,1]^2");

    double ymin = mesh.vertices[0][1], ymax = ymin;
    std::array<double, 3> c{0.0, 0.0, 0.0};
    for (const auto& v : mesh.vertices) {
        ymin = std::min(ymin, v[1]);
        ymax = std::max(ymax, v[1]);
        for (int k = 0; k < 3; ++k) c[k] += v[k];
    }
    for (int k = 0; k < 3; ++k) c[k] /= nv;
    mesh.centroid = c;
    mesh.width_W = ymax - ymin;
    if (!(mesh.width_W > 0.0)) throw TopologyError("mesh has no lateral extent");
}

Mesh generate_vehicle_mesh(uint64_t seed, VehicleTemplate tmpl) {
    TemplateSpec spec = template_spec(tmpl);
    Rng rng(splitmix64(seed ^ (static_cast<uint64_t>(tmpl) * 0x51a9bb4d3ULL)));
    const double fL = 1.0 + 0.05 * rng.uniform(-1.0, 1.0);
    const double fW = 1.0 + 0.05 * rng.uniform(-1.0, 1.0);
    const double fH = 1.0 + 0.05 * rng.uniform(-1.0, 1.0);
    const double L = spec.length * fL;
    const double Wd = spec.width * fW;

    Mesh mesh;
    const int m = kProfile;
    for (int i = 0; i < kRings; ++i) {
        double t = static_cast<double>(i) / (kRings - 1);
        double x = -L / 2.0 + L * t;
        double tc = std::min(0.98, std::max(0.02, t));
        double w = Wd * (0.55 + 0.45 * std::sqrt(std::sin(M_PI * tc)));
        double h = spec.height(t) * fH;
        std::vector<std::array<double, 3>> ring(m + 1);
        for (int j = 0; j <= m / 2; ++j) {
            double theta = 2.0 * M_PI * j / m - M_PI / 2.0;
            double y = (w / 2.0) * superellipse(std::cos(theta));
            double z = spec.clearance + (h / 2.0) * (1.0 + superellipse(std::sin(theta)));
            ring[j] = {x, y, z};
        }
        for (int j = m / 2 + 1; j < m; ++j)
            ring[j] = {ring[m - j][0], -ring[m - j][1], ring[m - j][2]};  // exact mirror
        ring[m] = ring[0];                                               // seam copy
        for (int j = 0; j <= m; ++j) {
            mesh.vertices.push_back(ring[j]);
            mesh.uvs.push_back({t, static_cast<double>(j) / m});
        }
    }
    const int front_center = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back({-L / 2.0, 0.0, spec.clearance + spec.height(0.0) * fH / 2.0});
    mesh.uvs.push_back({0.0, 0.5});
    const int rear_center = front_center + 1;
    mesh.vertices.push_back({L / 2.0, 0.0, spec.clearance + spec.height(1.0) * fH / 2.0});
    mesh.uvs.push_back({1.0, 0.5});

    auto ring_idx = [m](int i, int j) { return i * (m + 1) + j; };
    for (int i = 0; i + 1 < kRings; ++i)
        for (int j = 0; j < m; ++j) {
            int a = ring_idx(i, j), b = ring_idx(i, j + 1);
            int c = ring_idx(i + 1, j + 1), d = ring_idx(i + 1, j);
            mesh.faces.push_back({a, c, b});
            mesh.faces.push_back({a, d, c});
        }
    for (int j = 0; j < m; ++j) {
        mesh.faces.push_back({front_center, ring_idx(0, j), ring_idx(0, j + 1)});
        mesh.faces.push_back({rear_center, ring_idx(kRings - 1, j + 1), ring_idx(kRings - 1, j)});
    }
    finalize_mesh(mesh);
    return mesh;
}

DisplacementField make_displacement_field(double pm) {
    if (!(pm >= 0.0 && pm <= 1.0)) throw ParameterError("pm must lie in [0,1]");
    DisplacementField f;
    f.latent.assign(static_cast<size_t>(kLatentSize) * kLatentSize, kLatentInit);
    f.pm = pm;
    return f;
}

bool is_symmetric(const DisplacementField& f, double tol) {
    check_latent_shape(f);
    for (const auto& g : group_permutations(f.axes))
        for (size_t i = 0; i < f.latent.size(); ++i)
            if (std::abs(f.latent[i] - f.latent[g[i]]) > tol) return false;
    return true;
}

DisplacementField symmetrize(const DisplacementField& f) {
    check_latent_shape(f);
    auto group = group_permutations(f.axes);
    DisplacementField out = f;
    const double inv = 1.0 / static_cast<double>(group.size());
    for (size_t i = 0; i < f.latent.size(); ++i) {
        double acc = 0.0;
        for (const auto& g : group) acc += f.latent[g[i]];
        out.latent[i] = acc * inv;
    }
    return out;
}

TopologyMap build_topology_map(const Mesh& mesh) {
    TopologyMap topo;
    topo.width = mesh.width_W;
    std::map<std::array<double, 3>, int> seen;
    auto uv_close = [](double a, double b) {
        double d = std::abs(a - b);
        d = d - std::floor(d);  // circular distance on [0,1)
        d = std::min(d, 1.0 - d);
        return d <= 1e-9;
    };
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const auto& v = mesh.vertices[i];
        auto [it, inserted] = seen.try_emplace(v, static_cast<int>(topo.positions.size()));
        if (inserted) {
            topo.positions.push_back(v);
            topo.sample_uv.push_back(mesh.uvs[i]);
        } else {
            const auto& prev = topo.sample_uv[it->second];
            if (!uv_close(prev[0], mesh.uvs[i][0]) || !uv_close(prev[1], mesh.uvs[i][1]))
                throw TopologyError("duplicate vertex " + std::to_string(i) +
                                    " has conflicting uv coordinates");
        }
        topo.render_to_unique.push_back(it->second);
    }
    topo.radial_dir.reserve(topo.positions.size());
    for (const auto& p : topo.positions) {
        std::array<double, 3> d{p[0] - mesh.centroid[0], p[1] - mesh.centroid[1],
                                p[2] - mesh.centroid[2]};
        double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        if (n < 1e-12)
            topo.radial_dir.push_back({0.0, 0.0, 0.0});
        else
            topo.radial_dir.push_back({d[0] / n, d[1] / n, d[2] / n});
    }
    return topo;
}

diffmath::Tensor displaced_vertices(diffmath::Tape& tape, const diffmath::Tensor& latent,
                                    const TopologyMap& topo, double pm) {
    using namespace diffmath;
    if (!(pm >= 0.0 && pm <= 1.0)) throw ParameterError("pm must lie in [0,1]");
    if (latent->shape != std::vector<int>{kLatentSize, kLatentSize})
        throw ShapeError("displacement latent tensor must be [64,64]");
    const int nu = static_cast<int>(topo.positions.size());
    std::vector<double> uv(2 * static_cast<size_t>(nu));
    std::vector<double> dirs(3 * static_cast<size_t>(nu));
    std::vector<double> base(3 * static_cast<size_t>(nu));
    for (int i = 0; i < nu; ++i) {
        uv[2 * i] = topo.sample_uv[i][0];
        uv[2 * i + 1] = topo.sample_uv[i][1];
        for (int k = 0; k < 3; ++k) {
            dirs[3 * i + k] = topo.radial_dir[i][k];
            base[3 * i + k] = topo.positions[i][k];
        }
    }
    Tensor d = bilinear_gather(tape, latent, uv);
    Tensor s = sigmoid(tape, d);
    Tensor disp = rowwise_mul(tape, s, make_constant({nu, 3}, dirs));
    Tensor moved = add_const(tape, scale(tape, disp, pm * topo.width), base);
    return gather_rows(tape, moved, topo.render_to_unique);
}

Mesh apply_displacement(const Mesh& mesh, const DisplacementField& field,
                        const TopologyMap& topo) {
    check_latent_shape(field);
    if (topo.render_to_unique.size() != mesh.vertices.size())
        throw ContractError("topology map does not match mesh vertex count");
    for (size_t i = 0; i < mesh.vertices.size(); ++i)
        if (topo.positions[topo.render_to_unique[i]] != mesh.vertices[i])
            throw ContractError("topology map positions do not match mesh");
    if (!is_symmetric(field, 1e-12))
        throw ContractError("displacement field must be symmetrized before application");

    diffmath::Tape tape;
    diffmath::Tensor latent =
        diffmath::make_constant({kLatentSize, kLatentSize}, field.latent);
    diffmath::Tensor moved = displaced_vertices(tape, latent, topo, field.pm);
    Mesh out = mesh;
    for (size_t i = 0; i < out.vertices.size(); ++i)
        for (int k = 0; k < 3; ++k) out.vertices[i][k] = moved->value[3 * i + k];
    finalize_mesh(out);
    return out;
}

bool deformation_bound_check(const Mesh& a, const Mesh& b, double pm) {
    if (a.vertices.size() != b.vertices.size() || a.faces != b.faces)
        throw ContractError("deformation_bound_check: meshes differ in topology");
    if (!(pm >= 0.0 && pm <= 1.0)) throw ParameterError("pm must lie in [0,1]");
    const double bound = pm * a.width_W * (1.0 + 1e-9);
    for (size_t i = 0; i < a.vertices.size(); ++i) {
        double dx = b.vertices[i][0] - a.vertices[i][0];
        double dy = b.vertices[i][1] - a.vertices[i][1];
        double dz = b.vertices[i][2] - a.vertices[i][2];
        if (std::sqrt(dx * dx + dy * dy + dz * dz) > bound) return false;
    }
    return true;
}

Mesh parse_mesh_text(const std::string& text) {
    std::istringstream in(text);
    int nv = 0, nf = 0;
    if (!(in >> nv >> nf)) throw IoError("mesh: malformed header, expected 'v-count f-count'");
    if (nv < 0 || nf < 0) throw IoError("mesh: negative counts in header");
    Mesh mesh;
    mesh.vertices.reserve(nv);
    mesh.uvs.reserve(nv);
    mesh.faces.reserve(nf);
    std::string tag;
    for (int i = 0; i < nv; ++i) {
        std::array<double, 3> p;
        std::array<double, 2> uv;
        if (!(in >> tag >> p[0] >> p[1] >> p[2] >> uv[0] >> uv[1]) || tag != "v")
            throw IoError("mesh: malformed vertex line " + std::to_string(i));
        mesh.vertices.push_back(p);
        mesh.uvs.push_back(uv);
    }
    for (int i = 0; i < nf; ++i) {
        std::array<int, 3> f;
        if (!(in >> tag >> f[0] >> f[1] >> f[2]) || tag != "f")
            throw IoError("mesh: malformed face line " + std::to_string(i));
        mesh.faces.push_back(f);
    }
    finalize_mesh(mesh);
    return mesh;
}

std::string serialize_mesh(const Mesh& mesh) {
    std::string out = std::to_string(mesh.vertices.size()) + " " +
                      std::to_string(mesh.faces.size()) + "\n";
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        out += "v";
        for (int k = 0; k < 3; ++k) out += " " + format_double(mesh.vertices[i][k]);
        out += " " + format_double(mesh.uvs[i][0]) + " " + format_double(mesh.uvs[i][1]) + "\n";
    }
    for (const auto& f : mesh.faces)
        out += "f " + std::to_string(f[0]) + " " + std::to_string(f[1]) + " " +
               std::to_string(f[2]) + "\n";
    return out;
}

Mesh load_mesh(const std::string& path) { return parse_mesh_text(read_text_file(path)); }

void save_mesh(const std::string& path, const Mesh& mesh) {
    write_text_file(path, serialize_mesh(mesh));
}

void save_latent_csv(const std::string& path, const DisplacementField& f) {
    check_latent_shape(f);
    std::string out;
    for (int r = 0; r < kLatentSize; ++r) {
        for (int c = 0; c < kLatentSize; ++c) {
            if (c) out += ",";
            out += format_double(f.latent[static_cast<size_t>(r) * kLatentSize + c]);
        }
        out += "\n";
    }
    write_text_file(path, out);
}

DisplacementField load_latent_csv(const std::string& path, double pm) {
    DisplacementField f = make_displacement_field(pm);
    std::istringstream in(read_text_file(path));
    std::string line;
    int r = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (r >= kLatentSize) throw IoError("latent csv: more than 64 rows");
        std::istringstream ls(line);
        std::string cell;
        int c = 0;
        while (std::getline(ls, cell, ',')) {
            if (c >= kLatentSize) throw IoError("latent csv: more than 64 columns");
            try {
                f.latent[static_cast<size_t>(r) * kLatentSize + c] = std::stod(cell);
            } catch (const std::exception&) {
                throw IoError("latent csv: bad number '" + cell + "'");
            }
            ++c;
        }
        if (c != kLatentSize) throw IoError("latent csv: expected 64 columns per row");
        ++r;
    }
    if (r != kLatentSize) throw IoError("latent csv: expected 64 rows");
    return f;
}

}  // namespace camoforge::meshgeom
