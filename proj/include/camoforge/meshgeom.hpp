#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "camoforge/diffmath.hpp"

namespace camoforge::meshgeom {

constexpr int kVertexLimit = 1000;
constexpr int kLatentSize = 64;
constexpr double kLatentInit = -10.0;  // sigmoid(-10) ~ 4.5e-5: effectively undeformed

enum class VehicleTemplate { sedan, van, hatchback };
VehicleTemplate parse_template(const std::string& name);
std::string template_name(VehicleTemplate t);

// Semantic regions of the procedural UV layout (u: front->rear along the
// length, v: around the cross-section starting/ending at the bottom line).
enum class Region { body, window, light, wheel, underside };
Region uv_region(double u, double v);

// Triangle mesh in meters. x = length axis, y = lateral axis, z = up.
struct Mesh {
    std::vector<std::array<double, 3>> vertices;
    std::vector<std::array<int, 3>> faces;
    std::vector<std::array<double, 2>> uvs;  // per vertex, in [0,1]^2
    double width_W = 0.0;                    // max pairwise lateral (y) extent
    std::array<double, 3> centroid{0.0, 0.0, 0.0};
};

// Computes width_W/centroid and validates all mesh invariants.
void finalize_mesh(Mesh& mesh);

Mesh generate_vehicle_mesh(uint64_t seed, VehicleTemplate tmpl);

// Reflection line in displacement-map UV space; dim 0 reflects u, 1 reflects v.
struct SymmetryAxis {
    int dim = 1;
    double pos = 0.0;
};

// Pre-sigmoid displacement grid driving radial deformation.
struct DisplacementField {
    std::vector<double> latent;  // kLatentSize x kLatentSize, row v, column u
    double pm = 0.0;             // deformation budget in [0,1], fraction of width
    std::array<SymmetryAxis, 2> axes{{{1, 0.0}, {1, 0.5}}};
};

DisplacementField make_displacement_field(double pm);
bool is_symmetric(const DisplacementField& f, double tol = 1e-12);
// Averages the latent over its reflection group; idempotent.
DisplacementField symmetrize(const DisplacementField& f);

// One entry per unique vertex position (seam duplicates collapse),
// plus the scatter index back to the renderable vertex list.
struct TopologyMap {
    std::vector<std::array<double, 3>> positions;
    std::vector<std::array<double, 2>> sample_uv;
    std::vector<std::array<double, 3>> radial_dir;  // unit from centroid (zero if coincident)
    std::vector<int> render_to_unique;
    double width = 0.0;
};

TopologyMap build_topology_map(const Mesh& mesh);

// Differentiable deformed vertex positions: latent is a [64,64] tensor on the
// tape; result is [n_render_vertices, 3]. dV_i = pm * width * sigmoid(d_i) * radial_i.
diffmath::Tensor displaced_vertices(diffmath::Tape& tape, const diffmath::Tensor& latent,
                                    const TopologyMap& topo, double pm);

// Plain (non-tape) application; returns a new mesh, input untouched.
Mesh apply_displacement(const Mesh& mesh, const DisplacementField& field, const TopologyMap& topo);

// True iff every per-vertex displacement between a and b is <= pm*width(a),
// up to 1e-9 relative slack.
bool deformation_bound_check(const Mesh& a, const Mesh& b, double pm);

// Plain-text persistence: "v-count f-count", then "v x y z u v", then "f i j k".
Mesh parse_mesh_text(const std::string& text);
std::string serialize_mesh(const Mesh& mesh);
Mesh load_mesh(const std::string& path);
void save_mesh(const std::string& path, const Mesh& mesh);

// 64x64 CSV persistence for the displacement latent.
void save_latent_csv(const std::string& path, const DisplacementField& f);
DisplacementField load_latent_csv(const std::string& path, double pm);

}  // namespace camoforge::meshgeom
