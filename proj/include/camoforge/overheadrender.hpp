#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "camoforge/camotex.hpp"
#include "camoforge/detectors.hpp"
#include "camoforge/diffmath.hpp"
#include "camoforge/meshgeom.hpp"
#include "camoforge/rng.hpp"

namespace camoforge::render {

constexpr double kGsd = 0.125;  // meters per output pixel (12.5 cm/px)
constexpr double kMaxElevationDeviation = 0.34906585039886590;  // 20 degrees

enum class FidelityProfile { train, transfer };
FidelityProfile parse_profile(const std::string& name);
std::string profile_name(FidelityProfile p);

struct RenderConfig {
    int image_size = 384;
    int supersample = 4;     // render at image_size * supersample, then pool
    double blur_sigma = 2.4;
    FidelityProfile profile = FidelityProfile::train;
};
// Presets: train = {x4 supersampling, sigma 2.4}; transfer = {x2, sigma 3.0,
// wider lighting ranges at scene sampling}. Transfer is evaluation-only.
RenderConfig make_render_config(int image_size, FidelityProfile profile);

struct CameraSpec {
    double azimuth = 0.0;              // direction of the off-nadir tilt
    double elevation_deviation = 0.0;  // radians from nadir, <= 20 deg
    double gsd = kGsd;
};
struct LightingSpec {
    double sun_azimuth = 0.0;
    double sun_elevation = 1.2;  // radians above horizon
    double ambient = 0.5;        // in (0,1)
};
struct VehiclePose {
    int mesh_id = 0;
    double x = 0.0, y = 0.0;  // ground position, meters
    double yaw = 0.0;
    bool noise_texture = false;  // training augmentation: random texel noise
    uint64_t noise_seed = 0;
};
struct SceneSpec {
    int background_id = 0;
    std::vector<VehiclePose> vehicles;  // empty only for background-only images
    CameraSpec camera;
    LightingSpec lighting;
};

struct Annotation {
    int vehicle_id = 0;
    double cx = 0.0, cy = 0.0;  // output-resolution pixel coordinates
};

// Procedurally generated ground tiles (grass / asphalt / rooftops), or
// user-supplied PNG tiles of the matching size. Planar [3,s,s] in [0,1].
class BackgroundProvider {
public:
    BackgroundProvider(uint64_t seed, int size, int count);  // procedural
    BackgroundProvider(const std::vector<std::string>& png_paths, int size);
    int count() const { return static_cast<int>(tiles_.size()); }
    int size() const { return size_; }
    const std::vector<double>& tile(int id) const;

private:
    int size_ = 0;
    std::vector<std::vector<double>> tiles_;
};

// One vehicle variant: geometry, its displacement topology, original texture,
// and reusable constant tensors for rendering.
struct MeshEntry {
    meshgeom::Mesh mesh;
    meshgeom::TopologyMap topo;
    camotex::TextureMap original;
    diffmath::Tensor tex_const;    // [3,512,512]
    diffmath::Tensor verts_const;  // [n,3]
};
// Three templates x two jitter seeds, textured with distinct body colors.
std::vector<MeshEntry> make_mesh_pool(uint64_t seed);

struct SceneSampleSpec {
    int n_backgrounds = 1;
    int n_meshes = 1;
    int min_vehicles = 1, max_vehicles = 5;
    double noise_texture_fraction = 0.0;
    int image_size = 384;
    FidelityProfile profile = FidelityProfile::train;
};
// Near-nadir camera from a uniform square point re-projected to the
// hemisphere; positions/yaws uniform with overlap rejection (at most 1000
// rejected placements, then PlacementError).
SceneSpec sample_scene(Rng& rng, const SceneSampleSpec& spec);

// Per-pool-slot differentiable inputs; attack code substitutes leaves or
// tape-composed tensors, everything else uses the pool constants.
struct SceneInputs {
    std::vector<diffmath::Tensor> textures;  // each [3,512,512]
    std::vector<diffmath::Tensor> vertices;  // each [n_i,3], mesh frame
};
SceneInputs default_inputs(const std::vector<MeshEntry>& pool);

struct RasterResult {
    diffmath::Tensor rgb;    // supersampled [3,S,S] foreground
    diffmath::Tensor alpha;  // [3,S,S] constant 0/1 coverage (no gradient)
    int degenerate_count = 0;
    std::vector<Annotation> annotations;
};
// Z-buffered orthographic rasterization with flat sun+ambient shading and
// bilinear texture lookup. Gradients flow to texture texels and, through
// uv-shift and face shading, to vertex positions; coverage is treated as
// piecewise-constant (no silhouette gradients).
RasterResult rasterize(diffmath::Tape& tape, const SceneSpec& scene,
                       const std::vector<MeshEntry>& pool, const SceneInputs& inputs,
                       const RenderConfig& cfg);

// Supersampled alpha blend -> average pooling -> reality-gap Gaussian blur
// of the foreground-background difference -> clamp to [0,1].
diffmath::Tensor composite(diffmath::Tape& tape, const diffmath::Tensor& bg,
                           const diffmath::Tensor& fg_rgb, const diffmath::Tensor& alpha,
                           const RenderConfig& cfg);

struct SceneRender {
    diffmath::Tensor image;  // [3,s,s]
    int degenerate_count = 0;
    std::vector<Annotation> annotations;
};
SceneRender render_scene_graph(diffmath::Tape& tape, const SceneSpec& scene,
                               const std::vector<MeshEntry>& pool, const SceneInputs& inputs,
                               const BackgroundProvider& bgs, const RenderConfig& cfg);

struct ScenePixels {
    int size = 0;
    std::vector<double> pixels;  // [3,s,s]
    std::vector<Annotation> annotations;
    int degenerate_count = 0;
};
// Forward-only render with the pool's original appearance.
ScenePixels render_scene(const SceneSpec& scene, const std::vector<MeshEntry>& pool,
                         const BackgroundProvider& bgs, const RenderConfig& cfg);

// Adversarial appearance: a universal texture applied to every vehicle and/or
// per-slot displaced meshes (index-aligned with the pool; empty = originals).
struct Appearance {
    std::optional<camotex::TextureMap> texture;
    std::vector<meshgeom::Mesh> displaced;
};
// Two renders of the identical scene: pool originals vs adversarial.
std::pair<ScenePixels, ScenePixels> render_matched_pair(const SceneSpec& scene,
                                                        const std::vector<MeshEntry>& pool,
                                                        const BackgroundProvider& bgs,
                                                        const Appearance& adv,
                                                        const RenderConfig& cfg);

struct DatasetConfig {
    std::string out_dir;
    int n_images = 100;
    uint64_t seed = 1;
    double empty_fraction = 0.3;
    double noise_texture_fraction = 0.15;
    int image_size = 384;
    FidelityProfile profile = FidelityProfile::train;
    int min_vehicles = 1, max_vehicles = 5;
    int jobs = 1;
};
struct DatasetRecord {
    std::string path;  // relative to the dataset directory
    uint64_t seed = 0;
    std::vector<std::array<double, 2>> centers;
};
// Renders n_images scenes to PNG plus a JSONL manifest; deterministic per
// seed and independent of the job count.
std::vector<DatasetRecord> generate_dataset(const DatasetConfig& cfg,
                                            const BackgroundProvider& bgs,
                                            const std::vector<MeshEntry>& pool);
std::vector<DatasetRecord> load_manifest(const std::string& dir);
detectors::LabeledImage load_labeled_image(const std::string& dir, const DatasetRecord& rec);

}  // namespace camoforge::render
