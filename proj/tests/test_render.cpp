#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "camoforge/errors.hpp"
#include "camoforge/imageio.hpp"
#include "camoforge/overheadrender.hpp"
#include "camoforge/rng.hpp"
#include "camoforge/runio.hpp"
#include "testutil.hpp"

using namespace camoforge;
using namespace camoforge::render;

namespace {

// Horizontal quad (two up-facing triangles) with a constant-color texture:
// every covered pixel must equal color * (ambient + (1-ambient)*sin(sun_el)).
MeshEntry make_quad_entry(double hx, double hy, double z,
                          const std::array<double, 3>& color) {
    MeshEntry e;
    e.mesh.vertices = {{-hx, -hy, z}, {hx, -hy, z}, {hx, hy, z}, {-hx, hy, z}};
    e.mesh.faces = {{0, 1, 2}, {0, 2, 3}};
    e.mesh.uvs = {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}};
    meshgeom::finalize_mesh(e.mesh);
    e.topo = meshgeom::build_topology_map(e.mesh);
    e.original = camotex::TextureMap();
    const size_t plane = static_cast<size_t>(camotex::kTexSize) * camotex::kTexSize;
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i) e.original.pixels[c * plane + i] = color[c];
    e.tex_const = diffmath::make_constant({3, camotex::kTexSize, camotex::kTexSize},
                                          e.original.pixels);
    std::vector<double> flat;
    for (const auto& v : e.mesh.vertices) flat.insert(flat.end(), v.begin(), v.end());
    e.verts_const = diffmath::make_constant({4, 3}, flat);
    return e;
}

SceneSpec quad_scene(double x, double y, double sun_el, double ambient) {
    SceneSpec s;
    s.background_id = 0;
    VehiclePose pose;
    pose.mesh_id = 0;
    pose.x = x;
    pose.y = y;
    pose.yaw = 0.0;
    s.vehicles.push_back(pose);
    s.camera = CameraSpec{};  // nadir
    s.lighting.sun_azimuth = 0.7;
    s.lighting.sun_elevation = sun_el;
    s.lighting.ambient = ambient;
    return s;
}

RenderConfig flat_config(int size) {
    RenderConfig cfg;
    cfg.image_size = size;
    cfg.supersample = 1;
    cfg.blur_sigma = 2.4;
    return cfg;
}

}  // namespace

TEST_CASE("profiles and config presets") {
    CHECK(parse_profile("train") == FidelityProfile::train);
    CHECK(parse_profile("transfer") == FidelityProfile::transfer);
    CHECK(profile_name(FidelityProfile::transfer) == "transfer");
    CHECK_THROWS_AS(parse_profile("fast"), UsageError);
    RenderConfig tr = make_render_config(192, FidelityProfile::train);
    CHECK(tr.supersample == 4);
    CHECK(tr.blur_sigma == 2.4);
    RenderConfig xf = make_render_config(192, FidelityProfile::transfer);
    CHECK(xf.supersample == 2);
    CHECK(xf.blur_sigma == 3.0);
    CHECK_THROWS_AS(make_render_config(8, FidelityProfile::train), ParameterError);
}

TEST_CASE("procedural backgrounds are deterministic and in range") {
    BackgroundProvider a(42, 64, 3), b(42, 64, 3);
    CHECK(a.count() == 3);
    CHECK(a.size() == 64);
    for (int i = 0; i < 3; ++i) {
        CHECK(a.tile(i) == b.tile(i));
        for (double v : a.tile(i)) {
            CHECK(v >= 0.02);
            CHECK(v <= 0.95);
        }
    }
    CHECK(a.tile(0) != a.tile(1));
    CHECK_THROWS_AS(a.tile(3), ParameterError);
    CHECK_THROWS_AS(BackgroundProvider(1, 64, 0), ParameterError);
}

TEST_CASE("flat quad renders to the closed-form shaded color") {
    std::vector<MeshEntry> pool;
    pool.push_back(make_quad_entry(2.0, 1.5, 0.3, {0.8, 0.4, 0.2}));
    const double sun_el = std::asin(0.7);
    SceneSpec scene = quad_scene(4.0, 3.5, sun_el, 0.5);
    RenderConfig cfg = flat_config(64);

    diffmath::Tape tape;
    RasterResult r = rasterize(tape, scene, pool, default_inputs(pool), cfg);
    REQUIRE(r.rgb->shape == std::vector<int>{3, 64, 64});
    CHECK(r.degenerate_count == 0);

    const double shade = 0.5 + 0.5 * 0.7;  // ambient + (1-ambient) * sin(sun_el)
    const size_t plane = 64 * 64;
    auto px = [&](int c, int y, int x) { return r.rgb->value[c * plane + y * 64 + x]; };
    auto al = [&](int y, int x) { return r.alpha->value[y * 64 + x]; };
    // Quad footprint: x in [16,48) px, y in [16,40) px. Center of the quad:
    CHECK(px(0, 28, 32) == doctest::Approx(0.8 * shade).epsilon(1e-12));
    CHECK(px(1, 28, 32) == doctest::Approx(0.4 * shade).epsilon(1e-12));
    CHECK(px(2, 28, 32) == doctest::Approx(0.2 * shade).epsilon(1e-12));
    CHECK(al(28, 32) == 1.0);
    CHECK(al(17, 17) == 1.0);
    // Outside the footprint: empty.
    CHECK(px(0, 28, 10) == 0.0);
    CHECK(al(28, 10) == 0.0);
    CHECK(al(10, 50) == 0.0);

    REQUIRE(r.annotations.size() == 1);
    CHECK(r.annotations[0].cx == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(r.annotations[0].cy == doctest::Approx(28.0).epsilon(1e-12));
}

TEST_CASE("depth resolves stacked surfaces and tilt shifts projections") {
    std::vector<MeshEntry> pool;
    pool.push_back(make_quad_entry(2.0, 1.5, 0.3, {0.8, 0.4, 0.2}));
    pool.push_back(make_quad_entry(2.0, 1.5, 1.0, {0.1, 0.9, 0.5}));
    SceneSpec scene = quad_scene(4.0, 3.5, std::asin(0.7), 0.5);
    VehiclePose top = scene.vehicles[0];
    top.mesh_id = 1;
    scene.vehicles.push_back(top);
    RenderConfig cfg = flat_config(64);

    diffmath::Tape tape;
    RasterResult r = rasterize(tape, scene, pool, default_inputs(pool), cfg);
    const double shade = 0.5 + 0.5 * 0.7;
    const size_t plane = 64 * 64;
    // The higher quad hides the lower one everywhere they overlap.
    CHECK(r.rgb->value[28 * 64 + 32] == doctest::Approx(0.1 * shade).epsilon(1e-12));
    CHECK(r.rgb->value[plane + 28 * 64 + 32] == doctest::Approx(0.9 * shade).epsilon(1e-12));

    // Off-nadir tilt: a surface at height z shifts against the tilt direction.
    SceneSpec tilted = quad_scene(4.0, 3.5, std::asin(0.7), 0.5);
    tilted.camera.azimuth = 0.0;
    tilted.camera.elevation_deviation = 0.1;
    diffmath::Tape tape2;
    std::vector<MeshEntry> single;
    single.push_back(make_quad_entry(2.0, 1.5, 0.3, {0.8, 0.4, 0.2}));
    RasterResult rt = rasterize(tape2, tilted, single, default_inputs(single), cfg);
    const double expect_cx = (4.0 - 0.3 * std::tan(0.1)) / kGsd;
    CHECK(rt.annotations[0].cx == doctest::Approx(expect_cx).epsilon(1e-12));
    CHECK(rt.annotations[0].cy == doctest::Approx(28.0).epsilon(1e-12));

    SceneSpec too_tilted = tilted;
    too_tilted.camera.elevation_deviation = 0.5;
    diffmath::Tape tape3;
    CHECK_THROWS_AS(rasterize(tape3, too_tilted, single, default_inputs(single), cfg),
                    ContractError);
}

TEST_CASE("texture gradients reach visible texels only") {
    std::vector<MeshEntry> pool;
    pool.push_back(make_quad_entry(2.0, 1.5, 0.3, {0.8, 0.4, 0.2}));
    pool.push_back(make_quad_entry(2.0, 1.5, 1.0, {0.1, 0.9, 0.5}));
    SceneSpec scene = quad_scene(4.0, 3.5, std::asin(0.7), 0.5);
    VehiclePose top = scene.vehicles[0];
    top.mesh_id = 1;
    scene.vehicles.push_back(top);

    SceneInputs inputs = default_inputs(pool);
    diffmath::Tensor bottom_tex =
        diffmath::make_leaf(pool[0].tex_const->shape, pool[0].tex_const->value);
    diffmath::Tensor top_tex =
        diffmath::make_leaf(pool[1].tex_const->shape, pool[1].tex_const->value);
    inputs.textures[0] = bottom_tex;
    inputs.textures[1] = top_tex;

    diffmath::Tape tape;
    RasterResult r = rasterize(tape, scene, pool, inputs, flat_config(64));
    tape.backward(diffmath::sum(tape, r.rgb));

    double top_norm = 0.0, bottom_norm = 0.0;
    for (double g : top_tex->grad) top_norm += std::abs(g);
    for (double g : bottom_tex->grad) bottom_norm += std::abs(g);
    CHECK(top_norm > 0.0);
    CHECK(bottom_norm == 0.0);  // fully occluded: no gradient at all
}

TEST_CASE("empty scenes pass the background through bit-exactly") {
    BackgroundProvider bgs(7, 64, 2);
    std::vector<MeshEntry> pool = make_mesh_pool(3);
    SceneSpec scene;
    scene.background_id = 1;
    RenderConfig cfg = make_render_config(64, FidelityProfile::train);
    ScenePixels out = render_scene(scene, pool, bgs, cfg);
    CHECK(out.pixels == bgs.tile(1));
    CHECK(out.annotations.empty());
}

TEST_CASE("full pipeline reproduces the shaded color on a constant background") {
    const std::string dir = testutil::scratch_dir("render_bg");
    ImageU8 gray(128, 128);
    for (auto& b : gray.pixels) b = 128;
    write_png(dir + "/bg.png", gray);
    BackgroundProvider bgs({dir + "/bg.png"}, 128);

    std::vector<MeshEntry> pool;
    pool.push_back(make_quad_entry(4.0, 3.0, 0.3, {0.8, 0.4, 0.2}));
    SceneSpec scene = quad_scene(8.0, 8.0, std::asin(0.7), 0.5);
    RenderConfig cfg = make_render_config(128, FidelityProfile::train);
    ScenePixels out = render_scene(scene, pool, bgs, cfg);

    // Far inside the quad the blur window sees a constant difference image,
    // so the composite reduces to the exact shaded foreground color.
    const double shade = 0.85;
    const size_t plane = 128 * 128;
    const size_t center = 64 * 128 + 64;
    CHECK(out.pixels[center] == doctest::Approx(0.8 * shade).epsilon(1e-12));
    CHECK(out.pixels[plane + center] == doctest::Approx(0.4 * shade).epsilon(1e-12));
    CHECK(out.pixels[2 * plane + center] == doctest::Approx(0.2 * shade).epsilon(1e-12));
    // Far from the quad the background survives untouched.
    CHECK(out.pixels[10 * 128 + 10] == doctest::Approx(128.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("scene sampling respects all declared bounds") {
    SceneSampleSpec spec;
    spec.n_backgrounds = 3;
    spec.n_meshes = 6;
    spec.min_vehicles = 2;
    spec.max_vehicles = 4;
    spec.image_size = 384;
    const double extent = 384 * kGsd;

    Rng r1(1001), r2(1001);
    SceneSpec s1 = sample_scene(r1, spec), s2 = sample_scene(r2, spec);
    CHECK(s1.vehicles.size() == s2.vehicles.size());
    CHECK(s1.camera.azimuth == s2.camera.azimuth);
    CHECK(s1.lighting.sun_elevation == s2.lighting.sun_elevation);
    for (size_t i = 0; i < s1.vehicles.size(); ++i) {
        CHECK(s1.vehicles[i].x == s2.vehicles[i].x);
        CHECK(s1.vehicles[i].yaw == s2.vehicles[i].yaw);
    }

    Rng rng(555);
    double max_dev = 0.0;
    std::set<size_t> counts;
    for (int i = 0; i < 300; ++i) {
        SceneSpec s = sample_scene(rng, spec);
        max_dev = std::max(max_dev, s.camera.elevation_deviation);
        counts.insert(s.vehicles.size());
        CHECK(s.vehicles.size() >= 2);
        CHECK(s.vehicles.size() <= 4);
        CHECK(s.background_id < 3);
        CHECK(s.lighting.sun_elevation >= 35.0 * M_PI / 180.0 - 1e-12);
        CHECK(s.lighting.sun_elevation <= 75.0 * M_PI / 180.0 + 1e-12);
        CHECK(s.lighting.ambient >= 0.4);
        CHECK(s.lighting.ambient <= 0.6);
        for (const auto& v : s.vehicles) {
            CHECK(v.mesh_id < 6);
            CHECK(v.x >= 3.0);
            CHECK(v.x <= extent - 3.0);
            CHECK(v.y >= 3.0);
            CHECK(v.y <= extent - 3.0);
        }
        for (size_t a = 0; a < s.vehicles.size(); ++a)
            for (size_t b = a + 1; b < s.vehicles.size(); ++b)
                CHECK(std::hypot(s.vehicles[a].x - s.vehicles[b].x,
                                 s.vehicles[a].y - s.vehicles[b].y) >= 5.6 - 1e-9);
    }
    CHECK(max_dev <= kMaxElevationDeviation + 1e-12);
    CHECK(max_dev > 0.25);  // the corner region near the 20-degree cap is reachable
    CHECK(counts.size() == 3);

    SceneSampleSpec wide = spec;
    wide.profile = FidelityProfile::transfer;
    Rng rng2(99);
    double lo_el = 10.0, hi_el = 0.0;
    for (int i = 0; i < 300; ++i) {
        SceneSpec s = sample_scene(rng2, wide);
        lo_el = std::min(lo_el, s.lighting.sun_elevation);
        hi_el = std::max(hi_el, s.lighting.sun_elevation);
        CHECK(s.lighting.ambient >= 0.3);
        CHECK(s.lighting.ambient <= 0.7);
    }
    CHECK(lo_el < 35.0 * M_PI / 180.0);  // transfer widens the lighting range
    CHECK(hi_el > 75.0 * M_PI / 180.0);

    SceneSampleSpec empty = spec;
    empty.min_vehicles = 0;
    empty.max_vehicles = 0;
    Rng rng3(1);
    CHECK(sample_scene(rng3, empty).vehicles.empty());

    SceneSampleSpec noisy = spec;
    noisy.noise_texture_fraction = 1.0;
    Rng rng4(2);
    SceneSpec ns = sample_scene(rng4, noisy);
    std::set<uint64_t> seeds;
    for (const auto& v : ns.vehicles) {
        CHECK(v.noise_texture);
        seeds.insert(v.noise_seed);
    }
    CHECK(seeds.size() == ns.vehicles.size());
}

TEST_CASE("impossible placements raise PlacementError") {
    SceneSampleSpec spec;
    spec.n_backgrounds = 1;
    spec.n_meshes = 1;
    spec.image_size = 40;  // 5 m footprint: below twice the placement margin
    spec.min_vehicles = 1;
    spec.max_vehicles = 1;
    Rng rng(3);
    CHECK_THROWS_AS(sample_scene(rng, spec), PlacementError);

    spec.image_size = 64;  // 8 m footprint: one fits, two cannot separate
    spec.min_vehicles = 2;
    spec.max_vehicles = 2;
    Rng rng2(4);
    CHECK_THROWS_AS(sample_scene(rng2, spec), PlacementError);
}

TEST_CASE("matched pairs differ only through the adversarial appearance") {
    BackgroundProvider bgs(11, 64, 2);
    std::vector<MeshEntry> pool = make_mesh_pool(5);
    SceneSampleSpec sspec;
    sspec.n_backgrounds = 2;
    sspec.n_meshes = static_cast<int>(pool.size());
    sspec.min_vehicles = 1;
    sspec.max_vehicles = 1;  // an 8 m footprint cannot separate two vehicles
    sspec.image_size = 64;
    Rng rng(21);
    SceneSpec scene = sample_scene(rng, sspec);
    RenderConfig cfg = make_render_config(64, FidelityProfile::train);

    Appearance identity;
    auto [o1, a1] = render_matched_pair(scene, pool, bgs, identity, cfg);
    CHECK(o1.pixels == a1.pixels);

    Appearance textured;
    textured.texture = camotex::TextureMap();
    for (auto& v : textured.texture->pixels) v = 0.95;
    auto [o2, a2] = render_matched_pair(scene, pool, bgs, textured, cfg);
    CHECK(o2.pixels == o1.pixels);
    CHECK(a2.pixels != o2.pixels);
    REQUIRE(a2.annotations.size() == o2.annotations.size());
    for (size_t i = 0; i < a2.annotations.size(); ++i) {
        CHECK(a2.annotations[i].cx == o2.annotations[i].cx);
        CHECK(a2.annotations[i].cy == o2.annotations[i].cy);
    }
}

TEST_CASE("dataset generation is parallel-invariant and manifest round trips") {
    const std::string dir1 = testutil::scratch_dir("render_ds1");
    const std::string dir2 = testutil::scratch_dir("render_ds2");
    BackgroundProvider bgs(13, 64, 2);
    std::vector<MeshEntry> pool = make_mesh_pool(13);

    DatasetConfig cfg;
    cfg.n_images = 6;
    cfg.seed = 77;
    cfg.empty_fraction = 0.3;
    cfg.image_size = 64;
    cfg.min_vehicles = 1;
    cfg.max_vehicles = 1;  // an 8 m footprint cannot separate two vehicles
    cfg.jobs = 1;
    cfg.out_dir = dir1;
    std::vector<DatasetRecord> r1 = generate_dataset(cfg, bgs, pool);
    cfg.out_dir = dir2;
    cfg.jobs = 3;
    std::vector<DatasetRecord> r2 = generate_dataset(cfg, bgs, pool);
    REQUIRE(r1.size() == 6);
    REQUIRE(r2.size() == 6);
    for (size_t i = 0; i < r1.size(); ++i) {
        CHECK(r1[i].path == r2[i].path);
        CHECK(sha256_file(dir1 + "/" + r1[i].path) == sha256_file(dir2 + "/" + r2[i].path));
    }

    std::vector<DatasetRecord> loaded = load_manifest(dir1);
    REQUIRE(loaded.size() == r1.size());
    bool any_vehicle = false, any_empty = false;
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].path == r1[i].path);
        REQUIRE(loaded[i].centers.size() == r1[i].centers.size());
        for (size_t k = 0; k < loaded[i].centers.size(); ++k) {
            CHECK(loaded[i].centers[k][0] == r1[i].centers[k][0]);
            CHECK(loaded[i].centers[k][1] == r1[i].centers[k][1]);
        }
        any_vehicle |= !loaded[i].centers.empty();
        any_empty |= loaded[i].centers.empty();
        detectors::LabeledImage img = load_labeled_image(dir1, loaded[i]);
        CHECK(img.size == 64);
        CHECK(img.centers.size() == loaded[i].centers.size());
    }
    CHECK(any_vehicle);

    DatasetConfig all_empty = cfg;
    all_empty.out_dir = testutil::scratch_dir("render_ds3");
    all_empty.empty_fraction = 1.0;
    for (const auto& rec : generate_dataset(all_empty, bgs, pool))
        CHECK(rec.centers.empty());
    (void)any_empty;
}
