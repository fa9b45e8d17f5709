#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "camoforge/attack.hpp"
#include "camoforge/errors.hpp"
#include "camoforge/rng.hpp"
#include "testutil.hpp"

using namespace camoforge;
using namespace camoforge::attack;

namespace {

struct TestWorld {
    render::BackgroundProvider bgs;
    std::vector<render::MeshEntry> pool;
    TestWorld() : bgs(7, 64, 2), pool(render::make_mesh_pool(7)) {}
};

TestWorld& world() {
    static TestWorld w;
    return w;
}

AttackConfig small_config(AttackMode mode) {
    AttackConfig cfg;
    cfg.mode = mode;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.pool_size = 4;
    cfg.image_size = 64;
    cfg.min_vehicles = 1;
    cfg.max_vehicles = 1;  // an 8 m footprint cannot separate two vehicles
    cfg.lr_texture = 0.05;
    cfg.lr_shape = 20.0;
    cfg.pm = 0.2;
    cfg.seed = 11;
    return cfg;
}

camotex::Palette five_palette() {
    return {{{{0.0, 0.0, 0.5}},
             {{0.2, 0.8, 0.1}},
             {{0.9, 0.9, 0.9}},
             {{0.5, 0.1, 0.1}},
             {{0.1, 0.5, 0.9}}}};
}

size_t count_unique_colors(const camotex::TextureMap& t) {
    std::set<std::array<double, 3>> seen;
    const size_t plane = static_cast<size_t>(t.size) * t.size;
    for (size_t p = 0; p < plane; ++p)
        seen.insert({t.pixels[p], t.pixels[plane + p], t.pixels[2 * plane + p]});
    return seen.size();
}

std::vector<std::vector<double>> snapshot_weights(const detectors::DetectorSpec& d) {
    std::vector<std::vector<double>> out;
    for (const auto& w : d.weights) out.push_back(w->value);
    return out;
}

}  // namespace

TEST_CASE("attack mode names round trip") {
    for (const char* name : {"texture", "shape", "combined-seq", "combined-par"})
        CHECK(mode_name(parse_mode(name)) == name);
    CHECK_THROWS_AS(parse_mode("both"), UsageError);
}

TEST_CASE("configuration validation rejects inconsistent settings") {
    CHECK_NOTHROW(validate_config(small_config(AttackMode::texture)));

    auto expect = [](auto mutate, bool usage) {
        AttackConfig cfg = small_config(AttackMode::texture);
        mutate(cfg);
        if (usage) CHECK_THROWS_AS(validate_config(cfg), UsageError);
        else CHECK_THROWS_AS(validate_config(cfg), ParameterError);
    };
    expect([](AttackConfig& c) { c.epochs = -1; }, false);
    expect([](AttackConfig& c) { c.batch_size = 0; }, false);
    expect([](AttackConfig& c) { c.lr_texture = 0.0; }, false);
    expect([](AttackConfig& c) { c.n_pll = 0; }, false);
    expect([](AttackConfig& c) { c.pm = 1.0001; }, false);
    expect([](AttackConfig& c) { c.pm = -0.1; }, false);
    expect([](AttackConfig& c) { c.tau = 0.0; }, false);
    expect([](AttackConfig& c) { c.pool_size = 0; }, false);
    expect([](AttackConfig& c) { c.min_vehicles = 3; }, false);
    expect([](AttackConfig& c) {
        c.mode = AttackMode::shape;
        c.constraint_flags = camotex::kModePix;
    }, true);
    expect([](AttackConfig& c) {
        c.constraint_flags = camotex::kModeLc | camotex::kModeFc;
        c.palette = five_palette();
    }, true);
    expect([](AttackConfig& c) { c.constraint_flags = camotex::kModeFc; }, true);
    expect([](AttackConfig& c) {
        c.mode = AttackMode::combined_seq;
        c.constraint_flags = camotex::kModeMa;
    }, true);
}

TEST_CASE("lambda balancing normalizes to the median") {
    std::vector<double> l = balance_lambdas({2.0, 4.0, 8.0});
    REQUIRE(l.size() == 3);
    CHECK(l[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(l[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(l[2] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(balance_lambdas({7.0}) == std::vector<double>{1.0});
    std::vector<double> even = balance_lambdas({1.0, 3.0});
    CHECK(even[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(even[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(balance_lambdas({}), ParameterError);
    CHECK_THROWS_AS(balance_lambdas({1.0, 0.0}), DegenerateInputError);
    CHECK_THROWS_AS(balance_lambdas({-2.0}), DegenerateInputError);
    CHECK_THROWS_AS(balance_lambdas({std::nan("")}), DegenerateInputError);
}

TEST_CASE("suppression objective is the weighted focal sum") {
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnA", 3),
                                                detectors::make_detector("cnnB", 4)};
    Rng rng(9);
    std::vector<double> img = testutil::random_values(rng, 3 * 64 * 64, 0.0, 1.0);
    diffmath::Tensor image = diffmath::make_constant({3, 64, 64}, img);
    const std::vector<double> lambdas = {2.0, 0.5};

    diffmath::Tape tape;
    diffmath::Tensor total = suppression_loss(tape, ens, lambdas, image);
    double expect = 0.0;
    for (size_t d = 0; d < ens.size(); ++d) {
        diffmath::Tape t2;
        diffmath::Tensor logits = detectors::heatmap_logits(t2, ens[d], image);
        std::vector<double> zeros(logits->value.size(), 0.0);
        expect += lambdas[d] * detectors::focal_loss(t2, logits, zeros, 0)->value[0];
    }
    CHECK(total->value[0] == doctest::Approx(expect).epsilon(1e-12));

    CHECK_THROWS_AS(suppression_loss(tape, ens, {1.0}, image), ContractError);
    std::vector<detectors::DetectorSpec> none;
    CHECK_THROWS_AS(suppression_loss(tape, none, {}, image), ParameterError);
}

TEST_CASE("texture attack runs deterministically without touching detectors") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnB", 3)};
    const auto before = snapshot_weights(ens[0]);

    AttackConfig cfg = small_config(AttackMode::texture);
    AttackResult r = run_attack(cfg, ens, w.bgs, w.pool);
    CHECK(r.has_texture);
    CHECK(!r.has_shape);
    CHECK(r.steps == 2);  // 1 epoch x ceil(4/2) batches
    REQUIRE(r.loss_history.size() == 2);
    for (double v : r.loss_history) CHECK(std::isfinite(v));
    CHECK(r.phase_log == std::vector<std::string>{"texture", "texture"});
    REQUIRE(r.lambdas.size() == 1);
    CHECK(r.lambdas[0] == 1.0);  // single detector: median / self
    CHECK_NOTHROW(camotex::validate(r.texture));

    CHECK(snapshot_weights(ens[0]) == before);

    AttackResult again = run_attack(cfg, ens, w.bgs, w.pool);
    CHECK(again.loss_history == r.loss_history);
    CHECK(again.texture.latent_rgb == r.texture.latent_rgb);

    // The optimizer positively moved the latent.
    camotex::TextureParam fresh =
        camotex::make_texture_param(0, cfg.seed, std::nullopt, std::nullopt);
    CHECK(r.texture.latent_rgb != fresh.latent_rgb);
}

TEST_CASE("shape attack keeps symmetry and the deformation budget") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnB", 5)};
    AttackConfig cfg = small_config(AttackMode::shape);
    cfg.batch_size = 1;
    cfg.pool_size = 2;
    AttackResult r = run_attack(cfg, ens, w.bgs, w.pool);
    CHECK(!r.has_texture);
    CHECK(r.has_shape);
    CHECK(r.phase_log == std::vector<std::string>{"shape", "shape"});
    CHECK(r.shape.pm == cfg.pm);
    CHECK(meshgeom::is_symmetric(r.shape));

    bool moved = false;
    for (double v : r.shape.latent)
        if (v != meshgeom::kLatentInit) moved = true;
    CHECK(moved);

    render::Appearance a = make_appearance(cfg, r, w.pool);
    CHECK(!a.texture.has_value());
    REQUIRE(a.displaced.size() == w.pool.size());
    for (size_t i = 0; i < w.pool.size(); ++i)
        CHECK(meshgeom::deformation_bound_check(w.pool[i].mesh, a.displaced[i], cfg.pm));
}

TEST_CASE("combined sequential runs the texture phase first") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnB", 6)};
    AttackConfig cfg = small_config(AttackMode::combined_seq);
    cfg.pool_size = 2;  // one step per phase
    AttackResult r = run_attack(cfg, ens, w.bgs, w.pool);
    CHECK(r.has_texture);
    CHECK(r.has_shape);
    CHECK(r.phase_log == std::vector<std::string>{"texture", "shape"});
}

TEST_CASE("combined parallel alternates fixed-size blocks") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnB", 8)};
    AttackConfig cfg = small_config(AttackMode::combined_par);
    cfg.batch_size = 1;
    cfg.pool_size = 4;
    cfg.n_pll = 2;
    AttackResult r = run_attack(cfg, ens, w.bgs, w.pool);
    CHECK(r.phase_log == std::vector<std::string>{"texture", "texture", "shape", "shape",
                                                  "texture", "texture", "shape", "shape"});
}

TEST_CASE("budget sweep shares the texture stage across points") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnB", 9)};
    AttackConfig base = small_config(AttackMode::combined_seq);
    base.batch_size = 1;
    base.pool_size = 2;
    EvalConfig ev;
    ev.n_scenes = 2;
    ev.image_size = 64;
    ev.max_vehicles = 1;
    ev.seed = 77;

    SweepResult sw = sweep_pm(base, {0.0, 0.25}, ens, w.bgs, w.pool, ev);
    REQUIRE(sw.points.size() == 2);
    REQUIRE(sw.results.size() == 2);
    CHECK(sw.points[0].pm == 0.0);
    CHECK(sw.points[0].pr == 1.0);
    CHECK(sw.points[1].pr == 0.75);
    CHECK(sw.results[0].has_shape);
    CHECK(sw.results[0].shape.pm == 0.0);
    // The sequential texture stage does not depend on the budget.
    CHECK(sw.results[0].texture.latent_rgb == sw.results[1].texture.latent_rgb);
    for (const auto& p : sw.points) {
        CHECK(p.easr.size() == ens.size());
        CHECK(p.p1 >= 0.0);
    }
    REQUIRE(sw.optimal_index >= 0);
    REQUIRE(sw.optimal_index < 2);
    const double other = sw.points[1 - sw.optimal_index].p1;
    CHECK(sw.points[sw.optimal_index].p1 >= other - 1e-12);

    CHECK_THROWS_AS(sweep_pm(small_config(AttackMode::texture), {0.1}, ens, w.bgs, w.pool, ev),
                    UsageError);
    CHECK_THROWS_AS(sweep_pm(base, {}, ens, w.bgs, w.pool, ev), ParameterError);
    CHECK_THROWS_AS(sweep_pm(base, {1.5}, ens, w.bgs, w.pool, ev), ParameterError);
}

TEST_CASE("staged sweep point equals a full sequential run") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnB", 9),
                                                detectors::make_detector("cnnA", 3)};
    AttackConfig base = small_config(AttackMode::combined_seq);
    base.batch_size = 1;
    base.pool_size = 2;
    base.pm = 0.25;
    EvalConfig ev;
    ev.n_scenes = 1;
    ev.image_size = 64;
    ev.max_vehicles = 1;
    ev.seed = 77;

    AttackResult full = run_attack(base, ens, w.bgs, w.pool);
    SweepResult sw = sweep_pm(base, {0.25}, ens, w.bgs, w.pool, ev);
    REQUIRE(sw.results.size() == 1);
    CHECK(sw.results[0].lambdas == full.lambdas);
    CHECK(sw.results[0].texture.latent_rgb == full.texture.latent_rgb);
    CHECK(sw.results[0].shape.latent == full.shape.latent);
}

TEST_CASE("evaluation outcomes are independent of the job count") {
    TestWorld& w = world();
    std::vector<detectors::DetectorSpec> ens = {detectors::make_detector("cnnA", 3),
                                                detectors::make_detector("cnnB", 4)};
    for (auto& d : ens) d.threshold = 0.0;

    EvalConfig cfg;
    cfg.n_scenes = 5;
    cfg.image_size = 64;
    cfg.max_vehicles = 1;
    cfg.seed = 99;

    render::Appearance identity;
    std::vector<DetectorEval> one = evaluate_camouflage(cfg, ens, w.bgs, w.pool, identity);
    cfg.jobs = 3;
    std::vector<DetectorEval> three = evaluate_camouflage(cfg, ens, w.bgs, w.pool, identity);
    REQUIRE(one.size() == 2);
    REQUIRE(three.size() == 2);
    for (size_t d = 0; d < one.size(); ++d) {
        CHECK(one[d].arch_id == ens[d].arch_id);
        CHECK(one[d].outcomes.v_dd == three[d].outcomes.v_dd);
        CHECK(one[d].outcomes.v_dm == three[d].outcomes.v_dm);
        CHECK(one[d].outcomes.v_md == three[d].outcomes.v_md);
        CHECK(one[d].outcomes.v_mm == three[d].outcomes.v_mm);
        CHECK(one[d].ap_or == three[d].ap_or);
        CHECK(one[d].ap_adv == three[d].ap_adv);
        // An identity appearance renders bit-identical pairs: nothing flips.
        CHECK(one[d].outcomes.v_dm == 0);
        CHECK(one[d].outcomes.v_md == 0);
        CHECK(one[d].ap_or == one[d].ap_adv);
        CHECK(one[d].outcomes.total() > 0);
    }

    EvalConfig bad = cfg;
    bad.n_scenes = 0;
    CHECK_THROWS_AS(evaluate_camouflage(bad, ens, w.bgs, w.pool, identity), ParameterError);
    bad = cfg;
    bad.jobs = 0;
    CHECK_THROWS_AS(evaluate_camouflage(bad, ens, w.bgs, w.pool, identity), ParameterError);
    bad = cfg;
    bad.match_radius = 0.0;
    CHECK_THROWS_AS(evaluate_camouflage(bad, ens, w.bgs, w.pool, identity), ParameterError);
}

TEST_CASE("deployable appearance enforces the texture constraints") {
    TestWorld& w = world();
    camotex::Palette pal = five_palette();
    AttackConfig cfg = small_config(AttackMode::texture);

    // Fixed palette: the deployable map is hard-projected.
    AttackResult fc;
    fc.has_texture = true;
    fc.texture = camotex::make_texture_param(camotex::kModeFc, 21, pal, std::nullopt);
    render::Appearance a = make_appearance(cfg, fc, w.pool);
    REQUIRE(a.texture.has_value());
    CHECK(count_unique_colors(*a.texture) <= 5);
    CHECK(a.displaced.empty());

    // Palette + mask: untouchable texels keep the factory paint exactly,
    // paintable ones live on the palette.
    camotex::TextureMap original = camotex::make_original_texture(5);
    AttackResult ma;
    ma.has_texture = true;
    ma.texture =
        camotex::make_texture_param(camotex::kModeFc | camotex::kModeMa, 21, pal, original);
    render::Appearance b = make_appearance(cfg, ma, w.pool);
    REQUIRE(b.texture.has_value());
    const auto& mask = ma.texture.mask;
    const size_t plane = static_cast<size_t>(camotex::kTexSize) * camotex::kTexSize;
    REQUIRE(mask.size() == plane);
    size_t kept = 0, painted = 0, kept_bad = 0, painted_bad = 0;
    std::set<std::array<double, 3>> pal_set(pal.colors.begin(), pal.colors.end());
    for (size_t p = 0; p < plane; ++p) {
        std::array<double, 3> px = {b.texture->pixels[p], b.texture->pixels[plane + p],
                                    b.texture->pixels[2 * plane + p]};
        if (mask[p] == 0) {
            ++kept;
            for (int c = 0; c < 3; ++c)
                if (px[c] != original.pixels[c * plane + p]) ++kept_bad;
        } else {
            ++painted;
            if (pal_set.count(px) != 1) ++painted_bad;
        }
    }
    CHECK(kept > 0);
    CHECK(painted > 0);
    CHECK(kept_bad == 0);
    CHECK(painted_bad == 0);
}
