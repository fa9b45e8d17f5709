#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "camoforge/detectors.hpp"
#include "camoforge/errors.hpp"
#include "camoforge/overheadrender.hpp"
#include "camoforge/rng.hpp"
#include "testutil.hpp"

using namespace camoforge;
using namespace camoforge::detectors;

namespace {

// Independent all-points AP: for each rank compute precision/recall over the
// pooled ranked detections, then integrate max-right precision.
double reference_ap(const std::vector<DetectionSet>& dets,
                    const std::vector<std::vector<std::array<double, 2>>>& gts,
                    double radius) {
    struct Ranked {
        double score;
        bool tp;
    };
    std::vector<Ranked> ranked;
    size_t n_gt = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
        n_gt += gts[i].size();
        std::vector<int> match = greedy_match(dets[i], gts[i], radius);
        for (size_t d = 0; d < dets[i].size(); ++d)
            ranked.push_back({dets[i][d].score, match[d] >= 0});
    }
    if (n_gt == 0) return 0.0;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    std::vector<double> prec, rec;
    size_t tp = 0;
    for (size_t i = 0; i < ranked.size(); ++i) {
        tp += ranked[i].tp ? 1 : 0;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    double ap = 0.0, prev_r = 0.0;
    for (size_t i = 0; i < prec.size(); ++i) {
        double pmax = 0.0;
        for (size_t j = i; j < prec.size(); ++j) pmax = std::max(pmax, prec[j]);
        ap += (rec[i] - prev_r) * pmax;
        prev_r = rec[i];
    }
    return ap;
}

std::vector<LabeledImage> tiny_dataset(int n, int size, uint64_t seed) {
    render::BackgroundProvider bgs(seed, size, 2);
    std::vector<render::MeshEntry> pool = render::make_mesh_pool(seed);
    render::RenderConfig cfg = render::make_render_config(size, render::FidelityProfile::train);
    render::SceneSampleSpec spec;
    spec.n_backgrounds = 2;
    spec.n_meshes = static_cast<int>(pool.size());
    spec.min_vehicles = 1;
    spec.max_vehicles = 1;  // small footprints cannot separate two vehicles
    spec.image_size = size;
    Rng rng(seed);
    std::vector<LabeledImage> out;
    for (int i = 0; i < n; ++i) {
        render::SceneSpec scene = render::sample_scene(rng, spec);
        render::ScenePixels px = render::render_scene(scene, pool, bgs, cfg);
        LabeledImage img;
        img.size = px.size;
        img.pixels = px.pixels;
        for (const auto& a : px.annotations) img.centers.push_back({a.cx, a.cy});
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace

TEST_CASE("detector construction and the low-prior head bias") {
    for (const char* arch : {"cnnA", "cnnB", "cnnC"}) {
        DetectorSpec spec = make_detector(arch, 5);
        CHECK(param_count(spec) > 1000);
        CHECK(spec.weights.size() == 2 * spec.layout.size());
        // Final layer emits one logit channel biased toward "no object".
        const auto& head_bias = spec.weights.back();
        REQUIRE(head_bias->numel() == 1);
        CHECK(head_bias->value[0] == -2.1972245773362196);
    }
    CHECK(make_detector("cnnB", 1).stride == 8);
    CHECK(make_detector("cnnA", 1).stride == 4);
    CHECK_THROWS_AS(make_detector("resnet", 1), ParameterError);
    // Same seed, same weights; different seed, different weights.
    DetectorSpec a = make_detector("cnnA", 9), b = make_detector("cnnA", 9),
                 c = make_detector("cnnA", 10);
    CHECK(a.weights[0]->value == b.weights[0]->value);
    CHECK(a.weights[0]->value != c.weights[0]->value);
}

TEST_CASE("center targets splat a clipped gaussian with unit peak") {
    std::vector<double> t = make_center_target(12, 4, {{18.0, 6.0}});
    REQUIRE(t.size() == 144);
    const int cx = 4, cy = 1;  // floor(18/4), floor(6/4)
    CHECK(t[cy * 12 + cx] == 1.0);
    const double sigma = 2.0 / 3.0;
    CHECK(t[cy * 12 + cx + 1] == doctest::Approx(std::exp(-1.0 / (2 * sigma * sigma))));
    CHECK(t[cy * 12 + cx + 2] == doctest::Approx(std::exp(-4.0 / (2 * sigma * sigma))));
    CHECK(t[cy * 12 + cx + 3] == 0.0);  // radius-2 cutoff
    double total = 0.0;
    for (double v : t) total += v;
    CHECK(total < 10.0);
    // Overlapping splats keep the maximum.
    std::vector<double> two = make_center_target(12, 4, {{18.0, 6.0}, {18.0, 6.0}});
    CHECK(two == t);
}

TEST_CASE("focal loss hand oracles and gradient") {
    diffmath::Tape tape;
    // Single cell, logit 0 (p = 0.5), positive target:
    // loss = -(1-p)^2 log p = 0.25 * log 2.
    diffmath::Tensor z = diffmath::make_leaf({1, 1, 1}, {0.0});
    diffmath::Tensor pos = focal_loss(tape, z, {1.0}, 1);
    CHECK(pos->value[0] == doctest::Approx(0.1732867951399863).epsilon(1e-12));
    // Negative target at the same logit has the same magnitude at beta=4,
    // weight (1-t)^4 = 1.
    diffmath::Tensor neg = focal_loss(tape, z, {0.0}, 0);
    CHECK(neg->value[0] == doctest::Approx(0.1732867951399863).epsilon(1e-12));
    // Soft target 0.5 scales the negative term by 0.5^4.
    diffmath::Tensor soft = focal_loss(tape, z, {0.5}, 0);
    CHECK(soft->value[0] == doctest::Approx(0.0625 * 0.1732867951399863).epsilon(1e-12));
    // Confident correct background is nearly free.
    diffmath::Tensor sure = diffmath::make_leaf({1, 1, 1}, {-9.0});
    CHECK(focal_loss(tape, sure, {0.0}, 0)->value[0] < 2e-8);
    CHECK_THROWS_AS(focal_loss(tape, z, {0.0, 1.0}, 1), ShapeError);

    Rng rng(71);
    diffmath::Tensor logits = testutil::random_leaf(rng, {1, 3, 3}, -2.0, 2.0);
    std::vector<double> target = make_center_target(3, 4, {{5.0, 5.0}});
    auto res = testutil::check_gradients(
        [&](diffmath::Tape& t) { return focal_loss(t, logits, target, 1); }, {logits}, rng, 15);
    CHECK(res.max_rel <= 1e-3);
}

TEST_CASE("heatmap geometry follows the stride") {
    DetectorSpec spec = make_detector("cnnA", 3);
    diffmath::Tape tape;
    Rng rng(5);
    diffmath::Tensor img = testutil::random_leaf(rng, {3, 64, 64}, 0.0, 1.0);
    diffmath::Tensor logits = heatmap_logits(tape, spec, img);
    CHECK(logits->shape == std::vector<int>{1, 16, 16});
    DetectorSpec b = make_detector("cnnB", 3);
    diffmath::Tape tape2;
    CHECK(heatmap_logits(tape2, b, img)->shape == std::vector<int>{1, 8, 8});
}

TEST_CASE("greedy matching prefers scores and proximity") {
    DetectionSet dets = {{10.0, 10.0, 0.9}, {13.0, 10.0, 0.8}, {40.0, 40.0, 0.7}};
    std::vector<std::array<double, 2>> gt = {{11.0, 10.0}, {14.0, 10.0}};
    std::vector<int> m = greedy_match(dets, gt, 12.0);
    REQUIRE(m.size() == 3);
    CHECK(m[0] == 0);  // best score takes the nearest gt
    CHECK(m[1] == 1);  // second detection falls back to the remaining gt
    CHECK(m[2] == -1); // nothing within radius
    // Radius gates the match.
    CHECK(greedy_match({{0.0, 0.0, 0.5}}, {{20.0, 0.0}}, 12.0)[0] == -1);
    CHECK(greedy_match({{0.0, 0.0, 0.5}}, {{11.0, 0.0}}, 12.0)[0] == 0);
}

TEST_CASE("average precision oracle and randomized agreement") {
    // hit(0.9), miss(0.8), hit(0.7) against 2 gt -> 0.5*1 + 0.5*(2/3).
    DetectionSet dets = {{10.0, 10.0, 0.9}, {50.0, 50.0, 0.8}, {30.0, 10.0, 0.7}};
    std::vector<std::array<double, 2>> gt = {{10.0, 10.0}, {30.0, 10.0}};
    const double ap = average_precision({dets}, {gt}, 5.0);
    CHECK(ap == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-12));
    CHECK(average_precision({{}}, {gt}, 5.0) == 0.0);
    CHECK(average_precision({dets}, {{}}, 5.0) == 0.0);

    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<DetectionSet> ds(3);
        std::vector<std::vector<std::array<double, 2>>> gs(3);
        for (int i = 0; i < 3; ++i) {
            const int ng = static_cast<int>(rng.uniform_int(4));
            for (int k = 0; k < ng; ++k)
                gs[i].push_back({rng.uniform(0, 100), rng.uniform(0, 100)});
            const int nd = static_cast<int>(rng.uniform_int(5));
            for (int k = 0; k < nd; ++k)
                ds[i].push_back({rng.uniform(0, 100), rng.uniform(0, 100), rng.u01()});
            std::sort(ds[i].begin(), ds[i].end(),
                      [](const Detection& a, const Detection& b) { return a.score > b.score; });
        }
        const double lib = average_precision(ds, gs, 15.0);
        const double ref = reference_ap(ds, gs, 15.0);
        CHECK(lib == doctest::Approx(ref).epsilon(1e-9));
    }
}

TEST_CASE("training reduces the loss and detects training vehicles") {
    std::vector<LabeledImage> data = tiny_dataset(24, 96, 303);
    DetectorSpec spec = make_detector("cnnA", 7);
    TrainResult tr = train_detector(spec, data, 3, 4, 7);
    REQUIRE(tr.epoch_losses.size() == 3);
    CHECK(tr.epoch_losses.back() < tr.epoch_losses.front());

    // Determinism: a re-run from the same seed gives identical weights.
    DetectorSpec spec2 = make_detector("cnnA", 7);
    train_detector(spec2, data, 3, 4, 7);
    for (size_t i = 0; i < spec.weights.size(); ++i)
        CHECK(spec.weights[i]->value == spec2.weights[i]->value);

    const double thr = calibrate_threshold(spec, data);
    CHECK(thr == spec.threshold);
    CHECK(thr > 0.0);
    CHECK(thr < 1.0);
    // Detections come back sorted and land on the heatmap grid.
    DetectorSpec loose = spec;
    loose.threshold = 0.0;
    DetectionSet dets = detect(loose, data[0].pixels, data[0].size);
    for (size_t i = 1; i < dets.size(); ++i) CHECK(dets[i - 1].score >= dets[i].score);
    for (const auto& d : dets) {
        CHECK(std::fmod(d.x - 2.0, 4.0) == doctest::Approx(0.0));  // (cell + 0.5) * stride
        CHECK(d.score > 0.0);
        CHECK(d.score < 1.0);
    }

    CHECK_THROWS_AS(train_detector(spec, {}, 1, 1, 1), DegenerateInputError);
    CHECK_THROWS_AS(train_detector(spec, data, 0, 1, 1), ParameterError);
}

TEST_CASE("weights persistence round trips bit-exactly") {
    const std::string dir = testutil::scratch_dir("detectors");
    DetectorSpec spec = make_detector("cnnC", 19);
    spec.threshold = 0.37;
    save_weights(dir + "/w.bin", spec);
    DetectorSpec back = load_weights(dir + "/w.bin");
    CHECK(back.arch_id == "cnnC");
    CHECK(back.stride == spec.stride);
    CHECK(back.threshold == 0.37);
    REQUIRE(back.weights.size() == spec.weights.size());
    for (size_t i = 0; i < spec.weights.size(); ++i) {
        CHECK(back.weights[i]->shape == spec.weights[i]->shape);
        CHECK(back.weights[i]->value == spec.weights[i]->value);
    }
    CHECK_THROWS_AS(load_weights(dir + "/missing.bin"), IoError);
}
