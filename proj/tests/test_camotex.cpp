#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "camoforge/camotex.hpp"
#include "camoforge/errors.hpp"
#include "camoforge/rng.hpp"
#include "testutil.hpp"

using namespace camoforge;
using namespace camoforge::camotex;

namespace {

Palette rgb_palette() {
    Palette p;
    p.colors = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
    return p;
}

Palette five_palette() {
    Palette p;
    p.colors = {{0.1, 0.1, 0.1}, {0.9, 0.1, 0.1}, {0.1, 0.9, 0.1}, {0.1, 0.1, 0.9},
                {0.8, 0.8, 0.2}};
    return p;
}

int unique_colors(const TextureMap& t) {
    const size_t plane = static_cast<size_t>(t.size) * t.size;
    std::set<std::array<double, 3>> seen;
    for (size_t i = 0; i < plane; ++i)
        seen.insert({t.pixels[i], t.pixels[plane + i], t.pixels[2 * plane + i]});
    return static_cast<int>(seen.size());
}

}  // namespace

TEST_CASE("mode strings round trip") {
    CHECK(mode_string(0) == "U");
    CHECK(mode_string(kModePix | kModeFc | kModeMa) == "PixFcMa");
    const unsigned combos[] = {0,
                               kModePix,
                               kModeMa,
                               kModeLc,
                               kModeFc,
                               kModePix | kModeMa,
                               kModePix | kModeLc,
                               kModePix | kModeFc,
                               kModeLc | kModeMa,
                               kModeFc | kModeMa,
                               kModePix | kModeLc | kModeMa,
                               kModePix | kModeFc | kModeMa};
    for (unsigned flags : combos) CHECK(parse_mode_string(mode_string(flags)) == flags);
    CHECK_THROWS_AS(parse_mode_string("Bogus"), ParameterError);
}

TEST_CASE("palette validation") {
    Palette p = rgb_palette();
    validate_palette(p);
    p.colors.resize(1);
    CHECK_THROWS_AS(validate_palette(p), ParameterError);
    p = rgb_palette();
    p.colors.push_back(p.colors[0]);
    CHECK_THROWS_AS(validate_palette(p), ParameterError);
    p = rgb_palette();
    p.colors[0][0] = 1.5;
    CHECK_THROWS_AS(validate_palette(p), ParameterError);
}

TEST_CASE("color field weights follow the double sharpening rule") {
    // One probability row (0.2, 0.3, 0.5) sharpened twice at tau=0.5 gives
    // exact weights (16, 81, 625)/722; with an axis-aligned palette the
    // composed pixel equals those weights directly.
    TextureParam p = make_texture_param(kModeFc, 1, rgb_palette(), std::nullopt);
    for (size_t r = 0; r < p.latent_probs.size() / 3; ++r) {
        p.latent_probs[3 * r + 0] = 0.2;
        p.latent_probs[3 * r + 1] = 0.3;
        p.latent_probs[3 * r + 2] = 0.5;
    }
    TextureMap t = compose_texture(p, 0.5);
    const size_t plane = static_cast<size_t>(kTexSize) * kTexSize;
    for (size_t i : {size_t(0), plane - 1}) {
        CHECK(t.pixels[i] == doctest::Approx(16.0 / 722.0).epsilon(1e-10));
        CHECK(t.pixels[plane + i] == doctest::Approx(81.0 / 722.0).epsilon(1e-10));
        CHECK(t.pixels[2 * plane + i] == doctest::Approx(625.0 / 722.0).epsilon(1e-10));
    }
    // tau -> small sharpens toward the argmax color.
    TextureMap sharp = compose_texture(p, 0.1);
    CHECK(sharp.pixels[2 * plane] > 0.99);
    // Projection picks the argmax palette color exactly.
    TextureMap proj = project_colors(p);
    CHECK(proj.pixels[0] == 0.0);
    CHECK(proj.pixels[2 * plane] == 1.0);
    CHECK(unique_colors(proj) == 1);
}

TEST_CASE("renormalize_probs is a row softmax") {
    TextureParam p = make_texture_param(kModeFc, 2, rgb_palette(), std::nullopt);
    p.latent_probs[0] = std::log(2.0);
    p.latent_probs[1] = 0.0;
    p.latent_probs[2] = 0.0;
    renormalize_probs(p);
    CHECK(p.latent_probs[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.latent_probs[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p.latent_probs[2] == doctest::Approx(0.25).epsilon(1e-12));
    validate(p);  // rows sum to 1 again
}

TEST_CASE("pixelized textures are 16x16 blockwise constant") {
    Rng rng(17);
    TextureParam p = make_texture_param(kModePix, 3, std::nullopt, std::nullopt);
    TextureMap t = compose_texture(p, kDefaultTau);
    for (int c = 0; c < 3; ++c)
        for (int by = 0; by < kPixLatentSize; ++by)
            for (int bx = 0; bx < kPixLatentSize; ++bx) {
                const double v0 = t.at(c, by * kPixBlock, bx * kPixBlock);
                for (int k = 0; k < 8; ++k) {
                    int dy = static_cast<int>(rng.uniform_int(kPixBlock));
                    int dx = static_cast<int>(rng.uniform_int(kPixBlock));
                    CHECK(t.at(c, by * kPixBlock + dy, bx * kPixBlock + dx) == v0);
                }
            }
    CHECK(unique_colors(t) <= kPixLatentSize * kPixLatentSize);
    // Pix + Fc: blocks and the palette restriction combine.
    TextureParam pf = make_texture_param(kModePix | kModeFc, 4, five_palette(), std::nullopt);
    TextureMap proj = project_colors(pf);
    CHECK(proj.size == kTexSize);
    CHECK(unique_colors(proj) <= 5);
}

TEST_CASE("mask keeps the original texture outside paintable regions") {
    TextureMap original = make_original_texture(7);
    TextureParam p = make_texture_param(kModeMa, 8, std::nullopt, original);
    REQUIRE(p.mask.size() == static_cast<size_t>(kTexSize) * kTexSize);
    size_t painted = 0;
    for (uint8_t m : p.mask) {
        CHECK(m <= 1);
        painted += m;
    }
    CHECK(painted > 0);
    CHECK(painted < p.mask.size());

    TextureMap t = compose_texture(p, kDefaultTau);
    const size_t plane = static_cast<size_t>(kTexSize) * kTexSize;
    for (size_t i = 0; i < plane; ++i)
        if (p.mask[i] == 0)
            for (int c = 0; c < 3; ++c) {
                // Bit-exact passthrough where painting is not allowed.
                CHECK(t.pixels[c * plane + i] == original.pixels[c * plane + i]);
            }
}

TEST_CASE("texture param construction and validation reject bad setups") {
    CHECK_THROWS_AS(make_texture_param(kModeMa, 1, std::nullopt, std::nullopt), ContractError);
    CHECK_THROWS_AS(make_texture_param(kModeFc, 1, std::nullopt, std::nullopt), ContractError);
    CHECK_THROWS_AS(make_texture_param(kModeLc | kModeFc, 1, rgb_palette(), std::nullopt),
                    ContractError);
    TextureParam p = make_texture_param(kModeFc, 1, rgb_palette(), std::nullopt);
    p.latent_probs[0] += 0.5;  // row no longer sums to 1
    CHECK_THROWS_AS(validate(p), ContractError);
}

TEST_CASE("graph and plain composition agree for every mode") {
    TextureMap original = make_original_texture(9);
    const std::vector<std::pair<unsigned, std::optional<Palette>>> cases = {
        {0u, std::nullopt},
        {kModePix, std::nullopt},
        {kModePix | kModeMa, std::nullopt},
        {kModeFc, five_palette()},
        {kModeLc, five_palette()},
        {kModePix | kModeFc | kModeMa, five_palette()},
    };
    for (const auto& [flags, pal] : cases) {
        std::optional<TextureMap> orig =
            (flags & kModeMa) ? std::optional<TextureMap>(original) : std::nullopt;
        TextureParam p = make_texture_param(flags, 5, pal, orig);
        TextureMap plain = compose_texture(p, kDefaultTau);
        diffmath::Tape tape;
        TextureLeaves leaves = make_texture_leaves(p);
        diffmath::Tensor out = compose_texture_graph(tape, p, leaves, kDefaultTau);
        REQUIRE(out->value.size() == plain.pixels.size());
        for (size_t i = 0; i < plain.pixels.size(); i += 9973)
            CHECK(out->value[i] == plain.pixels[i]);
    }
}

TEST_CASE("composition gradients match finite differences") {
    Rng rng(23);
    TextureMap original = make_original_texture(11);

    // Unconstrained RGB latent (values strictly inside the clamp).
    TextureParam u = make_texture_param(kModePix, 6, std::nullopt, std::nullopt);
    for (auto& v : u.latent_rgb) v = rng.uniform(0.05, 0.95);
    TextureLeaves ul = make_texture_leaves(u);
    std::vector<double> w =
        testutil::random_values(rng, 3ull * kTexSize * kTexSize, -1.0, 1.0);
    auto res = testutil::check_gradients(
        [&](diffmath::Tape& t) {
            return diffmath::sum(
                t, diffmath::mul_const(t, compose_texture_graph(t, u, ul, kDefaultTau), w));
        },
        {ul.latent_rgb}, rng, 12);
    CHECK(res.max_rel <= 1e-3);

    // Learned palette: gradients reach both the probabilities and the colors.
    TextureParam lc = make_texture_param(kModePix | kModeLc | kModeMa, 7, five_palette(),
                                         original);
    TextureLeaves ll = make_texture_leaves(lc);
    REQUIRE(ll.palette->requires_grad);
    auto res2 = testutil::check_gradients(
        [&](diffmath::Tape& t) {
            return diffmath::sum(
                t, diffmath::mul_const(t, compose_texture_graph(t, lc, ll, 0.5), w));
        },
        {ll.latent_probs, ll.palette}, rng, 10);
    CHECK(res2.max_rel <= 1e-3);
    CHECK(res2.checked >= 20);

    // Fixed palette: the palette leaf takes no gradient.
    TextureParam fc = make_texture_param(kModeFc, 8, five_palette(), std::nullopt);
    TextureLeaves fl = make_texture_leaves(fc);
    CHECK_FALSE(fl.palette->requires_grad);
}

TEST_CASE("palette extraction is deterministic and recovers separated clusters") {
    Rng rng(29);
    ImageU8 img(64, 64);
    const std::array<std::array<uint8_t, 3>, 3> centers = {
        {{20, 30, 40}, {200, 60, 50}, {90, 180, 220}}};
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const auto& c = centers[rng.uniform_int(3)];
            for (int k = 0; k < 3; ++k) {
                int jitter = static_cast<int>(rng.uniform_int(7)) - 3;
                img.at(x, y)[k] = static_cast<uint8_t>(std::clamp(c[k] + jitter, 0, 255));
            }
        }
    Palette a = palette_from_backgrounds({img}, 3);
    Palette b = palette_from_backgrounds({img}, 3);
    REQUIRE(a.size() == 3);
    validate_palette(a);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) CHECK(a.colors[i][k] == b.colors[i][k]);
    // Every cluster center is close to some palette color.
    for (const auto& c : centers) {
        double best = 1e9;
        for (const auto& pc : a.colors) {
            double d = 0.0;
            for (int k = 0; k < 3; ++k) d += std::abs(pc[k] - c[k] / 255.0);
            best = std::min(best, d);
        }
        CHECK(best < 0.1);
    }
}

TEST_CASE("texture persistence round trips") {
    const std::string dir = testutil::scratch_dir("camotex");
    Rng rng(33);
    TextureMap t;
    for (auto& v : t.pixels) v = static_cast<double>(rng.uniform_int(256)) / 255.0;
    save_texture_png(dir + "/t.png", t);
    TextureMap back = load_texture_png(dir + "/t.png");
    REQUIRE(back.size == t.size);
    for (size_t i = 0; i < t.pixels.size(); i += 7919) CHECK(back.pixels[i] == t.pixels[i]);

    Palette p = five_palette();
    save_palette_csv(dir + "/p.csv", p);
    Palette pb = load_palette_csv(dir + "/p.csv");
    REQUIRE(pb.size() == p.size());
    for (int i = 0; i < p.size(); ++i)
        for (int k = 0; k < 3; ++k) CHECK(pb.colors[i][k] == p.colors[i][k]);

    TextureParam fp = make_texture_param(kModePix | kModeFc, 12, five_palette(), std::nullopt);
    save_probs_csv(dir + "/probs.csv", fp);
    TextureParam fp2 = make_texture_param(kModePix | kModeFc, 13, five_palette(), std::nullopt);
    load_probs_csv(dir + "/probs.csv", fp2);
    CHECK(fp2.latent_probs == fp.latent_probs);
}
