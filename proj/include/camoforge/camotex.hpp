#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "camoforge/diffmath.hpp"
#include "camoforge/imageio.hpp"

namespace camoforge::camotex {

constexpr int kTexSize = 512;
constexpr int kPixLatentSize = 32;
constexpr int kPixBlock = kTexSize / kPixLatentSize;  // 16x16 px blocks
constexpr double kDefaultTau = 0.3;
constexpr int kDefaultPaletteSize = 5;
constexpr uint64_t kKmeansSeed = 0x7b0c5e29d1f3a4b6ULL;

// RGB texture, channel-planar [3][H][W] doubles in [0,1].
struct TextureMap {
    int size = kTexSize;
    std::vector<double> pixels;  // 3 * size * size

    TextureMap() : pixels(static_cast<size_t>(3) * kTexSize * kTexSize, 0.0) {}
    explicit TextureMap(int s) : size(s), pixels(static_cast<size_t>(3) * s * s, 0.0) {}
    double& at(int c, int y, int x) {
        return pixels[(static_cast<size_t>(c) * size + y) * size + x];
    }
    double at(int c, int y, int x) const {
        return pixels[(static_cast<size_t>(c) * size + y) * size + x];
    }
};

struct Palette {
    std::vector<std::array<double, 3>> colors;
    int size() const { return static_cast<int>(colors.size()); }
};

// N >= 2, colors pairwise distinct; throws otherwise.
void validate_palette(const Palette& p);

enum TextureMode : unsigned {
    kModePix = 1u << 0,
    kModeMa = 1u << 1,
    kModeLc = 1u << 2,
    kModeFc = 1u << 3,
};
std::string mode_string(unsigned flags);        // e.g. "PixFcMa", "U" when empty
unsigned parse_mode_string(const std::string&); // inverse of the above

// Full parameterization of an adversarial texture.
struct TextureParam {
    unsigned flags = 0;
    // Without color restriction: RGB latent, planar [3][n][n]
    // (n = 32 with Pix, 512 without).
    std::vector<double> latent_rgb;
    // With Lc/Fc: one positive row per latent pixel, N columns, rows sum to 1.
    std::vector<double> latent_probs;
    std::optional<Palette> palette;
    std::vector<uint8_t> mask;              // 512*512 of {0,1}; 1 = paintable
    std::optional<TextureMap> original;     // required with Ma

    int latent_size() const { return (flags & kModePix) ? kPixLatentSize : kTexSize; }
    bool color_restricted() const { return flags & (kModeLc | kModeFc); }
};

// Throws ContractError on inconsistent flag/field combinations.
void validate(const TextureParam& p);

// Fresh parameterization; latents seeded deterministically.
TextureParam make_texture_param(unsigned flags, uint64_t seed,
                                const std::optional<Palette>& palette,
                                const std::optional<TextureMap>& original);

// Leaf tensors for attack optimization over a TextureParam.
struct TextureLeaves {
    diffmath::Tensor latent_rgb;    // [3,n,n] or null
    diffmath::Tensor latent_probs;  // [rows,N] or null
    diffmath::Tensor palette;       // [N,3]; requires_grad only for Lc
};
TextureLeaves make_texture_leaves(const TextureParam& p);
void write_back(TextureParam& p, const TextureLeaves& leaves);

// Differentiable composition pipeline on the given tape:
// color-field (Lc/Fc) or clamped RGB latent -> x16 nearest upscale (Pix)
// -> mask blend with the original (Ma). Returns [3,512,512].
diffmath::Tensor compose_texture_graph(diffmath::Tape& tape, const TextureParam& p,
                                       const TextureLeaves& leaves, double tau);

// Plain (non-tape) versions.
TextureMap compose_texture(const TextureParam& p, double tau);
TextureMap pixelize(const std::vector<double>& latent_rgb);  // [3,32,32] -> 512 map
TextureMap apply_mask(const TextureMap& original, const TextureMap& adversarial,
                      const std::vector<uint8_t>& mask);
TextureMap render_color_field(const TextureParam& p, double tau);

// Softmax each latent_probs row (projection step after a gradient update).
void renormalize_probs(TextureParam& p);

// Non-differentiable argmax projection onto the palette (no masking).
TextureMap project_colors(const TextureParam& p);

// Deterministic k-means(++) palette over all pixels of the given images.
Palette palette_from_backgrounds(const std::vector<ImageU8>& images, int n_colors);

// Procedural vehicle texture / paint mask derived from the UV layout.
TextureMap make_original_texture(uint64_t seed);
std::vector<uint8_t> default_paint_mask();

// Persistence.
void save_texture_png(const std::string& path, const TextureMap& t);
TextureMap load_texture_png(const std::string& path);
void save_palette_csv(const std::string& path, const Palette& p);
Palette load_palette_csv(const std::string& path);
void save_probs_csv(const std::string& path, const TextureParam& p);
void load_probs_csv(const std::string& path, TextureParam& p);

}  // namespace camoforge::camotex
