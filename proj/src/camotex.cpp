#include "camoforge/camotex.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "camoforge/errors.hpp"
#include "camoforge/meshgeom.hpp"
#include "camoforge/rng.hpp"
#include "camoforge/runio.hpp"

namespace camoforge::camotex {

namespace {

double hash_noise(uint64_t key) { return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53; }

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

void validate_palette(const Palette& p) {
    if (p.size() < 2) throw ParameterError("palette needs at least 2 colors");
    for (const auto& c : p.colors)
        for (double v : c)
            if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("palette color outside [0,1]");
    for (int i = 0; i < p.size(); ++i)
        for (int j = i + 1; j < p.size(); ++j) {
            double d2 = 0.0;
            for (int k = 0; k < 3; ++k) {
                double d = p.colors[i][k] - p.colors[j][k];
                d2 += d * d;
            }
            if (std::sqrt(d2) <= 1e-6)
                throw ParameterError("palette colors " + std::to_string(i) + " and " +
                                     std::to_string(j) + " are not distinct");
        }
}

std::string mode_string(unsigned flags) {
    std::string s;
    if (flags & kModePix) s += "Pix";
    if (flags & kModeLc) s += "Lc";
    if (flags & kModeFc) s += "Fc";
    if (flags & kModeMa) s += "Ma";
    return s.empty() ? "U" : s;
}

unsigned parse_mode_string(const std::string& str) {
    if (str == "U" || str.empty()) return 0;
    unsigned flags = 0;
    size_t i = 0;
    while (i < str.size()) {
        if (str.compare(i, 3, "Pix") == 0) {
            flags |= kModePix;
            i += 3;
        } else if (str.compare(i, 2, "Lc") == 0) {
            flags |= kModeLc;
            i += 2;
        } else if (str.compare(i, 2, "Fc") == 0) {
            flags |= kModeFc;
            i += 2;
        } else if (str.compare(i, 2, "Ma") == 0) {
            flags |= kModeMa;
            i += 2;
        } else {
            throw ParameterError("unknown texture mode string: " + str);
        }
    }
    return flags;
}

void validate(const TextureParam& p) {
    if ((p.flags & kModeLc) && (p.flags & kModeFc))
        throw ContractError("Lc and Fc are mutually exclusive");
    const int n = p.latent_size();
    const size_t cells = static_cast<size_t>(n) * n;
    if (p.color_restricted()) {
        if (!p.palette) throw ContractError("color-restricted texture needs a palette");
        validate_palette(*p.palette);
        const size_t N = static_cast<size_t>(p.palette->size());
        if (p.latent_probs.size() != cells * N)
            throw ContractError("latent_probs must hold " + std::to_string(cells) + "x" +
                                std::to_string(N) + " entries");
        for (size_t r = 0; r < cells; ++r) {
            double s = 0.0;
            for (size_t k = 0; k < N; ++k) s += p.latent_probs[r * N + k];
            if (std::abs(s - 1.0) > 1e-6)
                throw ContractError("latent_probs row " + std::to_string(r) +
                                    " does not sum to 1");
        }
    } else {
        if (p.latent_rgb.size() != 3 * cells)
            throw ContractError("latent_rgb must be 3x" + std::to_string(n) + "x" +
                                std::to_string(n));
    }
    const bool ma = p.flags & kModeMa;
    if (ma != !p.mask.empty() || ma != p.original.has_value())
        throw ContractError("mask and original texture must be present exactly when Ma is set");
    if (ma) {
        if (p.mask.size() != static_cast<size_t>(kTexSize) * kTexSize)
            throw ContractError("mask must be 512x512");
        for (uint8_t m : p.mask)
            if (m > 1) throw ContractError("mask must be binary");
        if (p.original->size != kTexSize) throw ContractError("original texture must be 512x512");
    }
}

TextureParam make_texture_param(unsigned flags, uint64_t seed,
                                const std::optional<Palette>& palette,
                                const std::optional<TextureMap>& original) {
    TextureParam p;
    p.flags = flags;
    Rng rng(splitmix64(seed ^ 0xc2f1d5a8e3ULL));
    const int n = p.latent_size();
    const size_t cells = static_cast<size_t>(n) * n;
    if (p.color_restricted()) {
        if (!palette) throw ContractError("color-restricted texture needs a palette");
        p.palette = palette;
        const size_t N = static_cast<size_t>(palette->size());
        p.latent_probs.resize(cells * N);
        for (double& v : p.latent_probs) v = 0.1 * rng.uniform(-1.0, 1.0);
        renormalize_probs(p);
    } else {
        p.latent_rgb.resize(3 * cells);
        for (double& v : p.latent_rgb) v = rng.uniform(0.0, 1.0);
    }
    if (flags & kModeMa) {
        if (!original) throw ContractError("Ma mode needs the original texture");
        p.original = original;
        p.mask = default_paint_mask();
    }
    validate(p);
    return p;
}

TextureLeaves make_texture_leaves(const TextureParam& p) {
    validate(p);
    TextureLeaves leaves;
    const int n = p.latent_size();
    if (p.color_restricted()) {
        const int rows = n * n;
        const int N = p.palette->size();
        leaves.latent_probs = diffmath::make_leaf({rows, N}, p.latent_probs);
        std::vector<double> pal(static_cast<size_t>(N) * 3);
        for (int k = 0; k < N; ++k)
            for (int c = 0; c < 3; ++c) pal[static_cast<size_t>(k) * 3 + c] = p.palette->colors[k][c];
        leaves.palette = diffmath::make_leaf({N, 3}, pal);
        leaves.palette->requires_grad = (p.flags & kModeLc) != 0;
    } else {
        leaves.latent_rgb = diffmath::make_leaf({3, n, n}, p.latent_rgb);
    }
    return leaves;
}

void write_back(TextureParam& p, const TextureLeaves& leaves) {
    if (p.color_restricted()) {
        p.latent_probs = leaves.latent_probs->value;
        if (p.flags & kModeLc) {
            const int N = p.palette->size();
            for (int k = 0; k < N; ++k)
                for (int c = 0; c < 3; ++c)
                    p.palette->colors[k][c] = leaves.palette->value[static_cast<size_t>(k) * 3 + c];
        }
    } else {
        p.latent_rgb = leaves.latent_rgb->value;
    }
}

diffmath::Tensor compose_texture_graph(diffmath::Tape& tape, const TextureParam& p,
                                       const TextureLeaves& leaves, double tau) {
    using namespace diffmath;
    validate(p);
    const int n = p.latent_size();
    Tensor x;
    if (p.color_restricted()) {
        Tensor w = softlike(tape, softlike(tape, leaves.latent_probs, tau), tau);
        Tensor colors = matmul(tape, w, leaves.palette);       // [rows,3]
        x = reshape(tape, transpose2d(tape, colors), {3, n, n});
    } else {
        x = clamp(tape, leaves.latent_rgb, 0.0, 1.0);
    }
    if (p.flags & kModePix) x = upsample_nearest(tape, x, kPixBlock);
    if (p.flags & kModeMa) {
        const size_t plane = static_cast<size_t>(kTexSize) * kTexSize;
        std::vector<double> mask3(3 * plane), keep(3 * plane);
        for (int c = 0; c < 3; ++c)
            for (size_t i = 0; i < plane; ++i) {
                double m = p.mask[i];
                mask3[c * plane + i] = m;
                keep[c * plane + i] = p.original->pixels[c * plane + i] * (1.0 - m);
            }
        x = add_const(tape, mul_const(tape, x, mask3), keep);
    }
    return clamp(tape, x, 0.0, 1.0);
}

TextureMap compose_texture(const TextureParam& p, double tau) {
    diffmath::Tape tape;
    TextureLeaves leaves = make_texture_leaves(p);
    diffmath::Tensor out = compose_texture_graph(tape, p, leaves, tau);
    TextureMap t;
    t.pixels = out->value;
    return t;
}

TextureMap pixelize(const std::vector<double>& latent_rgb) {
    const size_t cells = static_cast<size_t>(kPixLatentSize) * kPixLatentSize;
    if (latent_rgb.size() != 3 * cells)
        throw ContractError("pixelize expects a 3x32x32 latent");
    TextureMap t;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kTexSize; ++y)
            for (int x = 0; x < kTexSize; ++x)
                t.at(c, y, x) = clamp01(
                    latent_rgb[(static_cast<size_t>(c) * kPixLatentSize + y / kPixBlock) *
                                   kPixLatentSize +
                               x / kPixBlock]);
    return t;
}

TextureMap apply_mask(const TextureMap& original, const TextureMap& adversarial,
                      const std::vector<uint8_t>& mask) {
    if (original.size != adversarial.size ||
        mask.size() != static_cast<size_t>(original.size) * original.size)
        throw ContractError("apply_mask: shape mismatch");
    TextureMap out(original.size);
    const size_t plane = mask.size();
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i) {
            double m = mask[i];
            out.pixels[c * plane + i] = original.pixels[c * plane + i] * (1.0 - m) +
                                        adversarial.pixels[c * plane + i] * m;
        }
    return out;
}

TextureMap render_color_field(const TextureParam& p, double tau) {
    if (!p.color_restricted()) throw ContractError("render_color_field needs Lc or Fc");
    TextureParam q = p;            // drop masking: the color field itself
    q.flags &= ~kModeMa;
    q.mask.clear();
    q.original.reset();
    return compose_texture(q, tau);
}

void renormalize_probs(TextureParam& p) {
    if (!p.color_restricted()) throw ContractError("renormalize_probs needs Lc or Fc");
    const int N = p.palette ? p.palette->size() : 0;
    if (N < 2) throw ContractError("renormalize_probs needs a palette");
    const size_t rows = p.latent_probs.size() / N;
    for (size_t r = 0; r < rows; ++r) {
        double* row = &p.latent_probs[r * N];
        double m = row[0];
        for (int k = 1; k < N; ++k) m = std::max(m, row[k]);
        double s = 0.0;
        for (int k = 0; k < N; ++k) {
            row[k] = std::exp(row[k] - m);
            s += row[k];
        }
        for (int k = 0; k < N; ++k) row[k] /= s;
    }
}

TextureMap project_colors(const TextureParam& p) {
    validate(p);
    if (!p.color_restricted()) throw ContractError("project_colors needs Lc or Fc");
    const int n = p.latent_size();
    const int N = p.palette->size();
    TextureMap field(n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double* row = &p.latent_probs[(static_cast<size_t>(y) * n + x) * N];
            int best = 0;
            for (int k = 1; k < N; ++k)
                if (row[k] > row[best]) best = k;
            for (int c = 0; c < 3; ++c) field.at(c, y, x) = p.palette->colors[best][c];
        }
    if (!(p.flags & kModePix)) return field;
    TextureMap out;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kTexSize; ++y)
            for (int x = 0; x < kTexSize; ++x)
                out.at(c, y, x) = field.at(c, y / kPixBlock, x / kPixBlock);
    return out;
}

Palette palette_from_backgrounds(const std::vector<ImageU8>& images, int n_colors) {
    if (n_colors < 2) throw ParameterError("palette needs at least 2 colors");
    std::vector<std::array<double, 3>> px;
    std::set<uint32_t> distinct;
    for (const auto& img : images) {
        const size_t n = static_cast<size_t>(img.width) * img.height;
        for (size_t i = 0; i < n; ++i) {
            const uint8_t* p = &img.pixels[i * 3];
            distinct.insert((static_cast<uint32_t>(p[0]) << 16) |
                            (static_cast<uint32_t>(p[1]) << 8) | p[2]);
            px.push_back({p[0] / 255.0, p[1] / 255.0, p[2] / 255.0});
        }
    }
    if (static_cast<int>(distinct.size()) < n_colors)
        throw DegenerateInputError("only " + std::to_string(distinct.size()) +
                                   " distinct pixel values for " + std::to_string(n_colors) +
                                   " clusters");

    const size_t M = px.size();
    auto dist2 = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
            double d = a[k] - b[k];
            s += d * d;
        }
        return s;
    };

    // k-means++ seeding from a fixed stream, then Lloyd iterations.
    Rng rng(kKmeansSeed);
    std::vector<std::array<double, 3>> centers;
    centers.push_back(px[rng.uniform_int(M)]);
    std::vector<double> d2(M);
    while (static_cast<int>(centers.size()) < n_colors) {
        double total = 0.0;
        for (size_t i = 0; i < M; ++i) {
            double best = dist2(px[i], centers[0]);
            for (size_t c = 1; c < centers.size(); ++c)
                best = std::min(best, dist2(px[i], centers[c]));
            d2[i] = best;
            total += best;
        }
        double target = rng.u01() * total;
        size_t pick = 0;
        double acc = 0.0;
        for (size_t i = 0; i < M; ++i) {
            acc += d2[i];
            if (acc >= target && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        centers.push_back(px[pick]);
    }

    std::vector<int> assign(M, 0);
    for (int iter = 0; iter < 100; ++iter) {
        for (size_t i = 0; i < M; ++i) {
            int best = 0;
            double bd = dist2(px[i], centers[0]);
            for (int c = 1; c < n_colors; ++c) {
                double d = dist2(px[i], centers[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        std::vector<std::array<double, 3>> sums(n_colors, {0.0, 0.0, 0.0});
        std::vector<size_t> counts(n_colors, 0);
        for (size_t i = 0; i < M; ++i) {
            for (int k = 0; k < 3; ++k) sums[assign[i]][k] += px[i][k];
            ++counts[assign[i]];
        }
        double shift = 0.0;
        for (int c = 0; c < n_colors; ++c) {
            std::array<double, 3> next;
            if (counts[c] == 0) {
                // Re-seed an empty cluster at the point farthest from its center.
                size_t far = 0;
                double fd = -1.0;
                for (size_t i = 0; i < M; ++i) {
                    double d = dist2(px[i], centers[assign[i]]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                next = px[far];
            } else {
                for (int k = 0; k < 3; ++k) next[k] = sums[c][k] / counts[c];
            }
            shift = std::max(shift, std::sqrt(dist2(next, centers[c])));
            centers[c] = next;
        }
        if (shift < 1e-6) break;
    }

    std::sort(centers.begin(), centers.end());
    Palette pal;
    pal.colors = centers;
    try {
        validate_palette(pal);
    } catch (const ParameterError& e) {
        throw DegenerateInputError(std::string("k-means produced an invalid palette: ") +
                                   e.what());
    }
    return pal;
}

TextureMap make_original_texture(uint64_t seed) {
    static const std::array<std::array<double, 3>, 6> kBodyColors{{{0.75, 0.75, 0.78},
                                                                   {0.92, 0.92, 0.90},
                                                                   {0.10, 0.10, 0.11},
                                                                   {0.55, 0.08, 0.08},
                                                                   {0.12, 0.20, 0.45},
                                                                   {0.45, 0.45, 0.47}}};
    Rng rng(splitmix64(seed ^ 0xd00dfeedULL));
    const auto body = kBodyColors[rng.uniform_int(kBodyColors.size())];
    TextureMap t;
    for (int y = 0; y < kTexSize; ++y)
        for (int x = 0; x < kTexSize; ++x) {
            double u = (x + 0.5) / kTexSize;
            double v = (y + 0.5) / kTexSize;
            std::array<double, 3> c{0.0, 0.0, 0.0};
            switch (meshgeom::uv_region(u, v)) {
                case meshgeom::Region::body: c = body; break;
                case meshgeom::Region::window: c = {0.10, 0.13, 0.18}; break;
                case meshgeom::Region::light:
                    c = u < 0.5 ? std::array<double, 3>{0.95, 0.95, 0.88}
                                : std::array<double, 3>{0.70, 0.10, 0.10};
                    break;
                case meshgeom::Region::wheel: c = {0.06, 0.06, 0.06}; break;
                case meshgeom::Region::underside: c = {0.15, 0.15, 0.15}; break;
            }
            double noise =
                0.02 * (hash_noise(seed ^ (static_cast<uint64_t>(y) * kTexSize + x)) - 0.5);
            for (int ch = 0; ch < 3; ++ch) t.at(ch, y, x) = clamp01(c[ch] + noise);
        }
    return t;
}

std::vector<uint8_t> default_paint_mask() {
    std::vector<uint8_t> mask(static_cast<size_t>(kTexSize) * kTexSize);
    for (int y = 0; y < kTexSize; ++y)
        for (int x = 0; x < kTexSize; ++x) {
            double u = (x + 0.5) / kTexSize;
            double v = (y + 0.5) / kTexSize;
            mask[static_cast<size_t>(y) * kTexSize + x] =
                meshgeom::uv_region(u, v) == meshgeom::Region::body ? 1 : 0;
        }
    return mask;
}

void save_texture_png(const std::string& path, const TextureMap& t) {
    write_png(path, planar_to_image(t.pixels, t.size, t.size));
}

TextureMap load_texture_png(const std::string& path) {
    ImageU8 img = read_png(path);
    if (img.width != img.height) throw IoError("texture png must be square");
    TextureMap t(img.width);
    t.pixels = image_to_planar(img);
    return t;
}

void save_palette_csv(const std::string& path, const Palette& p) {
    std::string out;
    for (const auto& c : p.colors)
        out += format_double(c[0]) + "," + format_double(c[1]) + "," + format_double(c[2]) + "\n";
    write_text_file(path, out);
}

Palette load_palette_csv(const std::string& path) {
    Palette pal;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::array<double, 3> c;
        std::string cell;
        for (int k = 0; k < 3; ++k) {
            if (!std::getline(ls, cell, ',')) throw IoError("palette csv: expected 3 columns");
            c[k] = std::stod(cell);
        }
        pal.colors.push_back(c);
    }
    validate_palette(pal);
    return pal;
}

void save_probs_csv(const std::string& path, const TextureParam& p) {
    if (!p.color_restricted()) throw ContractError("no latent_probs to save");
    const int N = p.palette->size();
    const size_t rows = p.latent_probs.size() / N;
    std::string out;
    for (size_t r = 0; r < rows; ++r) {
        for (int k = 0; k < N; ++k) {
            if (k) out += ",";
            out += format_double(p.latent_probs[r * N + k]);
        }
        out += "\n";
    }
    write_text_file(path, out);
}

void load_probs_csv(const std::string& path, TextureParam& p) {
    if (!p.color_restricted()) throw ContractError("param is not color-restricted");
    const int N = p.palette->size();
    std::istringstream in(read_text_file(path));
    std::string line;
    std::vector<double> probs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        int k = 0;
        while (std::getline(ls, cell, ',')) {
            probs.push_back(std::stod(cell));
            ++k;
        }
        if (k != N) throw IoError("probs csv: expected " + std::to_string(N) + " columns");
    }
    if (probs.size() != p.latent_probs.size())
        throw IoError("probs csv: row count does not match latent resolution");
    p.latent_probs = std::move(probs);
    validate(p);
}

}  // namespace camoforge::camotex
