#include "camoforge/clirun.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "camoforge/attack.hpp"
#include "camoforge/camotex.hpp"
#include "camoforge/detectors.hpp"
#include "camoforge/errors.hpp"
#include "camoforge/evalmetrics.hpp"
#include "camoforge/imageio.hpp"
#include "camoforge/meshgeom.hpp"
#include "camoforge/overheadrender.hpp"
#include "camoforge/runio.hpp"

namespace camoforge::cli {

namespace fs = std::filesystem;

namespace {

std::string now_utc() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Resolves one option with flags > config file > defaults precedence and
// records the effective value for the run manifest.
class Picker {
public:
    Picker(const CLI::App& sub, const Config* file) : sub_(sub), file_(file) {}

    std::string str(const std::string& key, const std::string& bound) {
        std::string v = bound;
        if (!given(key) && file_) v = cfg_string(*file_, key, bound);
        resolved[key] = v;
        return v;
    }
    int64_t num(const std::string& key, int64_t bound) {
        int64_t v = bound;
        if (!given(key) && file_) v = cfg_int(*file_, key, bound);
        resolved[key] = std::to_string(v);
        return v;
    }
    double real(const std::string& key, double bound) {
        double v = bound;
        if (!given(key) && file_) v = cfg_double(*file_, key, bound);
        resolved[key] = format_double(v);
        return v;
    }
    uint64_t seed(const std::string& key, uint64_t bound) {
        uint64_t v = bound;
        if (!given(key) && file_ && file_->count(key)) {
            try {
                v = std::stoull(file_->at(key));
            } catch (const std::exception&) {
                throw UsageError("config key " + key + " is not a valid seed");
            }
        }
        resolved[key] = std::to_string(v);
        return v;
    }
    bool flag(const std::string& key, bool bound) {
        bool v = bound;
        if (!given(key) && file_) v = cfg_bool(*file_, key, bound);
        resolved[key] = v ? "true" : "false";
        return v;
    }

    Config resolved;

private:
    bool given(const std::string& key) const { return sub_.count("--" + key) > 0; }
    const CLI::App& sub_;
    const Config* file_;
};

std::optional<Config> load_optional_config(const std::string& path) {
    if (path.empty()) return std::nullopt;
    return load_config(path);
}

std::string config_digest(const Config& cfg) { return sha256_hex(serialize_config(cfg)); }

std::string make_run_id(const std::string& command, const Config& cfg) {
    return command + "-" + config_digest(cfg).substr(0, 12);
}

std::string resolve_out_dir(const std::string& explicit_out, const std::string& run_id) {
    if (!explicit_out.empty()) return explicit_out;
    return (fs::path(resolve_home("")) / "runs" / run_id).string();
}

struct RunContext {
    std::string command;
    std::string run_id;
    std::string out_dir;
    Config resolved;
    uint64_t master_seed = 0;
    std::string started;
    std::vector<std::pair<std::string, std::string>> inputs;  // label -> digest
    std::vector<std::string> outputs;                         // out_dir-relative
};

RunContext begin_run(const std::string& command, Picker& picker, const std::string& out_flag,
                     uint64_t master_seed) {
    RunContext ctx;
    ctx.command = command;
    ctx.resolved = picker.resolved;
    ctx.run_id = make_run_id(command, ctx.resolved);
    ctx.out_dir = resolve_out_dir(out_flag, ctx.run_id);
    ctx.master_seed = master_seed;
    ctx.started = now_utc();
    fs::create_directories(ctx.out_dir);
    return ctx;
}

void finish_run(RunContext& ctx) {
    nlohmann::json j;
    j["run_id"] = ctx.run_id;
    j["command"] = ctx.command;
    j["version"] = kVersion;
    j["master_seed"] = ctx.master_seed;
    j["config_digest"] = config_digest(ctx.resolved);
    nlohmann::json cfgj = nlohmann::json::object();
    for (const auto& [k, v] : ctx.resolved) cfgj[k] = v;
    j["config"] = cfgj;
    if (ctx.resolved.count("profile")) j["fidelity_profile"] = ctx.resolved.at("profile");
    nlohmann::json in = nlohmann::json::object();
    for (const auto& [label, digest] : ctx.inputs) in[label] = digest;
    j["inputs"] = in;
    nlohmann::json out = nlohmann::json::object();
    for (const auto& rel : ctx.outputs)
        out[rel] = sha256_file((fs::path(ctx.out_dir) / rel).string());
    j["outputs"] = out;
    j["started_utc"] = ctx.started;
    j["finished_utc"] = now_utc();
    write_text_file((fs::path(ctx.out_dir) / "run_manifest.json").string(), j.dump(2) + "\n");
}

// ---- tiny raster chart -----------------------------------------------------

void put_px(ImageU8& img, int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    uint8_t* p = &img.pixels[(static_cast<size_t>(y) * img.width + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
}

void draw_line_px(ImageU8& img, double x0, double y0, double x1, double y1, uint8_t r, uint8_t g,
                  uint8_t b) {
    const int steps = std::max(2, static_cast<int>(2 * std::max(std::abs(x1 - x0),
                                                                std::abs(y1 - y0))));
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        put_px(img, static_cast<int>(std::lround(x0 + t * (x1 - x0))),
               static_cast<int>(std::lround(y0 + t * (y1 - y0))), r, g, b);
    }
}

// 3x5 glyphs for 0-9 '.' '-', row-major bits, MSB = top-left.
int glyph_index(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c == '.') return 10;
    if (c == '-') return 11;
    return -1;
}

void draw_text(ImageU8& img, int x, int y, const std::string& s, int scale) {
    static const uint16_t glyphs[12] = {
        0b111101101101111, 0b010110010010111, 0b111001111100111, 0b111001111001111,
        0b101101111001001, 0b111100111001111, 0b111100111101111, 0b111001001001001,
        0b111101111101111, 0b111101111001111, 0b000000000000010, 0b000000111000000,
    };
    int cx = x;
    for (char c : s) {
        const int gi = glyph_index(c);
        if (gi >= 0)
            for (int row = 0; row < 5; ++row)
                for (int col = 0; col < 3; ++col)
                    if (glyphs[gi] >> (14 - (row * 3 + col)) & 1)
                        for (int dy = 0; dy < scale; ++dy)
                            for (int dx = 0; dx < scale; ++dx)
                                put_px(img, cx + col * scale + dx, y + row * scale + dy, 20, 20,
                                       20);
        cx += 4 * scale;
    }
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

// EASR (y) against practicality ratio (x); the optimal point gets a marker.
void write_curve_plot(const std::string& path,
                      const std::vector<std::array<double, 2>>& pr_easr, int optimal) {
    const int W = 480, H = 360, L = 58, R = 16, T = 16, B = 44;
    ImageU8 img(W, H);
    std::fill(img.pixels.begin(), img.pixels.end(), 255);

    double ymin = 0.0, ymax = 1.0;
    for (const auto& p : pr_easr) {
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double pr) { return L + pr * (W - L - R); };
    auto py = [&](double e) { return (H - B) - (e - ymin) / (ymax - ymin) * (H - T - B); };

    for (double gx = 0.0; gx <= 1.0 + 1e-9; gx += 0.25) {
        draw_line_px(img, px(gx), T, px(gx), H - B, 225, 225, 225);
        draw_text(img, static_cast<int>(px(gx)) - 12, H - B + 8, tick_label(gx), 2);
    }
    for (double gy = std::ceil(ymin * 4) / 4; gy <= ymax + 1e-9; gy += 0.25) {
        draw_line_px(img, L, py(gy), W - R, py(gy), 225, 225, 225);
        draw_text(img, 6, static_cast<int>(py(gy)) - 5, tick_label(gy), 2);
    }
    draw_line_px(img, L, H - B, W - R, H - B, 30, 30, 30);
    draw_line_px(img, L, T, L, H - B, 30, 30, 30);

    std::vector<std::array<double, 2>> pts = pr_easr;
    std::vector<int> order(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return pts[a][0] < pts[b][0]; });
    for (size_t i = 1; i < order.size(); ++i)
        draw_line_px(img, px(pts[order[i - 1]][0]), py(pts[order[i - 1]][1]),
                     px(pts[order[i]][0]), py(pts[order[i]][1]), 40, 90, 200);
    for (const auto& p : pts)
        for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx)
                put_px(img, static_cast<int>(px(p[0])) + dx, static_cast<int>(py(p[1])) + dy, 40,
                       90, 200);
    if (optimal >= 0 && optimal < static_cast<int>(pts.size()))
        for (int d = -5; d <= 5; ++d) {
            put_px(img, static_cast<int>(px(pts[optimal][0])) + d,
                   static_cast<int>(py(pts[optimal][1])) - 5, 200, 60, 40);
            put_px(img, static_cast<int>(px(pts[optimal][0])) + d,
                   static_cast<int>(py(pts[optimal][1])) + 5, 200, 60, 40);
            put_px(img, static_cast<int>(px(pts[optimal][0])) - 5,
                   static_cast<int>(py(pts[optimal][1])) + d, 200, 60, 40);
            put_px(img, static_cast<int>(px(pts[optimal][0])) + 5,
                   static_cast<int>(py(pts[optimal][1])) + d, 200, 60, 40);
        }
    write_png(path, img);
}

// ---- shared world construction ----------------------------------------------

struct World {
    render::BackgroundProvider bgs;
    std::vector<render::MeshEntry> pool;
};

World make_world(uint64_t seed, int image_size, int n_backgrounds) {
    return {render::BackgroundProvider(seed, image_size, n_backgrounds),
            render::make_mesh_pool(seed)};
}

std::string attack_label(attack::AttackMode mode, unsigned flags) {
    switch (mode) {
        case attack::AttackMode::texture: return "T-" + camotex::mode_string(flags);
        case attack::AttackMode::shape: return "S-O";
        default: return "C-" + camotex::mode_string(flags);
    }
}

// ---- generate-data ----------------------------------------------------------

struct GenerateOpts {
    std::string out, config;
    int n_images = 100;
    uint64_t seed = 1;
    double empty_fraction = 0.3;
    double noise_fraction = 0.15;
    std::string profile = "train";
    int image_size = 384;
    int min_vehicles = 1, max_vehicles = 5;
    int backgrounds = 8;
    int jobs = 1;
};

int cmd_generate(const CLI::App& sub, GenerateOpts& o) {
    auto file = load_optional_config(o.config);
    Picker p(sub, file ? &*file : nullptr);
    const int n_images = static_cast<int>(p.num("n-images", o.n_images));
    const uint64_t seed = p.seed("seed", o.seed);
    const double empty_fraction = p.real("empty-fraction", o.empty_fraction);
    const double noise_fraction = p.real("noise-fraction", o.noise_fraction);
    const std::string profile = p.str("profile", o.profile);
    const int image_size = static_cast<int>(p.num("image-size", o.image_size));
    const int min_vehicles = static_cast<int>(p.num("min-vehicles", o.min_vehicles));
    const int max_vehicles = static_cast<int>(p.num("max-vehicles", o.max_vehicles));
    const int backgrounds = static_cast<int>(p.num("backgrounds", o.backgrounds));
    const int jobs = static_cast<int>(p.num("jobs", o.jobs));

    RunContext ctx = begin_run("generate-data", p, o.out, seed);
    World world = make_world(seed, image_size, backgrounds);

    render::DatasetConfig dcfg;
    dcfg.out_dir = ctx.out_dir;
    dcfg.n_images = n_images;
    dcfg.seed = seed;
    dcfg.empty_fraction = empty_fraction;
    dcfg.noise_texture_fraction = noise_fraction;
    dcfg.image_size = image_size;
    dcfg.profile = render::parse_profile(profile);
    dcfg.min_vehicles = min_vehicles;
    dcfg.max_vehicles = max_vehicles;
    dcfg.jobs = jobs;
    std::vector<render::DatasetRecord> records = render::generate_dataset(dcfg, world.bgs,
                                                                          world.pool);
    ctx.outputs.push_back("manifest.jsonl");
    for (const auto& rec : records) ctx.outputs.push_back(rec.path);
    finish_run(ctx);
    std::cout << "wrote " << records.size() << " images to " << ctx.out_dir << "\n";
    return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainOpts {
    std::string out, config, dataset;
    std::string arch = "cnnA";
    int epochs = 2;
    int batch = 8;
    uint64_t seed = 1;
    double val_fraction = 0.2;
};

int cmd_train(const CLI::App& sub, TrainOpts& o) {
    auto file = load_optional_config(o.config);
    Picker p(sub, file ? &*file : nullptr);
    const std::string dataset = p.str("dataset", o.dataset);
    const std::string arch = p.str("arch", o.arch);
    const int epochs = static_cast<int>(p.num("epochs", o.epochs));
    const int batch = static_cast<int>(p.num("batch", o.batch));
    const uint64_t seed = p.seed("seed", o.seed);
    const double val_fraction = p.real("val-fraction", o.val_fraction);
    if (dataset.empty()) throw UsageError("--dataset is required");
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw UsageError("val-fraction must lie in (0,1)");

    std::vector<render::DatasetRecord> records = render::load_manifest(dataset);
    std::vector<detectors::LabeledImage> images;
    images.reserve(records.size());
    for (const auto& rec : records) images.push_back(render::load_labeled_image(dataset, rec));
    const size_t n_val = std::max<size_t>(1, std::llround(val_fraction * images.size()));
    if (n_val >= images.size()) throw UsageError("dataset too small for the validation split");
    std::vector<detectors::LabeledImage> val(images.end() - n_val, images.end());
    images.resize(images.size() - n_val);

    RunContext ctx = begin_run("train", p, o.out, seed);
    ctx.inputs.push_back(
        {"dataset/manifest.jsonl", sha256_file((fs::path(dataset) / "manifest.jsonl").string())});

    detectors::DetectorSpec spec = detectors::make_detector(arch, seed);
    detectors::TrainResult tr = detectors::train_detector(spec, images, epochs, batch, seed);
    const double threshold = detectors::calibrate_threshold(spec, val);

    detectors::DetectorSpec loose = spec;
    loose.threshold = 0.0;
    std::vector<detectors::DetectionSet> det_sets;
    std::vector<std::vector<std::array<double, 2>>> gt_sets;
    for (const auto& img : val) {
        det_sets.push_back(detectors::detect(loose, img.pixels, img.size));
        gt_sets.push_back(img.centers);
    }
    const double ap =
        detectors::average_precision(det_sets, gt_sets, detectors::kDefaultMatchRadius);

    detectors::save_weights((fs::path(ctx.out_dir) / "weights.bin").string(), spec);
    std::string csv = csv_row({"arch", "n_train", "n_val", "epochs", "final_loss", "threshold",
                               "ap"});
    csv += csv_row({arch, std::to_string(images.size()), std::to_string(val.size()),
                    std::to_string(epochs),
                    format_double(tr.epoch_losses.empty() ? 0.0 : tr.epoch_losses.back()),
                    format_double(threshold), format_double(ap)});
    write_text_file((fs::path(ctx.out_dir) / "eval.csv").string(), csv);
    ctx.outputs.push_back("weights.bin");
    ctx.outputs.push_back("eval.csv");
    finish_run(ctx);
    std::cout << "trained " << arch << ": threshold " << format_double(threshold) << ", ap "
              << format_double(ap) << "\n";
    return 0;
}

// ---- attack -------------------------------------------------------------------

struct AttackOpts {
    std::string out, config;
    std::vector<std::string> detectors;
    std::string mode = "texture";
    bool pix = false, ma = false, lc = false, fc = false;
    double pm = 0.05;
    int n_pll = 25;
    double tau = camotex::kDefaultTau;
    int epochs = 2;
    int batch = 8;
    double lr_texture = 0.01;
    double lr_shape = 0.005;
    int pool_size = 1000;
    uint64_t seed = 1;
    int image_size = 384;
    std::string profile = "train";
    int backgrounds = 8;
    int min_vehicles = 1, max_vehicles = 5;
    int palette_size = camotex::kDefaultPaletteSize;
    std::string sweep;
    int eval_scenes = 50;
    uint64_t eval_seed = 2027;
    int jobs = 1;
};

std::vector<detectors::DetectorSpec> load_ensemble(const std::vector<std::string>& paths,
                                                   RunContext& ctx) {
    if (paths.empty()) throw UsageError("--detectors requires at least one weights file");
    std::vector<detectors::DetectorSpec> ensemble;
    for (const auto& path : paths) {
        ensemble.push_back(detectors::load_weights(path));
        ctx.inputs.push_back({"detector/" + fs::path(path).filename().string(),
                              sha256_file(path)});
    }
    return ensemble;
}

std::vector<double> parse_grid(const std::string& s) {
    std::vector<double> grid;
    size_t start = 0;
    while (start <= s.size() && !s.empty()) {
        size_t end = s.find(',', start);
        if (end == std::string::npos) end = s.size();
        const std::string tok = s.substr(start, end - start);
        if (!tok.empty()) {
            try {
                grid.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw UsageError("bad sweep grid value: " + tok);
            }
        }
        start = end + 1;
        if (end == s.size()) break;
    }
    return grid;
}

std::vector<std::string> write_attack_artifacts(const std::string& dir,
                                                const attack::AttackConfig& acfg,
                                                const attack::AttackResult& res,
                                                const std::vector<render::MeshEntry>& pool) {
    std::vector<std::string> written;
    fs::create_directories(dir);
    render::Appearance app = attack::make_appearance(acfg, res, pool);
    if (app.texture) {
        camotex::save_texture_png((fs::path(dir) / "texture.png").string(), *app.texture);
        written.push_back("texture.png");
    }
    if (res.has_texture && res.texture.color_restricted()) {
        camotex::save_palette_csv((fs::path(dir) / "palette.csv").string(),
                                  *res.texture.palette);
        written.push_back("palette.csv");
    }
    if (res.has_shape) {
        meshgeom::save_latent_csv((fs::path(dir) / "displacement.csv").string(), res.shape);
        written.push_back("displacement.csv");
    }
    std::string csv = csv_row({"step", "phase", "loss"});
    for (size_t i = 0; i < res.loss_history.size(); ++i)
        csv += csv_row({std::to_string(i), res.phase_log[i], format_double(res.loss_history[i])});
    write_text_file((fs::path(dir) / "loss_history.csv").string(), csv);
    written.push_back("loss_history.csv");
    return written;
}

int cmd_attack(const CLI::App& sub, AttackOpts& o) {
    auto file = load_optional_config(o.config);
    Picker p(sub, file ? &*file : nullptr);
    const std::string mode_str = p.str("mode", o.mode);
    const bool pix = p.flag("pix", o.pix), ma = p.flag("ma", o.ma), lc = p.flag("lc", o.lc),
               fc = p.flag("fc", o.fc);
    attack::AttackConfig acfg;
    acfg.mode = attack::parse_mode(mode_str);
    acfg.constraint_flags = (pix ? camotex::kModePix : 0u) | (ma ? camotex::kModeMa : 0u) |
                            (lc ? camotex::kModeLc : 0u) | (fc ? camotex::kModeFc : 0u);
    acfg.pm = p.real("pm", o.pm);
    acfg.n_pll = static_cast<int>(p.num("n-pll", o.n_pll));
    acfg.tau = p.real("tau", o.tau);
    acfg.epochs = static_cast<int>(p.num("epochs", o.epochs));
    acfg.batch_size = static_cast<int>(p.num("batch", o.batch));
    acfg.lr_texture = p.real("lr-texture", o.lr_texture);
    acfg.lr_shape = p.real("lr-shape", o.lr_shape);
    acfg.pool_size = static_cast<int>(p.num("pool-size", o.pool_size));
    acfg.seed = p.seed("seed", o.seed);
    acfg.image_size = static_cast<int>(p.num("image-size", o.image_size));
    acfg.profile = render::parse_profile(p.str("profile", o.profile));
    acfg.min_vehicles = static_cast<int>(p.num("min-vehicles", o.min_vehicles));
    acfg.max_vehicles = static_cast<int>(p.num("max-vehicles", o.max_vehicles));
    const int backgrounds = static_cast<int>(p.num("backgrounds", o.backgrounds));
    const int palette_size = static_cast<int>(p.num("palette-size", o.palette_size));
    const std::string sweep_str = p.str("sweep", o.sweep);
    const int eval_scenes = static_cast<int>(p.num("eval-scenes", o.eval_scenes));
    const uint64_t eval_seed = p.seed("eval-seed", o.eval_seed);
    const int jobs = static_cast<int>(p.num("jobs", o.jobs));
    p.resolved["detectors"] = std::to_string(o.detectors.size());
    p.resolved["variant"] = attack_label(acfg.mode, acfg.constraint_flags);

    RunContext ctx = begin_run("attack", p, o.out, acfg.seed);
    std::vector<detectors::DetectorSpec> ensemble = load_ensemble(o.detectors, ctx);
    World world = make_world(acfg.seed, acfg.image_size, backgrounds);
    if (acfg.constraint_flags & (camotex::kModeLc | camotex::kModeFc)) {
        std::vector<ImageU8> tiles;
        for (int i = 0; i < std::min(4, world.bgs.count()); ++i)
            tiles.push_back(planar_to_image(world.bgs.tile(i), world.bgs.size(),
                                            world.bgs.size()));
        acfg.palette = camotex::palette_from_backgrounds(tiles, palette_size);
    }
    attack::validate_config(acfg);

    write_text_file((fs::path(ctx.out_dir) / "attack_config.txt").string(),
                    serialize_config(ctx.resolved));
    ctx.outputs.push_back("attack_config.txt");

    if (sweep_str.empty()) {
        attack::AttackResult res = attack::run_attack(acfg, ensemble, world.bgs, world.pool);
        for (const auto& rel : write_attack_artifacts(ctx.out_dir, acfg, res, world.pool))
            ctx.outputs.push_back(rel);
        std::cout << "attack " << p.resolved["variant"] << ": " << res.steps
                  << " steps, final loss "
                  << format_double(res.loss_history.empty() ? 0.0 : res.loss_history.back())
                  << "\n";
    } else {
        const std::vector<double> grid = parse_grid(sweep_str);
        attack::EvalConfig ecfg;
        ecfg.n_scenes = eval_scenes;
        ecfg.seed = eval_seed;
        ecfg.image_size = acfg.image_size;
        ecfg.profile = acfg.profile;
        ecfg.min_vehicles = acfg.min_vehicles;
        ecfg.max_vehicles = acfg.max_vehicles;
        ecfg.jobs = jobs;
        attack::SweepResult sw =
            attack::sweep_pm(acfg, grid, ensemble, world.bgs, world.pool, ecfg);

        std::vector<std::string> header{"point", "pm", "pr"};
        for (const auto& spec : ensemble) header.push_back("easr_" + spec.arch_id);
        header.insert(header.end(), {"easr_mean", "p1", "optimal"});
        std::string csv = csv_row(header);
        for (size_t i = 0; i < sw.points.size(); ++i) {
            const auto& pt = sw.points[i];
            char name[32];
            std::snprintf(name, sizeof(name), "point_%02zu", i);
            attack::AttackConfig pcfg = acfg;
            pcfg.pm = pt.pm;
            const std::string pdir = (fs::path(ctx.out_dir) / name).string();
            for (const auto& rel : write_attack_artifacts(pdir, pcfg, sw.results[i], world.pool))
                ctx.outputs.push_back(std::string(name) + "/" + rel);
            Config pc;
            pc["pm"] = format_double(pt.pm);
            pc["pr"] = format_double(pt.pr);
            write_text_file((fs::path(pdir) / "point_config.txt").string(),
                            serialize_config(pc));
            ctx.outputs.push_back(std::string(name) + "/point_config.txt");

            std::vector<std::string> cells{std::to_string(i), format_double(pt.pm),
                                           format_double(pt.pr)};
            for (double v : pt.easr)
                cells.push_back(std::isnan(v) ? "NA" : format_double(v));
            cells.push_back(format_double(pt.easr_mean));
            cells.push_back(format_double(pt.p1));
            cells.push_back(static_cast<int>(i) == sw.optimal_index ? "1" : "0");
            csv += csv_row(cells);
        }
        write_text_file((fs::path(ctx.out_dir) / "sweep.csv").string(), csv);
        ctx.outputs.push_back("sweep.csv");
        std::cout << "sweep of " << sw.points.size() << " points, optimal pm "
                  << format_double(sw.points[sw.optimal_index].pm) << "\n";
    }
    finish_run(ctx);
    return 0;
}

// ---- evaluate -------------------------------------------------------------------

struct EvaluateOpts {
    std::string out, config, camouflage;
    std::vector<std::string> detectors;
    int n_scenes = 50;
    uint64_t seed = 2027;
    std::string profile;
    int image_size = 0;
    double match_radius = detectors::kDefaultMatchRadius;
    uint64_t world_seed = 1;
    int backgrounds = 8;
    int min_vehicles = 1, max_vehicles = 5;
    int jobs = 1;
};

struct EvalPoint {
    std::string label;  // attack column value
    std::string variant;
    double pm = 0.0;
    render::Appearance appearance;
};

int cmd_evaluate(const CLI::App& sub, EvaluateOpts& o) {
    auto file = load_optional_config(o.config);
    Picker p(sub, file ? &*file : nullptr);
    const std::string camouflage = p.str("camouflage", o.camouflage);
    const int n_scenes = static_cast<int>(p.num("n-scenes", o.n_scenes));
    const uint64_t seed = p.seed("seed", o.seed);
    const double match_radius = p.real("match-radius", o.match_radius);
    int min_vehicles = static_cast<int>(p.num("min-vehicles", o.min_vehicles));
    int max_vehicles = static_cast<int>(p.num("max-vehicles", o.max_vehicles));
    const int jobs = static_cast<int>(p.num("jobs", o.jobs));

    // World geometry defaults come from the camouflage artifact when present.
    Config art;
    if (!camouflage.empty())
        art = load_config((fs::path(camouflage) / "attack_config.txt").string());
    uint64_t world_seed = p.seed("world-seed", o.world_seed);
    if (!sub.count("--world-seed") && art.count("seed"))
        world_seed = static_cast<uint64_t>(cfg_int(art, "seed", 1));
    int image_size = static_cast<int>(p.num("image-size", o.image_size));
    if (!sub.count("--image-size"))
        image_size = static_cast<int>(cfg_int(art, "image-size", 384));
    if (image_size == 0) image_size = 384;
    int backgrounds = static_cast<int>(p.num("backgrounds", o.backgrounds));
    if (!sub.count("--backgrounds"))
        backgrounds = static_cast<int>(cfg_int(art, "backgrounds", 8));
    std::string profile = p.str("profile", o.profile);
    if (profile.empty()) profile = cfg_string(art, "profile", "train");
    if (!sub.count("--min-vehicles"))
        min_vehicles = static_cast<int>(cfg_int(art, "min-vehicles", min_vehicles));
    if (!sub.count("--max-vehicles"))
        max_vehicles = static_cast<int>(cfg_int(art, "max-vehicles", max_vehicles));
    p.resolved["world-seed"] = std::to_string(world_seed);
    p.resolved["image-size"] = std::to_string(image_size);
    p.resolved["backgrounds"] = std::to_string(backgrounds);
    p.resolved["profile"] = profile;
    p.resolved["min-vehicles"] = std::to_string(min_vehicles);
    p.resolved["max-vehicles"] = std::to_string(max_vehicles);

    RunContext ctx = begin_run("evaluate", p, o.out, seed);
    std::vector<detectors::DetectorSpec> ensemble = load_ensemble(o.detectors, ctx);
    World world = make_world(world_seed, image_size, backgrounds);

    // Collect evaluation points: sweep artifact, single artifact, or identity.
    std::vector<EvalPoint> points;
    if (camouflage.empty()) {
        EvalPoint pt;
        pt.label = "identity";
        pt.variant = "U";
        points.push_back(std::move(pt));
    } else {
        const std::string variant = cfg_string(art, "variant", "T-U");
        auto load_point = [&](const fs::path& dir, double pm) {
            EvalPoint pt;
            pt.label = variant;
            pt.variant = variant;
            pt.pm = pm;
            const fs::path tex = dir / "texture.png";
            if (fs::exists(tex)) pt.appearance.texture = camotex::load_texture_png(tex.string());
            const fs::path disp = dir / "displacement.csv";
            if (fs::exists(disp) && pm > 0.0) {
                meshgeom::DisplacementField field =
                    meshgeom::load_latent_csv(disp.string(), pm);
                for (const auto& e : world.pool)
                    pt.appearance.displaced.push_back(
                        meshgeom::apply_displacement(e.mesh, field, e.topo));
            }
            ctx.inputs.push_back({"camouflage/" + dir.filename().string(),
                                  fs::exists(tex) ? sha256_file(tex.string()) : "none"});
            return pt;
        };
        if (fs::exists(fs::path(camouflage) / "sweep.csv")) {
            std::vector<fs::path> dirs;
            for (const auto& entry : fs::directory_iterator(camouflage))
                if (entry.is_directory() &&
                    entry.path().filename().string().rfind("point_", 0) == 0)
                    dirs.push_back(entry.path());
            std::sort(dirs.begin(), dirs.end());
            if (dirs.empty()) throw IoError("sweep artifact has no point directories");
            for (const auto& dir : dirs) {
                Config pc = load_config((dir / "point_config.txt").string());
                points.push_back(load_point(dir, cfg_double(pc, "pm", 0.0)));
            }
        } else {
            points.push_back(load_point(camouflage, cfg_double(art, "pm", 0.0)));
        }
    }

    attack::EvalConfig ecfg;
    ecfg.n_scenes = n_scenes;
    ecfg.seed = seed;
    ecfg.image_size = image_size;
    ecfg.profile = render::parse_profile(profile);
    ecfg.min_vehicles = min_vehicles;
    ecfg.max_vehicles = max_vehicles;
    ecfg.match_radius = match_radius;
    ecfg.jobs = jobs;

    std::string metrics = evalmetrics::metrics_csv_header();
    std::vector<std::array<double, 2>> curve;  // pr, easr_mean
    std::vector<double> p1s;
    for (const auto& pt : points) {
        std::vector<attack::DetectorEval> evals =
            attack::evaluate_camouflage(ecfg, ensemble, world.bgs, world.pool, pt.appearance);
        double sum = 0.0, ap_or_sum = 0.0, ap_adv_sum = 0.0, asr_sum = 0.0, er_sum = 0.0;
        int defined = 0;
        for (const auto& ev : evals) {
            evalmetrics::MetricsRow row;
            row.run_id = ctx.run_id;
            row.attack = pt.label;
            row.constraint_flags = pt.variant.size() > 2 ? pt.variant.substr(2) : pt.variant;
            row.pm = pt.pm;
            row.pr = 1.0 - pt.pm;
            row.detector = ev.arch_id;
            row.ap_or = ev.ap_or;
            row.ap_adv = ev.ap_adv;
            row.apd = evalmetrics::apd(ev.ap_or, ev.ap_adv);
            ap_or_sum += ev.ap_or;
            ap_adv_sum += ev.ap_adv;
            try {
                evalmetrics::EasrResult er = evalmetrics::easr(ev.outcomes);
                row.asr = er.asr;
                row.er = er.er;
                row.easr = er.easr;
                row.p1 = evalmetrics::p1_score(er.easr, row.pr);
                sum += er.easr;
                asr_sum += er.asr;
                er_sum += er.er;
                ++defined;
            } catch (const UndefinedMetricError&) {
                row.easr_defined = false;
            }
            metrics += evalmetrics::metrics_csv_row(row);
        }
        evalmetrics::MetricsRow mean;
        mean.run_id = ctx.run_id;
        mean.attack = pt.label;
        mean.constraint_flags = pt.variant.size() > 2 ? pt.variant.substr(2) : pt.variant;
        mean.pm = pt.pm;
        mean.pr = 1.0 - pt.pm;
        mean.detector = "mean";
        mean.easr_defined = defined > 0;
        mean.ap_or = ap_or_sum / evals.size();
        mean.ap_adv = ap_adv_sum / evals.size();
        mean.apd = evalmetrics::apd(mean.ap_or, mean.ap_adv);
        if (defined) {
            mean.asr = asr_sum / defined;
            mean.er = er_sum / defined;
            mean.easr = sum / defined;
            mean.p1 = evalmetrics::p1_score(mean.easr, mean.pr);
        }
        metrics += evalmetrics::metrics_csv_row(mean);
        curve.push_back({mean.pr, mean.easr});
        p1s.push_back(defined ? mean.p1 : 0.0);
    }

    int optimal = 0;
    for (size_t i = 1; i < p1s.size(); ++i)
        if (p1s[i] > p1s[optimal] + 1e-12 ||
            (std::abs(p1s[i] - p1s[optimal]) <= 1e-12 && curve[i][0] > curve[optimal][0]))
            optimal = static_cast<int>(i);

    write_text_file((fs::path(ctx.out_dir) / "metrics.csv").string(), metrics);
    ctx.outputs.push_back("metrics.csv");
    std::string curve_csv = csv_row({"pm", "pr", "easr_mean", "p1", "optimal"});
    for (size_t i = 0; i < points.size(); ++i)
        curve_csv += csv_row({format_double(points[i].pm), format_double(curve[i][0]),
                              format_double(curve[i][1]), format_double(p1s[i]),
                              static_cast<int>(i) == optimal ? "1" : "0"});
    write_text_file((fs::path(ctx.out_dir) / "curve.csv").string(), curve_csv);
    ctx.outputs.push_back("curve.csv");
    write_curve_plot((fs::path(ctx.out_dir) / "easr_vs_pr.png").string(), curve, optimal);
    ctx.outputs.push_back("easr_vs_pr.png");
    write_text_file((fs::path(ctx.out_dir) / "practicality.md").string(),
                    evalmetrics::practicality_table_markdown());
    ctx.outputs.push_back("practicality.md");
    finish_run(ctx);
    std::cout << "evaluated " << points.size() << " point(s) over " << n_scenes << " scenes\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"adversarial camouflage toolkit for overhead vehicle detection"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    GenerateOpts g;
    CLI::App* gen = app.add_subcommand("generate-data", "render a labeled synthetic dataset");
    gen->add_option("--out", g.out, "output directory");
    gen->add_option("--config", g.config, "flat key=value config file");
    gen->add_option("--n-images", g.n_images, "number of images");
    gen->add_option("--seed", g.seed, "master seed");
    gen->add_option("--empty-fraction", g.empty_fraction, "fraction of empty scenes");
    gen->add_option("--noise-fraction", g.noise_fraction,
                    "per-vehicle probability of a noise texture");
    gen->add_option("--profile", g.profile, "fidelity profile: train|transfer");
    gen->add_option("--image-size", g.image_size, "square image size in pixels");
    gen->add_option("--min-vehicles", g.min_vehicles, "minimum vehicles per scene");
    gen->add_option("--max-vehicles", g.max_vehicles, "maximum vehicles per scene");
    gen->add_option("--backgrounds", g.backgrounds, "number of background tiles");
    gen->add_option("--jobs", g.jobs, "parallel render workers");

    TrainOpts t;
    CLI::App* train = app.add_subcommand("train", "train a detector on a dataset");
    train->add_option("--out", t.out, "output directory");
    train->add_option("--config", t.config, "flat key=value config file");
    train->add_option("--dataset", t.dataset, "dataset directory");
    train->add_option("--arch", t.arch, "detector architecture: cnnA|cnnB|cnnC");
    train->add_option("--epochs", t.epochs, "training epochs");
    train->add_option("--batch", t.batch, "batch size");
    train->add_option("--seed", t.seed, "master seed");
    train->add_option("--val-fraction", t.val_fraction, "tail fraction held out for calibration");

    AttackOpts a;
    CLI::App* atk = app.add_subcommand("attack", "optimize a camouflage against detectors");
    atk->add_option("--out", a.out, "output directory");
    atk->add_option("--config", a.config, "flat key=value config file");
    atk->add_option("--detectors", a.detectors, "detector weight files")->expected(-1);
    atk->add_option("--mode", a.mode, "texture|shape|combined-seq|combined-par");
    atk->add_flag("--pix", a.pix, "pixelated texture constraint");
    atk->add_flag("--ma", a.ma, "paint-mask constraint");
    atk->add_flag("--lc", a.lc, "learned palette constraint");
    atk->add_flag("--fc", a.fc, "fixed palette constraint");
    atk->add_option("--pm", a.pm, "deformation budget in [0,1]");
    atk->add_option("--n-pll", a.n_pll, "steps per block in the parallel mode");
    atk->add_option("--tau", a.tau, "color-field sharpening temperature");
    atk->add_option("--epochs", a.epochs, "optimization epochs");
    atk->add_option("--batch", a.batch, "scenes per step");
    atk->add_option("--lr-texture", a.lr_texture, "texture learning rate");
    atk->add_option("--lr-shape", a.lr_shape, "shape learning rate");
    atk->add_option("--pool-size", a.pool_size, "scenes per epoch");
    atk->add_option("--seed", a.seed, "master seed");
    atk->add_option("--image-size", a.image_size, "render size in pixels");
    atk->add_option("--profile", a.profile, "fidelity profile: train|transfer");
    atk->add_option("--backgrounds", a.backgrounds, "number of background tiles");
    atk->add_option("--min-vehicles", a.min_vehicles, "minimum vehicles per scene");
    atk->add_option("--max-vehicles", a.max_vehicles, "maximum vehicles per scene");
    atk->add_option("--palette-size", a.palette_size, "palette colors for Lc/Fc");
    atk->add_option("--sweep", a.sweep, "comma-separated pm grid; runs a sweep");
    atk->add_option("--eval-scenes", a.eval_scenes, "scenes per sweep-point evaluation");
    atk->add_option("--eval-seed", a.eval_seed, "seed for sweep-point evaluation");
    atk->add_option("--jobs", a.jobs, "parallel evaluation workers");

    EvaluateOpts e;
    CLI::App* ev = app.add_subcommand("evaluate", "score a camouflage artifact");
    ev->add_option("--out", e.out, "output directory");
    ev->add_option("--config", e.config, "flat key=value config file");
    ev->add_option("--camouflage", e.camouflage, "attack artifact directory (omit for identity)");
    ev->add_option("--detectors", e.detectors, "detector weight files")->expected(-1);
    ev->add_option("--n-scenes", e.n_scenes, "matched scene pairs");
    ev->add_option("--seed", e.seed, "scene sampling seed");
    ev->add_option("--profile", e.profile, "fidelity profile override");
    ev->add_option("--image-size", e.image_size, "render size override");
    ev->add_option("--match-radius", e.match_radius, "center match radius in pixels");
    ev->add_option("--world-seed", e.world_seed, "mesh/background seed for identity runs");
    ev->add_option("--backgrounds", e.backgrounds, "background tiles for identity runs");
    ev->add_option("--min-vehicles", e.min_vehicles, "minimum vehicles per scene");
    ev->add_option("--max-vehicles", e.max_vehicles, "maximum vehicles per scene");
    ev->add_option("--jobs", e.jobs, "parallel evaluation workers");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& ex) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForVersion& ex) {
        std::cout << kVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& ex) {
        std::cerr << "usage error: " << ex.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(*gen, g);
        if (train->parsed()) return cmd_train(*train, t);
        if (atk->parsed()) return cmd_attack(*atk, a);
        if (ev->parsed()) return cmd_evaluate(*ev, e);
        throw UsageError("no subcommand given");
    } catch (const UsageError& ex) {
        std::cerr << "usage error: " << ex.what() << "\n";
        return 2;
    } catch (const ParameterError& ex) {
        std::cerr << "usage error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace camoforge::cli
