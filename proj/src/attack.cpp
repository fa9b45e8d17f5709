#include "camoforge/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "camoforge/errors.hpp"

namespace camoforge::attack {

namespace {

using diffmath::Tape;
using diffmath::Tensor;

constexpr double kGradNormFloor = 1e-30;    // guards the direction normalization
constexpr double kPlateauRelTol = 1e-4;     // parallel-mode early stop
constexpr int kPlateauBlocks = 3;

// Restores detector requires_grad flags on scope exit: attack gradients must
// flow into the image only, never into the ensemble weights.
class DetectorFreeze {
public:
    explicit DetectorFreeze(std::vector<detectors::DetectorSpec>& ensemble) {
        for (auto& spec : ensemble)
            for (auto& w : spec.weights) {
                saved_.push_back({w, w->requires_grad});
                w->requires_grad = false;
            }
    }
    ~DetectorFreeze() {
        for (auto& [w, flag] : saved_) w->requires_grad = flag;
    }
    DetectorFreeze(const DetectorFreeze&) = delete;
    DetectorFreeze& operator=(const DetectorFreeze&) = delete;

private:
    std::vector<std::pair<Tensor, bool>> saved_;
};

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Cycling shuffled batches over a fixed scene pool; one cycle = one epoch.
class BatchStream {
public:
    BatchStream(size_t pool, int batch, uint64_t seed)
        : batch_(batch), rng_(splitmix64(seed ^ 0x5a11ad5ULL)) {
        order_.resize(pool);
        for (size_t i = 0; i < pool; ++i) order_[i] = i;
        cursor_ = pool;  // force a shuffle on first use
    }

    std::vector<size_t> next() {
        if (cursor_ >= order_.size()) {
            for (size_t i = order_.size(); i > 1; --i)
                std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
            cursor_ = 0;
        }
        const size_t take = std::min<size_t>(batch_, order_.size() - cursor_);
        std::vector<size_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + take);
        cursor_ += take;
        return out;
    }

    void skip_epochs(int n) {
        for (int e = 0; e < n; ++e) {
            size_t burned = 0;
            while (burned < order_.size()) burned += next().size();
        }
    }

    size_t steps_per_epoch() const { return (order_.size() + batch_ - 1) / batch_; }

private:
    size_t batch_;
    std::vector<size_t> order_;
    size_t cursor_;
    Rng rng_;
};

std::vector<double> flat_vertices(const meshgeom::Mesh& m) {
    std::vector<double> flat;
    flat.reserve(m.vertices.size() * 3);
    for (const auto& v : m.vertices) flat.insert(flat.end(), v.begin(), v.end());
    return flat;
}

// Drives one attack run; owns the scene pool, parameters, and loss history.
class Engine {
public:
    Engine(const AttackConfig& cfg, std::vector<detectors::DetectorSpec>& ensemble,
           const render::BackgroundProvider& bgs, const std::vector<render::MeshEntry>& pool,
           const camotex::TextureParam* pretex)
        : cfg_(cfg),
          ensemble_(ensemble),
          bgs_(bgs),
          pool_(pool),
          rcfg_(render::make_render_config(cfg.image_size, cfg.profile)),
          stream_(cfg.pool_size, cfg.batch_size, cfg.seed) {
        want_texture_ = cfg.mode != AttackMode::shape;
        want_shape_ = cfg.mode != AttackMode::texture;

        Rng scene_rng(splitmix64(cfg.seed ^ 0x5ce9e5ULL));
        render::SceneSampleSpec sspec;
        sspec.n_backgrounds = bgs.count();
        sspec.n_meshes = static_cast<int>(pool.size());
        sspec.min_vehicles = cfg.min_vehicles;
        sspec.max_vehicles = cfg.max_vehicles;
        sspec.image_size = cfg.image_size;
        sspec.profile = cfg.profile;
        scenes_.reserve(cfg.pool_size);
        for (int i = 0; i < cfg.pool_size; ++i) scenes_.push_back(sample_scene(scene_rng, sspec));

        if (want_texture_) {
            std::optional<camotex::TextureMap> original;
            if (cfg.constraint_flags & camotex::kModeMa) original = pool.at(0).original;
            param_ = camotex::make_texture_param(cfg.constraint_flags, cfg.seed, cfg.palette,
                                                 original);
        }
        if (want_shape_) {
            field_ = meshgeom::make_displacement_field(cfg.pm);
            field_leaf_ = diffmath::make_leaf({meshgeom::kLatentSize, meshgeom::kLatentSize},
                                              field_.latent);
        }
        compute_lambdas();
        if (pretex) param_ = *pretex;  // texture stage already run elsewhere
    }

    AttackResult run() {
        const int spe = static_cast<int>(stream_.steps_per_epoch());
        const int phase_steps = cfg_.epochs * spe;
        switch (cfg_.mode) {
            case AttackMode::texture:
                for (int s = 0; s < phase_steps; ++s) texture_step();
                break;
            case AttackMode::shape:
                for (int s = 0; s < phase_steps; ++s) shape_step();
                break;
            case AttackMode::combined_seq:
                for (int s = 0; s < phase_steps; ++s) texture_step();
                refresh_frozen_texture();
                for (int s = 0; s < phase_steps; ++s) shape_step();
                break;
            case AttackMode::combined_par:
                run_parallel(phase_steps);
                break;
        }
        return finish();
    }

    // Sequential shape stage on top of an already-optimized texture; replays
    // the batch stream exactly as the full sequential run would see it.
    AttackResult run_shape_stage_only() {
        stream_.skip_epochs(cfg_.epochs);
        refresh_frozen_texture();
        const int phase_steps = cfg_.epochs * static_cast<int>(stream_.steps_per_epoch());
        for (int s = 0; s < phase_steps; ++s) shape_step();
        return finish();
    }

private:
    // Probes with the initial texture on the undeformed vehicles so the
    // weights are identical across texture-only, staged, and full runs.
    void compute_lambdas() {
        Tensor init_tex;
        if (want_texture_)
            init_tex = diffmath::make_constant(
                {3, camotex::kTexSize, camotex::kTexSize},
                camotex::compose_texture(param_, cfg_.tau).pixels);

        const size_t probe = std::min<size_t>(cfg_.batch_size, scenes_.size());
        std::vector<double> losses(ensemble_.size(), 0.0);
        for (size_t i = 0; i < probe; ++i) {
            Tape tape;
            render::SceneInputs in = render::default_inputs(pool_);
            if (init_tex)
                for (auto& t : in.textures) t = init_tex;
            render::SceneRender r =
                render::render_scene_graph(tape, scenes_[i], pool_, in, bgs_, rcfg_);
            for (size_t d = 0; d < ensemble_.size(); ++d) {
                Tensor logits = detectors::heatmap_logits(tape, ensemble_[d], r.image);
                std::vector<double> zeros(logits->value.size(), 0.0);
                Tensor f = detectors::focal_loss(tape, logits, zeros, 0);
                losses[d] += f->value[0] / probe;
            }
        }
        lambdas_ = balance_lambdas(losses);
    }

    Tensor texture_tensor(Tape& tape, const camotex::TextureLeaves& leaves) {
        return camotex::compose_texture_graph(tape, param_, leaves, cfg_.tau);
    }

    void refresh_frozen_texture() {
        if (!want_texture_) return;
        frozen_tex_ = diffmath::make_constant({3, camotex::kTexSize, camotex::kTexSize},
                                              camotex::compose_texture(param_, cfg_.tau).pixels);
    }

    void refresh_frozen_vertices() {
        if (!want_shape_) return;
        frozen_verts_.clear();
        for (const auto& e : pool_) {
            meshgeom::Mesh d = meshgeom::apply_displacement(e.mesh, field_, e.topo);
            frozen_verts_.push_back(diffmath::make_constant(
                {static_cast<int>(d.vertices.size()), 3}, flat_vertices(d)));
        }
    }

    // Forward + backward for one scene; adds loss value, grads land in leaves.
    double scene_pass(const render::SceneSpec& scene, const render::SceneInputs& in,
                      double inv_batch) {
        render::SceneRender r = render::render_scene_graph(tape_, scene, pool_, in, bgs_, rcfg_);
        Tensor loss = suppression_loss(tape_, ensemble_, lambdas_, r.image);
        loss = diffmath::scale(tape_, loss, inv_batch);
        try {
            tape_.backward(loss);
        } catch (const NumericError& e) {
            throw AttackError(std::string("aborted on non-finite gradients (parameters kept "
                                          "at the last good step): ") +
                              e.what());
        }
        return loss->value[0];
    }

    void texture_step() {
        camotex::TextureLeaves leaves = camotex::make_texture_leaves(param_);
        std::vector<Tensor> active;
        for (const Tensor& t : {leaves.latent_rgb, leaves.latent_probs, leaves.palette})
            if (t && t->requires_grad) active.push_back(t);
        std::vector<std::vector<double>> acc(active.size());
        for (size_t k = 0; k < active.size(); ++k) acc[k].assign(active[k]->value.size(), 0.0);

        const auto batch = stream_.next();
        double step_loss = 0.0;
        for (size_t idx : batch) {
            tape_.clear();
            render::SceneInputs in = render::default_inputs(pool_);
            Tensor tex = texture_tensor(tape_, leaves);
            for (auto& t : in.textures) t = tex;
            // Only the alternating mode co-evolves the shape; the sequential
            // texture stage sees the undeformed vehicle, which is what lets a
            // pm sweep reuse one texture stage across every grid point.
            if (want_shape_ && cfg_.mode == AttackMode::combined_par) {
                if (frozen_verts_.empty()) refresh_frozen_vertices();
                in.vertices = frozen_verts_;
            }
            step_loss += scene_pass(scenes_[idx], in, 1.0 / batch.size());
            for (size_t k = 0; k < active.size(); ++k)
                for (size_t j = 0; j < acc[k].size(); ++j) acc[k][j] += active[k]->grad[j];
        }
        if (!std::isfinite(step_loss))
            throw AttackError("aborted on a non-finite loss (parameters kept at the last "
                              "good step)");
        apply_update(active, acc, cfg_.lr_texture);
        camotex::write_back(param_, leaves);
        if (param_.color_restricted()) camotex::renormalize_probs(param_);
        loss_history_.push_back(step_loss);
        phase_log_.push_back("texture");
    }

    void shape_step() {
        std::vector<std::vector<double>> acc(1);
        acc[0].assign(field_leaf_->value.size(), 0.0);
        const auto batch = stream_.next();
        double step_loss = 0.0;
        for (size_t idx : batch) {
            tape_.clear();
            render::SceneInputs in = render::default_inputs(pool_);
            if (want_texture_) {
                if (!frozen_tex_) refresh_frozen_texture();
                for (auto& t : in.textures) t = frozen_tex_;
            }
            for (size_t s = 0; s < pool_.size(); ++s)
                in.vertices[s] =
                    meshgeom::displaced_vertices(tape_, field_leaf_, pool_[s].topo, field_.pm);
            step_loss += scene_pass(scenes_[idx], in, 1.0 / batch.size());
            for (size_t j = 0; j < acc[0].size(); ++j) acc[0][j] += field_leaf_->grad[j];
        }
        if (!std::isfinite(step_loss))
            throw AttackError("aborted on a non-finite loss (parameters kept at the last "
                              "good step)");
        std::vector<Tensor> active{field_leaf_};
        apply_update(active, acc, cfg_.lr_shape);
        field_.latent = field_leaf_->value;
        field_ = meshgeom::symmetrize(field_);
        field_leaf_->value = field_.latent;
        frozen_verts_.clear();  // stale once the field moves
        loss_history_.push_back(step_loss);
        phase_log_.push_back("shape");
    }

    // Normalized steepest descent: every step moves the parameters by lr in
    // the gradient direction. The fixed step length is what lets the shape
    // latents climb out of the saturated sigmoid region they start in.
    void apply_update(const std::vector<Tensor>& active,
                      const std::vector<std::vector<double>>& acc, double lr) {
        double sq = 0.0;
        for (const auto& a : acc)
            for (double g : a) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm <= kGradNormFloor) return;  // flat: nothing to move along
        const double clip = 1.0 / norm;
        for (size_t k = 0; k < active.size(); ++k)
            for (size_t j = 0; j < acc[k].size(); ++j)
                active[k]->value[j] -= lr * clip * acc[k][j];
    }

    void run_parallel(int phase_steps) {
        int done_tex = 0, done_shape = 0;
        std::vector<double> block_means;
        bool texture_turn = true;
        refresh_frozen_vertices();
        refresh_frozen_texture();
        while (done_tex < phase_steps || done_shape < phase_steps) {
            int ran = 0;
            const size_t first = loss_history_.size();
            if (texture_turn && done_tex < phase_steps) {
                ran = std::min(cfg_.n_pll, phase_steps - done_tex);
                for (int s = 0; s < ran; ++s) texture_step();
                done_tex += ran;
                refresh_frozen_texture();
            } else if (!texture_turn && done_shape < phase_steps) {
                ran = std::min(cfg_.n_pll, phase_steps - done_shape);
                for (int s = 0; s < ran; ++s) shape_step();
                done_shape += ran;
                refresh_frozen_vertices();
            }
            texture_turn = !texture_turn;
            if (ran == 0) continue;
            double mean = 0.0;
            for (size_t i = first; i < loss_history_.size(); ++i) mean += loss_history_[i];
            block_means.push_back(mean / ran);
            if (plateaued(block_means)) break;
        }
    }

    static bool plateaued(const std::vector<double>& means) {
        if (means.size() < static_cast<size_t>(kPlateauBlocks) + 1) return false;
        for (size_t k = means.size() - kPlateauBlocks; k < means.size(); ++k) {
            const double prev = means[k - 1];
            const double rel = (prev - means[k]) / std::max(std::abs(prev), 1e-12);
            if (rel >= kPlateauRelTol) return false;
        }
        return true;
    }

    AttackResult finish() {
        AttackResult r;
        r.has_texture = want_texture_;
        r.has_shape = want_shape_;
        if (want_texture_) r.texture = param_;
        if (want_shape_) r.shape = field_;
        r.lambdas = lambdas_;
        r.loss_history = std::move(loss_history_);
        r.phase_log = std::move(phase_log_);
        r.steps = static_cast<int>(r.loss_history.size());
        return r;
    }

    const AttackConfig& cfg_;
    std::vector<detectors::DetectorSpec>& ensemble_;
    const render::BackgroundProvider& bgs_;
    const std::vector<render::MeshEntry>& pool_;
    render::RenderConfig rcfg_;
    BatchStream stream_;
    std::vector<render::SceneSpec> scenes_;
    Tape tape_;
    std::vector<double> lambdas_;
    bool want_texture_ = false;
    bool want_shape_ = false;
    camotex::TextureParam param_;
    meshgeom::DisplacementField field_;
    Tensor field_leaf_;
    Tensor frozen_tex_;
    std::vector<Tensor> frozen_verts_;
    std::vector<double> loss_history_;
    std::vector<std::string> phase_log_;
};

}  // namespace

AttackMode parse_mode(const std::string& name) {
    if (name == "texture") return AttackMode::texture;
    if (name == "shape") return AttackMode::shape;
    if (name == "combined-seq") return AttackMode::combined_seq;
    if (name == "combined-par") return AttackMode::combined_par;
    throw UsageError("unknown attack mode: " + name);
}

std::string mode_name(AttackMode m) {
    switch (m) {
        case AttackMode::texture: return "texture";
        case AttackMode::shape: return "shape";
        case AttackMode::combined_seq: return "combined-seq";
        case AttackMode::combined_par: return "combined-par";
    }
    throw ContractError("unreachable attack mode");
}

void validate_config(const AttackConfig& cfg) {
    if (cfg.epochs < 0) throw ParameterError("epochs must be >= 0");
    if (cfg.batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (cfg.lr_texture <= 0.0 || cfg.lr_shape <= 0.0)
        throw ParameterError("learning rates must be positive");
    if (cfg.n_pll < 1) throw ParameterError("n_pll must be >= 1");
    if (cfg.pm < 0.0 || cfg.pm > 1.0) throw ParameterError("pm must lie in [0,1]");
    if (cfg.tau <= 0.0) throw ParameterError("tau must be positive");
    if (cfg.pool_size < 1) throw ParameterError("pool_size must be >= 1");
    if (cfg.min_vehicles < 1 || cfg.max_vehicles < cfg.min_vehicles)
        throw ParameterError("attack scenes need 1 <= min_vehicles <= max_vehicles");

    const bool texture_side = cfg.mode != AttackMode::shape;
    const bool shape_side = cfg.mode != AttackMode::texture;
    if (!texture_side && cfg.constraint_flags != 0)
        throw UsageError("constraint flags apply to texture attacks only");
    if (texture_side) {
        if ((cfg.constraint_flags & camotex::kModeLc) && (cfg.constraint_flags & camotex::kModeFc))
            throw UsageError("learned-color and fixed-color constraints are exclusive");
        if ((cfg.constraint_flags & (camotex::kModeLc | camotex::kModeFc)) && !cfg.palette)
            throw UsageError("color-restricted attacks need a palette");
    }
    if (shape_side && texture_side && (cfg.constraint_flags & camotex::kModeMa))
        throw UsageError("the mask constraint cannot be combined with a shape attack");
}

std::vector<double> balance_lambdas(const std::vector<double>& initial_losses) {
    if (initial_losses.empty()) throw ParameterError("no detectors to balance");
    for (double v : initial_losses)
        if (!(v > 0.0) || !std::isfinite(v))
            throw DegenerateInputError("initial detector losses must be positive and finite");
    const double med = median_of(initial_losses);
    std::vector<double> lambdas;
    lambdas.reserve(initial_losses.size());
    for (double v : initial_losses) lambdas.push_back(med / v);
    return lambdas;
}

Tensor suppression_loss(Tape& tape, const std::vector<detectors::DetectorSpec>& ensemble,
                        const std::vector<double>& lambdas, const Tensor& image) {
    if (ensemble.empty()) throw ParameterError("suppression loss needs at least one detector");
    if (lambdas.size() != ensemble.size())
        throw ContractError("lambdas do not align with the ensemble");
    Tensor total;
    for (size_t d = 0; d < ensemble.size(); ++d) {
        Tensor logits = detectors::heatmap_logits(tape, ensemble[d], image);
        std::vector<double> zeros(logits->value.size(), 0.0);
        Tensor term =
            diffmath::scale(tape, detectors::focal_loss(tape, logits, zeros, 0), lambdas[d]);
        total = total ? diffmath::add(tape, total, term) : term;
    }
    return total;
}

AttackResult run_attack(const AttackConfig& cfg, std::vector<detectors::DetectorSpec>& ensemble,
                        const render::BackgroundProvider& bgs,
                        const std::vector<render::MeshEntry>& pool) {
    validate_config(cfg);
    if (ensemble.empty()) throw ParameterError("run_attack needs at least one detector");
    if (pool.empty()) throw ParameterError("run_attack needs a mesh pool");
    DetectorFreeze freeze(ensemble);
    Engine engine(cfg, ensemble, bgs, pool, nullptr);
    return engine.run();
}

render::Appearance make_appearance(const AttackConfig& cfg, const AttackResult& result,
                                   const std::vector<render::MeshEntry>& pool) {
    render::Appearance a;
    if (result.has_texture) {
        const camotex::TextureParam& p = result.texture;
        if (p.color_restricted()) {
            camotex::TextureMap hard = camotex::project_colors(p);
            if (p.flags & camotex::kModeMa)
                hard = camotex::apply_mask(*p.original, hard, p.mask);
            a.texture = std::move(hard);
        } else {
            a.texture = camotex::compose_texture(p, cfg.tau);
        }
    }
    if (result.has_shape && result.shape.pm > 0.0)
        for (const auto& e : pool)
            a.displaced.push_back(meshgeom::apply_displacement(e.mesh, result.shape, e.topo));
    return a;
}

std::vector<DetectorEval> evaluate_camouflage(const EvalConfig& cfg,
                                              const std::vector<detectors::DetectorSpec>& ensemble,
                                              const render::BackgroundProvider& bgs,
                                              const std::vector<render::MeshEntry>& pool,
                                              const render::Appearance& adv) {
    if (cfg.n_scenes < 1) throw ParameterError("evaluation needs at least one scene");
    if (cfg.match_radius <= 0.0) throw ParameterError("match radius must be positive");
    if (cfg.jobs < 1) throw ParameterError("jobs must be >= 1");
    if (ensemble.empty()) throw ParameterError("evaluation needs at least one detector");

    render::SceneSampleSpec sspec;
    sspec.n_backgrounds = bgs.count();
    sspec.n_meshes = static_cast<int>(pool.size());
    sspec.min_vehicles = cfg.min_vehicles;
    sspec.max_vehicles = cfg.max_vehicles;
    sspec.image_size = cfg.image_size;
    sspec.profile = cfg.profile;
    render::RenderConfig rcfg = render::make_render_config(cfg.image_size, cfg.profile);

    std::vector<DetectorEval> evals(ensemble.size());
    std::vector<std::vector<detectors::DetectionSet>> pool_or(ensemble.size());
    std::vector<std::vector<detectors::DetectionSet>> pool_adv(ensemble.size());
    std::vector<std::vector<std::array<double, 2>>> gt_centers(cfg.n_scenes);
    for (size_t d = 0; d < ensemble.size(); ++d) {
        evals[d].arch_id = ensemble[d].arch_id;
        pool_or[d].resize(cfg.n_scenes);
        pool_adv[d].resize(cfg.n_scenes);
    }

    const int jobs = std::min(cfg.jobs, cfg.n_scenes);
    std::vector<std::vector<evalmetrics::MatchedEvalResult>> partial(
        jobs, std::vector<evalmetrics::MatchedEvalResult>(ensemble.size()));
    std::vector<std::string> failures(jobs);
    auto worker = [&](int slot, int begin, int end) {
        try {
            for (int i = begin; i < end; ++i) {
                // Scenes are seeded per index so results do not depend on jobs.
                Rng rng(splitmix64(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (i + 1))));
                render::SceneSpec scene = render::sample_scene(rng, sspec);
                auto [orig, advimg] = render::render_matched_pair(scene, pool, bgs, adv, rcfg);

                // Ground truth is the placement, shared by both sides:
                // deformation reshapes the body, it does not move the vehicle.
                std::vector<evalmetrics::GtVehicle> gt;
                std::vector<std::array<double, 2>> centers;
                for (const auto& ann : orig.annotations) {
                    gt.push_back({ann.vehicle_id, ann.cx, ann.cy});
                    centers.push_back({ann.cx, ann.cy});
                }
                gt_centers[i] = std::move(centers);

                for (size_t d = 0; d < ensemble.size(); ++d) {
                    detectors::DetectorSpec loose = ensemble[d];
                    loose.threshold = 0.0;
                    detectors::DetectionSet all_or =
                        detectors::detect(loose, orig.pixels, orig.size);
                    detectors::DetectionSet all_adv =
                        detectors::detect(loose, advimg.pixels, advimg.size);
                    auto at_threshold = [&](const detectors::DetectionSet& all) {
                        detectors::DetectionSet out;
                        for (const auto& det : all)
                            if (det.score >= ensemble[d].threshold) out.push_back(det);
                        return out;
                    };
                    partial[slot][d] += evalmetrics::match_outcomes(gt, at_threshold(all_or), gt,
                                                                    at_threshold(all_adv),
                                                                    cfg.match_radius);
                    pool_or[d][i] = std::move(all_or);
                    pool_adv[d][i] = std::move(all_adv);
                }
            }
        } catch (const std::exception& e) {
            failures[slot] = e.what();
        }
    };
    if (jobs == 1) {
        worker(0, 0, cfg.n_scenes);
    } else {
        std::vector<std::thread> threads;
        const int chunk = (cfg.n_scenes + jobs - 1) / jobs;
        for (int j = 0; j < jobs; ++j) {
            const int b = j * chunk, e = std::min(cfg.n_scenes, b + chunk);
            if (b >= e) break;
            threads.emplace_back(worker, j, b, e);
        }
        for (auto& t : threads) t.join();
    }
    for (const auto& f : failures)
        if (!f.empty()) throw AttackError("evaluation failed: " + f);
    for (int j = 0; j < jobs; ++j)
        for (size_t d = 0; d < ensemble.size(); ++d) evals[d].outcomes += partial[j][d];
    for (size_t d = 0; d < ensemble.size(); ++d) {
        evals[d].ap_or = detectors::average_precision(pool_or[d], gt_centers, cfg.match_radius);
        evals[d].ap_adv = detectors::average_precision(pool_adv[d], gt_centers, cfg.match_radius);
    }
    return evals;
}

SweepResult sweep_pm(const AttackConfig& base, const std::vector<double>& pm_grid,
                     std::vector<detectors::DetectorSpec>& ensemble,
                     const render::BackgroundProvider& bgs,
                     const std::vector<render::MeshEntry>& pool, const EvalConfig& eval_cfg) {
    if (pm_grid.empty()) throw ParameterError("pm sweep needs a non-empty grid");
    if (base.mode != AttackMode::combined_seq && base.mode != AttackMode::combined_par)
        throw UsageError("pm sweep requires a combined attack mode");
    for (double pm : pm_grid)
        if (pm < 0.0 || pm > 1.0) throw ParameterError("pm grid values must lie in [0,1]");
    validate_config(base);

    // The texture stage of the sequential mode is pm-independent: run it once.
    std::optional<AttackResult> tex_stage;
    if (base.mode == AttackMode::combined_seq) {
        AttackConfig tex_cfg = base;
        tex_cfg.mode = AttackMode::texture;
        tex_stage = run_attack(tex_cfg, ensemble, bgs, pool);
    }

    SweepResult result;
    for (double pm : pm_grid) {
        AttackConfig cfg = base;
        cfg.pm = pm;
        AttackResult res;
        if (base.mode == AttackMode::combined_seq) {
            if (pm == 0.0) {
                // Zero budget: the displacement is identically zero and so are
                // its gradients; the shape stage cannot change anything.
                res = *tex_stage;
                res.has_shape = true;
                res.shape = meshgeom::make_displacement_field(0.0);
            } else {
                DetectorFreeze freeze(ensemble);
                Engine engine(cfg, ensemble, bgs, pool, &tex_stage->texture);
                res = engine.run_shape_stage_only();
            }
        } else {
            res = run_attack(cfg, ensemble, bgs, pool);
        }

        render::Appearance adv = make_appearance(cfg, res, pool);
        std::vector<DetectorEval> evals = evaluate_camouflage(eval_cfg, ensemble, bgs, pool, adv);

        SweepPoint point;
        point.pm = pm;
        point.pr = 1.0 - pm;
        double sum = 0.0;
        int defined = 0;
        for (const auto& ev : evals) {
            double v = std::numeric_limits<double>::quiet_NaN();
            try {
                v = evalmetrics::easr(ev.outcomes).easr;
                sum += v;
                ++defined;
            } catch (const UndefinedMetricError&) {
            }
            point.easr.push_back(v);
        }
        point.easr_mean = defined ? sum / defined : 0.0;
        point.p1 = defined ? evalmetrics::p1_score(point.easr_mean, point.pr) : 0.0;
        result.points.push_back(std::move(point));
        result.results.push_back(std::move(res));
    }

    result.optimal_index = 0;
    for (size_t i = 1; i < result.points.size(); ++i) {
        const SweepPoint& cand = result.points[i];
        const SweepPoint& best = result.points[result.optimal_index];
        if (cand.p1 > best.p1 + 1e-12 ||
            (std::abs(cand.p1 - best.p1) <= 1e-12 && cand.pr > best.pr))
            result.optimal_index = static_cast<int>(i);
    }
    return result;
}

}  // namespace camoforge::attack
