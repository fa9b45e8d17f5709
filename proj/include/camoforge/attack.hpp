#pragma once

#include <optional>
#include <string>
#include <vector>

#include "camoforge/camotex.hpp"
#include "camoforge/detectors.hpp"
#include "camoforge/evalmetrics.hpp"
#include "camoforge/meshgeom.hpp"
#include "camoforge/overheadrender.hpp"

namespace camoforge::attack {

enum class AttackMode { texture, shape, combined_seq, combined_par };

AttackMode parse_mode(const std::string& name);
std::string mode_name(AttackMode m);

struct AttackConfig {
    AttackMode mode = AttackMode::texture;
    unsigned constraint_flags = 0;  // camotex mode bits; texture/combined only
    int epochs = 2;
    int batch_size = 8;
    double lr_texture = 0.01;
    double lr_shape = 0.005;
    int n_pll = 25;     // steps per phase block in the parallel combined mode
    double pm = 0.05;   // deformation budget, fraction of vehicle width
    double tau = camotex::kDefaultTau;
    uint64_t seed = 1;
    int pool_size = 1000;  // scenes drawn per epoch
    int image_size = 384;
    render::FidelityProfile profile = render::FidelityProfile::train;
    int min_vehicles = 1;
    int max_vehicles = 5;
    std::optional<camotex::Palette> palette;  // required for color-restricted modes
};

// Throws UsageError/ParameterError on inconsistent settings (e.g. the mask
// constraint combined with a shape phase, or a missing palette).
void validate_config(const AttackConfig& cfg);

// Per-detector weights lambda_i = median(initial) / initial_i.
// Throws DegenerateInputError when any initial loss is not positive.
std::vector<double> balance_lambdas(const std::vector<double>& initial_losses);

// Weighted suppression objective: sum_i lambda_i * focal(logits_i, all-zero target).
diffmath::Tensor suppression_loss(diffmath::Tape& tape,
                                  const std::vector<detectors::DetectorSpec>& ensemble,
                                  const std::vector<double>& lambdas,
                                  const diffmath::Tensor& image);

struct AttackResult {
    bool has_texture = false;
    bool has_shape = false;
    camotex::TextureParam texture;      // valid iff has_texture
    meshgeom::DisplacementField shape;  // valid iff has_shape
    std::vector<double> lambdas;        // per detector, attack objective weights
    std::vector<double> loss_history;   // ensemble loss per optimizer step
    std::vector<std::string> phase_log;  // per step: "texture" or "shape"
    int steps = 0;
};

// Runs the configured attack against a frozen detector ensemble. Detector
// weights are bit-identical before and after. Deterministic per seed.
AttackResult run_attack(const AttackConfig& cfg,
                        std::vector<detectors::DetectorSpec>& ensemble,
                        const render::BackgroundProvider& bgs,
                        const std::vector<render::MeshEntry>& pool);

// Deployable appearance: color-restricted textures are hard-projected onto
// the palette (then re-masked when the mask constraint is on); displaced
// meshes are produced per pool slot when a shape result is present.
render::Appearance make_appearance(const AttackConfig& cfg, const AttackResult& result,
                                   const std::vector<render::MeshEntry>& pool);

struct EvalConfig {
    int n_scenes = 50;
    uint64_t seed = 2027;
    int image_size = 384;
    render::FidelityProfile profile = render::FidelityProfile::train;
    int min_vehicles = 1;
    int max_vehicles = 5;
    double match_radius = detectors::kDefaultMatchRadius;
    int jobs = 1;  // scene-level parallelism; results independent of jobs
};

struct DetectorEval {
    std::string arch_id;
    evalmetrics::MatchedEvalResult outcomes;
    double ap_or = 0.0;
    double ap_adv = 0.0;
};

// Matched-pair evaluation over freshly sampled scenes: every scene is
// rendered twice (original pool appearance vs adversarial) and detection
// outcomes plus average precision are accumulated per detector.
std::vector<DetectorEval> evaluate_camouflage(const EvalConfig& cfg,
                                              const std::vector<detectors::DetectorSpec>& ensemble,
                                              const render::BackgroundProvider& bgs,
                                              const std::vector<render::MeshEntry>& pool,
                                              const render::Appearance& adv);

struct SweepPoint {
    double pm = 0.0;
    double pr = 1.0;  // practicality ratio 1 - pm
    std::vector<double> easr;  // per detector; NaN where undefined
    double easr_mean = 0.0;    // over detectors with a defined EASR
    double p1 = 0.0;
};

struct SweepResult {
    std::vector<SweepPoint> points;
    std::vector<AttackResult> results;  // aligned with points
    int optimal_index = 0;              // max P1; ties resolved toward higher pr
};

// Runs the combined attack across a grid of deformation budgets and scores
// each operating point. For the sequential mode the texture stage is shared
// across grid points (it does not depend on pm).
SweepResult sweep_pm(const AttackConfig& base, const std::vector<double>& pm_grid,
                     std::vector<detectors::DetectorSpec>& ensemble,
                     const render::BackgroundProvider& bgs,
                     const std::vector<render::MeshEntry>& pool, const EvalConfig& eval_cfg);

}  // namespace camoforge::attack
