#pragma once

#include <array>
#include <string>
#include <vector>

#include "camoforge/camotex.hpp"
#include "camoforge/detectors.hpp"

namespace camoforge::evalmetrics {

// One annotated vehicle shared between a matched original/adversarial pair.
struct GtVehicle {
    int id = 0;
    double x = 0.0, y = 0.0;  // center, pixels
};

// Per-vehicle detection outcomes across a matched image pair.
struct MatchedEvalResult {
    long v_dd = 0;  // detected in both
    long v_dm = 0;  // detected in original, missed in adversarial
    long v_md = 0;  // missed in original, detected in adversarial
    long v_mm = 0;  // missed in both
    long total() const { return v_dd + v_dm + v_md + v_mm; }
    MatchedEvalResult& operator+=(const MatchedEvalResult& o) {
        v_dd += o.v_dd;
        v_dm += o.v_dm;
        v_md += o.v_md;
        v_mm += o.v_mm;
        return *this;
    }
};

// Classifies each vehicle as detected/missed in each dataset of a matched
// pair (same greedy center matching as AP) and tallies the four outcomes.
// The two ground-truth lists must describe the same vehicles.
MatchedEvalResult match_outcomes(const std::vector<GtVehicle>& gt_or,
                                 const detectors::DetectionSet& det_or,
                                 const std::vector<GtVehicle>& gt_adv,
                                 const detectors::DetectionSet& det_adv,
                                 double match_radius);

struct EasrResult {
    double easr = 0.0;  // asr - er
    double asr = 0.0;   // v_dm / (v_dd + v_dm)
    double er = 0.0;    // v_md / (v_dd + v_dm)
};
// Throws UndefinedMetricError when no vehicle was detected in the original
// dataset (v_dd + v_dm = 0); callers report that as N/A, never as 0.
EasrResult easr(const MatchedEvalResult& r);

// Average-precision drop; may be negative (caller flags that in reports).
double apd(double ap_or, double ap_adv);

// Harmonic mean of attack effectiveness and mesh preservation; 0 whenever
// either input is, and non-positive EASR counts as zero effectiveness.
double p1_score(double easr_value, double pr);

enum class AttackKind { texture, shape, combined };

// Signed rule-based practicality scores: production cost (PC), difficulty
// of installation (DI), difficulty of operation (DO), each split into a
// texture and a shape component in {-1, 0, +1}.
struct PracticalityLedger {
    std::array<int, 3> texture{0, 0, 0};  // [PC, DI, DO]
    std::array<int, 3> shape{0, 0, 0};
    std::string notes;
    int total() const {
        return texture[0] + texture[1] + texture[2] + shape[0] + shape[1] + shape[2];
    }
};
constexpr int kPC = 0, kDI = 1, kDO = 2;

// Deterministic rule table over constraint flags and attack kind.
PracticalityLedger practicality_score(unsigned constraint_flags, AttackKind kind);

// Full comparison table: every supported attack variant plus static rows
// for prior works, as markdown.
std::string practicality_table_markdown();

struct ColorHistogram {
    int n_bins = 0;
    std::array<std::vector<double>, 3> channels;  // normalized, sum to 1 each
    double edge_mass = 0.0;  // fraction of pixels with any channel in outer 5%
};
ColorHistogram color_histogram(const camotex::TextureMap& t, int n_bins);

// One evaluation record; easr_defined=false renders the EASR-family columns
// as NA in the CSV.
struct MetricsRow {
    std::string run_id;
    std::string attack;            // e.g. "T-PixFc", "S-O", "C-Fc"
    std::string constraint_flags;  // mode string, "U" when unconstrained
    double pm = 0.0;
    double pr = 1.0;
    std::string detector;  // arch id, or "mean" for the ensemble average
    bool easr_defined = true;
    double asr = 0.0, er = 0.0, easr = 0.0;
    double ap_or = 0.0, ap_adv = 0.0, apd = 0.0;
    double p1 = 0.0;
};
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

}  // namespace camoforge::evalmetrics
