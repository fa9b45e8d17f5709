#include "camoforge/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "camoforge/errors.hpp"
#include "camoforge/runio.hpp"

namespace camoforge::evalmetrics {

namespace {

// Per-vehicle detected flags under the same greedy matching used by AP.
std::vector<bool> detected_flags(const std::vector<GtVehicle>& gt,
                                 const detectors::DetectionSet& det, double radius) {
    std::vector<std::array<double, 2>> centers(gt.size());
    for (size_t i = 0; i < gt.size(); ++i) centers[i] = {gt[i].x, gt[i].y};
    std::vector<int> match = detectors::greedy_match(det, centers, radius);
    std::vector<bool> hit(gt.size(), false);
    for (int m : match)
        if (m >= 0) hit[static_cast<size_t>(m)] = true;
    return hit;
}

}  // namespace

MatchedEvalResult match_outcomes(const std::vector<GtVehicle>& gt_or,
                                 const detectors::DetectionSet& det_or,
                                 const std::vector<GtVehicle>& gt_adv,
                                 const detectors::DetectionSet& det_adv,
                                 double match_radius) {
    if (gt_or.size() != gt_adv.size())
        throw ContractError("match_outcomes: paired ground truths differ in size");
    for (size_t i = 0; i < gt_or.size(); ++i) {
        if (gt_or[i].id != gt_adv[i].id)
            throw ContractError("match_outcomes: vehicle id mismatch at index " +
                                std::to_string(i));
        if (std::abs(gt_or[i].x - gt_adv[i].x) > 1e-9 ||
            std::abs(gt_or[i].y - gt_adv[i].y) > 1e-9)
            throw ContractError("match_outcomes: vehicle pose mismatch for id " +
                                std::to_string(gt_or[i].id));
    }
    if (!(match_radius > 0.0)) throw ParameterError("match_radius must be positive");

    std::vector<bool> hit_or = detected_flags(gt_or, det_or, match_radius);
    std::vector<bool> hit_adv = detected_flags(gt_adv, det_adv, match_radius);
    MatchedEvalResult r;
    for (size_t i = 0; i < gt_or.size(); ++i) {
        if (hit_or[i] && hit_adv[i]) ++r.v_dd;
        else if (hit_or[i] && !hit_adv[i]) ++r.v_dm;
        else if (!hit_or[i] && hit_adv[i]) ++r.v_md;
        else ++r.v_mm;
    }
    return r;
}

EasrResult easr(const MatchedEvalResult& r) {
    const long denom = r.v_dd + r.v_dm;
    if (denom == 0)
        throw UndefinedMetricError(
            "EASR undefined: no vehicle detected in the original dataset");
    EasrResult out;
    out.asr = static_cast<double>(r.v_dm) / static_cast<double>(denom);
    out.er = static_cast<double>(r.v_md) / static_cast<double>(denom);
    out.easr = out.asr - out.er;
    return out;
}

double apd(double ap_or, double ap_adv) {
    if (ap_or < 0.0 || ap_or > 1.0 || ap_adv < 0.0 || ap_adv > 1.0)
        throw ParameterError("apd: average precisions must lie in [0,1]");
    return ap_or - ap_adv;
}

double p1_score(double easr_value, double pr) {
    if (pr < 0.0 || pr > 1.0) throw ParameterError("p1_score: pr must lie in [0,1]");
    // Harmonic mean is only meaningful for positive terms; a non-positive
    // EASR means the attack achieved nothing, so its P1 is zero.
    if (easr_value <= 0.0 || pr <= 0.0) return 0.0;
    return 2.0 * easr_value * pr / (easr_value + pr);
}

PracticalityLedger practicality_score(unsigned constraint_flags, AttackKind kind) {
    using camotex::kModeFc;
    using camotex::kModeLc;
    using camotex::kModeMa;
    using camotex::kModePix;
    if ((constraint_flags & kModeLc) && (constraint_flags & kModeFc))
        throw ContractError("practicality_score: Lc and Fc are mutually exclusive");
    if (kind == AttackKind::shape && constraint_flags != 0)
        throw ContractError("practicality_score: shape attacks carry no texture flags");

    PracticalityLedger ledger;
    if (kind != AttackKind::shape) {
        const bool pix = constraint_flags & kModePix;
        if (pix && (constraint_flags & kModeFc))
            ledger.texture[kPC] = +1;  // cheap fixed palette applied square by square
        else if (pix && (constraint_flags & kModeLc))
            ledger.texture[kPC] = 0;  // learned colors may be hard to source
        else
            ledger.texture[kPC] = -1;  // full-color wrap regardless of palette size
        ledger.texture[kDI] = pix ? +1 : -1;
        ledger.texture[kDO] = (constraint_flags & kModeMa) ? +1 : -1;
    }
    if (kind != AttackKind::texture) ledger.shape = {-1, -1, -1};
    return ledger;
}

namespace {

std::string mark(int v) { return v > 0 ? "+" : (v < 0 ? "-" : "0"); }

void table_row(std::ostringstream& os, const std::string& group, const std::string& name,
               const std::array<int, 3>& tex, const std::array<int, 3>& shp, int total) {
    os << "| " << group << " | " << name;
    for (int c = 0; c < 3; ++c) os << " | " << mark(tex[c]) << mark(shp[c]);
    os << " | " << (total > 0 ? "+" : "") << total << " |\n";
}

}  // namespace

std::string practicality_table_markdown() {
    using camotex::kModeFc;
    using camotex::kModeLc;
    using camotex::kModeMa;
    using camotex::kModePix;

    std::ostringstream os;
    os << "| Group | Camouflage | PC | DI | DO | Total |\n";
    os << "|---|---|---|---|---|---|\n";

    // Prior works: static reference scores, not computed here.
    struct StaticRow {
        const char* name;
        std::array<int, 3> tex;
    };
    const StaticRow others[] = {
        {"Du et al. (ON)", {+1, +1, +1}},  {"Du et al. (OFF)", {0, +1, -1}},
        {"EVD4UAV", {+1, +1, +1}},         {"FCA", {-1, -1, +1}},
        {"ACTIVE", {-1, -1, +1}},          {"DTA", {-1, -1, +1}},
    };
    for (const auto& row : others) {
        int total = row.tex[0] + row.tex[1] + row.tex[2];
        table_row(os, "prior", row.name, row.tex, {0, 0, 0}, total);
    }

    const unsigned texture_variants[] = {
        0,
        kModeMa,
        kModePix,
        kModePix | kModeMa,
        kModeLc,
        kModeFc,
        kModeLc | kModeMa,
        kModeFc | kModeMa,
        kModePix | kModeLc,
        kModePix | kModeFc,
        kModePix | kModeLc | kModeMa,
        kModePix | kModeFc | kModeMa,
    };
    for (unsigned flags : texture_variants) {
        PracticalityLedger l = practicality_score(flags, AttackKind::texture);
        table_row(os, "ours", "T-" + camotex::mode_string(flags), l.texture, l.shape,
                  l.total());
    }
    {
        PracticalityLedger l = practicality_score(0, AttackKind::shape);
        table_row(os, "ours", "S-O", l.texture, l.shape, l.total());
    }
    for (unsigned flags : {unsigned(kModeFc), kModePix | kModeFc}) {
        PracticalityLedger l = practicality_score(flags, AttackKind::combined);
        table_row(os, "ours", "C-" + camotex::mode_string(flags), l.texture, l.shape,
                  l.total());
    }
    return os.str();
}

ColorHistogram color_histogram(const camotex::TextureMap& t, int n_bins) {
    if (n_bins < 2) throw ParameterError("color_histogram: n_bins must be >= 2");
    ColorHistogram h;
    h.n_bins = n_bins;
    const size_t plane = static_cast<size_t>(t.size) * t.size;
    long edge = 0;
    for (int c = 0; c < 3; ++c) h.channels[c].assign(n_bins, 0.0);
    for (size_t p = 0; p < plane; ++p) {
        bool at_edge = false;
        for (int c = 0; c < 3; ++c) {
            double v = std::clamp(t.pixels[c * plane + p], 0.0, 1.0);
            int bin = std::min(n_bins - 1, static_cast<int>(v * n_bins));
            h.channels[c][bin] += 1.0;
            at_edge |= (v <= 0.05 || v >= 0.95);
        }
        if (at_edge) ++edge;
    }
    for (int c = 0; c < 3; ++c)
        for (double& v : h.channels[c]) v /= static_cast<double>(plane);
    h.edge_mass = static_cast<double>(edge) / static_cast<double>(plane);
    return h;
}

std::string metrics_csv_header() {
    return "run_id,attack,constraint_flags,pm,pr,detector,ASR,ER,EASR,AP_or,AP_adv,APD,P1\n";
}

std::string metrics_csv_row(const MetricsRow& row) {
    std::vector<std::string> fields = {row.run_id, row.attack, row.constraint_flags,
                                       format_double(row.pm), format_double(row.pr),
                                       row.detector};
    if (row.easr_defined) {
        fields.push_back(format_double(row.asr));
        fields.push_back(format_double(row.er));
        fields.push_back(format_double(row.easr));
    } else {
        fields.insert(fields.end(), {"NA", "NA", "NA"});
    }
    fields.push_back(format_double(row.ap_or));
    fields.push_back(format_double(row.ap_adv));
    fields.push_back(format_double(row.apd));
    fields.push_back(row.easr_defined ? format_double(row.p1) : "NA");
    return csv_row(fields);
}

}  // namespace camoforge::evalmetrics
