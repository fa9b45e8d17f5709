#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "camoforge/diffmath.hpp"

namespace camoforge::detectors {

constexpr double kDefaultMatchRadius = 12.0;  // pixels (~1.5 m at 12.5 cm/px)

struct Detection {
    double x = 0.0, y = 0.0;  // pixel center
    double score = 0.0;       // in (0,1)
};
using DetectionSet = std::vector<Detection>;  // sorted by descending score

struct LabeledImage {
    int size = 0;
    std::vector<double> pixels;                    // planar [3,size,size], values in [0,1]
    std::vector<std::array<double, 2>> centers;    // ground-truth vehicle centers, pixels
};

struct ConvSpec {
    int out_c, k, stride, pad;
};

// Center-heatmap detector: stacked convs ending in a 1-channel logit map.
struct DetectorSpec {
    std::string arch_id;
    int stride = 4;            // heatmap cell size in pixels
    double threshold = 0.5;    // calibrated detection threshold
    std::vector<ConvSpec> layout;
    std::vector<diffmath::Tensor> weights;  // leaf pairs: weight, bias per layer
};

// arch_id one of cnnA (4 convs, stride 4), cnnB (6 convs, stride 8),
// cnnC (8 convs, stride 4); weights seeded deterministically.
DetectorSpec make_detector(const std::string& arch_id, uint64_t seed);
size_t param_count(const DetectorSpec& spec);

// Forward graph producing pre-sigmoid heatmap logits [1,h,w] on the tape.
diffmath::Tensor heatmap_logits(diffmath::Tape& tape, const DetectorSpec& spec,
                                const diffmath::Tensor& image);

// Gaussian-splatted center target on the heatmap grid (peak cell = 1).
std::vector<double> make_center_target(int hm_size, int stride,
                                       const std::vector<std::array<double, 2>>& centers);

// Penalty-reduced focal loss (alpha=2, beta=4) against a target heatmap;
// an all-zero target is the empty-ground-truth attack objective.
diffmath::Tensor focal_loss(diffmath::Tape& tape, const diffmath::Tensor& logits,
                            const std::vector<double>& target, int n_pos);

struct TrainResult {
    std::vector<double> epoch_losses;
};
// Adam on the focal objective; deterministic per seed. Mutates spec weights.
TrainResult train_detector(DetectorSpec& spec, const std::vector<LabeledImage>& dataset,
                           int epochs, int batch, uint64_t seed);

// Local heatmap maxima above spec.threshold, mapped back to pixel centers.
DetectionSet detect(const DetectorSpec& spec, const std::vector<double>& pixels, int size);

// Greedy score-ordered matching: per detection, nearest unmatched ground
// truth within radius. Returns matched gt index per detection, or -1.
std::vector<int> greedy_match(const DetectionSet& dets,
                              const std::vector<std::array<double, 2>>& gt, double radius);

// Area under the precision-recall curve, all-points interpolation.
double average_precision(const std::vector<DetectionSet>& detections,
                         const std::vector<std::vector<std::array<double, 2>>>& ground_truth,
                         double match_radius);

// F1-maximizing threshold over a 0.01 grid (ties -> lower); sets spec.threshold.
double calibrate_threshold(DetectorSpec& spec, const std::vector<LabeledImage>& valset);

// Flat binary tensor archive with a JSON header.
void save_weights(const std::string& path, const DetectorSpec& spec);
DetectorSpec load_weights(const std::string& path);

}  // namespace camoforge::detectors
