#include "camoforge/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "camoforge/errors.hpp"
#include "camoforge/rng.hpp"

namespace camoforge::detectors {

namespace {

using diffmath::Tape;
using diffmath::Tensor;

constexpr double kScoreFloor = 1e-9;      // detection scores kept strictly inside (0,1)
constexpr double kFocalClamp = 1e-7;      // probability clamp before logs
constexpr double kHeadBiasInit = -2.1972245773362196;  // log(0.1/0.9)

std::vector<ConvSpec> arch_layout(const std::string& arch_id) {
    if (arch_id == "cnnA")
        return {{10, 5, 2, 2}, {12, 3, 2, 1}, {12, 3, 1, 1}, {1, 1, 1, 0}};
    if (arch_id == "cnnB")
        return {{8, 3, 2, 1},  {10, 3, 2, 1}, {12, 3, 2, 1},
                {12, 3, 1, 1}, {12, 3, 1, 1}, {1, 1, 1, 0}};
    if (arch_id == "cnnC")
        return {{6, 3, 2, 1},  {8, 3, 1, 1},  {10, 3, 2, 1}, {10, 3, 1, 1},
                {10, 3, 1, 1}, {12, 3, 1, 1}, {12, 3, 1, 1}, {1, 1, 1, 0}};
    throw ParameterError("unknown detector arch: " + arch_id);
}

int arch_stride(const std::string& arch_id) { return arch_id == "cnnB" ? 8 : 4; }

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

DetectorSpec make_detector(const std::string& arch_id, uint64_t seed) {
    DetectorSpec spec;
    spec.arch_id = arch_id;
    spec.stride = arch_stride(arch_id);
    spec.layout = arch_layout(arch_id);
    Rng rng(splitmix64(seed ^ 0xdecafbadULL));
    int in_c = 3;
    for (size_t li = 0; li < spec.layout.size(); ++li) {
        const ConvSpec& l = spec.layout[li];
        const int fan_in = in_c * l.k * l.k;
        std::vector<double> w(static_cast<size_t>(l.out_c) * fan_in);
        const double std_dev = std::sqrt(2.0 / fan_in);
        for (double& v : w) v = rng.normal() * std_dev;
        std::vector<double> b(l.out_c, 0.0);
        if (li + 1 == spec.layout.size()) b.assign(l.out_c, kHeadBiasInit);
        spec.weights.push_back(diffmath::make_leaf({l.out_c, in_c, l.k, l.k}, std::move(w)));
        spec.weights.push_back(diffmath::make_leaf({l.out_c}, std::move(b)));
        in_c = l.out_c;
    }
    return spec;
}

size_t param_count(const DetectorSpec& spec) {
    size_t n = 0;
    for (const auto& w : spec.weights) n += w->numel();
    return n;
}

Tensor heatmap_logits(Tape& tape, const DetectorSpec& spec, const Tensor& image) {
    if (image->shape.size() != 3 || image->shape[0] != 3)
        throw ShapeError("detector input must be [3,H,W]");
    Tensor x = image;
    for (size_t li = 0; li < spec.layout.size(); ++li) {
        const ConvSpec& l = spec.layout[li];
        x = diffmath::conv2d(tape, x, spec.weights[2 * li], spec.weights[2 * li + 1], l.stride,
                             l.pad);
        if (li + 1 < spec.layout.size()) x = diffmath::relu(tape, x);
    }
    return x;
}

std::vector<double> make_center_target(int hm_size, int stride,
                                       const std::vector<std::array<double, 2>>& centers) {
    std::vector<double> t(static_cast<size_t>(hm_size) * hm_size, 0.0);
    const double sigma = 2.0 / 3.0;  // radius-2 splat
    for (const auto& c : centers) {
        int cx = std::clamp(static_cast<int>(std::floor(c[0] / stride)), 0, hm_size - 1);
        int cy = std::clamp(static_cast<int>(std::floor(c[1] / stride)), 0, hm_size - 1);
        for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx) {
                int x = cx + dx, y = cy + dy;
                if (x < 0 || x >= hm_size || y < 0 || y >= hm_size) continue;
                double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                if (dx == 0 && dy == 0) g = 1.0;
                size_t idx = static_cast<size_t>(y) * hm_size + x;
                t[idx] = std::max(t[idx], g);
            }
    }
    return t;
}

Tensor focal_loss(Tape& tape, const Tensor& logits, const std::vector<double>& target,
                  int n_pos) {
    using namespace diffmath;
    if (logits->numel() != target.size())
        throw ShapeError("focal_loss: target size does not match heatmap");
    std::vector<double> pos_mask(target.size()), neg_weight(target.size());
    for (size_t i = 0; i < target.size(); ++i) {
        if (target[i] == 1.0) {
            pos_mask[i] = 1.0;
            neg_weight[i] = 0.0;
        } else {
            pos_mask[i] = 0.0;
            double nw = 1.0 - target[i];
            neg_weight[i] = nw * nw * nw * nw;  // beta = 4
        }
    }
    Tensor p = clamp(tape, sigmoid(tape, logits), kFocalClamp, 1.0 - kFocalClamp);
    Tensor one_minus_p = offset(tape, scale(tape, p, -1.0), 1.0);
    Tensor pos_term = mul(tape, mul(tape, one_minus_p, one_minus_p), log_t(tape, p));
    Tensor neg_term = mul(tape, mul(tape, p, p), log_t(tape, one_minus_p));
    Tensor total = add(tape, mul_const(tape, pos_term, pos_mask),
                       mul_const(tape, neg_term, neg_weight));
    return scale(tape, sum(tape, total), -1.0 / std::max(1, n_pos));
}

TrainResult train_detector(DetectorSpec& spec, const std::vector<LabeledImage>& dataset,
                           int epochs, int batch, uint64_t seed) {
    if (dataset.empty()) throw DegenerateInputError("training dataset is empty");
    bool any_annotation = false;
    for (const auto& img : dataset) any_annotation |= !img.centers.empty();
    if (!any_annotation) throw DegenerateInputError("training dataset has no annotations");
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (batch < 1) throw ParameterError("batch must be >= 1");

    // Adam state per parameter leaf.
    const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<std::vector<double>> m(spec.weights.size()), v(spec.weights.size());
    for (size_t i = 0; i < spec.weights.size(); ++i) {
        m[i].assign(spec.weights[i]->numel(), 0.0);
        v[i].assign(spec.weights[i]->numel(), 0.0);
    }
    long step = 0;

    Rng rng(splitmix64(seed ^ 0x12a1bULL));
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    Tape tape;
    for (const auto& w : spec.weights) tape.watch(w);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        // Fisher-Yates with our own stream for cross-platform determinism.
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        size_t n_batches = 0;
        for (size_t start = 0; start < order.size(); start += batch) {
            const size_t end = std::min(order.size(), start + batch);
            tape.clear();
            Tensor batch_loss;
            for (size_t bi = start; bi < end; ++bi) {
                const LabeledImage& img = dataset[order[bi]];
                Tensor in = diffmath::make_constant({3, img.size, img.size}, img.pixels);
                Tensor logits = heatmap_logits(tape, spec, in);
                std::vector<double> target = make_center_target(
                    logits->shape[1], spec.stride, img.centers);
                Tensor loss = focal_loss(tape, logits, target,
                                         static_cast<int>(img.centers.size()));
                batch_loss = batch_loss ? diffmath::add(tape, batch_loss, loss) : loss;
            }
            batch_loss = diffmath::scale(tape, batch_loss, 1.0 / static_cast<double>(end - start));
            try {
                tape.backward(batch_loss);
            } catch (const NumericError& e) {
                throw TrainingError("diverged at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(n_batches) + ": " + e.what());
            }
            if (!std::isfinite(batch_loss->value[0]))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
            ++step;
            const double corr = lr * std::sqrt(1.0 - std::pow(b2, step)) /
                                (1.0 - std::pow(b1, step));
            for (size_t i = 0; i < spec.weights.size(); ++i) {
                auto& wv = spec.weights[i]->value;
                auto& g = spec.weights[i]->grad;
                for (size_t j = 0; j < wv.size(); ++j) {
                    m[i][j] = b1 * m[i][j] + (1.0 - b1) * g[j];
                    v[i][j] = b2 * v[i][j] + (1.0 - b2) * g[j] * g[j];
                    wv[j] -= corr * m[i][j] / (std::sqrt(v[i][j]) + eps);
                }
            }
            epoch_loss += batch_loss->value[0];
            ++n_batches;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(n_batches));
    }
    return result;
}

DetectionSet detect(const DetectorSpec& spec, const std::vector<double>& pixels, int size) {
    Tape tape;
    Tensor in = diffmath::make_constant({3, size, size}, pixels);
    Tensor logits = heatmap_logits(tape, spec, in);
    const int h = logits->shape[1], w = logits->shape[2];
    std::vector<double> p(logits->numel());
    for (size_t i = 0; i < p.size(); ++i)
        p[i] = std::clamp(sigmoid_scalar(logits->value[i]), kScoreFloor, 1.0 - kScoreFloor);

    DetectionSet dets;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double c = p[static_cast<size_t>(y) * w + x];
            if (c < spec.threshold) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                    if (p[static_cast<size_t>(ny) * w + nx] > c) {
                        is_max = false;
                        break;
                    }
                }
            if (is_max)
                dets.push_back({(x + 0.5) * spec.stride, (y + 0.5) * spec.stride, c});
        }
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });
    return dets;
}

std::vector<int> greedy_match(const DetectionSet& dets,
                              const std::vector<std::array<double, 2>>& gt, double radius) {
    std::vector<int> match(dets.size(), -1);
    std::vector<bool> taken(gt.size(), false);
    for (size_t d = 0; d < dets.size(); ++d) {
        int best = -1;
        double best_d2 = radius * radius;
        for (size_t g = 0; g < gt.size(); ++g) {
            if (taken[g]) continue;
            double dx = dets[d].x - gt[g][0];
            double dy = dets[d].y - gt[g][1];
            double d2 = dx * dx + dy * dy;
            if (d2 <= best_d2) {
                best_d2 = d2;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            taken[best] = true;
            match[d] = best;
        }
    }
    return match;
}

double average_precision(const std::vector<DetectionSet>& detections,
                         const std::vector<std::vector<std::array<double, 2>>>& ground_truth,
                         double match_radius) {
    if (detections.size() != ground_truth.size())
        throw ContractError("average_precision: per-image list sizes differ");
    if (!(match_radius > 0.0)) throw ParameterError("match_radius must be positive");
    size_t n_gt = 0;
    for (const auto& g : ground_truth) n_gt += g.size();

    struct Scored {
        double score;
        bool tp;
        size_t img, idx;
    };
    std::vector<Scored> pool;
    for (size_t i = 0; i < detections.size(); ++i) {
        std::vector<int> match = greedy_match(detections[i], ground_truth[i], match_radius);
        for (size_t d = 0; d < detections[i].size(); ++d)
            pool.push_back({detections[i][d].score, match[d] >= 0, i, d});
    }
    if (n_gt == 0) return 0.0;
    if (pool.empty()) return 0.0;

    std::sort(pool.begin(), pool.end(), [](const Scored& a, const Scored& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.img != b.img) return a.img < b.img;
        return a.idx < b.idx;
    });
    std::vector<double> precision(pool.size()), recall(pool.size());
    size_t tp = 0;
    for (size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].tp) ++tp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    for (size_t i = pool.size() - 1; i > 0; --i)
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = recall[0] * precision[0];
    for (size_t i = 1; i < pool.size(); ++i) ap += (recall[i] - recall[i - 1]) * precision[i];
    return ap;
}

double calibrate_threshold(DetectorSpec& spec, const std::vector<LabeledImage>& valset) {
    size_t n_gt = 0;
    for (const auto& img : valset) n_gt += img.centers.size();
    if (n_gt == 0) throw CalibrationError("validation set has no annotated vehicles");

    DetectorSpec open = spec;
    open.threshold = 0.0;  // collect every local maximum once
    std::vector<DetectionSet> all;
    all.reserve(valset.size());
    for (const auto& img : valset) all.push_back(detect(open, img.pixels, img.size));

    double best_f1 = -1.0, best_t = 0.01;
    for (int k = 1; k <= 99; ++k) {
        const double t = k / 100.0;
        size_t tp = 0, fp = 0;
        for (size_t i = 0; i < valset.size(); ++i) {
            DetectionSet kept;
            for (const auto& d : all[i])
                if (d.score >= t) kept.push_back(d);
            std::vector<int> match = greedy_match(kept, valset[i].centers, kDefaultMatchRadius);
            for (int mi : match) (mi >= 0 ? tp : fp)++;
        }
        size_t fn = n_gt - tp;
        double denom = static_cast<double>(2 * tp + fp + fn);
        double f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
        if (f1 > best_f1) {
            best_f1 = f1;
            best_t = t;
        }
    }
    spec.threshold = best_t;
    return best_t;
}

void save_weights(const std::string& path, const DetectorSpec& spec) {
    nlohmann::json header;
    header["arch"] = spec.arch_id;
    header["stride"] = spec.stride;
    header["threshold"] = spec.threshold;
    header["dtype"] = "f64";
    nlohmann::json tensors = nlohmann::json::array();
    size_t offset = 0;
    for (size_t i = 0; i < spec.weights.size(); ++i) {
        nlohmann::json t;
        t["name"] = "conv" + std::to_string(i / 2) + (i % 2 ? ".bias" : ".weight");
        t["shape"] = spec.weights[i]->shape;
        t["offset"] = offset;
        tensors.push_back(t);
        offset += spec.weights[i]->numel() * sizeof(double);
    }
    header["tensors"] = tensors;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    uint32_t hlen = static_cast<uint32_t>(hs.size());
    uint8_t lenbuf[4] = {static_cast<uint8_t>(hlen), static_cast<uint8_t>(hlen >> 8),
                         static_cast<uint8_t>(hlen >> 16), static_cast<uint8_t>(hlen >> 24)};
    f.write(reinterpret_cast<const char*>(lenbuf), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& w : spec.weights)
        f.write(reinterpret_cast<const char*>(w->value.data()),
                static_cast<std::streamsize>(w->value.size() * sizeof(double)));
    if (!f) throw IoError("write failed: " + path);
}

DetectorSpec load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    uint8_t lenbuf[4];
    f.read(reinterpret_cast<char*>(lenbuf), 4);
    if (!f) throw IoError("weights file truncated: " + path);
    uint32_t hlen = lenbuf[0] | (lenbuf[1] << 8) | (lenbuf[2] << 16) |
                    (static_cast<uint32_t>(lenbuf[3]) << 24);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw IoError("weights header truncated: " + path);
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw IoError("weights header is not valid json: " + path);

    DetectorSpec spec = make_detector(header.at("arch").get<std::string>(), 0);
    spec.threshold = header.at("threshold").get<double>();
    const auto& tensors = header.at("tensors");
    if (tensors.size() != spec.weights.size())
        throw IoError("weights file tensor count does not match architecture");
    for (size_t i = 0; i < spec.weights.size(); ++i) {
        std::vector<int> shape = tensors[i].at("shape").get<std::vector<int>>();
        if (shape != spec.weights[i]->shape)
            throw IoError("weights tensor " + std::to_string(i) + " has unexpected shape");
        f.read(reinterpret_cast<char*>(spec.weights[i]->value.data()),
               static_cast<std::streamsize>(spec.weights[i]->value.size() * sizeof(double)));
        if (!f) throw IoError("weights data truncated: " + path);
    }
    return spec;
}

}  // namespace camoforge::detectors
