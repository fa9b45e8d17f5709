#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace camoforge::diffmath {

struct Node;
using Tensor = std::shared_ptr<Node>;

// One value in the computation graph. Leaves own their data across tapes;
// op nodes are created through a Tape and freed by Tape::clear().
struct Node {
    std::string op;            // "leaf", "const" or producing op name
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // same length as value
    std::vector<Tensor> inputs;
    std::function<void(Node&)> backward_fn;  // accumulates into inputs' grads
    bool requires_grad = false;
    bool is_leaf = true;

    size_t numel() const { return value.size(); }
};

size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Trainable parameter (grad tracked) holding the given data.
Tensor make_leaf(const std::vector<int>& shape, std::vector<double> value);
// Non-trainable input; backward never writes to it.
Tensor make_constant(const std::vector<int>& shape, std::vector<double> value);
Tensor make_scalar(double v, bool requires_grad = false);

// Records op nodes in creation order (which is topological) and replays them
// backwards on backward(). One tape per forward pass; clear() between passes.
class Tape {
public:
    // Used by every built-in op and open to custom ops (e.g. a rasterizer):
    // the backward_fn receives the finished node and must accumulate into
    // node.inputs[i]->grad for every input with requires_grad.
    Tensor record(const std::string& op, std::vector<int> shape, std::vector<double> value,
                  std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

    // Parameters registered here have their grads zeroed by every backward()
    // even when the current graph does not touch them.
    void watch(const Tensor& t);

    // Reverse sweep from a scalar output. Zeroes all reachable grads first,
    // seeds d(output)/d(output) = 1, then accumulates leaf grads.
    void backward(const Tensor& output);

    void clear();  // drops op nodes; leaves and watched params persist
    size_t size() const { return nodes_.size(); }

private:
    std::vector<Tensor> nodes_;
    std::vector<Tensor> watched_;
};

// ---- elementwise ----
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double c);               // c * a
Tensor offset(Tape& t, const Tensor& a, double c);              // a + c
Tensor add_const(Tape& t, const Tensor& a, const std::vector<double>& c);
Tensor mul_const(Tape& t, const Tensor& a, const std::vector<double>& c);
Tensor relu(Tape& t, const Tensor& a);
Tensor sigmoid(Tape& t, const Tensor& a);
Tensor exp_t(Tape& t, const Tensor& a);
Tensor log_t(Tape& t, const Tensor& a);
Tensor clamp(Tape& t, const Tensor& a, double lo, double hi);  // grad passes strictly inside

// ---- reductions / reshaping ----
Tensor sum(Tape& t, const Tensor& a);   // scalar [1]
Tensor mean(Tape& t, const Tensor& a);  // scalar [1]
Tensor reshape(Tape& t, const Tensor& a, const std::vector<int>& shape);
Tensor transpose2d(Tape& t, const Tensor& a);  // [M,N] -> [N,M]

// ---- linear / structured ----
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
// input [C,H,W], weight [O,C,kh,kw], bias [O]; zero padding.
Tensor conv2d(Tape& t, const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);
Tensor avg_pool(Tape& t, const Tensor& a, int k, int stride);   // [C,H,W]
Tensor upsample_nearest(Tape& t, const Tensor& a, int factor);  // [C,H,W]
// Normalized rows along the last dim: y_i = r_i^(1/tau) / sum_j r_j^(1/tau),
// computed in log space; inputs clamped below at 1e-12.
Tensor softlike(Tape& t, const Tensor& a, double tau);
// grid [H,W] sampled at N (u,v) points in [0,1]^2 with circular wrap on both
// axes (u -> column, v -> row); returns [N].
Tensor bilinear_gather(Tape& t, const Tensor& grid, const std::vector<double>& uv);
Tensor gather_rows(Tape& t, const Tensor& a, const std::vector<int>& index);  // [N,D]->[M,D]
// out[i][d] = s[i] * m[i][d]; s is [N], m is [N,D].
Tensor rowwise_mul(Tape& t, const Tensor& s, const Tensor& m);
// Separable Gaussian on [C,H,W], zero padding, kernel size 6*ceil(sigma)-1.
Tensor gaussian_blur(Tape& t, const Tensor& a, double sigma);
int gaussian_kernel_size(double sigma);
std::vector<double> gaussian_kernel(double sigma);

constexpr double kSoftlikeClamp = 1e-12;

}  // namespace camoforge::diffmath
