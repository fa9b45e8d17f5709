#include "camoforge/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "camoforge/errors.hpp"

namespace camoforge::diffmath {

namespace {

void check_finite(const Node& n) {
    for (double v : n.value)
        if (!std::isfinite(v))
            throw NumericError("non-finite value produced by op '" + n.op + "'");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a->shape != b->shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
}

// Sums buf[0..n) in place by pairwise halving; exact for power-of-two counts
// of identical values, which keeps constant blocks constant through pooling.
double pairwise_sum(double* buf, size_t n) {
    while (n > 1) {
        size_t half = n / 2;
        for (size_t i = 0; i < half; ++i) buf[i] = buf[2 * i] + buf[2 * i + 1];
        if (n & 1) {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    return buf[0];
}

}  // namespace

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor make_leaf(const std::vector<int>& shape, std::vector<double> value) {
    if (value.size() != shape_numel(shape))
        throw ShapeError("make_leaf: value size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->op = "leaf";
    n->shape = shape;
    n->value = std::move(value);
    n->grad.assign(n->value.size(), 0.0);
    n->requires_grad = true;
    n->is_leaf = true;
    check_finite(*n);
    return n;
}

Tensor make_constant(const std::vector<int>& shape, std::vector<double> value) {
    Tensor n = make_leaf(shape, std::move(value));
    n->op = "const";
    n->requires_grad = false;
    return n;
}

Tensor make_scalar(double v, bool requires_grad) {
    Tensor n = requires_grad ? make_leaf({1}, {v}) : make_constant({1}, {v});
    return n;
}

Tensor Tape::record(const std::string& op, std::vector<int> shape, std::vector<double> value,
                    std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
    if (value.size() != shape_numel(shape))
        throw ShapeError(op + ": value size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->grad.assign(n->value.size(), 0.0);
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
    n->is_leaf = false;
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    check_finite(*n);
    nodes_.push_back(n);
    return n;
}

void Tape::watch(const Tensor& t) { watched_.push_back(t); }

void Tape::backward(const Tensor& output) {
    if (output->numel() != 1)
        throw ContractError("backward: output must be scalar, got shape " +
                            shape_str(output->shape));
    for (auto& n : nodes_) {
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
        for (auto& in : n->inputs) std::fill(in->grad.begin(), in->grad.end(), 0.0);
    }
    for (auto& w : watched_) std::fill(w->grad.begin(), w->grad.end(), 0.0);
    std::fill(output->grad.begin(), output->grad.end(), 0.0);
    output->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.requires_grad || !n.backward_fn) continue;
        n.backward_fn(n);
    }
    // Leaf gradients feed optimizers directly; surface divergence here.
    for (auto& n : nodes_)
        for (auto& in : n->inputs)
            if (in->is_leaf && in->requires_grad)
                for (double g : in->grad)
                    if (!std::isfinite(g))
                        throw NumericError("non-finite gradient for leaf used by op '" + n->op +
                                           "'");
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------- elementwise

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
    return t.record("add", a->shape, std::move(v), {a, b}, [](Node& n) {
        const auto& g = n.grad;
        if (n.inputs[0]->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) n.inputs[0]->grad[i] += g[i];
        if (n.inputs[1]->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) n.inputs[1]->grad[i] += g[i];
    });
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] - b->value[i];
    return t.record("sub", a->shape, std::move(v), {a, b}, [](Node& n) {
        const auto& g = n.grad;
        if (n.inputs[0]->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) n.inputs[0]->grad[i] += g[i];
        if (n.inputs[1]->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) n.inputs[1]->grad[i] -= g[i];
    });
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * b->value[i];
    return t.record("mul", a->shape, std::move(v), {a, b}, [](Node& n) {
        const auto& g = n.grad;
        const Tensor& a = n.inputs[0];
        const Tensor& b = n.inputs[1];
        if (a->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) a->grad[i] += g[i] * b->value[i];
        if (b->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) b->grad[i] += g[i] * a->value[i];
    });
}

Tensor scale(Tape& t, const Tensor& a, double c) {
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * c;
    return t.record("scale", a->shape, std::move(v), {a}, [c](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i] * c;
    });
}

Tensor offset(Tape& t, const Tensor& a, double c) {
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + c;
    return t.record("offset", a->shape, std::move(v), {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i];
    });
}

Tensor add_const(Tape& t, const Tensor& a, const std::vector<double>& c) {
    if (c.size() != a->numel()) throw ShapeError("add_const: constant size mismatch");
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + c[i];
    return t.record("add_const", a->shape, std::move(v), {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i];
    });
}

Tensor mul_const(Tape& t, const Tensor& a, const std::vector<double>& c) {
    if (c.size() != a->numel()) throw ShapeError("mul_const: constant size mismatch");
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * c[i];
    auto cc = std::make_shared<std::vector<double>>(c);
    return t.record("mul_const", a->shape, std::move(v), {a}, [cc](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i] * (*cc)[i];
    });
}

Tensor relu(Tape& t, const Tensor& a) {
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
    return t.record("relu", a->shape, std::move(v), {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i)
            if (n.inputs[0]->value[i] > 0.0) n.inputs[0]->grad[i] += n.grad[i];
    });
}

Tensor sigmoid(Tape& t, const Tensor& a) {
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) {
        double x = a->value[i];
        if (x >= 0.0) {
            v[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
            double e = std::exp(x);
            v[i] = e / (1.0 + e);
        }
    }
    return t.record("sigmoid", a->shape, std::move(v), {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double y = n.value[i];
            n.inputs[0]->grad[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor exp_t(Tape& t, const Tensor& a) {
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a->value[i]);
    return t.record("exp", a->shape, std::move(v), {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i] * n.value[i];
    });
}

Tensor log_t(Tape& t, const Tensor& a) {
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::log(a->value[i]);
    return t.record("log", a->shape, std::move(v), {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i)
            n.inputs[0]->grad[i] += n.grad[i] / n.inputs[0]->value[i];
    });
}

Tensor clamp(Tape& t, const Tensor& a, double lo, double hi) {
    if (!(lo < hi)) throw ParameterError("clamp: lo must be < hi");
    std::vector<double> v(a->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(hi, std::max(lo, a->value[i]));
    return t.record("clamp", a->shape, std::move(v), {a}, [lo, hi](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double x = n.inputs[0]->value[i];
            if (x > lo && x < hi) n.inputs[0]->grad[i] += n.grad[i];
        }
    });
}

// --------------------------------------------------------------- reductions

Tensor sum(Tape& t, const Tensor& a) {
    double s = 0.0;
    for (double v : a->value) s += v;
    return t.record("sum", {1}, {s}, {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        double g = n.grad[0];
        for (double& d : n.inputs[0]->grad) d += g;
    });
}

Tensor mean(Tape& t, const Tensor& a) {
    double s = 0.0;
    for (double v : a->value) s += v;
    double inv = 1.0 / static_cast<double>(a->numel());
    return t.record("mean", {1}, {s * inv}, {a}, [inv](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        double g = n.grad[0] * inv;
        for (double& d : n.inputs[0]->grad) d += g;
    });
}

Tensor reshape(Tape& t, const Tensor& a, const std::vector<int>& shape) {
    if (shape_numel(shape) != a->numel())
        throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " +
                         shape_str(shape));
    return t.record("reshape", shape, a->value, {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i];
    });
}

Tensor transpose2d(Tape& t, const Tensor& a) {
    if (a->shape.size() != 2) throw ShapeError("transpose2d: expected rank-2 tensor");
    int M = a->shape[0], N = a->shape[1];
    std::vector<double> v(a->numel());
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) v[static_cast<size_t>(j) * M + i] = a->value[static_cast<size_t>(i) * N + j];
    return t.record("transpose2d", {N, M}, std::move(v), {a}, [M, N](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j)
                n.inputs[0]->grad[static_cast<size_t>(i) * N + j] +=
                    n.grad[static_cast<size_t>(j) * M + i];
    });
}

// ------------------------------------------------------------------- linear

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
    const int M = a->shape[0], K = a->shape[1], N = b->shape[1];
    std::vector<double> v(static_cast<size_t>(M) * N, 0.0);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            double av = a->value[static_cast<size_t>(i) * K + k];
            const double* brow = &b->value[static_cast<size_t>(k) * N];
            double* vrow = &v[static_cast<size_t>(i) * N];
            for (int j = 0; j < N; ++j) vrow[j] += av * brow[j];
        }
    return t.record("matmul", {M, N}, std::move(v), {a, b}, [M, K, N](Node& n) {
        const Tensor& a = n.inputs[0];
        const Tensor& b = n.inputs[1];
        if (a->requires_grad)
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    const double* grow = &n.grad[static_cast<size_t>(i) * N];
                    const double* brow = &b->value[static_cast<size_t>(k) * N];
                    double acc = 0.0;
                    for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
                    a->grad[static_cast<size_t>(i) * K + k] += acc;
                }
        if (b->requires_grad)
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    double av = a->value[static_cast<size_t>(i) * K + k];
                    const double* grow = &n.grad[static_cast<size_t>(i) * N];
                    double* brow = &b->grad[static_cast<size_t>(k) * N];
                    for (int j = 0; j < N; ++j) brow[j] += av * grow[j];
                }
    });
}

Tensor conv2d(Tape& t, const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int pad) {
    if (input->shape.size() != 3 || weight->shape.size() != 4 || bias->shape.size() != 1)
        throw ShapeError("conv2d: expected input [C,H,W], weight [O,C,kh,kw], bias [O]");
    const int C = input->shape[0], H = input->shape[1], W = input->shape[2];
    const int O = weight->shape[0], kh = weight->shape[2], kw = weight->shape[3];
    if (weight->shape[1] != C) throw ShapeError("conv2d: channel mismatch");
    if (bias->shape[0] != O) throw ShapeError("conv2d: bias size mismatch");
    if (stride < 1 || pad < 0) throw ParameterError("conv2d: bad stride/pad");
    if (H + 2 * pad < kh || W + 2 * pad < kw) throw ShapeError("conv2d: kernel exceeds input");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;

    // Captured by value: the backward pass runs after this frame is gone.
    auto col_range = [pad, stride, W, OW](int kx, int& lo, int& hi) {
        // valid ox: 0 <= ox*stride + kx - pad < W
        int a = pad - kx;
        lo = a <= 0 ? 0 : (a + stride - 1) / stride;
        int b = W - 1 + pad - kx;  // ox*stride <= b
        hi = b < 0 ? 0 : std::min(OW, b / stride + 1);
        if (hi < lo) hi = lo;
    };

    std::vector<double> v(static_cast<size_t>(O) * OH * OW);
    for (int o = 0; o < O; ++o)
        std::fill(v.begin() + static_cast<size_t>(o) * OH * OW,
                  v.begin() + static_cast<size_t>(o + 1) * OH * OW, bias->value[o]);
    for (int o = 0; o < O; ++o) {
        double* outp = &v[static_cast<size_t>(o) * OH * OW];
        for (int c = 0; c < C; ++c) {
            const double* inp = &input->value[static_cast<size_t>(c) * H * W];
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    double wv =
                        weight->value[((static_cast<size_t>(o) * C + c) * kh + ky) * kw + kx];
                    int lo, hi;
                    col_range(kx, lo, hi);
                    for (int oy = 0; oy < OH; ++oy) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        const double* inrow = &inp[static_cast<size_t>(iy) * W];
                        double* orow = &outp[static_cast<size_t>(oy) * OW];
                        for (int ox = lo; ox < hi; ++ox)
                            orow[ox] += inrow[ox * stride + kx - pad] * wv;
                    }
                }
        }
    }

    return t.record(
        "conv2d", {O, OH, OW}, std::move(v), {input, weight, bias},
        [C, H, W, O, kh, kw, OH, OW, stride, pad, col_range](Node& n) {
            const Tensor& input = n.inputs[0];
            const Tensor& weight = n.inputs[1];
            const Tensor& bias = n.inputs[2];
            const bool need_in = input->requires_grad;
            const bool need_w = weight->requires_grad;
            if (bias->requires_grad)
                for (int o = 0; o < O; ++o) {
                    const double* grow = &n.grad[static_cast<size_t>(o) * OH * OW];
                    double acc = 0.0;
                    for (int i = 0; i < OH * OW; ++i) acc += grow[i];
                    bias->grad[o] += acc;
                }
            if (!need_in && !need_w) return;
            for (int o = 0; o < O; ++o) {
                const double* gout = &n.grad[static_cast<size_t>(o) * OH * OW];
                for (int c = 0; c < C; ++c) {
                    const double* inp = &input->value[static_cast<size_t>(c) * H * W];
                    double* ginp = need_in ? &input->grad[static_cast<size_t>(c) * H * W] : nullptr;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            size_t widx = ((static_cast<size_t>(o) * C + c) * kh + ky) * kw + kx;
                            double wv = weight->value[widx];
                            double wacc = 0.0;
                            int lo, hi;
                            col_range(kx, lo, hi);
                            for (int oy = 0; oy < OH; ++oy) {
                                int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= H) continue;
                                const double* grow = &gout[static_cast<size_t>(oy) * OW];
                                const double* inrow = &inp[static_cast<size_t>(iy) * W];
                                double* girow =
                                    need_in ? &ginp[static_cast<size_t>(iy) * W] : nullptr;
                                for (int ox = lo; ox < hi; ++ox) {
                                    int ix = ox * stride + kx - pad;
                                    double g = grow[ox];
                                    if (need_in) girow[ix] += g * wv;
                                    if (need_w) wacc += g * inrow[ix];
                                }
                            }
                            if (need_w) weight->grad[widx] += wacc;
                        }
                }
            }
        });
}

Tensor avg_pool(Tape& t, const Tensor& a, int k, int stride) {
    if (a->shape.size() != 3) throw ShapeError("avg_pool: expected [C,H,W]");
    if (k < 1 || stride < 1) throw ParameterError("avg_pool: bad window/stride");
    const int C = a->shape[0], H = a->shape[1], W = a->shape[2];
    if (H < k || W < k) throw ShapeError("avg_pool: window exceeds input");
    const int OH = (H - k) / stride + 1;
    const int OW = (W - k) / stride + 1;
    const double inv = 1.0 / (static_cast<double>(k) * k);
    std::vector<double> v(static_cast<size_t>(C) * OH * OW);
    std::vector<double> buf(static_cast<size_t>(k) * k);
    for (int c = 0; c < C; ++c) {
        const double* inp = &a->value[static_cast<size_t>(c) * H * W];
        double* outp = &v[static_cast<size_t>(c) * OH * OW];
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                size_t m = 0;
                for (int dy = 0; dy < k; ++dy) {
                    const double* row = &inp[static_cast<size_t>(oy * stride + dy) * W + ox * stride];
                    for (int dx = 0; dx < k; ++dx) buf[m++] = row[dx];
                }
                outp[static_cast<size_t>(oy) * OW + ox] = pairwise_sum(buf.data(), m) * inv;
            }
    }
    return t.record("avg_pool", {C, OH, OW}, std::move(v), {a},
                    [C, H, W, OH, OW, k, stride, inv](Node& n) {
                        if (!n.inputs[0]->requires_grad) return;
                        for (int c = 0; c < C; ++c) {
                            double* ginp = &n.inputs[0]->grad[static_cast<size_t>(c) * H * W];
                            const double* gout = &n.grad[static_cast<size_t>(c) * OH * OW];
                            for (int oy = 0; oy < OH; ++oy)
                                for (int ox = 0; ox < OW; ++ox) {
                                    double g = gout[static_cast<size_t>(oy) * OW + ox] * inv;
                                    for (int dy = 0; dy < k; ++dy) {
                                        double* row = &ginp[static_cast<size_t>(oy * stride + dy) * W +
                                                            ox * stride];
                                        for (int dx = 0; dx < k; ++dx) row[dx] += g;
                                    }
                                }
                        }
                    });
}

Tensor upsample_nearest(Tape& t, const Tensor& a, int factor) {
    if (a->shape.size() != 3) throw ShapeError("upsample_nearest: expected [C,H,W]");
    if (factor < 1) throw ParameterError("upsample_nearest: factor must be >= 1");
    const int C = a->shape[0], H = a->shape[1], W = a->shape[2];
    const int OH = H * factor, OW = W * factor;
    std::vector<double> v(static_cast<size_t>(C) * OH * OW);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < OH; ++y) {
            const double* inrow = &a->value[(static_cast<size_t>(c) * H + y / factor) * W];
            double* orow = &v[(static_cast<size_t>(c) * OH + y) * OW];
            for (int x = 0; x < OW; ++x) orow[x] = inrow[x / factor];
        }
    return t.record("upsample_nearest", {C, OH, OW}, std::move(v), {a},
                    [C, H, W, OH, OW, factor](Node& n) {
                        if (!n.inputs[0]->requires_grad) return;
                        for (int c = 0; c < C; ++c)
                            for (int y = 0; y < OH; ++y) {
                                double* girow =
                                    &n.inputs[0]->grad[(static_cast<size_t>(c) * H + y / factor) * W];
                                const double* grow = &n.grad[(static_cast<size_t>(c) * OH + y) * OW];
                                for (int x = 0; x < OW; ++x) girow[x / factor] += grow[x];
                            }
                    });
}

Tensor softlike(Tape& t, const Tensor& a, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau))
        throw ParameterError("softlike: tau must be a positive finite number");
    if (a->shape.empty()) throw ShapeError("softlike: scalar input has no rows");
    const int N = a->shape.back();
    const size_t rows = a->numel() / static_cast<size_t>(N);
    std::vector<double> v(a->numel());
    for (size_t r = 0; r < rows; ++r) {
        const double* x = &a->value[r * N];
        double* y = &v[r * N];
        double maxl = -1e300;
        for (int i = 0; i < N; ++i) {
            double l = std::log(std::max(x[i], kSoftlikeClamp)) / tau;
            y[i] = l;
            maxl = std::max(maxl, l);
        }
        double s = 0.0;
        for (int i = 0; i < N; ++i) s += std::exp(y[i] - maxl);
        double lse = maxl + std::log(s);
        for (int i = 0; i < N; ++i) y[i] = std::exp(y[i] - lse);
    }
    return t.record("softlike", a->shape, std::move(v), {a}, [N, rows, tau](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t r = 0; r < rows; ++r) {
            const double* y = &n.value[r * N];
            const double* g = &n.grad[r * N];
            const double* x = &n.inputs[0]->value[r * N];
            double* gx = &n.inputs[0]->grad[r * N];
            double dot = 0.0;
            for (int i = 0; i < N; ++i) dot += g[i] * y[i];
            for (int i = 0; i < N; ++i) {
                if (x[i] <= kSoftlikeClamp) continue;  // clamped: locally constant
                gx[i] += y[i] / (tau * x[i]) * (g[i] - dot);
            }
        }
    });
}

Tensor bilinear_gather(Tape& t, const Tensor& grid, const std::vector<double>& uv) {
    if (grid->shape.size() != 2) throw ShapeError("bilinear_gather: grid must be [H,W]");
    if (uv.size() % 2 != 0) throw ShapeError("bilinear_gather: uv must be (u,v) pairs");
    const int H = grid->shape[0], W = grid->shape[1];
    const int n = static_cast<int>(uv.size() / 2);
    struct Tap {
        int i00, i01, i10, i11;
        double w00, w01, w10, w11;
    };
    auto taps = std::make_shared<std::vector<Tap>>(n);
    std::vector<double> v(n);
    for (int p = 0; p < n; ++p) {
        double x = uv[2 * p] * W;
        double y = uv[2 * p + 1] * H;
        double fx = x - std::floor(x);
        double fy = y - std::floor(y);
        int x0 = static_cast<int>(std::floor(x)) % W;
        int y0 = static_cast<int>(std::floor(y)) % H;
        if (x0 < 0) x0 += W;
        if (y0 < 0) y0 += H;
        int x1 = (x0 + 1) % W;
        int y1 = (y0 + 1) % H;
        Tap& tp = (*taps)[p];
        tp.i00 = y0 * W + x0;
        tp.i01 = y0 * W + x1;
        tp.i10 = y1 * W + x0;
        tp.i11 = y1 * W + x1;
        tp.w00 = (1 - fy) * (1 - fx);
        tp.w01 = (1 - fy) * fx;
        tp.w10 = fy * (1 - fx);
        tp.w11 = fy * fx;
        const auto& g = grid->value;
        v[p] = tp.w00 * g[tp.i00] + tp.w01 * g[tp.i01] + tp.w10 * g[tp.i10] + tp.w11 * g[tp.i11];
    }
    return t.record("bilinear_gather", {n}, std::move(v), {grid}, [taps](Node& nd) {
        if (!nd.inputs[0]->requires_grad) return;
        auto& gg = nd.inputs[0]->grad;
        for (size_t p = 0; p < taps->size(); ++p) {
            const Tap& tp = (*taps)[p];
            double g = nd.grad[p];
            gg[tp.i00] += g * tp.w00;
            gg[tp.i01] += g * tp.w01;
            gg[tp.i10] += g * tp.w10;
            gg[tp.i11] += g * tp.w11;
        }
    });
}

Tensor gather_rows(Tape& t, const Tensor& a, const std::vector<int>& index) {
    if (a->shape.size() != 2) throw ShapeError("gather_rows: expected [N,D]");
    const int N = a->shape[0], D = a->shape[1];
    for (int i : index)
        if (i < 0 || i >= N) throw ParameterError("gather_rows: index out of range");
    const int M = static_cast<int>(index.size());
    std::vector<double> v(static_cast<size_t>(M) * D);
    for (int m = 0; m < M; ++m)
        std::copy_n(&a->value[static_cast<size_t>(index[m]) * D], D, &v[static_cast<size_t>(m) * D]);
    auto idx = std::make_shared<std::vector<int>>(index);
    return t.record("gather_rows", {M, D}, std::move(v), {a}, [idx, D](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        for (size_t m = 0; m < idx->size(); ++m) {
            double* dst = &n.inputs[0]->grad[static_cast<size_t>((*idx)[m]) * D];
            const double* src = &n.grad[m * D];
            for (int d = 0; d < D; ++d) dst[d] += src[d];
        }
    });
}

Tensor rowwise_mul(Tape& t, const Tensor& s, const Tensor& m) {
    if (m->shape.size() != 2 || s->numel() != static_cast<size_t>(m->shape[0]))
        throw ShapeError("rowwise_mul: s must have one entry per row of m");
    const int N = m->shape[0], D = m->shape[1];
    std::vector<double> v(m->numel());
    for (int i = 0; i < N; ++i)
        for (int d = 0; d < D; ++d)
            v[static_cast<size_t>(i) * D + d] = s->value[i] * m->value[static_cast<size_t>(i) * D + d];
    return t.record("rowwise_mul", m->shape, std::move(v), {s, m}, [N, D](Node& n) {
        const Tensor& s = n.inputs[0];
        const Tensor& m = n.inputs[1];
        for (int i = 0; i < N; ++i) {
            const double* g = &n.grad[static_cast<size_t>(i) * D];
            if (s->requires_grad) {
                double acc = 0.0;
                for (int d = 0; d < D; ++d) acc += g[d] * m->value[static_cast<size_t>(i) * D + d];
                s->grad[i] += acc;
            }
            if (m->requires_grad)
                for (int d = 0; d < D; ++d)
                    m->grad[static_cast<size_t>(i) * D + d] += g[d] * s->value[i];
        }
    });
}

int gaussian_kernel_size(double sigma) {
    if (!(sigma > 0.0)) throw ParameterError("gaussian kernel: sigma must be positive");
    return 6 * static_cast<int>(std::ceil(sigma)) - 1;
}

std::vector<double> gaussian_kernel(double sigma) {
    const int k = gaussian_kernel_size(sigma);
    const int half = (k - 1) / 2;
    std::vector<double> w(k);
    double s = 0.0;
    for (int i = 0; i < k; ++i) {
        double d = i - half;
        w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        s += w[i];
    }
    for (double& x : w) x /= s;
    return w;
}

namespace {

// One separable pass with zero padding; axis 0 = vertical, 1 = horizontal.
void blur_pass(const double* in, double* out, int C, int H, int W, const std::vector<double>& ker,
               int axis) {
    const int half = (static_cast<int>(ker.size()) - 1) / 2;
    for (int c = 0; c < C; ++c) {
        const double* ip = in + static_cast<size_t>(c) * H * W;
        double* op = out + static_cast<size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                if (axis == 1) {
                    const double* row = &ip[static_cast<size_t>(y) * W];
                    int lo = std::max(0, half - x), hi = std::min<int>(ker.size(), W - x + half);
                    for (int i = lo; i < hi; ++i) acc += ker[i] * row[x + i - half];
                } else {
                    int lo = std::max(0, half - y), hi = std::min<int>(ker.size(), H - y + half);
                    for (int i = lo; i < hi; ++i)
                        acc += ker[i] * ip[static_cast<size_t>(y + i - half) * W + x];
                }
                op[static_cast<size_t>(y) * W + x] = acc;
            }
    }
}

}  // namespace

Tensor gaussian_blur(Tape& t, const Tensor& a, double sigma) {
    if (a->shape.size() != 3) throw ShapeError("gaussian_blur: expected [C,H,W]");
    const int C = a->shape[0], H = a->shape[1], W = a->shape[2];
    auto ker = std::make_shared<std::vector<double>>(gaussian_kernel(sigma));
    std::vector<double> tmp(a->numel()), v(a->numel());
    blur_pass(a->value.data(), tmp.data(), C, H, W, *ker, 1);
    blur_pass(tmp.data(), v.data(), C, H, W, *ker, 0);
    return t.record("gaussian_blur", a->shape, std::move(v), {a}, [C, H, W, ker](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        // The operator is linear with a symmetric kernel: the adjoint applies
        // the same two passes in reverse order.
        std::vector<double> tmp(n.grad.size()), gin(n.grad.size());
        blur_pass(n.grad.data(), tmp.data(), C, H, W, *ker, 0);
        blur_pass(tmp.data(), gin.data(), C, H, W, *ker, 1);
        for (size_t i = 0; i < gin.size(); ++i) n.inputs[0]->grad[i] += gin[i];
    });
}

}  // namespace camoforge::diffmath
