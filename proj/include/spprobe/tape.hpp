// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spprobe/errors.hpp"
#include "spprobe/tensor.hpp"

namespace spprobe {

/// Behaviour of the ReLU backward rule. Guided mode additionally masks by
/// the sign of the upstream gradient, which is the modification guided
/// backpropagation applies at ReLU units.
enum class ReluMode { kStandard, kGuided };

/// Records primitive operations during a forward pass and replays their
/// backward rules in exact reverse order. The ReLU mode is fixed for the
/// lifetime of the tape, i.e. for one forward/backward pass.
///
/// A tape owns every intermediate tensor it creates; parameter tensors
/// live outside and only have their grad buffers filled.
class Tape {
public:
    explicit Tape(ReluMode mode = ReluMode::kStandard) : relu_mode_(mode) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor* make(std::vector<int> shape) {
        owned_.push_back(std::make_unique<Tensor>(std::move(shape)));
        return owned_.back().get();
    }

    Tensor* make(std::vector<int> shape, std::vector<double> values) {
        owned_.push_back(std::make_unique<Tensor>(std::move(shape), std::move(values)));
        return owned_.back().get();
    }

    void record(std::function<void()> backward_rule) {
        ops_.push_back(std::move(backward_rule));
    }

    ReluMode relu_mode() const { return relu_mode_; }
    bool empty() const { return ops_.empty(); }
    std::size_t op_count() const { return ops_.size(); }

    /// Seeds `output` with `output_grad` and replays all recorded backward
    /// rules in reverse order of recording.
    void backward(Tensor* output, std::span<const double> output_grad) {
        if (ops_.empty())
            throw UsageError("backward called before forward: tape has no recorded operations");
        if (backward_done_)
            throw UsageError("backward already run on this tape; use a fresh tape per pass");
        if (output_grad.size() != output->numel())
            throw ShapeError("backward: output_grad length " +
                             std::to_string(output_grad.size()) + " does not match output " +
                             shape_str(output->shape));
        output->ensure_grad();
        for (std::size_t i = 0; i < output_grad.size(); ++i)
            output->grad[i] += output_grad[i];
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        backward_done_ = true;
    }

private:
    ReluMode relu_mode_;
    std::vector<std::unique_ptr<Tensor>> owned_;
    std::vector<std::function<void()>> ops_;
    bool backward_done_ = false;
};

namespace detail {

// C(m x n) += A(m x k) * B(k x n), all row-major. The k-inner loop order
// streams rows of B and lets the compiler vectorize over n.
inline void gemm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * k;
        double* c = C + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const double av = a[l];
            if (av == 0.0) continue;
            const double* b = B + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C(m x n) += A(m x k) * B(n x k)^T
inline void gemm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * k;
        double* c = C + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* b = B + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += a[l] * b[l];
            c[j] += acc;
        }
    }
}

// C(m x n) += A(k x m)^T * B(k x n)
inline void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int l = 0; l < k; ++l) {
        const double* a = A + static_cast<std::size_t>(l) * m;
        const double* b = B + static_cast<std::size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[i];
            if (av == 0.0) continue;
            double* c = C + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

inline void check_finite(const Tensor* t, const std::string& label) {
    if (!t->all_finite())
        throw NumericError("non-finite activation in " + label);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Each validates shapes, computes the forward result
// into a tape-owned tensor and records the matching backward rule.
// ---------------------------------------------------------------------------

/// 2-D convolution, stride 1, zero "same" padding.
/// x: (N,H,W,Cin)  w: (kh,kw,Cin,Cout)  b: (Cout)  ->  (N,H,W,Cout)
inline Tensor* conv2d(Tape& tape, Tensor* x, Tensor* w, Tensor* b,
                      const std::string& label = "conv2d") {
    if (x->shape.size() != 4)
        throw ShapeError(label + ": input must be (N,H,W,C), got " + shape_str(x->shape));
    if (w->shape.size() != 4)
        throw ShapeError(label + ": kernel must be (kh,kw,Cin,Cout), got " + shape_str(w->shape));
    const int N = x->dim(0), H = x->dim(1), W = x->dim(2), Ci = x->dim(3);
    const int kh = w->dim(0), kw = w->dim(1), Co = w->dim(3);
    if (w->dim(2) != Ci)
        throw ShapeError(label + ": kernel expects " + std::to_string(w->dim(2)) +
                         " input channels, input has " + std::to_string(Ci));
    if (b->shape != std::vector<int>{Co})
        throw ShapeError(label + ": bias shape " + shape_str(b->shape) + " != (" +
                         std::to_string(Co) + ")");
    const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const int K = kh * kw * Ci;
    const int HW = H * W;

    Tensor* y = tape.make({N, H, W, Co});

    // Patch matrix, one (HW x K) block per batch element, kept for backward.
    auto patches = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(N) * HW * K, 0.0);

    for (int n = 0; n < N; ++n) {
        double* P = patches->data() + static_cast<std::size_t>(n) * HW * K;
        const double* xin = x->data.data() + static_cast<std::size_t>(n) * H * W * Ci;
        std::size_t row = 0;
        for (int oy = 0; oy < H; ++oy) {
            for (int ox = 0; ox < W; ++ox, ++row) {
                double* prow = P + row * K;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy + ky - ph;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox + kx - pw;
                        if (ix < 0 || ix >= W) continue;
                        const double* src = xin + (static_cast<std::size_t>(iy) * W + ix) * Ci;
                        double* dst = prow + (static_cast<std::size_t>(ky) * kw + kx) * Ci;
                        for (int c = 0; c < Ci; ++c) dst[c] = src[c];
                    }
                }
            }
        }
        double* yout = y->data.data() + static_cast<std::size_t>(n) * HW * Co;
        for (int r = 0; r < HW; ++r) {
            double* yr = yout + static_cast<std::size_t>(r) * Co;
            for (int c = 0; c < Co; ++c) yr[c] = b->data[c];
        }
        detail::gemm_nn_acc(P, w->data.data(), yout, HW, K, Co);
    }
    detail::check_finite(y, label);

    tape.record([x, w, b, y, patches, N, HW, K, Co, H, W, Ci, kh, kw, ph, pw]() {
        if (!y->has_grad()) return;
        x->ensure_grad();
        w->ensure_grad();
        b->ensure_grad();
        std::vector<double> dP(static_cast<std::size_t>(HW) * K);
        for (int n = 0; n < N; ++n) {
            const double* dY = y->grad.data() + static_cast<std::size_t>(n) * HW * Co;
            const double* P = patches->data() + static_cast<std::size_t>(n) * HW * K;
            // dW += P^T dY ; db += colsum dY
            detail::gemm_tn_acc(P, dY, w->grad.data(), K, HW, Co);
            for (int r = 0; r < HW; ++r) {
                const double* dyr = dY + static_cast<std::size_t>(r) * Co;
                for (int c = 0; c < Co; ++c) b->grad[c] += dyr[c];
            }
            // dP = dY W^T, then scatter-add back into dx
            std::fill(dP.begin(), dP.end(), 0.0);
            detail::gemm_nt_acc(dY, w->data.data(), dP.data(), HW, Co, K);
            double* dx = x->grad.data() + static_cast<std::size_t>(n) * H * W * Ci;
            std::size_t row = 0;
            for (int oy = 0; oy < H; ++oy) {
                for (int ox = 0; ox < W; ++ox, ++row) {
                    const double* prow = dP.data() + row * K;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy + ky - ph;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox + kx - pw;
                            if (ix < 0 || ix >= W) continue;
                            double* dst = dx + (static_cast<std::size_t>(iy) * W + ix) * Ci;
                            const double* src =
                                prow + (static_cast<std::size_t>(ky) * kw + kx) * Ci;
                            for (int c = 0; c < Ci; ++c) dst[c] += src[c];
                        }
                    }
                }
            }
        }
    });
    return y;
}

/// Elementwise max(0, x). Backward depends on the tape's ReLU mode:
/// standard passes upstream grad where input > 0; guided additionally
/// requires the upstream grad itself to be positive.
inline Tensor* relu(Tape& tape, Tensor* x, const std::string& label = "relu") {
    Tensor* y = tape.make(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i)
        y->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    detail::check_finite(y, label);
    const ReluMode mode = tape.relu_mode();
    tape.record([x, y, mode]() {
        if (!y->has_grad()) return;
        x->ensure_grad();
        if (mode == ReluMode::kGuided) {
            for (std::size_t i = 0; i < x->numel(); ++i)
                if (x->data[i] > 0.0 && y->grad[i] > 0.0) x->grad[i] += y->grad[i];
        } else {
            for (std::size_t i = 0; i < x->numel(); ++i)
                if (x->data[i] > 0.0) x->grad[i] += y->grad[i];
        }
    });
    return y;
}

/// Batch normalization over (N,H,W) per channel of an NHWC tensor.
/// Training mode normalizes with batch statistics and updates the running
/// buffers in place; eval mode uses the running statistics.
inline Tensor* batchnorm(Tape& tape, Tensor* x, Tensor* gamma, Tensor* beta,
                         Tensor* running_mean, Tensor* running_var, bool training,
                         double eps = 1e-5, double momentum = 0.1,
                         const std::string& label = "batchnorm") {
    if (x->shape.size() != 4)
        throw ShapeError(label + ": input must be (N,H,W,C), got " + shape_str(x->shape));
    const int C = x->dim(3);
    const std::size_t M = x->numel() / static_cast<std::size_t>(C); // N*H*W
    if (gamma->shape != std::vector<int>{C} || beta->shape != std::vector<int>{C})
        throw ShapeError(label + ": scale/shift must have shape (" + std::to_string(C) + ")");

    Tensor* y = tape.make(x->shape);
    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto inv_std = std::make_shared<std::vector<double>>(C, 0.0);

    if (training) {
        std::vector<double> var(C, 0.0);
        for (std::size_t i = 0; i < x->numel(); i += C)
            for (int c = 0; c < C; ++c) (*mean)[c] += x->data[i + c];
        for (int c = 0; c < C; ++c) (*mean)[c] /= static_cast<double>(M);
        for (std::size_t i = 0; i < x->numel(); i += C)
            for (int c = 0; c < C; ++c) {
                const double d = x->data[i + c] - (*mean)[c];
                var[c] += d * d;
            }
        for (int c = 0; c < C; ++c) {
            var[c] /= static_cast<double>(M);
            (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
            running_mean->data[c] =
                (1.0 - momentum) * running_mean->data[c] + momentum * (*mean)[c];
            running_var->data[c] =
                (1.0 - momentum) * running_var->data[c] + momentum * var[c];
        }
    } else {
        for (int c = 0; c < C; ++c) {
            if (!(running_var->data[c] > 0.0))
                throw NumericError(label + ": running variance must be positive");
            (*mean)[c] = running_mean->data[c];
            (*inv_std)[c] = 1.0 / std::sqrt(running_var->data[c] + eps);
        }
    }

    for (std::size_t i = 0; i < x->numel(); i += C)
        for (int c = 0; c < C; ++c) {
            const double xhat = (x->data[i + c] - (*mean)[c]) * (*inv_std)[c];
            y->data[i + c] = gamma->data[c] * xhat + beta->data[c];
        }
    detail::check_finite(y, label);

    tape.record([x, y, gamma, beta, mean, inv_std, training, C, M]() {
        if (!y->has_grad()) return;
        x->ensure_grad();
        gamma->ensure_grad();
        beta->ensure_grad();
        std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
        for (std::size_t i = 0; i < x->numel(); i += C)
            for (int c = 0; c < C; ++c) {
                const double xhat = (x->data[i + c] - (*mean)[c]) * (*inv_std)[c];
                dgamma[c] += y->grad[i + c] * xhat;
                dbeta[c] += y->grad[i + c];
            }
        if (training) {
            // dx = (gamma*inv_std/M) * (M*dy - xhat*dgamma - dbeta)
            const double m = static_cast<double>(M);
            for (std::size_t i = 0; i < x->numel(); i += C)
                for (int c = 0; c < C; ++c) {
                    const double xhat = (x->data[i + c] - (*mean)[c]) * (*inv_std)[c];
                    x->grad[i + c] += gamma->data[c] * (*inv_std)[c] / m *
                                      (m * y->grad[i + c] - xhat * dgamma[c] - dbeta[c]);
                }
        } else {
            for (std::size_t i = 0; i < x->numel(); i += C)
                for (int c = 0; c < C; ++c)
                    x->grad[i + c] += y->grad[i + c] * gamma->data[c] * (*inv_std)[c];
        }
        for (int c = 0; c < C; ++c) {
            gamma->grad[c] += dgamma[c];
            beta->grad[c] += dbeta[c];
        }
    });
    return y;
}

/// 2x2 max pooling, stride 2. Ties route the gradient to the first maximal
/// element in row-major window order. Odd trailing rows/columns are dropped.
inline Tensor* maxpool2(Tape& tape, Tensor* x, const std::string& label = "maxpool2") {
    if (x->shape.size() != 4)
        throw ShapeError(label + ": input must be (N,H,W,C), got " + shape_str(x->shape));
    const int N = x->dim(0), H = x->dim(1), W = x->dim(2), C = x->dim(3);
    const int Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0)
        throw ShapeError(label + ": input " + shape_str(x->shape) + " too small to pool");
    Tensor* y = tape.make({N, Ho, Wo, C});
    auto argmax = std::make_shared<std::vector<std::size_t>>(y->numel());

    auto xat = [&](int n, int h, int w, int c) -> std::size_t {
        return ((static_cast<std::size_t>(n) * H + h) * W + w) * C + c;
    };
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox)
                for (int c = 0; c < C; ++c, ++o) {
                    std::size_t best = xat(n, 2 * oy, 2 * ox, c);
                    double bv = x->data[best];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = xat(n, 2 * oy + dy, 2 * ox + dx, c);
                            if (x->data[idx] > bv) { // strict: first max wins
                                bv = x->data[idx];
                                best = idx;
                            }
                        }
                    y->data[o] = bv;
                    (*argmax)[o] = best;
                }
    detail::check_finite(y, label);

    tape.record([x, y, argmax]() {
        if (!y->has_grad()) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < y->numel(); ++i)
            x->grad[(*argmax)[i]] += y->grad[i];
    });
    return y;
}

/// Reshape (N, ...) -> (N, D). Copies data; backward copies grads back.
inline Tensor* flatten(Tape& tape, Tensor* x, const std::string& label = "flatten") {
    if (x->shape.empty())
        throw ShapeError(label + ": cannot flatten a scalar");
    const int N = x->dim(0);
    const int D = static_cast<int>(x->numel() / static_cast<std::size_t>(N));
    Tensor* y = tape.make({N, D});
    y->data = x->data;
    tape.record([x, y]() {
        if (!y->has_grad()) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += y->grad[i];
    });
    return y;
}

/// Fully connected layer: y(N,M) = x(N,D) * w(D,M) + b(M).
inline Tensor* dense(Tape& tape, Tensor* x, Tensor* w, Tensor* b,
                     const std::string& label = "dense") {
    if (x->shape.size() != 2 || w->shape.size() != 2)
        throw ShapeError(label + ": expects 2-D input and weights");
    const int N = x->dim(0), D = x->dim(1), M = w->dim(1);
    if (w->dim(0) != D)
        throw ShapeError(label + ": input dim " + std::to_string(D) +
                         " does not match weight rows " + std::to_string(w->dim(0)));
    if (b->shape != std::vector<int>{M})
        throw ShapeError(label + ": bias shape " + shape_str(b->shape) + " != (" +
                         std::to_string(M) + ")");
    Tensor* y = tape.make({N, M});
    for (int n = 0; n < N; ++n) {
        double* yr = y->data.data() + static_cast<std::size_t>(n) * M;
        for (int j = 0; j < M; ++j) yr[j] = b->data[j];
    }
    detail::gemm_nn_acc(x->data.data(), w->data.data(), y->data.data(), N, D, M);
    detail::check_finite(y, label);

    tape.record([x, w, b, y, N, D, M]() {
        if (!y->has_grad()) return;
        x->ensure_grad();
        w->ensure_grad();
        b->ensure_grad();
        detail::gemm_nt_acc(y->grad.data(), w->data.data(), x->grad.data(), N, M, D);
        detail::gemm_tn_acc(x->data.data(), y->grad.data(), w->grad.data(), D, N, M);
        for (int n = 0; n < N; ++n) {
            const double* dyr = y->grad.data() + static_cast<std::size_t>(n) * M;
            for (int j = 0; j < M; ++j) b->grad[j] += dyr[j];
        }
    });
    return y;
}

/// Mean softmax cross-entropy over a batch. Returns a scalar-shaped tensor.
/// The backward rule at the logits is exactly (softmax - onehot) / N.
inline Tensor* softmax_cross_entropy(Tape& tape, Tensor* logits,
                                     const std::vector<int>& labels,
                                     const std::string& label = "softmax_xent") {
    if (logits->shape.size() != 2)
        throw ShapeError(label + ": logits must be (N,K), got " + shape_str(logits->shape));
    const int N = logits->dim(0), K = logits->dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError(label + ": got " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(N));
    Tensor* loss = tape.make({1});
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * K);
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* z = logits->data.data() + static_cast<std::size_t>(n) * K;
        double* p = probs->data() + static_cast<std::size_t>(n) * K;
        const int yn = labels[n];
        if (yn < 0 || yn >= K)
            throw ParameterError(label + ": label " + std::to_string(yn) + " out of range");
        double zmax = z[0];
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) {
            p[k] = std::exp(z[k] - zmax);
            sum += p[k];
        }
        for (int k = 0; k < K; ++k) p[k] /= sum;
        total += std::log(sum) + zmax - z[yn];
    }
    loss->data[0] = total / N;
    detail::check_finite(loss, label);

    tape.record([logits, loss, probs, labels, N, K]() {
        if (!loss->has_grad()) return;
        logits->ensure_grad();
        const double g = loss->grad[0] / N;
        for (int n = 0; n < N; ++n) {
            double* dz = logits->grad.data() + static_cast<std::size_t>(n) * K;
            const double* p = probs->data() + static_cast<std::size_t>(n) * K;
            for (int k = 0; k < K; ++k) dz[k] += g * (p[k] - (k == labels[n] ? 1.0 : 0.0));
        }
    });
    return loss;
}

} // namespace spprobe
