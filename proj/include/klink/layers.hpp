#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "klink/autograd.hpp"

namespace klink {

/// 1-D convolution over [batch, in_channels, length] with "same" zero padding:
/// k-1 padding split as floor((k-1)/2) on the left, the rest on the right.
/// weight is [out_channels, in_channels, k]; bias (optional) is [out_channels].
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> weight) {
    detail::require_same_graph(x, weight);
    const auto& X = x.value();
    const auto& W = weight.value();
    if (X.rank() != 3 || W.rank() != 3 || W.dim(1) != X.dim(1)) detail::shape_error<T>("conv1d", {X.shape(), W.shape()});
    const std::size_t B = X.dim(0), Cin = X.dim(1), L = X.dim(2);
    const std::size_t Cout = W.dim(0), K = W.dim(2);
    const std::ptrdiff_t left = static_cast<std::ptrdiff_t>((K - 1) / 2);
    Tensor<T> out(Shape{B, Cout, L});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Cout; ++o)
            for (std::size_t c = 0; c < Cin; ++c)
                for (std::size_t k = 0; k < K; ++k) {
                    const T w = W.at(o, c, k);
                    for (std::size_t t = 0; t < L; ++t) {
                        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - left;
                        if (s < 0 || s >= static_cast<std::ptrdiff_t>(L)) continue;
                        out.at(b, o, t) += w * X.at(b, c, static_cast<std::size_t>(s));
                    }
                }
    return x.graph->record("conv1d", std::move(out), {x.id, weight.id},
                           [ix = x.id, iw = weight.id, B, Cin, L, Cout, K, left](Graph<T>& g, std::size_t self) {
                               const auto& go = g.grad_out(self);
                               const auto& X = g.value(ix);
                               const auto& W = g.value(iw);
                               auto& gx = g.grad_in(ix);
                               auto& gw = g.grad_in(iw);
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t o = 0; o < Cout; ++o)
                                       for (std::size_t c = 0; c < Cin; ++c)
                                           for (std::size_t k = 0; k < K; ++k) {
                                               const T w = W.at(o, c, k);
                                               T acc = 0;
                                               for (std::size_t t = 0; t < L; ++t) {
                                                   const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - left;
                                                   if (s < 0 || s >= static_cast<std::ptrdiff_t>(L)) continue;
                                                   const auto su = static_cast<std::size_t>(s);
                                                   acc += go.at(b, o, t) * X.at(b, c, su);
                                                   gx.at(b, c, su) += go.at(b, o, t) * w;
                                               }
                                               gw.at(o, c, k) += acc;
                                           }
                           });
}

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> weight, Var<T> bias) {
    auto y = conv1d(x, weight);
    const auto& Y = y.value();
    if (bias.value().numel() != Y.dim(1)) detail::shape_error<T>("conv1d bias", {Y.shape(), bias.shape()});
    const std::size_t B = Y.dim(0), C = Y.dim(1), L = Y.dim(2);
    Tensor<T> out = Y;
    const auto& bv = bias.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < L; ++t) out.at(b, c, t) += bv[c];
    return y.graph->record("conv1d_bias", std::move(out), {y.id, bias.id}, [iy = y.id, ib = bias.id, B, C, L](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gy = g.grad_in(iy);
        for (std::size_t i = 0; i < go.numel(); ++i) gy[i] += go[i];
        auto& gb = g.grad_in(ib);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < L; ++t) gb[c] += go.at(b, c, t);
    });
}

/// Max pooling with window 2 and stride 2 over the last axis of
/// [batch, channels, length]; output length floor(length / 2).
template <typename T>
Var<T> maxpool1d(Var<T> x) {
    const auto& X = x.value();
    detail::require_rank("maxpool1d", X, 3);
    const std::size_t B = X.dim(0), C = X.dim(1), L = X.dim(2), Lo = L / 2;
    if (Lo == 0) throw Error("maxpool1d: input length " + std::to_string(L) + " pools to zero");
    Tensor<T> out(Shape{B, C, Lo});
    std::vector<std::size_t> argmax(B * C * Lo);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < Lo; ++t) {
                const std::size_t i0 = 2 * t, i1 = 2 * t + 1;
                const std::size_t best = X.at(b, c, i1) > X.at(b, c, i0) ? i1 : i0;
                out.at(b, c, t) = X.at(b, c, best);
                argmax[(b * C + c) * Lo + t] = best;
            }
    return x.graph->record("maxpool1d", std::move(out), {x.id}, [ix = x.id, B, C, Lo, argmax = std::move(argmax)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gx = g.grad_in(ix);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < Lo; ++t) gx.at(b, c, argmax[(b * C + c) * Lo + t]) += go.at(b, c, t);
    });
}

/// Running statistics for batchnorm1d; updated in training mode only.
template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNormStats() = default;
    explicit BatchNormStats(std::size_t channels)
        : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

/// Batch normalization over [batch, channels, length], per channel. Training
/// mode normalizes with the biased batch variance and folds the unbiased one
/// into the running estimate; evaluation mode uses the running statistics.
template <typename T>
Var<T> batchnorm1d(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, bool training) {
    const auto& X = x.value();
    detail::require_rank("batchnorm1d", X, 3);
    const std::size_t B = X.dim(0), C = X.dim(1), L = X.dim(2);
    if (gamma.value().numel() != C || beta.value().numel() != C || stats.running_mean.numel() != C) {
        detail::shape_error<T>("batchnorm1d", {X.shape(), gamma.shape(), beta.shape()});
    }
    const std::size_t count = B * L;
    std::vector<T> mu(C), inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        if (training) {
            T s = 0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < L; ++t) s += X.at(b, c, t);
            const T m = s / static_cast<T>(count);
            T v = 0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < L; ++t) {
                    const T d = X.at(b, c, t) - m;
                    v += d * d;
                }
            const T biased = v / static_cast<T>(count);
            const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : biased;
            mu[c] = m;
            inv_std[c] = T(1) / std::sqrt(biased + stats.eps);
            stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * m;
            stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
        } else {
            mu[c] = stats.running_mean[c];
            inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + stats.eps);
        }
    }
    const auto& G = gamma.value();
    const auto& Bt = beta.value();
    Tensor<T> out(X.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < L; ++t) out.at(b, c, t) = G[c] * (X.at(b, c, t) - mu[c]) * inv_std[c] + Bt[c];

    return x.graph->record(
        "batchnorm1d", std::move(out), {x.id, gamma.id, beta.id},
        [ix = x.id, ig = gamma.id, ib = beta.id, B, C, L, count, training, mu = std::move(mu), inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
            const auto& go = g.grad_out(self);
            const auto& X = g.value(ix);
            const auto& G = g.value(ig);
            auto& gx = g.grad_in(ix);
            auto& gg = g.grad_in(ig);
            auto& gb = g.grad_in(ib);
            const T n = static_cast<T>(count);
            for (std::size_t c = 0; c < C; ++c) {
                T sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t t = 0; t < L; ++t) {
                        const T xhat = (X.at(b, c, t) - mu[c]) * inv_std[c];
                        sum_dy += go.at(b, c, t);
                        sum_dy_xhat += go.at(b, c, t) * xhat;
                    }
                gg[c] += sum_dy_xhat;
                gb[c] += sum_dy;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t t = 0; t < L; ++t) {
                        if (training) {
                            const T xhat = (X.at(b, c, t) - mu[c]) * inv_std[c];
                            gx.at(b, c, t) += G[c] * inv_std[c] / n * (n * go.at(b, c, t) - sum_dy - xhat * sum_dy_xhat);
                        } else {
                            gx.at(b, c, t) += G[c] * inv_std[c] * go.at(b, c, t);
                        }
                    }
            }
        });
}

/// Mean cross-entropy of row logits against class indices.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels) {
    auto picked = pick(log_softmax_rows(logits), labels);
    return scale(mean(picked), T(-1));
}

}  // namespace klink
