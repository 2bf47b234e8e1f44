#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "klink/autograd.hpp"

namespace klink {

/// Adam with bias correction. Moments are allocated lazily on the first
/// step and always mirror the shape of their parameter.
template <typename T>
struct AdamState {
    std::size_t step = 0;
    std::vector<Tensor<T>> first_moment;
    std::vector<Tensor<T>> second_moment;
    T learning_rate = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T epsilon = T(1e-8);
};

template <typename T>
void adam_step(AdamState<T>& state, std::span<Parameter<T>* const> params) {
    if (state.first_moment.empty()) {
        for (auto* p : params) {
            state.first_moment.emplace_back(p->value.shape());
            state.second_moment.emplace_back(p->value.shape());
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw Error("adam_step: state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                    std::to_string(params.size()));
    }
    ++state.step;
    const T c1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T c2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        if (p.grad.shape() != p.value.shape() || m.shape() != p.value.shape()) {
            throw Error("adam_step: shape mismatch for parameter " + p.name + " " + shape_str(p.value.shape()) + " vs grad " +
                        shape_str(p.grad.shape()));
        }
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const T g = p.grad[i];
            m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g * g;
            const T mhat = m[i] / c1;
            const T vhat = v[i] / c2;
            p.value[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

template <typename T>
void adam_step(AdamState<T>& state, const std::vector<Parameter<T>*>& params) {
    adam_step(state, std::span<Parameter<T>* const>(params));
}

}  // namespace klink
