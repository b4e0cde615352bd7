#include "redec/optim.hpp"

#include <cmath>

#include "redec/errors.hpp"

namespace redec {

void OptimizerState::init(const std::vector<Tensor>& params) {
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
    velocity.clear();
    velocity.reserve(params.size());
    for (const Tensor& p : params) velocity.push_back(Tensor::zeros(p.shape()));
}

double lr_at_epoch(int epoch, const OptimizerState& state) {
    if (epoch < 0) throw ContractError("epoch must be non-negative");
    return state.lr0 * std::pow(state.decay_factor, epoch / state.decay_period);
}

void sgd_momentum_step(std::vector<Tensor>& params, OptimizerState& state, double lr) {
    if (lr <= 0.0) throw ContractError("learning rate must be positive");
    if (state.velocity.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        Tensor& v = state.velocity[i];
        if (v.shape() != p.shape()) throw ContractError("velocity shape does not match parameter shape");
        const double* g = p.grad();
        double* vd = v.data();
        double* pd = p.data();
        const int64_t n = p.numel();
        for (int64_t j = 0; j < n; ++j) {
            vd[j] = state.momentum * vd[j] - lr * g[j];
            pd[j] += vd[j];
        }
    }
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (Tensor& p : params) {
        const double* g = p.grad();
        for (int64_t j = 0; j < p.numel(); ++j) sq += g[j] * g[j];
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (Tensor& p : params) {
            double* g = p.grad();
            for (int64_t j = 0; j < p.numel(); ++j) g[j] *= s;
        }
    }
    return norm;
}

void zero_grads(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

}  // namespace redec
