#pragma once

#include <vector>

#include "redec/tensor.hpp"

namespace redec {

// Classical SGD with momentum: v <- mu*v - lr*g, p <- p + v.
// The schedule starts at lr0 and multiplies by decay_factor every
// decay_period epochs.
struct OptimizerState {
    double momentum = 0.9;
    double lr0 = 0.01;
    double decay_factor = 0.8;
    int decay_period = 10;
    std::vector<Tensor> velocity;  // aligned with the parameter list

    void init(const std::vector<Tensor>& params);
};

double lr_at_epoch(int epoch, const OptimizerState& state);

// One update over all parameters; gradients are read from each tensor's grad
// buffer. Velocity buffers must have been initialized against `params`.
void sgd_momentum_step(std::vector<Tensor>& params, OptimizerState& state, double lr);

// Scales all gradients so their global L2 norm is at most `max_norm`.
// Returns the pre-clip norm.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

void zero_grads(std::vector<Tensor>& params);

}  // namespace redec
