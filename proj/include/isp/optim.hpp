#pragma once

#include <cstdint>
#include <vector>

#include "isp/model.hpp"

namespace isp {

struct AdamWConfig {
    double lr = 1e-3;  // base learning rate, before schedule
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    bool operator==(const AdamWConfig&) const = default;
};

struct OptimizerState {
    AdamWConfig cfg;
    uint64_t step = 0;  // completed optimizer steps
    std::vector<std::vector<double>> m;  // aligned to model parameter order
    std::vector<std::vector<double>> v;
};

OptimizerState make_optimizer(const Model& model, const AdamWConfig& cfg);

// Bias-corrected Adam update plus decoupled weight decay applied to the
// incoming weight: w <- w - lr*mhat/(sqrt(vhat)+eps) - lr*wd*w. Masked-out
// weights are reset to exactly zero afterwards.
void adamw_step(Model& model, OptimizerState& opt, double lr_now,
                const MaskBitsView* mask = nullptr);

// Linear decay from base_lr at step 0 to zero at step == total_steps.
double lr_schedule(uint64_t step, uint64_t total_steps, double base_lr);

}  // namespace isp
