#include "isp/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace isp {

OptimizerState make_optimizer(const Model& model, const AdamWConfig& cfg) {
    OptimizerState st;
    st.cfg = cfg;
    st.m.reserve(model.params().size());
    st.v.reserve(model.params().size());
    for (const auto& p : model.params()) {
        st.m.emplace_back(p.size(), 0.0);
        st.v.emplace_back(p.size(), 0.0);
    }
    return st;
}

void adamw_step(Model& model, OptimizerState& opt, double lr_now,
                const MaskBitsView* mask) {
    auto& params = model.params();
    if (opt.m.size() != params.size()) {
        throw std::runtime_error("optimizer state does not match model");
    }
    if (mask && mask->per_param.size() != params.size()) {
        throw std::runtime_error("mask view does not match model");
    }
    opt.step += 1;
    const double b1 = opt.cfg.beta1, b2 = opt.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    const double wd = opt.cfg.weight_decay;
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (p.grad.size() != p.data.size()) p.grad.assign(p.data.size(), 0.0);
        double* w = p.data.data();
        const double* g = p.grad.data();
        double* m = opt.m[i].data();
        double* v = opt.v[i].data();
        for (size_t j = 0; j < p.data.size(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= lr_now * mhat / (std::sqrt(vhat) + opt.cfg.eps) + lr_now * wd * w[j];
        }
        if (mask && mask->per_param[i]) {
            const uint8_t* bits = mask->per_param[i];
            for (size_t j = 0; j < p.data.size(); ++j) {
                if (!bits[j]) w[j] = 0.0;
            }
        }
    }
}

double lr_schedule(uint64_t step, uint64_t total_steps, double base_lr) {
    if (total_steps == 0) throw std::runtime_error("lr_schedule: total_steps is zero");
    if (step > total_steps) step = total_steps;
    return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

}  // namespace isp
