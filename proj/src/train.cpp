#include "isp/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace isp {

const char* phase_name(Phase p) {
    switch (p) {
        case Phase::Pretrain: return "pretrain";
        case Phase::MaskGen: return "mask_gen";
        case Phase::LookAhead: return "look_ahead";
        case Phase::FineTune: return "fine_tune";
        case Phase::WeakTrain: return "weak_train";
        case Phase::Eval: return "eval";
    }
    return "?";
}

void BudgetLedger::charge(Phase p, uint64_t steps, uint64_t flops) {
    if (p != Phase::Eval && step_budget && optimizer_steps() + steps > *step_budget) {
        throw BudgetError("step budget exceeded: " + std::to_string(optimizer_steps() + steps) +
                          " > " + std::to_string(*step_budget) + " in phase " + phase_name(p));
    }
    auto& e = by_phase[static_cast<size_t>(p)];
    e.steps += steps;
    e.flops += flops;
}

uint64_t BudgetLedger::optimizer_steps() const {
    uint64_t total = 0;
    for (size_t i = 0; i < kPhaseCount; ++i) {
        if (static_cast<Phase>(i) == Phase::Eval) continue;
        total += by_phase[i].steps;
    }
    return total;
}

uint64_t BudgetLedger::total_flops() const {
    uint64_t total = 0;
    for (const auto& e : by_phase) total += e.flops;
    return total;
}

uint64_t BudgetLedger::remaining_steps() const {
    if (!step_budget) return std::numeric_limits<uint64_t>::max();
    const uint64_t used = optimizer_steps();
    return used >= *step_budget ? 0 : *step_budget - used;
}

TrainState make_train_state(const ModelSpec& spec, uint64_t init_seed,
                            const AdamWConfig& opt_cfg, uint64_t data_seed,
                            uint64_t total_steps) {
    TrainState st;
    st.model = Model(spec, init_seed);
    st.opt = make_optimizer(st.model, opt_cfg);
    st.stream = DataStream{data_seed, 0};
    st.global_step = 0;
    st.lr_total_steps = total_steps == 0 ? 1 : total_steps;
    st.base_lr = opt_cfg.lr;
    return st;
}

void train_steps(TrainState& st, const Dataset& ds, const std::vector<uint32_t>& split,
                 size_t batch_size, uint64_t n_steps, const Mask* mask, Phase phase,
                 BudgetLedger& ledger, const StepHook& hook) {
    if (n_steps == 0) return;
    MaskBitsView view;
    double density = 1.0, sparsity = 0.0;
    if (mask) {
        view = mask->view_for(st.model);
        const auto rep = mask->density();
        sparsity = rep.sparsity;
        density = rep.total == 0
                      ? 1.0
                      : static_cast<double>(rep.kept) / static_cast<double>(rep.total);
        if (density <= 0.0) density = 1.0 / static_cast<double>(rep.total);
    }
    const MaskBitsView* viewp = mask ? &view : nullptr;
    const uint64_t step_flops = flops_per_step(st.model.spec(), batch_size, density);

    for (uint64_t s = 0; s < n_steps; ++s) {
        ledger.charge(phase, 1, step_flops);
        const double lr = st.current_lr();
        Batch batch = next_batch(ds, split, st.stream, batch_size);
        st.model.zero_grads();
        Tensor loss = st.model.loss(batch, viewp);
        const double loss_val = loss.item();
        if (!std::isfinite(loss_val)) {
            throw NumericError("non-finite loss at step " + std::to_string(st.global_step));
        }
        loss.backward();
        adamw_step(st.model, st.opt, lr, viewp);
        st.global_step += 1;
        if (mask) {
            // Frozen-zero contract: pruned weights must be exactly zero here.
            for (size_t pi = 0; pi < st.model.params().size(); ++pi) {
                const uint8_t* bits = view.per_param[pi];
                if (!bits) continue;
                const auto& data = st.model.params()[pi].data;
                for (size_t j = 0; j < data.size(); ++j) {
                    if (!bits[j] && data[j] != 0.0) {
                        throw NumericError("masked weight drifted from zero: " +
                                           st.model.params()[pi].name);
                    }
                }
            }
        }
        if (hook) {
            TraceRow row;
            row.step = st.global_step;
            row.phase = phase;
            row.lr = lr;
            row.sparsity = sparsity;
            row.loss = loss_val;
            row.density = density;
            row.batch = batch_size;
            hook(row);
        }
    }
}

EvalResult evaluate(const Model& model, const Dataset& ds,
                    const std::vector<uint32_t>& split, const Mask* mask,
                    size_t batch_size, BudgetLedger* ledger) {
    if (split.empty()) throw std::runtime_error("evaluate: empty split");
    MaskBitsView view;
    double density = 1.0;
    if (mask) {
        view = mask->view_for(model);
        const auto rep = mask->density();
        density = rep.total == 0
                      ? 1.0
                      : static_cast<double>(rep.kept) / static_cast<double>(rep.total);
        if (density <= 0.0) density = 1.0 / static_cast<double>(rep.total);
    }
    const MaskBitsView* viewp = mask ? &view : nullptr;

    EvalResult res;
    res.count = split.size();
    double loss_sum = 0.0;
    size_t correct = 0;
    for (size_t off = 0; off < split.size(); off += batch_size) {
        const size_t take = std::min(batch_size, split.size() - off);
        Batch batch = gather_batch(ds, split.data() + off, take);
        Tensor logits = model.forward(batch, viewp);
        const auto& vals = logits.value();
        const size_t classes = logits.cols();
        for (size_t i = 0; i < take; ++i) {
            const double* row = vals.data() + i * classes;
            size_t arg = 0;
            for (size_t j = 1; j < classes; ++j) {
                if (row[j] > row[arg]) arg = j;
            }
            if (static_cast<int>(arg) == batch.labels[i]) ++correct;
        }
        Tensor loss = cross_entropy(logits, batch.labels);
        loss_sum += loss.item() * static_cast<double>(take);
        if (ledger) ledger->charge(Phase::Eval, 0, flops_forward(model.spec(), take, density));
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
    res.mean_loss = loss_sum / static_cast<double>(split.size());
    return res;
}

}  // namespace isp
