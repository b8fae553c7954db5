#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

#include "isp/data.hpp"
#include "isp/mask.hpp"
#include "isp/model.hpp"
#include "isp/optim.hpp"

namespace isp {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BudgetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Phase : size_t { Pretrain = 0, MaskGen, LookAhead, FineTune, WeakTrain, Eval };
constexpr size_t kPhaseCount = 6;
const char* phase_name(Phase p);

// Optimizer-step and FLOP accounting per phase. An optional step budget caps
// the optimizer phases (Eval passes are tracked but never capped).
struct BudgetLedger {
    struct Entry {
        uint64_t steps = 0;
        uint64_t flops = 0;
    };
    std::array<Entry, kPhaseCount> by_phase{};
    std::optional<uint64_t> step_budget;

    void charge(Phase p, uint64_t steps, uint64_t flops);
    uint64_t optimizer_steps() const;  // all phases except Eval
    uint64_t total_flops() const;      // all phases including Eval
    uint64_t remaining_steps() const;  // vs. step_budget; huge when uncapped
};

// Everything a training run mutates: parameters, optimizer moments, data
// order, and the linear-decay schedule position. Plain copies are snapshots.
struct TrainState {
    Model model;
    OptimizerState opt;
    DataStream stream;
    uint64_t global_step = 0;     // schedule numerator
    uint64_t lr_total_steps = 1;  // schedule denominator (T)
    double base_lr = 1e-3;

    double current_lr() const { return lr_schedule(global_step, lr_total_steps, base_lr); }
};

TrainState make_train_state(const ModelSpec& spec, uint64_t init_seed,
                            const AdamWConfig& opt_cfg, uint64_t data_seed,
                            uint64_t total_steps);

struct TraceRow {
    uint64_t step = 0;  // global optimizer step after this update
    Phase phase = Phase::Pretrain;
    double lr = 0.0;
    double sparsity = 0.0;
    double loss = 0.0;
    double density = 1.0;
    size_t batch = 0;
};

using StepHook = std::function<void(const TraceRow&)>;

// Runs exactly n_steps optimizer steps over the given split (wrapping at
// epoch boundaries), charging the ledger per step. A NaN/inf loss raises
// NumericError; masked weights are re-zeroed and checked every step.
void train_steps(TrainState& st, const Dataset& ds, const std::vector<uint32_t>& split,
                 size_t batch_size, uint64_t n_steps, const Mask* mask, Phase phase,
                 BudgetLedger& ledger, const StepHook& hook = nullptr);

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    size_t count = 0;
};

EvalResult evaluate(const Model& model, const Dataset& ds,
                    const std::vector<uint32_t>& split, const Mask* mask,
                    size_t batch_size, BudgetLedger* ledger = nullptr);

}  // namespace isp
