#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "isp/mask.hpp"
#include "isp/train.hpp"

namespace isp {

// Removal count convention used by every criterion: floor(rate * kept), with
// a small epsilon so exact-integer products never round down spuriously.
size_t removal_count(size_t kept, double rate);

// Prune-call cadence for the triangular schedule: (i+1)*t training steps
// before call i, loop i = 0..k, mask budget M >= sum of those steps.
struct PruneSchedule {
    uint64_t t = 10;   // seed steps
    double s = 0.15;   // per-call removal rate (fraction of survivors)
    double S = 0.5;    // target sparsity
    uint64_t T = 0;    // total step budget
    uint64_t M = 0;    // mask-generation step budget
    uint64_t k = 0;    // derived last loop index
    uint64_t r = 0;    // derived prune calls needed to reach S

    // M_override = 0 means "derive M as exactly the steps r calls need".
    static PruneSchedule derive(uint64_t t, double s, double S, uint64_t T,
                                uint64_t M_override = 0);
    uint64_t loop_train_steps() const { return t * (k + 1) * (k + 2) / 2; }
};

struct Protocol {
    double lr_mult = 1.0;
    double weight_decay = 0.0;
};

struct DenoiserConfig {
    size_t N = 4;            // look-ahead count per prune call
    uint64_t C = 30;         // look-ahead steps (typical range 10..100)
    std::vector<Protocol> pool = {{0.5, 0.0}, {0.5, 0.1}, {1.0, 0.0},
                                  {1.0, 0.1}, {2.0, 0.0}, {2.0, 0.1}};
    double subset_fraction = 0.10;
    bool fresh_optimizer = true;

    void validate() const;
};

Mask magnitude_prune(const Model& model, const Mask& current, double rate);
Mask random_prune(const Mask& current, double rate, Rng& stream);
// Saliency |w * dL/dw| from the given batch; gradients are scratch use only.
Mask snip_prune(Model& model, const Mask& current, double rate, const Batch& batch);
// Trims the union mask back to exactly target_kept by snapshot magnitude.
Mask one_shot_adjust(const Mask& union_mask, const Model& snapshot, size_t target_kept);

// Algorithm: magnitude candidate from the snapshot, N look-ahead candidates
// from short trainings under varied protocols and data subsets, union, then
// one-shot adjustment to the exact target. The snapshot is never mutated.
Mask denoised_prune(const TrainState& snapshot, const Mask& current,
                    const DenoiserConfig& cfg, double rate, const Dataset& ds,
                    const std::vector<uint32_t>& train_split, size_t batch_size,
                    BudgetLedger& ledger, uint64_t call_seed,
                    const StepHook& hook = nullptr);

struct PruneCallRecord {
    size_t index = 0;
    uint64_t at_step = 0;  // ledger optimizer steps when the call fired
    double rate = 0.0;
    size_t kept_before = 0;
    size_t kept_after = 0;
    double sparsity_after = 0.0;
};

struct RunHooks {
    StepHook on_step;
    std::function<void(size_t, const Mask&)> on_mask;  // (call index, mask)
};

struct RunResult {
    TrainState state;
    Mask mask;
    std::vector<PruneCallRecord> calls;
    EvalResult val, test;
    uint64_t look_ahead_steps = 0;
};

struct IspParams {
    PruneSchedule schedule;
    DenoiserConfig denoiser;
    size_t batch_size = 32;
    uint64_t seed = 1;  // root for per-call derived streams
};

RunResult isp_run(TrainState st, const Dataset& ds, const IspParams& params,
                  BudgetLedger& ledger, const RunHooks& hooks = {},
                  const Mask* initial_mask = nullptr);

struct ImpParams {
    size_t rounds = 5;
    uint64_t per_round_budget = 0;
    double rate = 0.15;
    uint64_t rewind_step = 0;     // 0 rewinds to the starting checkpoint
    double target_sparsity = 0.0; // > 0 clamps the final round to land exactly
    uint64_t final_budget = 0;    // fine-tune steps after the last round
    size_t batch_size = 32;
};

RunResult imp_run(const TrainState& pretrained, const Dataset& ds, const ImpParams& params,
                  BudgetLedger& ledger, const RunHooks& hooks = {});

struct ProgressiveParams {
    size_t intervals = 5;  // prune calls, each at the start of an equal slice of T
    double target_sparsity = 0.5;
    uint64_t total_budget = 0;
    size_t batch_size = 32;
};

RunResult progressive_run(TrainState st, const Dataset& ds, const ProgressiveParams& params,
                          BudgetLedger& ledger, const RunHooks& hooks = {});

enum class OneShotCriterion { Magnitude, Random, Snip };

struct OneShotParams {
    OneShotCriterion criterion = OneShotCriterion::Magnitude;
    double target_sparsity = 0.5;
    uint64_t total_budget = 0;
    size_t batch_size = 32;
    uint64_t seed = 1;  // random criterion / snip batch draw
};

RunResult one_shot_run(TrainState st, const Dataset& ds, const OneShotParams& params,
                       BudgetLedger& ledger, const RunHooks& hooks = {});

}  // namespace isp
