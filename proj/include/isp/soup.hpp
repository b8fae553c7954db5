#pragma once

#include <cstdint>
#include <vector>

#include "isp/prune.hpp"
#include "isp/train.hpp"

namespace isp {

struct SoupConfig {
    size_t K = 4;     // weak candidates to fold in
    uint64_t C = 100; // weak-training steps per candidate
    std::vector<double> sparsity_pool = {0.1, 0.2, 0.3, 0.4, 0.5};  // round-robin s_k
    std::vector<Protocol> protocol_pool = {{0.5, 0.0}, {0.5, 0.1}, {1.0, 0.0},
                                           {1.0, 0.1}, {2.0, 0.0}, {2.0, 0.1}};
    std::vector<double> alpha_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                      0.6, 0.7, 0.8, 0.9, 1.0};
    double subset_fraction = 0.10;
    size_t batch_size = 32;
    bool select_by_loss = false;  // default selects on validation accuracy

    void validate() const;  // grid must contain 0; pool sparsities in (0,1)
};

// Magnitude-prunes a copy of the pretrained model at s_k, trains it C steps
// on the subset under the protocol, then densifies: surviving coordinates
// keep their trained values, pruned coordinates are restored from theta_0.
Model weak_train_candidate(const TrainState& pretrained, double s_k,
                           const Protocol& protocol, uint64_t steps,
                           const std::vector<uint32_t>& subset, const Dataset& ds,
                           size_t batch_size, BudgetLedger& ledger,
                           const StepHook& hook = nullptr);

struct InterpolationChoice {
    double alpha = 0.0;
    double accuracy = 0.0;  // or negative mean loss when selecting by loss
};

// Scans theta(alpha) = (1-alpha)*current + alpha*candidate over the grid and
// returns the best model by validation metric, ties toward smaller alpha.
// alpha 0 and 1 reproduce current/candidate exactly (no blend arithmetic).
InterpolationChoice interpolate_greedy(const Model& candidate, Model& current,
                                       const Dataset& ds,
                                       const std::vector<uint32_t>& val_split,
                                       const std::vector<double>& grid,
                                       size_t batch_size, bool select_by_loss,
                                       BudgetLedger& ledger);

struct SoupLogRow {
    size_t k = 0;
    double s_k = 0.0;
    double alpha = 0.0;
    double val_before = 0.0;
    double val_after = 0.0;
};

struct ImsResult {
    TrainState state;  // denoised model, fresh optimizer
    std::vector<SoupLogRow> log;
    double val_before = 0.0;
    double val_after = 0.0;
};

ImsResult ims_run(const TrainState& pretrained, const Dataset& ds, const SoupConfig& cfg,
                  BudgetLedger& ledger, uint64_t seed, const StepHook& hook = nullptr);

// Coordinate-wise mean of identically shaped models.
Model uniform_soup(const std::vector<Model>& candidates);

}  // namespace isp
