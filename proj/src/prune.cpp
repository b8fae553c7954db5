#include "isp/prune.hpp"

#include <algorithm>
#include <cmath>

namespace isp {

size_t removal_count(size_t kept, double rate) {
    return static_cast<size_t>(rate * static_cast<double>(kept) + 1e-9);
}

PruneSchedule PruneSchedule::derive(uint64_t t, double s, double S, uint64_t T,
                                    uint64_t M_override) {
    if (t == 0) throw ConfigError("schedule: seed steps t must be >= 1");
    if (!(s > 0.0 && s < 1.0)) throw ConfigError("schedule: rate s must be in (0,1)");
    if (!(S > 0.0 && S < 1.0)) throw ConfigError("schedule: target S must be in (0,1)");
    if (T == 0) throw ConfigError("schedule: total budget T must be >= 1");

    PruneSchedule sch;
    sch.t = t;
    sch.s = s;
    sch.S = S;
    sch.T = T;
    sch.r = static_cast<uint64_t>(
        std::ceil(std::log1p(-S) / std::log1p(-s) - 1e-12));
    if (sch.r == 0) sch.r = 1;

    if (M_override == 0) {
        sch.k = sch.r - 1;
        sch.M = t * sch.r * (sch.r + 1) / 2;
    } else {
        sch.M = M_override;
        if (sch.M < t) throw BudgetError("schedule: M smaller than one seed interval t");
        uint64_t k = 0;
        while (t * (k + 2) * (k + 3) / 2 <= sch.M) ++k;
        sch.k = k;
    }
    if (sch.k + 1 < sch.r) {
        throw BudgetError("schedule: target sparsity unreachable, needs " +
                          std::to_string(sch.r) + " prune calls at rate s but M allows " +
                          std::to_string(sch.k + 1));
    }
    if (sch.M > T) throw BudgetError("schedule: mask budget M exceeds total budget T");
    return sch;
}

void DenoiserConfig::validate() const {
    if (N > 0 && C == 0) throw ConfigError("denoiser: look-ahead steps C must be >= 1");
    if (N > 0 && pool.empty()) throw ConfigError("denoiser: protocol pool is empty");
    if (subset_fraction <= 0.0 || subset_fraction > 1.0) {
        throw ConfigError("denoiser: subset fraction must be in (0,1]");
    }
}

namespace {

// Lowest-|w| removal over currently kept weights with deterministic
// tie-breaking: equal magnitudes are pruned smaller-flat-index first.
Mask prune_by_scores(const Mask& current, const std::vector<double>& scores,
                     size_t remove) {
    std::vector<uint32_t> kept_idx;
    kept_idx.reserve(current.kept());
    for (size_t i = 0; i < current.total(); ++i) {
        if (current.get(i)) kept_idx.push_back(static_cast<uint32_t>(i));
    }
    if (remove > kept_idx.size()) {
        throw MaskError("prune: removal count exceeds kept weights");
    }
    std::sort(kept_idx.begin(), kept_idx.end(), [&](uint32_t a, uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a < b;
    });
    Mask out = current;
    for (size_t i = 0; i < remove; ++i) out.set(kept_idx[i], false);
    return out;
}

// Canonical flat score vector (registry order) of |w| read from the model.
std::vector<double> magnitude_scores(const Model& model, const Registry& reg) {
    std::vector<double> scores(reg.total, 0.0);
    for (size_t e = 0; e < reg.entry_count(); ++e) {
        const Parameter& p = model.params()[reg.param_index[e]];
        if (p.name != reg.names[e] || p.size() != reg.sizes[e]) {
            throw MaskError("prune: registry does not match model at " + reg.names[e]);
        }
        for (size_t j = 0; j < p.size(); ++j) {
            scores[reg.offsets[e] + j] = std::abs(p.data[j]);
        }
    }
    return scores;
}

}  // namespace

Mask magnitude_prune(const Model& model, const Mask& current, double rate) {
    if (rate < 0.0 || rate >= 1.0 + 1e-12) {
        throw MaskError("magnitude_prune: rate must be in [0,1)");
    }
    const auto scores = magnitude_scores(model, current.registry());
    return prune_by_scores(current, scores, removal_count(current.kept(), rate));
}

Mask random_prune(const Mask& current, double rate, Rng& stream) {
    if (rate < 0.0 || rate >= 1.0 + 1e-12) {
        throw MaskError("random_prune: rate must be in [0,1)");
    }
    std::vector<uint32_t> kept_idx;
    for (size_t i = 0; i < current.total(); ++i) {
        if (current.get(i)) kept_idx.push_back(static_cast<uint32_t>(i));
    }
    const size_t remove = removal_count(kept_idx.size(), rate);
    stream.shuffle(kept_idx);
    Mask out = current;
    for (size_t i = 0; i < remove; ++i) out.set(kept_idx[i], false);
    return out;
}

Mask snip_prune(Model& model, const Mask& current, double rate, const Batch& batch) {
    if (rate < 0.0 || rate >= 1.0 + 1e-12) {
        throw MaskError("snip_prune: rate must be in [0,1)");
    }
    const MaskBitsView view = current.view_for(model);
    model.zero_grads();
    Tensor loss = model.loss(batch, &view);
    loss.backward();
    const Registry& reg = current.registry();
    std::vector<double> scores(reg.total, 0.0);
    for (size_t e = 0; e < reg.entry_count(); ++e) {
        const Parameter& p = model.params()[reg.param_index[e]];
        for (size_t j = 0; j < p.size(); ++j) {
            scores[reg.offsets[e] + j] = std::abs(p.data[j] * p.grad[j]);
        }
    }
    model.zero_grads();
    return prune_by_scores(current, scores, removal_count(current.kept(), rate));
}

Mask one_shot_adjust(const Mask& union_mask, const Model& snapshot, size_t target_kept) {
    const size_t kept = union_mask.kept();
    if (target_kept > kept) {
        throw MaskError("one_shot_adjust: target kept exceeds union kept count");
    }
    const auto scores = magnitude_scores(snapshot, union_mask.registry());
    return prune_by_scores(union_mask, scores, kept - target_kept);
}

Mask denoised_prune(const TrainState& snapshot, const Mask& current,
                    const DenoiserConfig& cfg, double rate, const Dataset& ds,
                    const std::vector<uint32_t>& train_split, size_t batch_size,
                    BudgetLedger& ledger, uint64_t call_seed, const StepHook& hook) {
    cfg.validate();
    const uint64_t look_ahead_total = static_cast<uint64_t>(cfg.N) * cfg.C;
    if (look_ahead_total > ledger.remaining_steps()) {
        throw BudgetError("denoised_prune: " + std::to_string(look_ahead_total) +
                          " look-ahead steps exceed the remaining budget");
    }

    const size_t kept = current.kept();
    const size_t target_kept = kept - removal_count(kept, rate);
    Mask m_temp = magnitude_prune(snapshot.model, current, rate);

    for (size_t n = 0; n < cfg.N; ++n) {
        Rng proto_rng(derive_seed(call_seed, "protocol", n));
        const Protocol& proto = cfg.pool[proto_rng.next_below(cfg.pool.size())];
        Rng subset_rng(derive_seed(call_seed, "subset", n));
        const auto subset = subsample(train_split, cfg.subset_fraction, subset_rng);
        if (subset.empty()) {
            throw ConfigError("denoised_prune: data subset is empty");
        }

        TrainState scratch = snapshot;  // deep copy; the caller's state stays put
        scratch.stream = DataStream{derive_seed(call_seed, "stream", n), 0};
        AdamWConfig proto_cfg = snapshot.opt.cfg;
        proto_cfg.weight_decay = proto.weight_decay;
        if (cfg.fresh_optimizer) {
            scratch.opt = make_optimizer(scratch.model, proto_cfg);
            scratch.opt.step = 0;
        } else {
            scratch.opt.cfg = proto_cfg;
        }
        scratch.base_lr = snapshot.base_lr * proto.lr_mult;

        train_steps(scratch, ds, subset, batch_size, cfg.C, &current, Phase::LookAhead,
                    ledger, hook);
        m_temp = mask_union(m_temp, magnitude_prune(scratch.model, current, rate));
    }
    return one_shot_adjust(m_temp, snapshot.model, target_kept);
}

namespace {

EvalResult eval_split(const TrainState& st, const Dataset& ds,
                      const std::vector<uint32_t>& split, const Mask& mask,
                      size_t batch_size, BudgetLedger& ledger) {
    return evaluate(st.model, ds, split, &mask, batch_size, &ledger);
}

void finish_run(RunResult& out, const Dataset& ds, size_t batch_size,
                BudgetLedger& ledger) {
    out.val = eval_split(out.state, ds, ds.val_idx, out.mask, batch_size, ledger);
    out.test = eval_split(out.state, ds, ds.test_idx, out.mask, batch_size, ledger);
}

PruneCallRecord record_call(size_t index, const BudgetLedger& ledger, double rate,
                            size_t kept_before, const Mask& after) {
    PruneCallRecord rec;
    rec.index = index;
    rec.at_step = ledger.optimizer_steps();
    rec.rate = rate;
    rec.kept_before = kept_before;
    rec.kept_after = after.kept();
    rec.sparsity_after = after.density().sparsity;
    return rec;
}

}  // namespace

RunResult isp_run(TrainState st, const Dataset& ds, const IspParams& params,
                  BudgetLedger& ledger, const RunHooks& hooks, const Mask* initial_mask) {
    const PruneSchedule& sch = params.schedule;
    params.denoiser.validate();
    auto reg = registry_from_model(st.model);

    RunResult out;
    out.mask = initial_mask ? *initial_mask : Mask::ones(reg);
    if (initial_mask && initial_mask->fingerprint() != reg->fingerprint) {
        throw MaskError("isp_run: initial mask does not match the model");
    }

    const size_t total = out.mask.total();
    const size_t target_kept = total - removal_count(total, sch.S);
    const uint64_t look_ahead_before = ledger.by_phase[size_t(Phase::LookAhead)].steps;
    const uint64_t steps_at_entry = ledger.optimizer_steps();

    for (uint64_t i = 0; i <= sch.k; ++i) {
        train_steps(st, ds, ds.train_idx, params.batch_size, (i + 1) * sch.t, &out.mask,
                    Phase::MaskGen, ledger, hooks.on_step);
        const size_t kept = out.mask.kept();
        if (kept <= target_kept) break;  // sparsity target already met

        double rate = sch.s;
        const size_t regular_removal = removal_count(kept, sch.s);
        if (i == sch.k || kept - regular_removal <= target_kept) {
            // Final call: land exactly on the target kept count.
            rate = static_cast<double>(kept - target_kept) / static_cast<double>(kept);
        }
        Mask next = denoised_prune(st, out.mask, params.denoiser, rate, ds, ds.train_idx,
                                   params.batch_size, ledger, derive_seed(params.seed, "prune_call", i),
                                   hooks.on_step);
        if (!is_subset(next, out.mask)) {
            throw MaskError("isp_run: prune call revived weights");
        }
        out.calls.push_back(record_call(out.calls.size(), ledger, rate, kept, next));
        out.mask = std::move(next);
        if (hooks.on_mask) hooks.on_mask(out.calls.size() - 1, out.mask);
        if (out.mask.kept() <= target_kept) break;  // early exit: rest is fine-tuning
    }

    const uint64_t spent = ledger.optimizer_steps() - steps_at_entry;
    const uint64_t remaining = sch.T > spent ? sch.T - spent : 0;
    train_steps(st, ds, ds.train_idx, params.batch_size, remaining, &out.mask,
                Phase::FineTune, ledger, hooks.on_step);

    out.look_ahead_steps = ledger.by_phase[size_t(Phase::LookAhead)].steps - look_ahead_before;
    out.state = std::move(st);
    finish_run(out, ds, params.batch_size, ledger);
    return out;
}

RunResult imp_run(const TrainState& pretrained, const Dataset& ds, const ImpParams& params,
                  BudgetLedger& ledger, const RunHooks& hooks) {
    if (params.rounds == 0) throw ConfigError("imp: rounds must be >= 1");

    TrainState rewind = pretrained;
    if (params.rewind_step > 0) {
        train_steps(rewind, ds, ds.train_idx, params.batch_size, params.rewind_step,
                    nullptr, Phase::MaskGen, ledger, hooks.on_step);
    }

    auto reg = registry_from_model(rewind.model);
    RunResult out;
    out.mask = Mask::ones(reg);
    const size_t total = out.mask.total();
    const size_t target_kept = params.target_sparsity > 0.0
                                   ? total - removal_count(total, params.target_sparsity)
                                   : 0;

    auto fresh_round = [&](void) {
        TrainState w = rewind;
        w.opt = make_optimizer(w.model, pretrained.opt.cfg);
        w.global_step = params.rewind_step;
        w.lr_total_steps = params.rewind_step + params.per_round_budget;
        return w;
    };

    for (size_t round = 0; round < params.rounds; ++round) {
        TrainState work = fresh_round();
        // Re-apply the current mask to the rewound weights before training.
        if (round > 0) {
            const MaskBitsView view = out.mask.view_for(work.model);
            for (size_t pi = 0; pi < work.model.params().size(); ++pi) {
                const uint8_t* bits = view.per_param[pi];
                if (!bits) continue;
                auto& data = work.model.params()[pi].data;
                for (size_t j = 0; j < data.size(); ++j) {
                    if (!bits[j]) data[j] = 0.0;
                }
            }
        }
        train_steps(work, ds, ds.train_idx, params.batch_size, params.per_round_budget,
                    &out.mask, Phase::MaskGen, ledger, hooks.on_step);

        const size_t kept = out.mask.kept();
        double rate = params.rate;
        if (target_kept > 0) {
            const size_t regular = removal_count(kept, rate);
            if (round + 1 == params.rounds || kept - regular <= target_kept) {
                rate = static_cast<double>(kept - target_kept) / static_cast<double>(kept);
            }
        }
        Mask next = magnitude_prune(work.model, out.mask, rate);
        if (!is_subset(next, out.mask)) throw MaskError("imp: prune revived weights");
        out.calls.push_back(record_call(out.calls.size(), ledger, rate, kept, next));
        out.mask = std::move(next);
        if (hooks.on_mask) hooks.on_mask(out.calls.size() - 1, out.mask);
        if (target_kept > 0 && out.mask.kept() <= target_kept) break;
    }

    TrainState final_state = fresh_round();
    {
        const MaskBitsView view = out.mask.view_for(final_state.model);
        for (size_t pi = 0; pi < final_state.model.params().size(); ++pi) {
            const uint8_t* bits = view.per_param[pi];
            if (!bits) continue;
            auto& data = final_state.model.params()[pi].data;
            for (size_t j = 0; j < data.size(); ++j) {
                if (!bits[j]) data[j] = 0.0;
            }
        }
    }
    if (params.final_budget > 0) {
        final_state.lr_total_steps = params.rewind_step + params.final_budget;
        train_steps(final_state, ds, ds.train_idx, params.batch_size, params.final_budget,
                    &out.mask, Phase::FineTune, ledger, hooks.on_step);
    }
    out.state = std::move(final_state);
    finish_run(out, ds, params.batch_size, ledger);
    return out;
}

RunResult progressive_run(TrainState st, const Dataset& ds, const ProgressiveParams& params,
                          BudgetLedger& ledger, const RunHooks& hooks) {
    if (params.intervals == 0) throw ConfigError("progressive: intervals must be >= 1");
    if (params.total_budget == 0) throw ConfigError("progressive: total budget must be >= 1");
    if (!(params.target_sparsity > 0.0 && params.target_sparsity < 1.0)) {
        throw ConfigError("progressive: target sparsity must be in (0,1)");
    }

    auto reg = registry_from_model(st.model);
    RunResult out;
    out.mask = Mask::ones(reg);
    const size_t total = out.mask.total();
    const size_t target_kept = total - removal_count(total, params.target_sparsity);
    // Per-call survivor rate that lands on S after `intervals` equal calls.
    const double per_call =
        1.0 - std::pow(1.0 - params.target_sparsity, 1.0 / static_cast<double>(params.intervals));

    const uint64_t slice = params.total_budget / params.intervals;
    for (size_t j = 0; j < params.intervals; ++j) {
        const size_t kept = out.mask.kept();
        if (kept > target_kept) {
            double rate = per_call;
            const size_t regular = removal_count(kept, rate);
            if (j + 1 == params.intervals || kept - regular <= target_kept) {
                rate = static_cast<double>(kept - target_kept) / static_cast<double>(kept);
            }
            Mask next = magnitude_prune(st.model, out.mask, rate);
            if (!is_subset(next, out.mask)) throw MaskError("progressive: prune revived weights");
            out.calls.push_back(record_call(out.calls.size(), ledger, rate, kept, next));
            out.mask = std::move(next);
            if (hooks.on_mask) hooks.on_mask(out.calls.size() - 1, out.mask);
        }
        const bool last = j + 1 == params.intervals;
        const uint64_t steps = last ? params.total_budget - slice * (params.intervals - 1) : slice;
        train_steps(st, ds, ds.train_idx, params.batch_size, steps, &out.mask,
                    last ? Phase::FineTune : Phase::MaskGen, ledger, hooks.on_step);
    }
    out.state = std::move(st);
    finish_run(out, ds, params.batch_size, ledger);
    return out;
}

RunResult one_shot_run(TrainState st, const Dataset& ds, const OneShotParams& params,
                       BudgetLedger& ledger, const RunHooks& hooks) {
    if (!(params.target_sparsity > 0.0 && params.target_sparsity < 1.0)) {
        throw ConfigError("one-shot: target sparsity must be in (0,1)");
    }
    auto reg = registry_from_model(st.model);
    Mask ones = Mask::ones(reg);
    RunResult out;
    switch (params.criterion) {
        case OneShotCriterion::Magnitude:
            out.mask = magnitude_prune(st.model, ones, params.target_sparsity);
            break;
        case OneShotCriterion::Random: {
            Rng stream(derive_seed(params.seed, "random_prune"));
            out.mask = random_prune(ones, params.target_sparsity, stream);
            break;
        }
        case OneShotCriterion::Snip: {
            DataStream snip_stream{derive_seed(params.seed, "snip_batch"), 0};
            Batch batch = next_batch(ds, ds.train_idx, snip_stream, params.batch_size);
            out.mask = snip_prune(st.model, ones, params.target_sparsity, batch);
            break;
        }
    }
    out.calls.push_back(record_call(0, ledger, params.target_sparsity, ones.kept(), out.mask));
    if (hooks.on_mask) hooks.on_mask(0, out.mask);
    train_steps(st, ds, ds.train_idx, params.batch_size, params.total_budget, &out.mask,
                Phase::FineTune, ledger, hooks.on_step);
    out.state = std::move(st);
    finish_run(out, ds, params.batch_size, ledger);
    return out;
}

}  // namespace isp
