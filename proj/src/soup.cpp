#include "isp/soup.hpp"

#include <algorithm>
#include <cmath>

namespace isp {

void SoupConfig::validate() const {
    if (K == 0) throw ConfigError("soup: K must be >= 1");
    if (sparsity_pool.empty()) throw ConfigError("soup: sparsity pool is empty");
    for (double s : sparsity_pool) {
        if (!(s > 0.0 && s < 1.0)) throw ConfigError("soup: pool sparsities must be in (0,1)");
    }
    if (alpha_grid.empty() ||
        std::none_of(alpha_grid.begin(), alpha_grid.end(), [](double a) { return a == 0.0; })) {
        throw ConfigError("soup: alpha grid must contain 0");
    }
    for (double a : alpha_grid) {
        if (a < 0.0 || a > 1.0) throw ConfigError("soup: alpha values must be in [0,1]");
    }
    if (protocol_pool.empty()) throw ConfigError("soup: protocol pool is empty");
    if (subset_fraction <= 0.0 || subset_fraction > 1.0) {
        throw ConfigError("soup: subset fraction must be in (0,1]");
    }
}

Model weak_train_candidate(const TrainState& pretrained, double s_k,
                           const Protocol& protocol, uint64_t steps,
                           const std::vector<uint32_t>& subset, const Dataset& ds,
                           size_t batch_size, BudgetLedger& ledger, const StepHook& hook) {
    TrainState work = pretrained;
    auto reg = registry_from_model(work.model);
    Mask mask = magnitude_prune(work.model, Mask::ones(reg), s_k);

    AdamWConfig cfg = pretrained.opt.cfg;
    cfg.weight_decay = protocol.weight_decay;
    work.opt = make_optimizer(work.model, cfg);
    work.base_lr = pretrained.base_lr * protocol.lr_mult;

    if (steps > 0) {
        train_steps(work, ds, subset, batch_size, steps, &mask, Phase::WeakTrain, ledger,
                    hook);
    }

    // Densify: pruned coordinates come back from theta_0.
    Model out = std::move(work.model);
    const MaskBitsView view = mask.view_for(out);
    const auto& origin = pretrained.model.params();
    for (size_t pi = 0; pi < out.params().size(); ++pi) {
        const uint8_t* bits = view.per_param[pi];
        if (!bits) continue;
        auto& data = out.params()[pi].data;
        const auto& base = origin[pi].data;
        for (size_t j = 0; j < data.size(); ++j) {
            if (!bits[j]) data[j] = base[j];
        }
    }
    return out;
}

namespace {

double metric_of(const EvalResult& e, bool select_by_loss) {
    return select_by_loss ? -e.mean_loss : e.accuracy;
}

Model blend(const Model& current, const Model& candidate, double alpha) {
    Model out = current;
    for (size_t pi = 0; pi < out.params().size(); ++pi) {
        auto& data = out.params()[pi].data;
        const auto& cand = candidate.params()[pi].data;
        for (size_t j = 0; j < data.size(); ++j) {
            data[j] = (1.0 - alpha) * data[j] + alpha * cand[j];
        }
    }
    return out;
}

}  // namespace

InterpolationChoice interpolate_greedy(const Model& candidate, Model& current,
                                       const Dataset& ds,
                                       const std::vector<uint32_t>& val_split,
                                       const std::vector<double>& grid,
                                       size_t batch_size, bool select_by_loss,
                                       BudgetLedger& ledger) {
    if (val_split.empty()) throw ConfigError("interpolate: empty validation split");
    if (current.params().size() != candidate.params().size()) {
        throw ShapeError("interpolate: candidate registry does not match current model");
    }
    for (size_t pi = 0; pi < current.params().size(); ++pi) {
        if (current.params()[pi].name != candidate.params()[pi].name ||
            current.params()[pi].size() != candidate.params()[pi].size()) {
            throw ShapeError("interpolate: parameter mismatch at " +
                             current.params()[pi].name);
        }
    }

    std::vector<double> sorted = grid;
    std::sort(sorted.begin(), sorted.end());
    InterpolationChoice best;
    bool have_best = false;
    Model best_model;
    for (double alpha : sorted) {
        Model probe = alpha == 0.0   ? current
                      : alpha == 1.0 ? candidate
                                     : blend(current, candidate, alpha);
        const EvalResult ev = evaluate(probe, ds, val_split, nullptr, batch_size, &ledger);
        const double metric = metric_of(ev, select_by_loss);
        // Strict improvement while scanning ascending alpha = ties go small.
        if (!have_best || metric > best.accuracy) {
            best.alpha = alpha;
            best.accuracy = metric;
            best_model = std::move(probe);
            have_best = true;
        }
    }
    current = std::move(best_model);
    return best;
}

ImsResult ims_run(const TrainState& pretrained, const Dataset& ds, const SoupConfig& cfg,
                  BudgetLedger& ledger, uint64_t seed, const StepHook& hook) {
    cfg.validate();
    ImsResult out;
    Model interpolated = pretrained.model;  // DeepCopy(theta_0)

    const EvalResult base_eval =
        evaluate(interpolated, ds, ds.val_idx, nullptr, cfg.batch_size, &ledger);
    out.val_before = base_eval.accuracy;
    double current_metric = metric_of(base_eval, cfg.select_by_loss);
    double current_acc = base_eval.accuracy;

    for (size_t k = 0; k < cfg.K; ++k) {
        const double s_k = cfg.sparsity_pool[k % cfg.sparsity_pool.size()];
        Rng proto_rng(derive_seed(seed, "soup_protocol", k));
        const Protocol& proto = cfg.protocol_pool[proto_rng.next_below(cfg.protocol_pool.size())];
        Rng subset_rng(derive_seed(seed, "soup_subset", k));
        auto subset = subsample(ds.train_idx, cfg.subset_fraction, subset_rng);
        if (subset.empty() && cfg.C > 0) throw ConfigError("soup: data subset is empty");

        TrainState source = pretrained;
        source.stream = DataStream{derive_seed(seed, "soup_stream", k), 0};
        Model candidate = weak_train_candidate(source, s_k, proto, cfg.C, subset, ds,
                                               cfg.batch_size, ledger, hook);

        SoupLogRow row;
        row.k = k;
        row.s_k = s_k;
        row.val_before = current_acc;
        const InterpolationChoice choice =
            interpolate_greedy(candidate, interpolated, ds, ds.val_idx, cfg.alpha_grid,
                               cfg.batch_size, cfg.select_by_loss, ledger);
        if (choice.accuracy < current_metric) {
            throw NumericError("soup: greedy interpolation decreased the validation metric");
        }
        current_metric = choice.accuracy;
        const EvalResult after =
            evaluate(interpolated, ds, ds.val_idx, nullptr, cfg.batch_size, nullptr);
        current_acc = after.accuracy;
        row.alpha = choice.alpha;
        row.val_after = current_acc;
        out.log.push_back(row);
    }

    out.val_after = current_acc;
    out.state = pretrained;
    out.state.model = std::move(interpolated);
    out.state.opt = make_optimizer(out.state.model, pretrained.opt.cfg);
    out.state.opt.step = 0;
    return out;
}

Model uniform_soup(const std::vector<Model>& candidates) {
    if (candidates.empty()) throw ConfigError("uniform soup: no candidates");
    Model out = candidates[0];
    const double inv = 1.0 / static_cast<double>(candidates.size());
    for (size_t pi = 0; pi < out.params().size(); ++pi) {
        auto& data = out.params()[pi].data;
        for (size_t c = 1; c < candidates.size(); ++c) {
            const auto& other = candidates[c].params()[pi].data;
            if (other.size() != data.size()) {
                throw ShapeError("uniform soup: candidate shapes differ at " +
                                 out.params()[pi].name);
            }
            for (size_t j = 0; j < data.size(); ++j) data[j] += other[j];
        }
        for (double& v : data) v *= inv;
    }
    return out;
}

}  // namespace isp
