#include <doctest.h>

#include <cmath>
#include <vector>

#include "isp/checkpoint.hpp"
#include "isp/data.hpp"
#include "isp/prune.hpp"

using namespace isp;

namespace {

ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.kind = ModelKind::Mlp;
    spec.depth = 2;
    spec.width = 8;
    spec.input_dim = 6;
    spec.classes = 3;
    return spec;  // 48 + 64 = 112 prunable weights
}

Dataset tiny_data(uint64_t seed) { return gen_gaussian_clusters(3, 6, 4.0, 60, seed); }

TrainState fresh_state(uint64_t seed, uint64_t total_steps, double lr = 3e-3) {
    AdamWConfig cfg;
    cfg.lr = lr;
    return make_train_state(tiny_spec(), seed, cfg, seed + 100, total_steps);
}

}  // namespace

TEST_SUITE("methods") {

TEST_CASE("isp run lands exactly on the target and spends exactly T") {
    Dataset ds = tiny_data(1);
    IspParams p;
    p.schedule = PruneSchedule::derive(2, 0.3, 0.5, 100);
    p.denoiser.N = 2;
    p.denoiser.C = 3;
    p.batch_size = 8;
    p.seed = 5;
    BudgetLedger ledger;
    ledger.step_budget = 100;

    std::vector<Mask> masks;
    RunHooks hooks;
    hooks.on_mask = [&](size_t, const Mask& m) { masks.push_back(m); };
    RunResult res = isp_run(fresh_state(1, 100), ds, p, ledger, hooks);

    const size_t total = 112;
    CHECK(res.mask.total() == total);
    CHECK(res.mask.kept() == total - removal_count(total, 0.5));
    CHECK(ledger.optimizer_steps() == 100);  // loop + look-aheads + fine-tune
    CHECK(res.look_ahead_steps == 2 * 3 * res.calls.size());
    REQUIRE(masks.size() == res.calls.size());
    for (size_t i = 1; i < masks.size(); ++i) {
        CHECK(is_subset(masks[i], masks[i - 1]));  // pruning never resurrects
    }
    for (const auto& call : res.calls) {
        CHECK(call.kept_after <= call.kept_before);
    }
    CHECK(res.val.count > 0);
    CHECK(res.test.count > 0);
}

TEST_CASE("isp stops early once the target sparsity is reached") {
    Dataset ds = tiny_data(2);
    IspParams p;
    // k=2 would allow three calls, but one call at 50% already lands on S
    p.schedule = PruneSchedule::derive(2, 0.5, 0.5, 100, 12);
    CHECK(p.schedule.k == 2);
    CHECK(p.schedule.r == 1);
    p.denoiser.N = 1;
    p.denoiser.C = 2;
    p.batch_size = 8;
    BudgetLedger ledger;
    RunResult res = isp_run(fresh_state(2, 100), ds, p, ledger);
    CHECK(res.calls.size() == 1);
    CHECK(res.mask.kept() == 112 - removal_count(112, 0.5));
}

TEST_CASE("the final isp call is clamped onto the target") {
    Dataset ds = tiny_data(3);
    IspParams p;
    p.schedule = PruneSchedule::derive(2, 0.3, 0.45, 100);
    p.denoiser.N = 0;
    p.batch_size = 8;
    BudgetLedger ledger;
    RunResult res = isp_run(fresh_state(3, 100), ds, p, ledger);
    // regular 30% calls would overshoot 45%; the last call must hit it exactly
    CHECK(res.mask.kept() == 112 - removal_count(112, 0.45));
    CHECK(res.calls.back().rate < 0.3);
}

TEST_CASE("isp respects an initial mask as its starting point") {
    Dataset ds = tiny_data(4);
    TrainState st = fresh_state(4, 80);
    auto reg = registry_from_model(st.model);
    Mask initial = magnitude_prune(st.model, Mask::ones(reg), 0.2);
    IspParams p;
    p.schedule = PruneSchedule::derive(2, 0.3, 0.5, 80);
    p.denoiser.N = 0;
    p.batch_size = 8;
    BudgetLedger ledger;
    RunResult res = isp_run(std::move(st), ds, p, ledger, {}, &initial);
    CHECK(is_subset(res.mask, initial));
    CHECK(res.mask.kept() == 112 - removal_count(112, 0.5));
}

TEST_CASE("isp runs are deterministic") {
    Dataset ds = tiny_data(5);
    auto run = [&] {
        IspParams p;
        p.schedule = PruneSchedule::derive(2, 0.3, 0.5, 60);
        p.denoiser.N = 2;
        p.denoiser.C = 2;
        p.batch_size = 8;
        p.seed = 9;
        BudgetLedger ledger;
        return isp_run(fresh_state(5, 60), ds, p, ledger);
    };
    RunResult a = run(), b = run();
    CHECK(a.mask == b.mask);
    CHECK(serialize_checkpoint(a.state) == serialize_checkpoint(b.state));
    CHECK(a.val.accuracy == b.val.accuracy);
}

TEST_CASE("isp raises BudgetError when look-aheads cannot fit") {
    Dataset ds = tiny_data(6);
    IspParams p;
    p.schedule = PruneSchedule::derive(2, 0.3, 0.5, 20);  // loop alone costs 6
    p.denoiser.N = 4;
    p.denoiser.C = 10;  // 40 steps per call can never fit in 20
    p.batch_size = 8;
    BudgetLedger ledger;
    ledger.step_budget = 20;
    CHECK_THROWS_AS(isp_run(fresh_state(6, 20), ds, p, ledger), BudgetError);
}

TEST_CASE("single-round imp with no training equals one-shot magnitude") {
    Dataset ds = tiny_data(7);
    TrainState pretrained = fresh_state(7, 50);
    BudgetLedger warm;
    train_steps(pretrained, ds, ds.train_idx, 8, 10, nullptr, Phase::Pretrain, warm);

    ImpParams p;
    p.rounds = 1;
    p.per_round_budget = 0;
    p.rate = 0.4;
    p.final_budget = 0;
    p.batch_size = 8;
    BudgetLedger ledger;
    RunResult res = imp_run(pretrained, ds, p, ledger);

    auto reg = registry_from_model(pretrained.model);
    Mask oneshot = magnitude_prune(pretrained.model, Mask::ones(reg), 0.4);
    CHECK(res.mask == oneshot);
    CHECK(ledger.optimizer_steps() == 0);
}

TEST_CASE("imp charges exactly rewind + rounds * budget + final") {
    Dataset ds = tiny_data(8);
    TrainState pretrained = fresh_state(8, 50);
    ImpParams p;
    p.rounds = 3;
    p.per_round_budget = 5;
    p.rate = 0.2;
    p.rewind_step = 2;
    p.final_budget = 4;
    p.batch_size = 8;
    BudgetLedger ledger;
    std::vector<Mask> masks;
    RunHooks hooks;
    hooks.on_mask = [&](size_t, const Mask& m) { masks.push_back(m); };
    RunResult res = imp_run(pretrained, ds, p, ledger, hooks);

    CHECK(ledger.optimizer_steps() == 2 + 3 * 5 + 4);
    CHECK(ledger.by_phase[static_cast<size_t>(Phase::FineTune)].steps == 4);
    REQUIRE(masks.size() == 3);
    CHECK(is_subset(masks[1], masks[0]));
    CHECK(is_subset(masks[2], masks[1]));
    // compounding 20% removals: 112 -> 90 -> 72 -> 58
    CHECK(masks[0].kept() == 112 - removal_count(112, 0.2));
    CHECK(res.mask == masks[2]);
    CHECK(res.state.global_step == 2 + 4);  // rewound, then fine-tuned
    // final weights respect the final mask exactly
    MaskBitsView view = res.mask.view_for(res.state.model);
    for (size_t i = 0; i < res.state.model.params().size(); ++i) {
        const uint8_t* bits = view.per_param[i];
        if (!bits) continue;
        const Parameter& param = res.state.model.params()[i];
        for (size_t j = 0; j < param.data.size(); ++j) {
            if (!bits[j]) CHECK(param.data[j] == 0.0);
        }
    }
}

TEST_CASE("imp clamps its final round onto a requested sparsity") {
    Dataset ds = tiny_data(9);
    TrainState pretrained = fresh_state(9, 50);
    ImpParams p;
    p.rounds = 4;
    p.per_round_budget = 3;
    p.rate = 0.2;
    p.target_sparsity = 0.5;
    p.final_budget = 0;
    p.batch_size = 8;
    BudgetLedger ledger;
    RunResult res = imp_run(pretrained, ds, p, ledger);
    CHECK(res.mask.kept() == 112 - removal_count(112, 0.5));
}

TEST_CASE("progressive with one interval equals one-shot end to end") {
    Dataset ds = tiny_data(10);

    ProgressiveParams pp;
    pp.intervals = 1;
    pp.target_sparsity = 0.5;
    pp.total_budget = 30;
    pp.batch_size = 8;
    BudgetLedger l1;
    RunResult prog = progressive_run(fresh_state(10, 30), ds, pp, l1);

    OneShotParams op;
    op.criterion = OneShotCriterion::Magnitude;
    op.target_sparsity = 0.5;
    op.total_budget = 30;
    op.batch_size = 8;
    BudgetLedger l2;
    RunResult one = one_shot_run(fresh_state(10, 30), ds, op, l2);

    CHECK(prog.mask == one.mask);
    CHECK(serialize_checkpoint(prog.state) == serialize_checkpoint(one.state));
    CHECK(l1.optimizer_steps() == l2.optimizer_steps());
}

TEST_CASE("progressive spreads calls and still lands exactly") {
    Dataset ds = tiny_data(11);
    ProgressiveParams pp;
    pp.intervals = 4;
    pp.target_sparsity = 0.6;
    pp.total_budget = 40;
    pp.batch_size = 8;
    BudgetLedger ledger;
    std::vector<size_t> kept_per_call;
    RunHooks hooks;
    hooks.on_mask = [&](size_t, const Mask& m) { kept_per_call.push_back(m.kept()); };
    RunResult res = progressive_run(fresh_state(11, 40), ds, pp, ledger, hooks);
    CHECK(res.mask.kept() == 112 - removal_count(112, 0.6));
    CHECK(kept_per_call.size() == 4);
    for (size_t i = 1; i < kept_per_call.size(); ++i)
        CHECK(kept_per_call[i] < kept_per_call[i - 1]);
    CHECK(ledger.optimizer_steps() == 40);
}

TEST_CASE("one-shot criteria produce distinct masks at the same sparsity") {
    Dataset ds = tiny_data(12);
    auto run = [&](OneShotCriterion crit) {
        OneShotParams op;
        op.criterion = crit;
        op.target_sparsity = 0.5;
        op.total_budget = 10;
        op.batch_size = 8;
        op.seed = 3;
        BudgetLedger ledger;
        return one_shot_run(fresh_state(12, 10), ds, op, ledger);
    };
    RunResult mag = run(OneShotCriterion::Magnitude);
    RunResult rnd = run(OneShotCriterion::Random);
    RunResult snp = run(OneShotCriterion::Snip);
    const size_t kept = 112 - removal_count(112, 0.5);
    CHECK(mag.mask.kept() == kept);
    CHECK(rnd.mask.kept() == kept);
    CHECK(snp.mask.kept() == kept);
    CHECK_FALSE(mag.mask == rnd.mask);
}

TEST_CASE("training surfaces NumericError on non-finite loss") {
    Dataset ds = tiny_data(13);
    TrainState st = fresh_state(13, 10);
    st.model.params()[0].data[0] = 1e308;  // forward overflows to inf
    BudgetLedger ledger;
    CHECK_THROWS_AS(
        train_steps(st, ds, ds.train_idx, 8, 1, nullptr, Phase::Pretrain, ledger),
        NumericError);
}

TEST_CASE("trace rows carry phases, lr, and per-step sparsity") {
    Dataset ds = tiny_data(14);
    IspParams p;
    p.schedule = PruneSchedule::derive(2, 0.3, 0.5, 60);
    p.denoiser.N = 1;
    p.denoiser.C = 2;
    p.batch_size = 8;
    BudgetLedger ledger;
    std::vector<TraceRow> rows;
    RunHooks hooks;
    hooks.on_step = [&](const TraceRow& r) { rows.push_back(r); };
    isp_run(fresh_state(14, 60), ds, p, ledger, hooks);
    REQUIRE(rows.size() == 60);
    bool saw_mask_gen = false, saw_look_ahead = false, saw_fine_tune = false;
    for (const auto& r : rows) {
        if (r.phase == Phase::MaskGen) saw_mask_gen = true;
        if (r.phase == Phase::LookAhead) saw_look_ahead = true;
        if (r.phase == Phase::FineTune) saw_fine_tune = true;
        CHECK(r.lr >= 0.0);
        CHECK(r.density >= 0.0);
        CHECK(r.batch == 8);
    }
    CHECK(saw_mask_gen);
    CHECK(saw_look_ahead);
    CHECK(saw_fine_tune);
    // sparsity is non-decreasing on the main path (look-aheads may differ)
    double last = 0.0;
    for (const auto& r : rows) {
        if (r.phase == Phase::LookAhead) continue;
        CHECK(r.sparsity >= last - 1e-12);
        last = r.sparsity;
    }
}

}  // TEST_SUITE
