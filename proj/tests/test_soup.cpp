#include <doctest.h>

#include <cmath>
#include <vector>

#include "isp/checkpoint.hpp"
#include "isp/data.hpp"
#include "isp/soup.hpp"

using namespace isp;

namespace {

ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.kind = ModelKind::Mlp;
    spec.depth = 2;
    spec.width = 8;
    spec.input_dim = 6;
    spec.classes = 3;
    return spec;
}

Dataset tiny_data(uint64_t seed) { return gen_gaussian_clusters(3, 6, 4.0, 80, seed); }

TrainState pretrained_state(const Dataset& ds, uint64_t seed, uint64_t warm_steps) {
    AdamWConfig cfg;
    cfg.lr = 3e-3;
    TrainState st = make_train_state(tiny_spec(), seed, cfg, seed + 50, 200);
    BudgetLedger ledger;
    train_steps(st, ds, ds.train_idx, 8, warm_steps, nullptr, Phase::Pretrain, ledger);
    return st;
}

bool models_equal(const Model& a, const Model& b) {
    for (size_t i = 0; i < a.params().size(); ++i) {
        if (a.params()[i].data != b.params()[i].data) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("soup") {

TEST_CASE("uniform soup averages coordinates") {
    Model a(tiny_spec(), 1), b(tiny_spec(), 2), c(tiny_spec(), 3);
    a.params()[0].data[0] = 1.0;
    b.params()[0].data[0] = 2.0;
    c.params()[0].data[0] = 6.0;
    Model mean = uniform_soup({a, b, c});
    CHECK(mean.params()[0].data[0] == doctest::Approx(3.0).epsilon(1e-15));
    for (size_t i = 0; i < mean.params().size(); ++i) {
        for (size_t j = 0; j < mean.params()[i].data.size(); ++j) {
            const double expect =
                (a.params()[i].data[j] + b.params()[i].data[j] + c.params()[i].data[j]) / 3.0;
            REQUIRE(mean.params()[i].data[j] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("weak candidate with zero steps densifies back to theta_0") {
    Dataset ds = tiny_data(1);
    TrainState pre = pretrained_state(ds, 1, 10);
    BudgetLedger ledger;
    Model cand = weak_train_candidate(pre, 0.4, {1.0, 0.0}, 0, ds.train_idx, ds, 8, ledger);
    CHECK(models_equal(cand, pre.model));  // pruned coords restored, others untrained
    CHECK(ledger.optimizer_steps() == 0);
}

TEST_CASE("weak candidate trains survivors and restores pruned coordinates") {
    Dataset ds = tiny_data(2);
    TrainState pre = pretrained_state(ds, 2, 10);
    auto reg = registry_from_model(pre.model);
    Mask mask = magnitude_prune(pre.model, Mask::ones(reg), 0.4);
    BudgetLedger ledger;
    Model cand = weak_train_candidate(pre, 0.4, {1.0, 0.0}, 6, ds.train_idx, ds, 8, ledger);
    CHECK(ledger.by_phase[static_cast<size_t>(Phase::WeakTrain)].steps == 6);
    CHECK_FALSE(models_equal(cand, pre.model));

    MaskBitsView view = mask.view_for(pre.model);
    size_t restored = 0, trained = 0;
    for (size_t i = 0; i < pre.model.params().size(); ++i) {
        const uint8_t* bits = view.per_param[i];
        if (!bits) continue;
        for (size_t j = 0; j < pre.model.params()[i].data.size(); ++j) {
            if (!bits[j]) {
                // densified from theta_0, bit for bit
                REQUIRE(cand.params()[i].data[j] == pre.model.params()[i].data[j]);
                ++restored;
            } else if (cand.params()[i].data[j] != pre.model.params()[i].data[j]) {
                ++trained;
            }
        }
    }
    CHECK(restored > 0);
    CHECK(trained > 0);
}

TEST_CASE("interpolation endpoints reproduce the operands exactly") {
    Dataset ds = tiny_data(3);
    Model current = pretrained_state(ds, 3, 15).model;
    Model candidate = pretrained_state(ds, 4, 15).model;
    const Model current_copy = current;
    BudgetLedger ledger;

    SUBCASE("grid {0} keeps current untouched") {
        InterpolationChoice pick = interpolate_greedy(candidate, current, ds, ds.val_idx,
                                                      {0.0}, 16, false, ledger);
        CHECK(pick.alpha == 0.0);
        CHECK(models_equal(current, current_copy));
    }
    SUBCASE("grid {0,1} lands on a bit-exact endpoint") {
        InterpolationChoice pick = interpolate_greedy(candidate, current, ds, ds.val_idx,
                                                      {0.0, 1.0}, 16, false, ledger);
        if (pick.alpha == 1.0) {
            CHECK(models_equal(current, candidate));
        } else {
            CHECK(models_equal(current, current_copy));
        }
    }
}

TEST_CASE("greedy interpolation ties break toward smaller alpha") {
    Dataset ds = tiny_data(5);
    Model current = pretrained_state(ds, 5, 15).model;
    Model candidate = current;  // identical: every alpha scores the same
    BudgetLedger ledger;
    InterpolationChoice pick = interpolate_greedy(
        candidate, current, ds, ds.val_idx, {0.0, 0.3, 0.7, 1.0}, 16, false, ledger);
    CHECK(pick.alpha == 0.0);
}

TEST_CASE("ims with K=1, C=0 returns theta_0 bit-exactly") {
    Dataset ds = tiny_data(6);
    TrainState pre = pretrained_state(ds, 6, 20);
    SoupConfig cfg;
    cfg.K = 1;
    cfg.C = 0;
    cfg.batch_size = 8;
    BudgetLedger ledger;
    ImsResult res = ims_run(pre, ds, cfg, ledger, 77);
    CHECK(models_equal(res.state.model, pre.model));
    CHECK(res.val_after == res.val_before);
    CHECK(ledger.by_phase[static_cast<size_t>(Phase::WeakTrain)].steps == 0);
}

TEST_CASE("ims validation metric never decreases") {
    Dataset ds = tiny_data(7);
    TrainState pre = pretrained_state(ds, 7, 8);  // mediocre start leaves headroom
    SoupConfig cfg;
    cfg.K = 4;
    cfg.C = 12;
    cfg.batch_size = 8;
    cfg.sparsity_pool = {0.2, 0.4};
    BudgetLedger ledger;
    ImsResult res = ims_run(pre, ds, cfg, ledger, 13);
    CHECK(res.val_after >= res.val_before);
    REQUIRE(res.log.size() == 4);
    double last = res.val_before;
    for (const auto& row : res.log) {
        CHECK(row.val_after >= row.val_before - 1e-12);
        CHECK(row.val_before == doctest::Approx(last));
        last = row.val_after;
    }
    // round-robin sparsities
    CHECK(res.log[0].s_k == doctest::Approx(0.2));
    CHECK(res.log[1].s_k == doctest::Approx(0.4));
    CHECK(res.log[2].s_k == doctest::Approx(0.2));
    CHECK(res.log[3].s_k == doctest::Approx(0.4));
    // weak training budget: K * C
    CHECK(ledger.by_phase[static_cast<size_t>(Phase::WeakTrain)].steps == 4 * 12);
    CHECK(ledger.optimizer_steps() == 4 * 12);
}

TEST_CASE("ims runs are deterministic in the seed") {
    Dataset ds = tiny_data(8);
    TrainState pre = pretrained_state(ds, 8, 10);
    SoupConfig cfg;
    cfg.K = 2;
    cfg.C = 5;
    cfg.batch_size = 8;
    BudgetLedger l1, l2;
    ImsResult a = ims_run(pre, ds, cfg, l1, 5);
    ImsResult b = ims_run(pre, ds, cfg, l2, 5);
    CHECK(models_equal(a.state.model, b.state.model));
    CHECK(a.val_after == b.val_after);
}

TEST_CASE("greedy sequence matches brute force on a two-candidate instance") {
    Dataset ds = tiny_data(9);
    TrainState pre = pretrained_state(ds, 9, 6);
    const std::vector<double> grid = {0.0, 0.5, 1.0};

    // build the two candidates exactly as ims_run would
    SoupConfig cfg;
    cfg.K = 2;
    cfg.C = 8;
    cfg.batch_size = 8;
    cfg.alpha_grid = grid;
    cfg.sparsity_pool = {0.3};
    BudgetLedger lg;
    ImsResult greedy = ims_run(pre, ds, cfg, lg, 21);
    REQUIRE(greedy.log.size() == 2);

    // replay candidate construction with the same derived streams
    BudgetLedger lc;
    std::vector<Model> cands;
    for (size_t k = 0; k < 2; ++k) {
        Rng proto_rng(derive_seed(21, "soup_protocol", k));
        const Protocol proto = cfg.protocol_pool[proto_rng.next_below(cfg.protocol_pool.size())];
        Rng sub_rng(derive_seed(21, "soup_subset", k));
        const auto subset = subsample(ds.train_idx, cfg.subset_fraction, sub_rng);
        REQUIRE_FALSE(subset.empty());
        TrainState src = pre;
        src.stream = DataStream{derive_seed(21, "soup_stream", k), 0};
        cands.push_back(weak_train_candidate(src, 0.3, proto, 8, subset, ds, 8, lc));
    }

    // brute force over the full grid product, greedy tie-breaking replicated:
    // strictly-better-only acceptance ordered by (alpha1, alpha2)
    auto blend_eval = [&](double a1, double a2, Model& out) {
        Model m1 = pre.model;
        if (a1 == 1.0) {
            m1 = cands[0];
        } else if (a1 > 0.0) {
            for (size_t i = 0; i < m1.params().size(); ++i)
                for (size_t j = 0; j < m1.params()[i].data.size(); ++j)
                    m1.params()[i].data[j] = (1 - a1) * pre.model.params()[i].data[j] +
                                             a1 * cands[0].params()[i].data[j];
        }
        Model m2 = m1;
        if (a2 == 1.0) {
            m2 = cands[1];
        } else if (a2 > 0.0) {
            for (size_t i = 0; i < m2.params().size(); ++i)
                for (size_t j = 0; j < m2.params()[i].data.size(); ++j)
                    m2.params()[i].data[j] =
                        (1 - a2) * m1.params()[i].data[j] + a2 * cands[1].params()[i].data[j];
        }
        out = m2;
        return evaluate(m2, ds, ds.val_idx, nullptr, 16).accuracy;
    };

    // greedy: best alpha for candidate 1 alone, then candidate 2 on top
    double best1 = -1.0, alpha1 = 0.0;
    for (double a : grid) {
        Model scratch;
        const double acc = blend_eval(a, 0.0, scratch);
        if (acc > best1) {
            best1 = acc;
            alpha1 = a;
        }
    }
    double best2 = -1.0, alpha2 = 0.0;
    for (double a : grid) {
        Model scratch;
        const double acc = blend_eval(alpha1, a, scratch);
        if (acc > best2) {
            best2 = acc;
            alpha2 = a;
        }
    }
    CHECK(greedy.log[0].alpha == doctest::Approx(alpha1));
    CHECK(greedy.log[1].alpha == doctest::Approx(alpha2));
    Model expect;
    blend_eval(alpha1, alpha2, expect);
    CHECK(models_equal(greedy.state.model, expect));

    // on this instance the greedy path equals the full grid-product optimum
    double best_full = -1.0;
    for (double a1 : grid) {
        for (double a2 : grid) {
            Model scratch;
            const double acc = blend_eval(a1, a2, scratch);
            if (acc > best_full) best_full = acc;
        }
    }
    CHECK(best2 == doctest::Approx(best_full));
}

TEST_CASE("soup config validation") {
    SoupConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.alpha_grid = {0.1, 0.5};  // missing 0
    CHECK_THROWS(cfg.validate());
    cfg = SoupConfig{};
    cfg.alpha_grid = {0.0, 1.5};
    CHECK_THROWS(cfg.validate());
    cfg = SoupConfig{};
    cfg.sparsity_pool = {0.0};
    CHECK_THROWS(cfg.validate());
    cfg = SoupConfig{};
    cfg.sparsity_pool.clear();
    CHECK_THROWS(cfg.validate());
}

}  // TEST_SUITE
