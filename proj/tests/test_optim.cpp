#include <doctest.h>

#include <cmath>

#include "isp/mask.hpp"
#include "isp/model.hpp"
#include "isp/optim.hpp"

using namespace isp;

namespace {

ModelSpec tiny_mlp_spec() {
    ModelSpec spec;
    spec.kind = ModelKind::Mlp;
    spec.depth = 1;
    spec.width = 4;
    spec.input_dim = 3;
    spec.classes = 2;
    return spec;
}

}  // namespace

TEST_SUITE("optim") {

TEST_CASE("first adamw step matches the hand-worked value") {
    // w=1, g=0.1, lr=1e-3, wd=0.1: bias correction makes mhat=g and vhat=g^2,
    // so w' = 1 - 1e-3*0.1/(0.1+1e-8) - 1e-3*0.1*1 = 0.99890000010000002.
    Model model(tiny_mlp_spec(), 1);
    AdamWConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.1;
    OptimizerState opt = make_optimizer(model, cfg);

    model.zero_grads();
    Parameter& w = model.param("layer0.w");
    w.data[0] = 1.0;
    w.grad[0] = 0.1;
    adamw_step(model, opt, cfg.lr);
    CHECK(w.data[0] == doctest::Approx(0.99890000010000002).epsilon(1e-14));
    CHECK(opt.step == 1);
}

TEST_CASE("weight decay is decoupled from the gradient path") {
    // With zero gradient the only movement is -lr*wd*w.
    Model model(tiny_mlp_spec(), 2);
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.5;
    OptimizerState opt = make_optimizer(model, cfg);
    model.zero_grads();
    Parameter& w = model.param("layer0.w");
    w.data[0] = 2.0;
    adamw_step(model, opt, cfg.lr);
    CHECK(w.data[0] == doctest::Approx(2.0 * (1.0 - 0.01 * 0.5)).epsilon(1e-14));
}

TEST_CASE("second moments damp large recurring gradients") {
    Model model(tiny_mlp_spec(), 3);
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    OptimizerState opt = make_optimizer(model, cfg);
    Parameter& w = model.param("layer0.w");
    w.data[0] = 0.0;
    for (int i = 0; i < 5; ++i) {
        model.zero_grads();
        w.grad[0] = 100.0;  // constant huge gradient still moves ~lr per step
        adamw_step(model, opt, cfg.lr);
    }
    CHECK(w.data[0] == doctest::Approx(-5.0 * cfg.lr).epsilon(1e-3));
}

TEST_CASE("masked coordinates stay zero while their moments keep updating") {
    Model model(tiny_mlp_spec(), 4);
    AdamWConfig cfg;
    OptimizerState opt = make_optimizer(model, cfg);
    auto reg = registry_from_model(model);
    Mask mask = Mask::ones(reg);
    mask.set(0, 0);  // first prunable weight pruned
    MaskBitsView view = mask.view_for(model);

    // locate which optimizer slot holds the first prunable parameter
    size_t slot = 0;
    for (size_t i = 0; i < model.params().size(); ++i) {
        if (model.params()[i].prunable) {
            slot = i;
            break;
        }
    }
    Parameter& w = model.params()[slot];
    w.data[0] = 0.0;
    for (int i = 0; i < 3; ++i) {
        model.zero_grads();
        for (auto& g : w.grad) g = 0.25;
        adamw_step(model, opt, cfg.lr, &view);
        CHECK(w.data[0] == 0.0);  // exactly zero, not merely small
    }
    CHECK(opt.m[slot][0] != 0.0);
    CHECK(opt.v[slot][0] != 0.0);
}

TEST_CASE("lr schedule decays linearly and clamps") {
    CHECK(lr_schedule(250, 1000, 2e-5) == doctest::Approx(1.5e-5).epsilon(1e-14));
    CHECK(lr_schedule(0, 1000, 2e-5) == doctest::Approx(2e-5).epsilon(1e-14));
    CHECK(lr_schedule(1000, 1000, 2e-5) == doctest::Approx(0.0));
    CHECK(lr_schedule(5000, 1000, 2e-5) == doctest::Approx(0.0));
    CHECK_THROWS(lr_schedule(1, 0, 1e-3));
}

TEST_CASE("identical runs produce identical weights") {
    auto run = [] {
        Model model(tiny_mlp_spec(), 5);
        AdamWConfig cfg;
        OptimizerState opt = make_optimizer(model, cfg);
        for (int i = 0; i < 4; ++i) {
            model.zero_grads();
            for (auto& p : model.params())
                for (size_t j = 0; j < p.grad.size(); ++j)
                    p.grad[j] = 0.01 * static_cast<double>(j % 7);
            adamw_step(model, opt, lr_schedule(opt.step, 4, cfg.lr));
        }
        return model;
    };
    Model a = run(), b = run();
    for (size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].data == b.params()[i].data);
    }
}

}  // TEST_SUITE
