#include "isp/model.hpp"

#include <cmath>
#include <stdexcept>

#include "isp/rng.hpp"

namespace isp {

const char* model_kind_name(ModelKind k) {
    return k == ModelKind::Mlp ? "mlp" : "transformer";
}

ModelKind model_kind_from_name(const std::string& s) {
    if (s == "mlp") return ModelKind::Mlp;
    if (s == "transformer" || s == "tiny-transformer") return ModelKind::TinyTransformer;
    throw std::runtime_error("unknown model kind: " + s);
}

void ModelSpec::validate() const {
    if (depth == 0 || width == 0 || classes == 0) {
        throw ShapeError("model spec: depth/width/classes must be positive");
    }
    if (kind == ModelKind::TinyTransformer) {
        if (heads == 0 || width % heads != 0) {
            throw ShapeError("model spec: width must be divisible by heads");
        }
        if (vocab == 0 || seq_len == 0 || ffn == 0) {
            throw ShapeError("model spec: vocab/seq_len/ffn must be positive");
        }
    } else {
        if (input_dim == 0) throw ShapeError("model spec: input_dim must be positive");
    }
}

namespace {

std::vector<double> init_matrix(size_t rows, size_t cols, uint64_t seed, double scale) {
    Rng rng(seed);
    std::vector<double> out(rows * cols);
    for (auto& v : out) v = rng.normal() * scale;
    return out;
}

}  // namespace

Model::Model(const ModelSpec& spec, uint64_t init_seed) : spec_(spec) {
    spec_.validate();
    auto add = [&](const std::string& name, std::vector<size_t> shape, bool prunable,
                   double scale) {
        Parameter p;
        p.name = name;
        p.shape = std::move(shape);
        size_t total = 1;
        for (size_t d : p.shape) total *= d;
        if (scale == 0.0) {
            p.data.assign(total, 0.0);
        } else {
            p.data = init_matrix(total, 1, derive_seed(init_seed, name), scale);
        }
        p.grad.assign(total, 0.0);
        p.prunable = prunable;
        params_.push_back(std::move(p));
    };
    auto add_const = [&](const std::string& name, std::vector<size_t> shape, double fill) {
        Parameter p;
        p.name = name;
        p.shape = std::move(shape);
        size_t total = 1;
        for (size_t d : p.shape) total *= d;
        p.data.assign(total, fill);
        p.grad.assign(total, 0.0);
        p.prunable = false;
        params_.push_back(std::move(p));
    };

    const size_t w = spec_.width;
    if (spec_.kind == ModelKind::Mlp) {
        const double in_scale = 1.0 / std::sqrt(static_cast<double>(spec_.input_dim));
        const double hid_scale = 1.0 / std::sqrt(static_cast<double>(w));
        for (size_t l = 0; l < spec_.depth; ++l) {
            const size_t in = (l == 0) ? spec_.input_dim : w;
            const std::string base = "layer" + std::to_string(l);
            add(base + ".w", {in, w}, true, l == 0 ? in_scale : hid_scale);
            add_const(base + ".b", {w}, 0.0);
        }
        add(std::string("head.w"), {w, spec_.classes}, false, hid_scale);
        add_const("head.b", {spec_.classes}, 0.0);
        return;
    }

    const double emb_scale = 0.1;
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(w));
    const double ffn_scale = 1.0 / std::sqrt(static_cast<double>(spec_.ffn));
    add("embed.tok", {spec_.vocab, w}, false, emb_scale);
    add("embed.pos", {spec_.seq_len, w}, false, emb_scale);
    for (size_t l = 0; l < spec_.depth; ++l) {
        const std::string base = "layer" + std::to_string(l);
        add_const(base + ".ln1.gamma", {w}, 1.0);
        add_const(base + ".ln1.beta", {w}, 0.0);
        add(base + ".attn.wq", {w, w}, true, w_scale);
        add_const(base + ".attn.bq", {w}, 0.0);
        add(base + ".attn.wk", {w, w}, true, w_scale);
        add_const(base + ".attn.bk", {w}, 0.0);
        add(base + ".attn.wv", {w, w}, true, w_scale);
        add_const(base + ".attn.bv", {w}, 0.0);
        add(base + ".attn.wo", {w, w}, true, w_scale);
        add_const(base + ".attn.bo", {w}, 0.0);
        add_const(base + ".ln2.gamma", {w}, 1.0);
        add_const(base + ".ln2.beta", {w}, 0.0);
        add(base + ".ffn.w1", {w, spec_.ffn}, true, w_scale);
        add_const(base + ".ffn.b1", {spec_.ffn}, 0.0);
        add(base + ".ffn.w2", {spec_.ffn, w}, true, ffn_scale);
        add_const(base + ".ffn.b2", {w}, 0.0);
    }
    add_const("final_ln.gamma", {w}, 1.0);
    add_const("final_ln.beta", {w}, 0.0);
    add("head.w", {w, spec_.classes}, false, w_scale);
    add_const("head.b", {spec_.classes}, 0.0);
}

Parameter& Model::param(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p;
    }
    throw std::runtime_error("no such parameter: " + name);
}

const Parameter& Model::param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
}

void Model::zero_grads() {
    for (auto& p : params_) p.zero_grad();
}

size_t Model::prunable_total() const {
    size_t total = 0;
    for (const auto& p : params_) {
        if (p.prunable) total += p.size();
    }
    return total;
}

const uint8_t* Model::bits_for(const MaskBitsView* mask, size_t param_idx) const {
    if (!mask) return nullptr;
    if (mask->per_param.size() != params_.size()) {
        throw ShapeError("mask view does not cover this model's parameter list");
    }
    return mask->per_param[param_idx];
}

Tensor Model::forward(const Batch& batch, const MaskBitsView* mask) const {
    if (batch.count == 0) throw ShapeError("forward: empty batch");
    if (spec_.kind == ModelKind::Mlp) return forward_mlp(batch, mask);
    return forward_transformer(batch, mask);
}

Tensor Model::loss(const Batch& batch, const MaskBitsView* mask) const {
    return cross_entropy(forward(batch, mask), batch.labels);
}

Tensor Model::forward_mlp(const Batch& batch, const MaskBitsView* mask) const {
    if (batch.features.size() != batch.count * spec_.input_dim) {
        throw ShapeError("forward: feature buffer does not match batch x input_dim");
    }
    // Parameter order fixed by the constructor; index arithmetic keeps the
    // per-step graph build cheap.
    size_t pi = 0;
    auto next = [&]() -> const Parameter& { return params_[pi++]; };
    auto leaf = [&](const Parameter& p, size_t idx) {
        return param_leaf(const_cast<Parameter&>(p), bits_for(mask, idx));
    };

    Tensor x = Tensor::constant({batch.count, spec_.input_dim}, batch.features);
    for (size_t l = 0; l < spec_.depth; ++l) {
        const size_t wi = pi;
        const Parameter& w = next();
        const size_t bi = pi;
        const Parameter& b = next();
        x = gelu(add_rowvec(matmul(x, leaf(w, wi)), leaf(b, bi)));
    }
    const size_t hwi = pi;
    const Parameter& hw = next();
    const size_t hbi = pi;
    const Parameter& hb = next();
    return add_rowvec(matmul(x, leaf(hw, hwi)), leaf(hb, hbi));
}

Tensor Model::forward_transformer(const Batch& batch, const MaskBitsView* mask) const {
    if (batch.tokens.size() != batch.count * spec_.seq_len) {
        throw ShapeError("forward: token buffer does not match batch x seq_len");
    }
    size_t pi = 0;
    auto leaf = [&](const char* suffix_check) {
        const size_t idx = pi++;
        const Parameter& p = params_[idx];
        if (!p.name.ends_with(suffix_check)) {
            throw ShapeError("forward: parameter order mismatch at " + p.name);
        }
        return param_leaf(const_cast<Parameter&>(p), bits_for(mask, idx));
    };

    Tensor tok = leaf("embed.tok");
    Tensor pos = leaf("embed.pos");
    Tensor x = add_position(embedding(tok, batch.tokens), pos, batch.count);
    for (size_t l = 0; l < spec_.depth; ++l) {
        Tensor ln1g = leaf(".ln1.gamma"), ln1b = leaf(".ln1.beta");
        Tensor h = layer_norm(x, ln1g, ln1b);
        Tensor wq = leaf(".attn.wq"), bq = leaf(".attn.bq");
        Tensor wk = leaf(".attn.wk"), bk = leaf(".attn.bk");
        Tensor wv = leaf(".attn.wv"), bv = leaf(".attn.bv");
        Tensor q = add_rowvec(matmul(h, wq), bq);
        Tensor k = add_rowvec(matmul(h, wk), bk);
        Tensor v = add_rowvec(matmul(h, wv), bv);
        Tensor att = attention(q, k, v, batch.count, spec_.heads);
        Tensor wo = leaf(".attn.wo"), bo = leaf(".attn.bo");
        x = add(x, add_rowvec(matmul(att, wo), bo));
        Tensor ln2g = leaf(".ln2.gamma"), ln2b = leaf(".ln2.beta");
        Tensor h2 = layer_norm(x, ln2g, ln2b);
        Tensor w1 = leaf(".ffn.w1"), b1 = leaf(".ffn.b1");
        Tensor w2 = leaf(".ffn.w2"), b2 = leaf(".ffn.b2");
        Tensor f = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, w1), b1)), w2), b2);
        x = add(x, f);
    }
    Tensor lng = leaf("final_ln.gamma"), lnb = leaf("final_ln.beta");
    x = layer_norm(x, lng, lnb);
    Tensor pooled = mean_pool(x, batch.count);
    Tensor hw = leaf("head.w"), hb = leaf("head.b");
    return add_rowvec(matmul(pooled, hw), hb);
}

uint64_t flops_forward(const ModelSpec& spec, size_t batch_size, double density) {
    if (!(density > 0.0) || density > 1.0) {
        throw ShapeError("flops: density must be in (0,1]");
    }
    double prunable_macs = 0.0;
    double fixed_macs = 0.0;
    const double w = static_cast<double>(spec.width);
    if (spec.kind == ModelKind::Mlp) {
        prunable_macs += static_cast<double>(spec.input_dim) * w;
        for (size_t l = 1; l < spec.depth; ++l) prunable_macs += w * w;
        fixed_macs += w * static_cast<double>(spec.classes);
    } else {
        const double per_token =
            static_cast<double>(spec.depth) * (4.0 * w * w + 2.0 * w * static_cast<double>(spec.ffn));
        prunable_macs += per_token * static_cast<double>(spec.seq_len);
        fixed_macs += w * static_cast<double>(spec.classes);
    }
    const double total =
        2.0 * (prunable_macs * density + fixed_macs) * static_cast<double>(batch_size);
    return static_cast<uint64_t>(std::llround(total));
}

uint64_t flops_per_step(const ModelSpec& spec, size_t batch_size, double density) {
    return 3 * flops_forward(spec, batch_size, density);
}

}  // namespace isp
