#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isp/param.hpp"
#include "isp/tensor.hpp"

namespace isp {

enum class ModelKind { Mlp, TinyTransformer };

const char* model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& s);

struct ModelSpec {
    ModelKind kind = ModelKind::Mlp;
    size_t depth = 2;
    size_t width = 16;
    size_t heads = 4;     // transformer only
    size_t ffn = 64;      // transformer feed-forward inner dim
    size_t vocab = 32;    // transformer token vocabulary
    size_t seq_len = 8;   // transformer sequence length
    size_t input_dim = 8; // mlp feature dimension
    size_t classes = 8;

    void validate() const;  // throws ShapeError on bad combinations
    bool operator==(const ModelSpec&) const = default;
};

// One minibatch. Transformers consume tokens (count*seq_len ids); MLPs consume
// features (count*input_dim reals). Labels are class indices, one per example.
struct Batch {
    size_t count = 0;
    std::vector<int> tokens;
    std::vector<double> features;
    std::vector<int> labels;
};

// Per-parameter mask pointers aligned to Model::params() order. Null entries
// mean "dense". Pointers borrow the mask's storage (one byte per weight).
struct MaskBitsView {
    std::vector<const uint8_t*> per_param;
};

// Value-semantic model: copying clones all parameters (snapshots for rewinds
// and look-aheads are plain copies). Parameter addresses are stable after
// construction; computation graphs must not outlive the model they reference.
class Model {
public:
    Model() = default;
    Model(const ModelSpec& spec, uint64_t init_seed);

    const ModelSpec& spec() const { return spec_; }
    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    Parameter& param(const std::string& name);
    const Parameter& param(const std::string& name) const;

    Tensor forward(const Batch& batch, const MaskBitsView* mask = nullptr) const;
    Tensor loss(const Batch& batch, const MaskBitsView* mask = nullptr) const;
    void zero_grads();

    size_t prunable_total() const;  // weight count across prunable parameters

private:
    Tensor forward_mlp(const Batch& batch, const MaskBitsView* mask) const;
    Tensor forward_transformer(const Batch& batch, const MaskBitsView* mask) const;
    const uint8_t* bits_for(const MaskBitsView* mask, size_t param_idx) const;

    ModelSpec spec_;
    std::vector<Parameter> params_;
};

// Forward FLOPs for one example batch under the stated counting convention:
// multiply-adds of linear projections times two, prunable matrices scaled by
// the given global density. Attention score/value products and embedding
// lookups are excluded.
uint64_t flops_forward(const ModelSpec& spec, size_t batch_size, double density);

// One optimizer step = 3x forward (forward + ~2x for backward).
uint64_t flops_per_step(const ModelSpec& spec, size_t batch_size, double density);

}  // namespace isp
