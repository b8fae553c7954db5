#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace isp {

struct Parameter;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated during backward
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pushes this->grad into parents / parameter
    Parameter* param = nullptr;           // set for parameter leaves
    bool has_creator = false;

    size_t size() const { return value.size(); }
};

}  // namespace detail

// Handle to a node of the recorded computation graph. Copies share the node.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(std::vector<size_t> shape, std::vector<double> data);
    static Tensor zeros(std::vector<size_t> shape);

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<size_t>& shape() const { return n_->shape; }
    size_t size() const { return n_->value.size(); }
    size_t rows() const { return n_->shape.at(0); }
    size_t cols() const { return n_->shape.at(1); }

    const std::vector<double>& value() const { return n_->value; }
    std::vector<double>& mutable_value() { return n_->value; }
    const std::vector<double>& grad() const { return n_->grad; }

    // Scalar access; throws unless the tensor holds exactly one element.
    double item() const;

    // Reverse-mode sweep from a scalar produced by recorded ops. Gradients
    // accumulate into every reachable parameter's grad buffer.
    void backward();

    detail::Node* node() const { return n_.get(); }
    std::shared_ptr<detail::Node> shared_node() const { return n_; }

    static Tensor from_node(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> n_;
};

// Leaf over a persistent parameter. When mask_bits is non-null (one byte per
// element, 1 = kept) the leaf's value is data with masked-out entries set to
// exactly zero; gradients still flow back to the parameter unmasked.
Tensor param_leaf(Parameter& p, const uint8_t* mask_bits = nullptr);

Tensor matmul(const Tensor& x, const Tensor& w);       // [r,k] x [k,n] -> [r,n]
Tensor add_rowvec(const Tensor& x, const Tensor& b);   // bias broadcast over rows
Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);  // [len, d]
// x is [batch*seq, d]; pos is [seq, d], added to each sequence position.
Tensor add_position(const Tensor& x, const Tensor& pos, size_t batch);
// Multi-head scaled dot-product self-attention over already-projected q/k/v,
// each [batch*seq, width]; width must be divisible by heads.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, size_t batch, size_t heads);
Tensor mean_pool(const Tensor& x, size_t batch);  // [batch*seq, d] -> [batch, d]
Tensor sum(const Tensor& x);                      // scalar
// Mean over the batch of -log softmax(logits)[label]. Labels in [0, classes).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Numerically stable softmax of one row, written into out.
void softmax_row(std::span<const double> in, std::span<double> out);

}  // namespace isp
