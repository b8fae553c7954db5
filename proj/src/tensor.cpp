#include "isp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "isp/param.hpp"

namespace isp {
namespace {

using detail::Node;

std::shared_ptr<Node> make_node(std::vector<size_t> shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    size_t total = 1;
    for (size_t d : n->shape) total *= d;
    n->value.assign(total, 0.0);
    n->has_creator = true;
    return n;
}

void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

void check_matrix(const Tensor& t, const char* who) {
    if (!t.defined() || t.shape().size() != 2) {
        throw ShapeError(std::string(who) + ": expected a rank-2 tensor");
    }
}

std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace

Tensor Tensor::constant(std::vector<size_t> shape, std::vector<double> data) {
    size_t total = 1;
    for (size_t d : shape) total *= d;
    if (data.size() != total) {
        throw ShapeError("constant: data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->has_creator = false;
    return from_node(n);
}

Tensor Tensor::zeros(std::vector<size_t> shape) {
    size_t total = 1;
    for (size_t d : shape) total *= d;
    return constant(std::move(shape), std::vector<double>(total, 0.0));
}

double Tensor::item() const {
    if (!n_ || n_->size() != 1) throw ShapeError("item: tensor is not a scalar");
    return n_->value[0];
}

void Tensor::backward() {
    if (!n_) throw std::logic_error("backward: empty tensor");
    if (!n_->has_creator) {
        throw std::logic_error("backward: no forward graph was recorded for this tensor");
    }
    if (n_->size() != 1) throw ShapeError("backward: loss must be a scalar");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
        auto [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            stack.back().second = idx + 1;
            Node* p = node->parents[idx].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(*n_);
    n_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backprop) node->backprop(*node);
    }
}

Tensor param_leaf(Parameter& p, const uint8_t* mask_bits) {
    auto n = std::make_shared<Node>();
    n->shape = p.shape;
    n->value = p.data;
    if (mask_bits) {
        for (size_t i = 0; i < n->value.size(); ++i) {
            if (!mask_bits[i]) n->value[i] = 0.0;
        }
    }
    n->param = &p;
    n->has_creator = false;
    n->backprop = [](Node& self) {
        Parameter& prm = *self.param;
        if (prm.grad.size() != prm.data.size()) prm.grad.assign(prm.data.size(), 0.0);
        const double* g = self.grad.data();
        double* pg = prm.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
    };
    return Tensor::from_node(n);
}

Tensor matmul(const Tensor& x, const Tensor& w) {
    check_matrix(x, "matmul lhs");
    check_matrix(w, "matmul rhs");
    const size_t r = x.rows(), k = x.cols(), n = w.cols();
    if (w.rows() != k) {
        throw ShapeError("matmul: inner dims " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
    }
    auto out = make_node({r, n});
    const double* xa = x.value().data();
    const double* wa = w.value().data();
    double* ya = out->value.data();
    for (size_t i = 0; i < r; ++i) {
        const double* xrow = xa + i * k;
        double* yrow = ya + i * n;
        for (size_t p = 0; p < k; ++p) {
            const double xv = xrow[p];
            if (xv == 0.0) continue;
            const double* wrow = wa + p * n;
            for (size_t j = 0; j < n; ++j) yrow[j] += xv * wrow[j];
        }
    }
    out->parents = {x.shared_node(), w.shared_node()};
    out->backprop = [r, k, n](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        ensure_grad(xn);
        ensure_grad(wn);
        const double* gy = self.grad.data();
        const double* xa = xn.value.data();
        const double* wa = wn.value.data();
        double* gx = xn.grad.data();
        double* gw = wn.grad.data();
        for (size_t i = 0; i < r; ++i) {
            const double* gyrow = gy + i * n;
            double* gxrow = gx + i * k;
            for (size_t p = 0; p < k; ++p) {
                const double* wrow = wa + p * n;
                double acc = 0.0;
                for (size_t j = 0; j < n; ++j) acc += gyrow[j] * wrow[j];
                gxrow[p] += acc;
            }
            const double* xrow = xa + i * k;
            for (size_t p = 0; p < k; ++p) {
                const double xv = xrow[p];
                if (xv == 0.0) continue;
                double* gwrow = gw + p * n;
                for (size_t j = 0; j < n; ++j) gwrow[j] += xv * gyrow[j];
            }
        }
    };
    return Tensor::from_node(out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    check_matrix(x, "add_rowvec lhs");
    if (b.shape().size() != 1 || b.shape()[0] != x.cols()) {
        throw ShapeError("add_rowvec: bias " + shape_str(b.shape()) + " vs " +
                         shape_str(x.shape()));
    }
    const size_t r = x.rows(), n = x.cols();
    auto out = make_node({r, n});
    const double* xa = x.value().data();
    const double* ba = b.value().data();
    double* ya = out->value.data();
    for (size_t i = 0; i < r; ++i) {
        for (size_t j = 0; j < n; ++j) ya[i * n + j] = xa[i * n + j] + ba[j];
    }
    out->parents = {x.shared_node(), b.shared_node()};
    out->backprop = [r, n](Node& self) {
        Node& xn = *self.parents[0];
        Node& bn = *self.parents[1];
        ensure_grad(xn);
        ensure_grad(bn);
        const double* gy = self.grad.data();
        double* gx = xn.grad.data();
        double* gb = bn.grad.data();
        for (size_t i = 0; i < r; ++i) {
            for (size_t j = 0; j < n; ++j) {
                gx[i * n + j] += gy[i * n + j];
                gb[j] += gy[i * n + j];
            }
        }
    };
    return Tensor::from_node(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    auto out = make_node(a.shape());
    const size_t total = out->size();
    for (size_t i = 0; i < total; ++i) out->value[i] = a.value()[i] + b.value()[i];
    out->parents = {a.shared_node(), b.shared_node()};
    out->backprop = [](Node& self) {
        for (auto& parent : self.parents) {
            ensure_grad(*parent);
            double* gp = parent->grad.data();
            const double* g = self.grad.data();
            for (size_t i = 0; i < self.grad.size(); ++i) gp[i] += g[i];
        }
    };
    return Tensor::from_node(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    auto out = make_node(a.shape());
    const size_t total = out->size();
    for (size_t i = 0; i < total; ++i) out->value[i] = a.value()[i] * b.value()[i];
    out->parents = {a.shared_node(), b.shared_node()};
    out->backprop = [](Node& self) {
        Node& an = *self.parents[0];
        Node& bn = *self.parents[1];
        ensure_grad(an);
        ensure_grad(bn);
        const double* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            an.grad[i] += g[i] * bn.value[i];
            bn.grad[i] += g[i] * an.value[i];
        }
    };
    return Tensor::from_node(out);
}

Tensor scale(const Tensor& a, double s) {
    auto out = make_node(a.shape());
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a.value()[i] * s;
    out->parents = {a.shared_node()};
    out->backprop = [s](Node& self) {
        Node& an = *self.parents[0];
        ensure_grad(an);
        const double* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += g[i] * s;
    };
    return Tensor::from_node(out);
}

Tensor gelu(const Tensor& x) {
    // tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)
    constexpr double kC = 0.7978845608028654;
    constexpr double kA = 0.044715;
    auto out = make_node(x.shape());
    for (size_t i = 0; i < out->size(); ++i) {
        const double v = x.value()[i];
        out->value[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    out->parents = {x.shared_node()};
    out->backprop = [](Node& self) {
        Node& xn = *self.parents[0];
        ensure_grad(xn);
        const double* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double v = xn.value[i];
            const double u = kC * (v + kA * v * v * v);
            const double th = std::tanh(u);
            const double du = kC * (1.0 + 3.0 * kA * v * v);
            const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
            xn.grad[i] += g[i] * d;
        }
    };
    return Tensor::from_node(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_matrix(x, "layer_norm input");
    const size_t r = x.rows(), n = x.cols();
    if (gamma.shape() != std::vector<size_t>{n} || beta.shape() != std::vector<size_t>{n}) {
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(n) + "]");
    }
    auto out = make_node({r, n});
    auto xhat = std::make_shared<std::vector<double>>(r * n);
    auto inv_std = std::make_shared<std::vector<double>>(r);
    const double* xa = x.value().data();
    const double* ga = gamma.value().data();
    const double* ba = beta.value().data();
    for (size_t i = 0; i < r; ++i) {
        const double* row = xa + i * n;
        double mean = 0.0;
        for (size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (size_t j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mean) * is;
            (*xhat)[i * n + j] = h;
            out->value[i * n + j] = ga[j] * h + ba[j];
        }
    }
    out->parents = {x.shared_node(), gamma.shared_node(), beta.shared_node()};
    out->backprop = [r, n, xhat, inv_std](Node& self) {
        Node& xn = *self.parents[0];
        Node& gn = *self.parents[1];
        Node& bn = *self.parents[2];
        ensure_grad(xn);
        ensure_grad(gn);
        ensure_grad(bn);
        const double* gy = self.grad.data();
        const double* ga = gn.value.data();
        for (size_t i = 0; i < r; ++i) {
            const double* gyrow = gy + i * n;
            const double* hrow = xhat->data() + i * n;
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (size_t j = 0; j < n; ++j) {
                const double dh = gyrow[j] * ga[j];
                sum_dh += dh;
                sum_dh_h += dh * hrow[j];
                gn.grad[j] += gyrow[j] * hrow[j];
                bn.grad[j] += gyrow[j];
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            const double is = (*inv_std)[i];
            for (size_t j = 0; j < n; ++j) {
                const double dh = gyrow[j] * ga[j];
                xn.grad[i * n + j] +=
                    is * (dh - inv_n * sum_dh - hrow[j] * inv_n * sum_dh_h);
            }
        }
    };
    return Tensor::from_node(out);
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    check_matrix(table, "embedding table");
    const size_t vocab = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= vocab) {
            throw ShapeError("embedding: id " + std::to_string(id) + " out of range");
        }
    }
    auto out = make_node({ids.size(), d});
    const double* ta = table.value().data();
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(ta + static_cast<size_t>(ids[i]) * d, d, out->value.data() + i * d);
    }
    out->parents = {table.shared_node()};
    out->backprop = [ids, d](Node& self) {
        Node& tn = *self.parents[0];
        ensure_grad(tn);
        const double* g = self.grad.data();
        for (size_t i = 0; i < ids.size(); ++i) {
            double* trow = tn.grad.data() + static_cast<size_t>(ids[i]) * d;
            const double* grow = g + i * d;
            for (size_t j = 0; j < d; ++j) trow[j] += grow[j];
        }
    };
    return Tensor::from_node(out);
}

Tensor add_position(const Tensor& x, const Tensor& pos, size_t batch) {
    check_matrix(x, "add_position input");
    check_matrix(pos, "add_position table");
    const size_t total_rows = x.rows(), d = x.cols();
    if (batch == 0 || total_rows % batch != 0) {
        throw ShapeError("add_position: rows not divisible by batch");
    }
    const size_t seq = total_rows / batch;
    if (pos.rows() != seq || pos.cols() != d) {
        throw ShapeError("add_position: table " + shape_str(pos.shape()) + " vs seq " +
                         std::to_string(seq));
    }
    auto out = make_node({total_rows, d});
    const double* xa = x.value().data();
    const double* pa = pos.value().data();
    for (size_t rI = 0; rI < total_rows; ++rI) {
        const size_t t = rI % seq;
        for (size_t j = 0; j < d; ++j) {
            out->value[rI * d + j] = xa[rI * d + j] + pa[t * d + j];
        }
    }
    out->parents = {x.shared_node(), pos.shared_node()};
    out->backprop = [total_rows, seq, d](Node& self) {
        Node& xn = *self.parents[0];
        Node& pn = *self.parents[1];
        ensure_grad(xn);
        ensure_grad(pn);
        const double* g = self.grad.data();
        for (size_t rI = 0; rI < total_rows; ++rI) {
            const size_t t = rI % seq;
            for (size_t j = 0; j < d; ++j) {
                xn.grad[rI * d + j] += g[rI * d + j];
                pn.grad[t * d + j] += g[rI * d + j];
            }
        }
    };
    return Tensor::from_node(out);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, size_t batch,
                 size_t heads) {
    check_matrix(q, "attention q");
    const size_t rows = q.rows(), width = q.cols();
    if (k.shape() != q.shape() || v.shape() != q.shape()) {
        throw ShapeError("attention: q/k/v shapes must match");
    }
    if (batch == 0 || rows % batch != 0) throw ShapeError("attention: bad batch");
    if (heads == 0 || width % heads != 0) throw ShapeError("attention: bad head count");
    const size_t seq = rows / batch;
    const size_t hd = width / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    auto out = make_node({rows, width});
    auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq);
    const double* qa = q.value().data();
    const double* ka = k.value().data();
    const double* va = v.value().data();
    std::vector<double> scores(seq);
    for (size_t b = 0; b < batch; ++b) {
        for (size_t h = 0; h < heads; ++h) {
            double* pblock = probs->data() + (b * heads + h) * seq * seq;
            for (size_t t = 0; t < seq; ++t) {
                const double* qrow = qa + (b * seq + t) * width + h * hd;
                for (size_t t2 = 0; t2 < seq; ++t2) {
                    const double* krow = ka + (b * seq + t2) * width + h * hd;
                    double acc = 0.0;
                    for (size_t dI = 0; dI < hd; ++dI) acc += qrow[dI] * krow[dI];
                    scores[t2] = acc * sc;
                }
                softmax_row(scores, std::span<double>(pblock + t * seq, seq));
                double* orow = out->value.data() + (b * seq + t) * width + h * hd;
                for (size_t t2 = 0; t2 < seq; ++t2) {
                    const double p = pblock[t * seq + t2];
                    if (p == 0.0) continue;
                    const double* vrow = va + (b * seq + t2) * width + h * hd;
                    for (size_t dI = 0; dI < hd; ++dI) orow[dI] += p * vrow[dI];
                }
            }
        }
    }
    out->parents = {q.shared_node(), k.shared_node(), v.shared_node()};
    out->backprop = [batch, heads, seq, hd, width, sc, probs](Node& self) {
        Node& qn = *self.parents[0];
        Node& kn = *self.parents[1];
        Node& vn = *self.parents[2];
        ensure_grad(qn);
        ensure_grad(kn);
        ensure_grad(vn);
        const double* gy = self.grad.data();
        const double* qa = qn.value.data();
        const double* ka = kn.value.data();
        const double* va = vn.value.data();
        std::vector<double> dprob(seq), dscore(seq);
        for (size_t b = 0; b < batch; ++b) {
            for (size_t h = 0; h < heads; ++h) {
                const double* pblock = probs->data() + (b * heads + h) * seq * seq;
                for (size_t t = 0; t < seq; ++t) {
                    const double* grow = gy + (b * seq + t) * width + h * hd;
                    const double* prow = pblock + t * seq;
                    double dot = 0.0;
                    for (size_t t2 = 0; t2 < seq; ++t2) {
                        const double* vrow = va + (b * seq + t2) * width + h * hd;
                        double acc = 0.0;
                        for (size_t dI = 0; dI < hd; ++dI) acc += grow[dI] * vrow[dI];
                        dprob[t2] = acc;
                        dot += acc * prow[t2];
                        double* gvrow = vn.grad.data() + (b * seq + t2) * width + h * hd;
                        const double p = prow[t2];
                        for (size_t dI = 0; dI < hd; ++dI) gvrow[dI] += p * grow[dI];
                    }
                    for (size_t t2 = 0; t2 < seq; ++t2) {
                        dscore[t2] = prow[t2] * (dprob[t2] - dot) * sc;
                    }
                    double* gqrow = qn.grad.data() + (b * seq + t) * width + h * hd;
                    const double* qrow = qa + (b * seq + t) * width + h * hd;
                    for (size_t t2 = 0; t2 < seq; ++t2) {
                        const double ds = dscore[t2];
                        if (ds == 0.0) continue;
                        const double* krow = ka + (b * seq + t2) * width + h * hd;
                        double* gkrow = kn.grad.data() + (b * seq + t2) * width + h * hd;
                        for (size_t dI = 0; dI < hd; ++dI) {
                            gqrow[dI] += ds * krow[dI];
                            gkrow[dI] += ds * qrow[dI];
                        }
                    }
                }
            }
        }
    };
    return Tensor::from_node(out);
}

Tensor mean_pool(const Tensor& x, size_t batch) {
    check_matrix(x, "mean_pool input");
    const size_t rows = x.rows(), d = x.cols();
    if (batch == 0 || rows % batch != 0) throw ShapeError("mean_pool: bad batch");
    const size_t seq = rows / batch;
    auto out = make_node({batch, d});
    const double* xa = x.value().data();
    const double inv = 1.0 / static_cast<double>(seq);
    for (size_t b = 0; b < batch; ++b) {
        double* orow = out->value.data() + b * d;
        for (size_t t = 0; t < seq; ++t) {
            const double* row = xa + (b * seq + t) * d;
            for (size_t j = 0; j < d; ++j) orow[j] += row[j] * inv;
        }
    }
    out->parents = {x.shared_node()};
    out->backprop = [batch, seq, d, inv](Node& self) {
        Node& xn = *self.parents[0];
        ensure_grad(xn);
        const double* g = self.grad.data();
        for (size_t b = 0; b < batch; ++b) {
            const double* grow = g + b * d;
            for (size_t t = 0; t < seq; ++t) {
                double* xrow = xn.grad.data() + (b * seq + t) * d;
                for (size_t j = 0; j < d; ++j) xrow[j] += grow[j] * inv;
            }
        }
    };
    return Tensor::from_node(out);
}

Tensor sum(const Tensor& x) {
    auto out = make_node({1});
    double acc = 0.0;
    for (double v : x.value()) acc += v;
    out->value[0] = acc;
    out->parents = {x.shared_node()};
    out->backprop = [](Node& self) {
        Node& xn = *self.parents[0];
        ensure_grad(xn);
        const double g = self.grad[0];
        for (auto& gv : xn.grad) gv += g;
    };
    return Tensor::from_node(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    check_matrix(logits, "cross_entropy logits");
    const size_t bsz = logits.rows(), classes = logits.cols();
    if (labels.size() != bsz) throw ShapeError("cross_entropy: label count mismatch");
    for (int y : labels) {
        if (y < 0 || static_cast<size_t>(y) >= classes) {
            throw ShapeError("cross_entropy: label out of range");
        }
    }
    auto out = make_node({1});
    auto probs = std::make_shared<std::vector<double>>(bsz * classes);
    const double* la = logits.value().data();
    double loss = 0.0;
    for (size_t i = 0; i < bsz; ++i) {
        std::span<const double> row(la + i * classes, classes);
        std::span<double> prow(probs->data() + i * classes, classes);
        softmax_row(row, prow);
        loss -= std::log(std::max(prow[static_cast<size_t>(labels[i])], 1e-300));
    }
    out->value[0] = loss / static_cast<double>(bsz);
    out->parents = {logits.shared_node()};
    out->backprop = [labels, bsz, classes, probs](Node& self) {
        Node& ln = *self.parents[0];
        ensure_grad(ln);
        const double g = self.grad[0] / static_cast<double>(bsz);
        for (size_t i = 0; i < bsz; ++i) {
            const double* prow = probs->data() + i * classes;
            double* grow = ln.grad.data() + i * classes;
            for (size_t j = 0; j < classes; ++j) grow[j] += g * prow[j];
            grow[static_cast<size_t>(labels[i])] -= g;
        }
    };
    return Tensor::from_node(out);
}

void softmax_row(std::span<const double> in, std::span<double> out) {
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double denom = 0.0;
    for (size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - mx);
        denom += out[i];
    }
    const double inv = 1.0 / denom;
    for (size_t i = 0; i < in.size(); ++i) out[i] *= inv;
}

}  // namespace isp
