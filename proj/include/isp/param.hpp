#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace isp {

// Persistent trainable weight buffer. Gradients accumulate here across a
// backward sweep; callers zero them between steps.
struct Parameter {
    std::string name;
    std::vector<size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool prunable = false;

    size_t size() const { return data.size(); }
    void zero_grad() { grad.assign(data.size(), 0.0); }
};

}  // namespace isp
