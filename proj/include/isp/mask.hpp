#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "isp/model.hpp"

namespace isp {

struct MaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Ordered view of a model's prunable parameters. The fingerprint covers names
// and shapes; masks only combine when fingerprints match.
struct Registry {
    std::vector<std::string> names;
    std::vector<std::vector<size_t>> shapes;
    std::vector<size_t> sizes;
    std::vector<size_t> offsets;      // into the canonical flat bit vector
    std::vector<size_t> param_index;  // into Model::params()
    size_t total = 0;
    uint64_t fingerprint = 0;

    size_t entry_count() const { return names.size(); }
};

using RegistryPtr = std::shared_ptr<const Registry>;

RegistryPtr registry_from_model(const Model& m);

struct SparsityReport {
    size_t total = 0;
    size_t kept = 0;
    double sparsity = 0.0;  // 1 - kept/total
    std::vector<std::pair<std::string, size_t>> per_param_kept;
};

// Keep-mask over the registry's canonical flat order; byte 1 = weight kept.
class Mask {
public:
    Mask() = default;

    static Mask ones(RegistryPtr reg);
    static Mask zeros(RegistryPtr reg);

    bool defined() const { return static_cast<bool>(reg_); }
    const Registry& registry() const { return *reg_; }
    RegistryPtr registry_ptr() const { return reg_; }
    uint64_t fingerprint() const { return reg_->fingerprint; }
    size_t total() const { return reg_->total; }

    uint8_t get(size_t flat) const { return bits_[flat]; }
    void set(size_t flat, bool keep) { bits_[flat] = keep ? 1 : 0; }
    const std::vector<uint8_t>& bits() const { return bits_; }
    std::vector<uint8_t>& bits() { return bits_; }

    size_t kept() const;
    SparsityReport density() const;

    // Per-model-parameter pointers for forward/optimizer application.
    MaskBitsView view_for(const Model& m) const;

    bool operator==(const Mask& other) const;

private:
    RegistryPtr reg_;
    std::vector<uint8_t> bits_;
};

Mask mask_union(const Mask& a, const Mask& b);
Mask mask_intersect(const Mask& a, const Mask& b);
// Over keep-bit vectors; throws on an all-zero operand.
double cosine_similarity(const Mask& a, const Mask& b);
// Same similarity computed over pruned-bit (complement) vectors.
double cosine_similarity_pruned(const Mask& a, const Mask& b);
bool is_subset(const Mask& a, const Mask& b);

// Versioned run-length-encoded container; round trip is exact.
std::vector<uint8_t> serialize_mask(const Mask& m);
Mask deserialize_mask(const std::vector<uint8_t>& bytes, RegistryPtr expected);
void save_mask(const Mask& m, const std::string& path);
Mask load_mask(const std::string& path, RegistryPtr expected);

}  // namespace isp
