#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isp/model.hpp"
#include "isp/rng.hpp"

namespace isp {

// Immutable after generation. Splits are a pure function of (seed, index):
// roughly 80/10/10 train/val/test via a derived hash.
struct Dataset {
    ModelKind task_kind = ModelKind::Mlp;
    size_t dim = 0;       // feature dimension (mlp tasks)
    size_t seq_len = 0;   // token tasks
    size_t vocab = 0;
    size_t classes = 0;
    uint64_t seed = 0;
    std::vector<double> features;  // n * dim
    std::vector<int> tokens;       // n * seq_len
    std::vector<int> labels;       // n
    std::vector<uint32_t> train_idx, val_idx, test_idx;

    size_t size() const { return labels.size(); }
};

// n_per_class points per class from unit-variance isotropic Gaussians whose
// means sit pairwise `separation` apart. Requires classes <= dim.
Dataset gen_gaussian_clusters(size_t classes, size_t dim, double separation,
                              size_t n_per_class, uint64_t seed);

// Token sequences of filler tokens with exactly one marker token (ids
// 0..classes-1) at a random position; label = marker id. Requires vocab > classes.
Dataset gen_sequence_task(size_t vocab, size_t seq_len, size_t classes,
                          size_t n_per_class, uint64_t seed);

// floor(fraction * |split|) indices drawn without replacement.
std::vector<uint32_t> subsample(const std::vector<uint32_t>& split, double fraction,
                                Rng& stream);

// Resumable pass over a split: epoch e visits the split under a permutation
// derived from (seed, e); cursor counts examples consumed since construction.
struct DataStream {
    uint64_t seed = 0;
    uint64_t cursor = 0;
};

Batch next_batch(const Dataset& ds, const std::vector<uint32_t>& split,
                 DataStream& stream, size_t batch_size);

// Assembles a batch from explicit example indices (evaluation passes).
Batch gather_batch(const Dataset& ds, const uint32_t* idx, size_t count);

// `label,feat,feat,...` rows; feature count inferred from the first row.
Dataset load_csv_dataset(const std::string& path, uint64_t split_seed);
// IDX image/label file pair (ubyte formats); pixels scaled to [0,1].
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         uint64_t split_seed);

}  // namespace isp
