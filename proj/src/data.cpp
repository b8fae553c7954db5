#include "isp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace isp {
namespace {

void assign_splits(Dataset& ds) {
    ds.train_idx.clear();
    ds.val_idx.clear();
    ds.test_idx.clear();
    for (uint32_t i = 0; i < ds.size(); ++i) {
        const uint64_t h = derive_seed(ds.seed, "split", i) % 10;
        if (h < 8) {
            ds.train_idx.push_back(i);
        } else if (h == 8) {
            ds.val_idx.push_back(i);
        } else {
            ds.test_idx.push_back(i);
        }
    }
}

}  // namespace

Dataset gen_gaussian_clusters(size_t classes, size_t dim, double separation,
                              size_t n_per_class, uint64_t seed) {
    if (classes == 0 || dim == 0) throw std::runtime_error("clusters: classes/dim must be positive");
    if (classes > dim) {
        throw std::runtime_error("clusters: classes must not exceed dim (simplex means)");
    }
    Dataset ds;
    ds.task_kind = ModelKind::Mlp;
    ds.dim = dim;
    ds.classes = classes;
    ds.seed = seed;
    const size_t n = classes * n_per_class;
    ds.features.resize(n * dim);
    ds.labels.resize(n);
    // Means at (separation/sqrt(2)) * e_c: every pair sits exactly `separation` apart.
    const double radius = separation / std::sqrt(2.0);
    Rng rng(derive_seed(seed, "clusters"));
    for (size_t i = 0; i < n; ++i) {
        const size_t c = i % classes;
        ds.labels[i] = static_cast<int>(c);
        double* row = ds.features.data() + i * dim;
        for (size_t j = 0; j < dim; ++j) row[j] = rng.normal();
        row[c] += radius;
    }
    assign_splits(ds);
    return ds;
}

Dataset gen_sequence_task(size_t vocab, size_t seq_len, size_t classes,
                          size_t n_per_class, uint64_t seed) {
    if (classes == 0 || seq_len == 0) {
        throw std::runtime_error("sequence task: classes/seq_len must be positive");
    }
    if (vocab <= classes) {
        throw std::runtime_error("sequence task: vocab must exceed classes (filler pool)");
    }
    Dataset ds;
    ds.task_kind = ModelKind::TinyTransformer;
    ds.seq_len = seq_len;
    ds.vocab = vocab;
    ds.classes = classes;
    ds.seed = seed;
    const size_t n = classes * n_per_class;
    ds.tokens.resize(n * seq_len);
    ds.labels.resize(n);
    const size_t fillers = vocab - classes;
    Rng rng(derive_seed(seed, "sequence"));
    for (size_t i = 0; i < n; ++i) {
        const size_t c = i % classes;
        ds.labels[i] = static_cast<int>(c);
        int* row = ds.tokens.data() + i * seq_len;
        for (size_t j = 0; j < seq_len; ++j) {
            row[j] = static_cast<int>(classes + rng.next_below(fillers));
        }
        row[rng.next_below(seq_len)] = static_cast<int>(c);
    }
    assign_splits(ds);
    return ds;
}

std::vector<uint32_t> subsample(const std::vector<uint32_t>& split, double fraction,
                                Rng& stream) {
    if (fraction < 0.0 || fraction > 1.0) {
        throw std::runtime_error("subsample: fraction must be in [0,1]");
    }
    const size_t take =
        static_cast<size_t>(fraction * static_cast<double>(split.size()) + 1e-9);
    std::vector<uint32_t> pool = split;
    stream.shuffle(pool);
    pool.resize(take);
    return pool;
}

Batch gather_batch(const Dataset& ds, const uint32_t* idx, size_t count) {
    Batch b;
    b.count = count;
    b.labels.resize(count);
    if (ds.task_kind == ModelKind::Mlp) {
        b.features.resize(count * ds.dim);
        for (size_t i = 0; i < count; ++i) {
            const uint32_t src = idx[i];
            b.labels[i] = ds.labels[src];
            std::copy_n(ds.features.data() + static_cast<size_t>(src) * ds.dim, ds.dim,
                        b.features.data() + i * ds.dim);
        }
    } else {
        b.tokens.resize(count * ds.seq_len);
        for (size_t i = 0; i < count; ++i) {
            const uint32_t src = idx[i];
            b.labels[i] = ds.labels[src];
            std::copy_n(ds.tokens.data() + static_cast<size_t>(src) * ds.seq_len,
                        ds.seq_len, b.tokens.data() + i * ds.seq_len);
        }
    }
    return b;
}

Batch next_batch(const Dataset& ds, const std::vector<uint32_t>& split,
                 DataStream& stream, size_t batch_size) {
    if (split.empty()) throw std::runtime_error("next_batch: empty split");
    if (batch_size == 0) throw std::runtime_error("next_batch: zero batch size");
    const uint64_t n = split.size();
    std::vector<uint32_t> picked(batch_size);
    std::vector<uint32_t> perm;
    uint64_t perm_epoch = UINT64_MAX;
    for (size_t i = 0; i < batch_size; ++i) {
        const uint64_t epoch = stream.cursor / n;
        const uint64_t pos = stream.cursor % n;
        if (epoch != perm_epoch) {
            perm = split;
            Rng r(derive_seed(stream.seed, "epoch", epoch));
            r.shuffle(perm);
            perm_epoch = epoch;
        }
        picked[i] = perm[pos];
        stream.cursor += 1;
    }
    return gather_batch(ds, picked.data(), batch_size);
}

Dataset load_csv_dataset(const std::string& path, uint64_t split_seed) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv dataset: " + path);
    Dataset ds;
    ds.task_kind = ModelKind::Mlp;
    ds.seed = split_seed;
    std::string line;
    int max_label = -1;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() < 2) throw std::runtime_error("csv dataset: row needs label + features");
        if (ds.dim == 0) {
            ds.dim = row.size() - 1;
        } else if (row.size() - 1 != ds.dim) {
            throw std::runtime_error("csv dataset: inconsistent feature count");
        }
        const int label = static_cast<int>(row[0]);
        if (label < 0) throw std::runtime_error("csv dataset: negative label");
        max_label = std::max(max_label, label);
        ds.labels.push_back(label);
        ds.features.insert(ds.features.end(), row.begin() + 1, row.end());
    }
    if (ds.labels.empty()) throw std::runtime_error("csv dataset: no rows");
    ds.classes = static_cast<size_t>(max_label) + 1;
    assign_splits(ds);
    return ds;
}

namespace {

uint32_t read_be32(std::istream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("idx dataset: truncated header");
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
           uint32_t(b[3]);
}

}  // namespace

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         uint64_t split_seed) {
    std::ifstream imgs(images_path, std::ios::binary);
    std::ifstream labs(labels_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("cannot open idx images: " + images_path);
    if (!labs) throw std::runtime_error("cannot open idx labels: " + labels_path);
    if (read_be32(imgs) != 0x00000803) throw std::runtime_error("idx images: bad magic");
    if (read_be32(labs) != 0x00000801) throw std::runtime_error("idx labels: bad magic");
    const uint32_t n = read_be32(imgs);
    const uint32_t rows = read_be32(imgs);
    const uint32_t cols = read_be32(imgs);
    if (read_be32(labs) != n) throw std::runtime_error("idx: image/label count mismatch");

    Dataset ds;
    ds.task_kind = ModelKind::Mlp;
    ds.seed = split_seed;
    ds.dim = static_cast<size_t>(rows) * cols;
    ds.features.resize(static_cast<size_t>(n) * ds.dim);
    ds.labels.resize(n);
    std::vector<uint8_t> buf(ds.dim);
    int max_label = 0;
    for (uint32_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!imgs) throw std::runtime_error("idx images: truncated data");
        for (size_t j = 0; j < ds.dim; ++j) {
            ds.features[i * ds.dim + j] = buf[j] / 255.0;
        }
        int lab = labs.get();
        if (lab == EOF) throw std::runtime_error("idx labels: truncated data");
        ds.labels[i] = lab;
        max_label = std::max(max_label, lab);
    }
    ds.classes = static_cast<size_t>(max_label) + 1;
    assign_splits(ds);
    return ds;
}

}  // namespace isp
