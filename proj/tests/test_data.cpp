#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "isp/data.hpp"
#include "isp/rng.hpp"

using namespace isp;

namespace {

void check_split_partition(const Dataset& ds, size_t total) {
    std::set<uint32_t> all;
    all.insert(ds.train_idx.begin(), ds.train_idx.end());
    all.insert(ds.val_idx.begin(), ds.val_idx.end());
    all.insert(ds.test_idx.begin(), ds.test_idx.end());
    CHECK(all.size() == total);
    CHECK(ds.train_idx.size() + ds.val_idx.size() + ds.test_idx.size() == total);
    // roughly 80/10/10
    CHECK(ds.train_idx.size() > total * 0.74);
    CHECK(ds.train_idx.size() < total * 0.86);
    CHECK(ds.val_idx.size() > total * 0.06);
    CHECK(ds.test_idx.size() > total * 0.06);
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("gaussian clusters partition into deterministic splits") {
    Dataset a = gen_gaussian_clusters(4, 8, 4.0, 100, 11);
    Dataset b = gen_gaussian_clusters(4, 8, 4.0, 100, 11);
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
    CHECK(a.train_idx == b.train_idx);
    check_split_partition(a, 400);
    Dataset c = gen_gaussian_clusters(4, 8, 4.0, 100, 12);
    CHECK(a.features != c.features);
}

TEST_CASE("well separated clusters are solved by a nearest-mean probe") {
    const size_t classes = 5, dim = 8;
    Dataset ds = gen_gaussian_clusters(classes, dim, 6.0, 200, 3);
    // class means estimated on train, evaluated on test
    std::vector<std::vector<double>> mean(classes, std::vector<double>(dim, 0.0));
    std::vector<size_t> count(classes, 0);
    for (uint32_t i : ds.train_idx) {
        for (size_t d = 0; d < dim; ++d) mean[ds.labels[i]][d] += ds.features[i * dim + d];
        ++count[ds.labels[i]];
    }
    for (size_t c = 0; c < classes; ++c)
        for (size_t d = 0; d < dim; ++d) mean[c][d] /= static_cast<double>(count[c]);
    size_t hit = 0;
    for (uint32_t i : ds.test_idx) {
        double best = 1e300;
        size_t arg = 0;
        for (size_t c = 0; c < classes; ++c) {
            double dist = 0.0;
            for (size_t d = 0; d < dim; ++d) {
                const double diff = ds.features[i * dim + d] - mean[c][d];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                arg = c;
            }
        }
        hit += (arg == ds.labels[i]);
    }
    CHECK(static_cast<double>(hit) / ds.test_idx.size() > 0.99);
}

TEST_CASE("clusters require classes <= dim") {
    CHECK_THROWS(gen_gaussian_clusters(9, 8, 4.0, 10, 1));
}

TEST_CASE("sequence task plants exactly one marker and labels by it") {
    const size_t vocab = 12, seq = 6, classes = 4;
    Dataset ds = gen_sequence_task(vocab, seq, classes, 50, 21);
    CHECK(ds.vocab == vocab);
    CHECK(ds.seq_len == seq);
    check_split_partition(ds, 200);
    std::set<size_t> positions;
    for (size_t i = 0; i < 200; ++i) {
        size_t markers = 0, pos = 0;
        for (size_t s = 0; s < seq; ++s) {
            const int tok = ds.tokens[i * seq + s];
            REQUIRE(tok >= 0);
            REQUIRE(tok < static_cast<int>(vocab));
            if (tok < static_cast<int>(classes)) {
                ++markers;
                pos = s;
                CHECK(tok == static_cast<int>(ds.labels[i]));
            }
        }
        REQUIRE(markers == 1);
        positions.insert(pos);
    }
    CHECK(positions.size() > 1);  // marker position varies
    CHECK_THROWS(gen_sequence_task(4, 6, 4, 10, 1));  // needs filler tokens
}

TEST_CASE("data stream: two half batches equal one full batch") {
    Dataset ds = gen_sequence_task(12, 6, 4, 50, 22);
    DataStream s1{99, 0}, s2{99, 0};
    Batch a1 = next_batch(ds, ds.train_idx, s1, 5);
    Batch a2 = next_batch(ds, ds.train_idx, s1, 5);
    Batch b = next_batch(ds, ds.train_idx, s2, 10);
    REQUIRE(b.count == 10);
    std::vector<int> glued = a1.tokens;
    glued.insert(glued.end(), a2.tokens.begin(), a2.tokens.end());
    CHECK(glued == b.tokens);
    std::vector<int> labels = a1.labels;
    labels.insert(labels.end(), a2.labels.begin(), a2.labels.end());
    CHECK(labels == b.labels);
    CHECK(s1.cursor == s2.cursor);
}

TEST_CASE("each epoch is a permutation of the split, reshuffled between epochs") {
    Dataset ds = gen_gaussian_clusters(3, 4, 4.0, 30, 23);
    const size_t n = ds.train_idx.size();
    DataStream s{7, 0};
    // one epoch in batches of 7 visits every example exactly once
    std::map<std::vector<double>, int> seen;
    size_t consumed = 0;
    std::vector<std::vector<double>> first_epoch_order;
    while (consumed < n) {
        const size_t take = std::min<size_t>(7, n - consumed);
        Batch b = next_batch(ds, ds.train_idx, s, take);
        for (size_t i = 0; i < b.count; ++i) {
            std::vector<double> row(b.features.begin() + i * ds.dim,
                                    b.features.begin() + (i + 1) * ds.dim);
            seen[row]++;
            first_epoch_order.push_back(row);
        }
        consumed += take;
    }
    CHECK(seen.size() == n);
    for (const auto& [row, cnt] : seen) CHECK(cnt == 1);

    std::vector<std::vector<double>> second_epoch_order;
    consumed = 0;
    while (consumed < n) {
        const size_t take = std::min<size_t>(7, n - consumed);
        Batch b = next_batch(ds, ds.train_idx, s, take);
        for (size_t i = 0; i < b.count; ++i) {
            second_epoch_order.emplace_back(b.features.begin() + i * ds.dim,
                                            b.features.begin() + (i + 1) * ds.dim);
        }
        consumed += take;
    }
    CHECK(first_epoch_order != second_epoch_order);  // reshuffled
    auto sorted1 = first_epoch_order, sorted2 = second_epoch_order;
    std::sort(sorted1.begin(), sorted1.end());
    std::sort(sorted2.begin(), sorted2.end());
    CHECK(sorted1 == sorted2);  // same multiset
}

TEST_CASE("subsample draws floor(fraction*n) distinct members") {
    Dataset ds = gen_gaussian_clusters(3, 4, 4.0, 50, 24);
    Rng rng(5);
    const auto sub = subsample(ds.train_idx, 0.1, rng);
    CHECK(sub.size() == ds.train_idx.size() / 10);
    std::set<uint32_t> uniq(sub.begin(), sub.end());
    CHECK(uniq.size() == sub.size());
    const std::set<uint32_t> train(ds.train_idx.begin(), ds.train_idx.end());
    for (uint32_t i : sub) CHECK(train.count(i) == 1);
    // three tenths in sequence never repeat an example
    Rng rng2(6);
    std::set<uint32_t> all;
    size_t total = 0;
    for (int rep = 0; rep < 3; ++rep) {
        (void)rep;
        const auto s = subsample(ds.train_idx, 0.1, rng2);
        all.insert(s.begin(), s.end());
        total += s.size();
    }
    CHECK(all.size() <= ds.train_idx.size());
}

TEST_CASE("csv loader round trips a written file") {
    const std::string path = "/tmp/isp_test_data.csv";
    {
        std::ofstream out(path);
        out << "1,0.5,-1.25,3\n0,2,0.125,-7\n1,1,1,1\n0,0,0,0\n";
        for (int i = 0; i < 36; ++i) out << (i % 2) << "," << i << "," << -i << "," << 0.5 * i << "\n";
    }
    Dataset ds = load_csv_dataset(path, 77);
    CHECK(ds.dim == 3);
    CHECK(ds.classes == 2);
    CHECK(ds.labels[0] == 1);
    CHECK(ds.features[0] == doctest::Approx(0.5));
    CHECK(ds.features[1] == doctest::Approx(-1.25));
    CHECK(ds.features[5] == doctest::Approx(-7));
    CHECK(ds.labels.size() == 40);
    std::remove(path.c_str());
    CHECK_THROWS(load_csv_dataset("/tmp/does_not_exist_isp.csv", 1));
}

TEST_CASE("idx loader parses big-endian headers and scales pixels") {
    const std::string img_path = "/tmp/isp_test_images.idx";
    const std::string lab_path = "/tmp/isp_test_labels.idx";
    const size_t n = 40, rows = 2, cols = 3;
    {
        std::ofstream img(img_path, std::ios::binary);
        const unsigned char ih[16] = {0, 0, 8, 3, 0, 0, 0, n, 0, 0, 0, rows, 0, 0, 0, cols};
        img.write(reinterpret_cast<const char*>(ih), 16);
        for (size_t i = 0; i < n * rows * cols; ++i) {
            const unsigned char px = static_cast<unsigned char>((i * 7) % 256);
            img.write(reinterpret_cast<const char*>(&px), 1);
        }
        std::ofstream lab(lab_path, std::ios::binary);
        const unsigned char lh[8] = {0, 0, 8, 1, 0, 0, 0, n};
        lab.write(reinterpret_cast<const char*>(lh), 8);
        for (size_t i = 0; i < n; ++i) {
            const unsigned char l = static_cast<unsigned char>(i % 3);
            lab.write(reinterpret_cast<const char*>(&l), 1);
        }
    }
    Dataset ds = load_idx_dataset(img_path, lab_path, 5);
    CHECK(ds.dim == rows * cols);
    CHECK(ds.labels.size() == n);
    CHECK(ds.classes == 3);
    CHECK(ds.features[1] == doctest::Approx(7.0 / 255.0));
    check_split_partition(ds, n);
    // corrupt magic
    {
        std::ofstream img(img_path, std::ios::binary);
        const unsigned char bad[16] = {9, 9, 9, 9, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1};
        img.write(reinterpret_cast<const char*>(bad), 16);
        const unsigned char px = 0;
        img.write(reinterpret_cast<const char*>(&px), 1);
    }
    CHECK_THROWS(load_idx_dataset(img_path, lab_path, 5));
    std::remove(img_path.c_str());
    std::remove(lab_path.c_str());
}

TEST_CASE("gather_batch pulls the requested examples in order") {
    Dataset ds = gen_sequence_task(12, 6, 4, 20, 31);
    const uint32_t idx[3] = {5, 0, 17};
    Batch b = gather_batch(ds, idx, 3);
    CHECK(b.count == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(b.labels[i] == ds.labels[idx[i]]);
        for (size_t s = 0; s < 6; ++s) {
            CHECK(b.tokens[i * 6 + s] == ds.tokens[idx[i] * 6 + s]);
        }
    }
}

}  // TEST_SUITE
