#include "isp/mask.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "isp/rng.hpp"

namespace isp {
namespace {

constexpr char kMagic[8] = {'I', 'S', 'P', 'M', 'A', 'S', 'K', '1'};

void require_compatible(const Mask& a, const Mask& b, const char* op) {
    if (!a.defined() || !b.defined()) throw MaskError(std::string(op) + ": undefined mask");
    if (a.fingerprint() != b.fingerprint()) {
        throw MaskError(std::string(op) + ": registry fingerprint mismatch");
    }
}

void push_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void push_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

struct ByteReader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw MaskError("mask file: truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    uint8_t u8() {
        need(1);
        return buf[pos++];
    }
};

}  // namespace

RegistryPtr registry_from_model(const Model& m) {
    auto reg = std::make_shared<Registry>();
    uint64_t fp = fnv1a64("mask-registry-v1");
    size_t offset = 0;
    const auto& params = m.params();
    for (size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        if (!p.prunable) continue;
        reg->names.push_back(p.name);
        reg->shapes.push_back(p.shape);
        reg->sizes.push_back(p.size());
        reg->offsets.push_back(offset);
        reg->param_index.push_back(i);
        offset += p.size();
        fp = fnv1a64(p.name, fp);
        fp = fnv1a64_u64(p.shape.size(), fp);
        for (size_t d : p.shape) fp = fnv1a64_u64(d, fp);
    }
    reg->total = offset;
    reg->fingerprint = fp;
    return reg;
}

Mask Mask::ones(RegistryPtr reg) {
    Mask m;
    m.reg_ = std::move(reg);
    m.bits_.assign(m.reg_->total, 1);
    return m;
}

Mask Mask::zeros(RegistryPtr reg) {
    Mask m;
    m.reg_ = std::move(reg);
    m.bits_.assign(m.reg_->total, 0);
    return m;
}

size_t Mask::kept() const {
    size_t k = 0;
    for (uint8_t b : bits_) k += b;
    return k;
}

SparsityReport Mask::density() const {
    SparsityReport rep;
    rep.total = reg_->total;
    for (size_t e = 0; e < reg_->entry_count(); ++e) {
        size_t k = 0;
        const uint8_t* p = bits_.data() + reg_->offsets[e];
        for (size_t j = 0; j < reg_->sizes[e]; ++j) k += p[j];
        rep.per_param_kept.emplace_back(reg_->names[e], k);
        rep.kept += k;
    }
    rep.sparsity = rep.total == 0
                       ? 0.0
                       : 1.0 - static_cast<double>(rep.kept) / static_cast<double>(rep.total);
    return rep;
}

MaskBitsView Mask::view_for(const Model& m) const {
    MaskBitsView view;
    view.per_param.assign(m.params().size(), nullptr);
    for (size_t e = 0; e < reg_->entry_count(); ++e) {
        const size_t pi = reg_->param_index[e];
        if (pi >= m.params().size() || m.params()[pi].name != reg_->names[e] ||
            m.params()[pi].size() != reg_->sizes[e]) {
            throw MaskError("mask does not align with model parameter " + reg_->names[e]);
        }
        view.per_param[pi] = bits_.data() + reg_->offsets[e];
    }
    return view;
}

bool Mask::operator==(const Mask& other) const {
    if (defined() != other.defined()) return false;
    if (!defined()) return true;
    return fingerprint() == other.fingerprint() && bits_ == other.bits_;
}

Mask mask_union(const Mask& a, const Mask& b) {
    require_compatible(a, b, "union");
    Mask out = a;
    for (size_t i = 0; i < out.bits().size(); ++i) {
        out.bits()[i] = (a.bits()[i] | b.bits()[i]) ? 1 : 0;
    }
    return out;
}

Mask mask_intersect(const Mask& a, const Mask& b) {
    require_compatible(a, b, "intersect");
    Mask out = a;
    for (size_t i = 0; i < out.bits().size(); ++i) {
        out.bits()[i] = (a.bits()[i] & b.bits()[i]) ? 1 : 0;
    }
    return out;
}

namespace {

double cosine_of_bits(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b,
                      bool complement) {
    size_t both = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const uint8_t av = complement ? !a[i] : a[i];
        const uint8_t bv = complement ? !b[i] : b[i];
        both += av & bv;
        na += av;
        nb += bv;
    }
    if (na == 0 || nb == 0) {
        throw MaskError("cosine_similarity: all-zero operand is undefined");
    }
    // One sqrt of the exact product, not sqrt(na)*sqrt(nb): the two-sqrt form
    // can land an ulp off na when na == nb, and identical masks must report
    // exactly 1. na*nb is an exact double for any desk-scale mask, and IEEE
    // sqrt is correctly rounded, so both/k over k*k comes out at exactly 1.
    const double cos = static_cast<double>(both) /
                       std::sqrt(static_cast<double>(na) * static_cast<double>(nb));
    return std::clamp(cos, 0.0, 1.0);
}

}  // namespace

double cosine_similarity(const Mask& a, const Mask& b) {
    require_compatible(a, b, "cosine_similarity");
    return cosine_of_bits(a.bits(), b.bits(), false);
}

double cosine_similarity_pruned(const Mask& a, const Mask& b) {
    require_compatible(a, b, "cosine_similarity");
    return cosine_of_bits(a.bits(), b.bits(), true);
}

bool is_subset(const Mask& a, const Mask& b) {
    require_compatible(a, b, "is_subset");
    for (size_t i = 0; i < a.bits().size(); ++i) {
        if (a.bits()[i] && !b.bits()[i]) return false;
    }
    return true;
}

std::vector<uint8_t> serialize_mask(const Mask& m) {
    if (!m.defined()) throw MaskError("serialize: undefined mask");
    const Registry& reg = m.registry();
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    push_u64(out, reg.fingerprint);
    push_u32(out, static_cast<uint32_t>(reg.entry_count()));
    for (size_t e = 0; e < reg.entry_count(); ++e) {
        push_u32(out, static_cast<uint32_t>(reg.names[e].size()));
        out.insert(out.end(), reg.names[e].begin(), reg.names[e].end());
        push_u32(out, static_cast<uint32_t>(reg.shapes[e].size()));
        for (size_t d : reg.shapes[e]) push_u64(out, d);
        // Run-length encoding: leading bit value, then alternating run lengths.
        const uint8_t* bits = m.bits().data() + reg.offsets[e];
        const size_t n = reg.sizes[e];
        std::vector<uint64_t> runs;
        uint8_t cur = bits[0];
        uint64_t len = 0;
        for (size_t i = 0; i < n; ++i) {
            if (bits[i] == cur) {
                ++len;
            } else {
                runs.push_back(len);
                cur = bits[i];
                len = 1;
            }
        }
        runs.push_back(len);
        out.push_back(bits[0]);
        push_u32(out, static_cast<uint32_t>(runs.size()));
        for (uint64_t rl : runs) push_u64(out, rl);
    }
    return out;
}

Mask deserialize_mask(const std::vector<uint8_t>& bytes, RegistryPtr expected) {
    ByteReader rd{bytes};
    rd.need(8);
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw MaskError("mask file: bad magic");
    rd.pos = 8;
    const uint64_t fp = rd.u64();
    if (fp != expected->fingerprint) {
        throw MaskError("mask file: registry fingerprint mismatch");
    }
    const uint32_t entries = rd.u32();
    if (entries != expected->entry_count()) throw MaskError("mask file: entry count mismatch");
    Mask out = Mask::zeros(std::move(expected));
    const Registry& reg = out.registry();
    for (uint32_t e = 0; e < entries; ++e) {
        const uint32_t name_len = rd.u32();
        rd.need(name_len);
        std::string name(bytes.begin() + static_cast<long>(rd.pos),
                         bytes.begin() + static_cast<long>(rd.pos + name_len));
        rd.pos += name_len;
        if (name != reg.names[e]) throw MaskError("mask file: name mismatch at " + name);
        const uint32_t ndims = rd.u32();
        std::vector<size_t> shape(ndims);
        for (uint32_t d = 0; d < ndims; ++d) shape[d] = rd.u64();
        if (shape != reg.shapes[e]) throw MaskError("mask file: shape mismatch at " + name);
        uint8_t cur = rd.u8();
        const uint32_t run_count = rd.u32();
        size_t i = reg.offsets[e];
        const size_t end = reg.offsets[e] + reg.sizes[e];
        for (uint32_t rI = 0; rI < run_count; ++rI) {
            uint64_t len = rd.u64();
            if (i + len > end) throw MaskError("mask file: runs overflow parameter " + name);
            for (uint64_t j = 0; j < len; ++j) out.bits()[i++] = cur;
            cur = cur ? 0 : 1;
        }
        if (i != end) throw MaskError("mask file: runs underflow parameter " + name);
    }
    return out;
}

void save_mask(const Mask& m, const std::string& path) {
    auto bytes = serialize_mask(m);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MaskError("cannot write mask file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

Mask load_mask(const std::string& path, RegistryPtr expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MaskError("cannot open mask file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return deserialize_mask(bytes, std::move(expected));
}

}  // namespace isp
