#include "isp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace isp {
namespace {

constexpr char kMagic[8] = {'I', 'S', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

struct Writer {
    std::vector<uint8_t> buf;

    void u8(uint8_t v) { buf.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void f64_array(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
};

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("checkpoint: truncated");
    }
    uint8_t u8() {
        need(1);
        return buf[pos++];
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
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(buf.begin() + static_cast<long>(pos),
                      buf.begin() + static_cast<long>(pos + n));
        pos += n;
        return s;
    }
    std::vector<double> f64_array() {
        const uint64_t n = u64();
        need(n * 8);
        std::vector<double> v(n);
        for (uint64_t i = 0; i < n; ++i) v[i] = f64();
        return v;
    }
};

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const TrainState& st) {
    Writer w;
    w.buf.insert(w.buf.end(), kMagic, kMagic + 8);
    w.u32(kVersion);

    const ModelSpec& spec = st.model.spec();
    w.u32(spec.kind == ModelKind::Mlp ? 0 : 1);
    w.u64(spec.depth);
    w.u64(spec.width);
    w.u64(spec.heads);
    w.u64(spec.ffn);
    w.u64(spec.vocab);
    w.u64(spec.seq_len);
    w.u64(spec.input_dim);
    w.u64(spec.classes);

    const auto& params = st.model.params();
    w.u32(static_cast<uint32_t>(params.size()));
    for (const auto& p : params) {
        w.str(p.name);
        w.u8(p.prunable ? 1 : 0);
        w.u32(static_cast<uint32_t>(p.shape.size()));
        for (size_t d : p.shape) w.u64(d);
        w.f64_array(p.data);
    }

    w.f64(st.opt.cfg.lr);
    w.f64(st.opt.cfg.beta1);
    w.f64(st.opt.cfg.beta2);
    w.f64(st.opt.cfg.eps);
    w.f64(st.opt.cfg.weight_decay);
    w.u64(st.opt.step);
    for (size_t i = 0; i < params.size(); ++i) {
        w.f64_array(st.opt.m[i]);
        w.f64_array(st.opt.v[i]);
    }

    w.u64(st.stream.seed);
    w.u64(st.stream.cursor);
    w.u64(st.global_step);
    w.u64(st.lr_total_steps);
    w.f64(st.base_lr);
    return std::move(w.buf);
}

TrainState deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw CheckpointError("checkpoint: bad magic");
    }
    Reader r{bytes, 8};
    if (r.u32() != kVersion) throw CheckpointError("checkpoint: unsupported version");

    ModelSpec spec;
    spec.kind = r.u32() == 0 ? ModelKind::Mlp : ModelKind::TinyTransformer;
    spec.depth = r.u64();
    spec.width = r.u64();
    spec.heads = r.u64();
    spec.ffn = r.u64();
    spec.vocab = r.u64();
    spec.seq_len = r.u64();
    spec.input_dim = r.u64();
    spec.classes = r.u64();

    TrainState st;
    st.model = Model(spec, 0);
    auto& params = st.model.params();
    const uint32_t count = r.u32();
    if (count != params.size()) throw CheckpointError("checkpoint: parameter count mismatch");
    for (auto& p : params) {
        const std::string name = r.str();
        if (name != p.name) throw CheckpointError("checkpoint: parameter order mismatch at " + name);
        const bool prunable = r.u8() != 0;
        if (prunable != p.prunable) throw CheckpointError("checkpoint: prunable flag mismatch at " + name);
        const uint32_t ndims = r.u32();
        std::vector<size_t> shape(ndims);
        for (auto& d : shape) d = r.u64();
        if (shape != p.shape) throw CheckpointError("checkpoint: shape mismatch at " + name);
        p.data = r.f64_array();
        if (p.data.size() != p.size()) throw CheckpointError("checkpoint: data size mismatch at " + name);
        p.grad.assign(p.data.size(), 0.0);
    }

    AdamWConfig cfg;
    cfg.lr = r.f64();
    cfg.beta1 = r.f64();
    cfg.beta2 = r.f64();
    cfg.eps = r.f64();
    cfg.weight_decay = r.f64();
    st.opt = make_optimizer(st.model, cfg);
    st.opt.step = r.u64();
    for (size_t i = 0; i < params.size(); ++i) {
        st.opt.m[i] = r.f64_array();
        st.opt.v[i] = r.f64_array();
        if (st.opt.m[i].size() != params[i].size() || st.opt.v[i].size() != params[i].size()) {
            throw CheckpointError("checkpoint: moment size mismatch at " + params[i].name);
        }
    }

    st.stream.seed = r.u64();
    st.stream.cursor = r.u64();
    st.global_step = r.u64();
    st.lr_total_steps = r.u64();
    st.base_lr = r.f64();
    return st;
}

void save_checkpoint(const TrainState& st, const std::string& path) {
    const auto bytes = serialize_checkpoint(st);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write on checkpoint: " + path);
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace isp
