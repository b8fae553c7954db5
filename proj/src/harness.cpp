#include "isp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace isp {
namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct KvReader {
    std::map<std::string, std::string> kv;
    std::set<std::string> used;

    explicit KvReader(std::map<std::string, std::string> m) : kv(std::move(m)) {}

    const std::string* raw(const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) return nullptr;
        used.insert(key);
        return &it->second;
    }
    std::string gets(const std::string& key, const std::string& def) {
        const std::string* v = raw(key);
        return v ? *v : def;
    }
    std::string gets_required(const std::string& key) {
        const std::string* v = raw(key);
        if (!v) throw ConfigError("missing required config key: " + key);
        return *v;
    }
    uint64_t getu(const std::string& key, uint64_t def) {
        const std::string* v = raw(key);
        if (!v) return def;
        try {
            return std::stoull(*v);
        } catch (...) {
            throw ConfigError("config key " + key + ": expected an unsigned integer, got '" + *v + "'");
        }
    }
    double getd(const std::string& key, double def) {
        const std::string* v = raw(key);
        if (!v) return def;
        try {
            return std::stod(*v);
        } catch (...) {
            throw ConfigError("config key " + key + ": expected a number, got '" + *v + "'");
        }
    }
    bool getb(const std::string& key, bool def) {
        const std::string* v = raw(key);
        if (!v) return def;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw ConfigError("config key " + key + ": expected true/false, got '" + *v + "'");
    }
    std::vector<double> getdlist(const std::string& key, std::vector<double> def) {
        const std::string* v = raw(key);
        if (!v) return def;
        std::vector<double> out;
        for (const auto& item : split_list(*v)) {
            try {
                out.push_back(std::stod(item));
            } catch (...) {
                throw ConfigError("config key " + key + ": bad list element '" + item + "'");
            }
        }
        return out;
    }
    std::vector<uint64_t> getulist(const std::string& key, std::vector<uint64_t> def) {
        const std::string* v = raw(key);
        if (!v) return def;
        std::vector<uint64_t> out;
        for (const auto& item : split_list(*v)) {
            try {
                out.push_back(std::stoull(item));
            } catch (...) {
                throw ConfigError("config key " + key + ": bad list element '" + item + "'");
            }
        }
        return out;
    }
    std::vector<std::string> getslist(const std::string& key, std::vector<std::string> def) {
        const std::string* v = raw(key);
        if (!v) return def;
        return split_list(*v);
    }
    void finish() const {
        for (const auto& [key, value] : kv) {
            if (!used.count(key)) throw ConfigError("unknown config key: " + key);
        }
    }
};

const std::set<std::string> kMethods = {"isp",    "imp",         "imp-rewind", "oneshot",
                                        "random", "progressive", "snip"};

}  // namespace

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
        }
        if (kv.count(key)) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": duplicate key " + key);
        }
        kv[key] = value;
    }
    return kv;
}

ExperimentConfig ExperimentConfig::from_map(std::map<std::string, std::string> kv,
                                            const CliOverrides& over) {
    KvReader r(std::move(kv));
    ExperimentConfig c;

    c.data_task = r.gets_required("data.task");
    c.data_classes = r.getu("data.classes", c.data_classes);
    c.data_vocab = r.getu("data.vocab", c.data_vocab);
    c.data_seq_len = r.getu("data.seq_len", c.data_seq_len);
    c.data_dim = r.getu("data.dim", c.data_dim);
    c.data_n_per_class = r.getu("data.n_per_class", c.data_n_per_class);
    c.data_separation = r.getd("data.separation", c.data_separation);
    c.data_seed = r.getu("data.seed", c.data_seed);
    c.data_csv_path = r.gets("data.csv_path", "");
    c.data_idx_images = r.gets("data.idx_images", "");
    c.data_idx_labels = r.gets("data.idx_labels", "");

    c.model_kind = r.gets("model.kind", c.model_kind);
    c.model_depth = r.getu("model.depth", c.model_depth);
    c.model_width = r.getu("model.width", c.model_width);
    c.model_heads = r.getu("model.heads", c.model_heads);
    c.model_ffn = r.getu("model.ffn", c.model_ffn);

    c.lr = r.getd("train.lr", c.lr);
    c.epochs = r.getu("train.epochs", c.epochs);
    c.batch = r.getu("train.batch", c.batch);
    c.weight_decay = r.getd("train.weight_decay", c.weight_decay);
    c.beta1 = r.getd("train.beta1", c.beta1);
    c.beta2 = r.getd("train.beta2", c.beta2);
    c.eps = r.getd("train.eps", c.eps);

    c.pre_lr = r.getd("pretrain.lr", c.pre_lr);
    c.pre_epochs = r.getu("pretrain.epochs", c.pre_epochs);
    c.pre_weight_decay = r.getd("pretrain.weight_decay", c.pre_weight_decay);
    c.pretrain_ckpt = r.gets("pretrain.ckpt", "");

    c.method = r.gets("prune.method", c.method);
    c.rate = r.getd("prune.rate", c.rate);
    c.target_sparsity = r.getd("prune.target_sparsity", c.target_sparsity);
    c.look_ahead = r.getu("prune.look_ahead", c.look_ahead);
    c.denoisers = r.getu("prune.denoisers", c.denoisers);
    c.seed_steps = r.getu("prune.seed_steps", c.seed_steps);
    c.mask_budget = r.getu("prune.mask_budget", c.mask_budget);
    c.subset_fraction = r.getd("prune.subset_fraction", c.subset_fraction);
    c.fresh_lookahead_optimizer =
        r.getb("prune.fresh_lookahead_optimizer", c.fresh_lookahead_optimizer);

    c.imp_rounds = r.getu("imp.rounds", c.imp_rounds);
    c.imp_rewind_step = r.getu("imp.rewind_step", c.imp_rewind_step);
    c.imp_per_round_epochs = r.getu("imp.per_round_epochs", c.imp_per_round_epochs);
    c.prog_intervals = r.getu("progressive.intervals", c.prog_intervals);

    c.ims_k = r.getu("ims.k", c.ims_k);
    c.ims_steps = r.getu("ims.steps", c.ims_steps);
    c.ims_subset_fraction = r.getd("ims.subset_fraction", c.ims_subset_fraction);
    c.ims_select_by_loss = r.getb("ims.select_by_loss", c.ims_select_by_loss);
    c.ims_sparsity_pool = r.getdlist("ims.sparsity_pool", c.ims_sparsity_pool);
    c.ims_alpha_grid = r.getdlist("ims.alpha_grid", c.ims_alpha_grid);

    c.compare_methods = r.getslist("compare.methods", c.compare_methods);
    c.compare_grid = r.getdlist("compare.grid", c.compare_grid);
    c.compare_rate = r.getd("compare.rate", c.compare_rate);
    c.compare_round_budget = r.getu("compare.round_budget", c.compare_round_budget);

    c.sweep_axis = r.gets("sweep.axis", c.sweep_axis);
    c.sweep_values = r.getulist("sweep.values", c.sweep_values);

    c.seed = r.getu("run.seed", c.seed);
    c.out_dir = r.gets("run.out", "");
    c.eval_batch = r.getu("eval.batch", c.eval_batch);

    r.finish();

    if (over.seed) c.seed = *over.seed;
    if (over.out_dir) c.out_dir = *over.out_dir;
    if (over.method) c.method = *over.method;

    if (c.data_task != "sequence" && c.data_task != "clusters" && c.data_task != "csv" &&
        c.data_task != "idx") {
        throw ConfigError("data.task must be one of sequence|clusters|csv|idx, got '" +
                          c.data_task + "'");
    }
    if (!kMethods.count(c.method)) {
        std::string valid;
        for (const auto& m : kMethods) valid += (valid.empty() ? "" : "|") + m;
        throw ConfigError("unknown method '" + c.method + "', expected one of " + valid);
    }
    if (c.model_kind != "transformer" && c.model_kind != "mlp") {
        throw ConfigError("model.kind must be transformer or mlp");
    }
    if (c.batch == 0) throw ConfigError("train.batch must be >= 1");
    if (c.epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (c.eval_batch == 0) throw ConfigError("eval.batch must be >= 1");
    if (c.sweep_axis != "denoiser_count" && c.sweep_axis != "look_ahead") {
        throw ConfigError("sweep.axis must be denoiser_count or look_ahead");
    }
    for (const auto& m : c.compare_methods) {
        if (m != "oneshot" && m != "random" && m != "snip" && m != "imp") {
            throw ConfigError("compare.methods: unknown method '" + m + "'");
        }
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path, const CliOverrides& over) {
    return from_map(parse_kv_file(path), over);
}

std::string ExperimentConfig::canonical() const {
    std::vector<std::pair<std::string, std::string>> rows;
    auto put = [&](const std::string& k, const std::string& v) { rows.emplace_back(k, v); };
    auto putd = [&](const std::string& k, double v) { put(k, fmt_double(v)); };
    auto putu = [&](const std::string& k, uint64_t v) { put(k, std::to_string(v)); };
    auto putdl = [&](const std::string& k, const std::vector<double>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
        put(k, s);
    };

    put("data.task", data_task);
    putu("data.classes", data_classes);
    putu("data.vocab", data_vocab);
    putu("data.seq_len", data_seq_len);
    putu("data.dim", data_dim);
    putu("data.n_per_class", data_n_per_class);
    putd("data.separation", data_separation);
    putu("data.seed", data_seed);
    put("data.csv_path", data_csv_path);
    put("data.idx_images", data_idx_images);
    put("data.idx_labels", data_idx_labels);
    put("model.kind", model_kind);
    putu("model.depth", model_depth);
    putu("model.width", model_width);
    putu("model.heads", model_heads);
    putu("model.ffn", model_ffn);
    putd("train.lr", lr);
    putu("train.epochs", epochs);
    putu("train.batch", batch);
    putd("train.weight_decay", weight_decay);
    putd("train.beta1", beta1);
    putd("train.beta2", beta2);
    putd("train.eps", eps);
    putd("pretrain.lr", pre_lr);
    putu("pretrain.epochs", pre_epochs);
    putd("pretrain.weight_decay", pre_weight_decay);
    put("pretrain.ckpt", pretrain_ckpt);
    put("prune.method", method);
    putd("prune.rate", rate);
    putd("prune.target_sparsity", target_sparsity);
    putu("prune.look_ahead", look_ahead);
    putu("prune.denoisers", denoisers);
    putu("prune.seed_steps", seed_steps);
    putu("prune.mask_budget", mask_budget);
    putd("prune.subset_fraction", subset_fraction);
    put("prune.fresh_lookahead_optimizer", fresh_lookahead_optimizer ? "true" : "false");
    putu("imp.rounds", imp_rounds);
    putu("imp.rewind_step", imp_rewind_step);
    putu("imp.per_round_epochs", imp_per_round_epochs);
    putu("progressive.intervals", prog_intervals);
    putu("ims.k", ims_k);
    putu("ims.steps", ims_steps);
    putd("ims.subset_fraction", ims_subset_fraction);
    put("ims.select_by_loss", ims_select_by_loss ? "true" : "false");
    putdl("ims.sparsity_pool", ims_sparsity_pool);
    putdl("ims.alpha_grid", ims_alpha_grid);
    {
        std::string s;
        for (size_t i = 0; i < compare_methods.size(); ++i) s += (i ? "," : "") + compare_methods[i];
        put("compare.methods", s);
    }
    putdl("compare.grid", compare_grid);
    putd("compare.rate", compare_rate);
    putu("compare.round_budget", compare_round_budget);
    put("sweep.axis", sweep_axis);
    {
        std::string s;
        for (size_t i = 0; i < sweep_values.size(); ++i)
            s += (i ? "," : "") + std::to_string(sweep_values[i]);
        put("sweep.values", s);
    }
    putu("run.seed", seed);
    putu("eval.batch", eval_batch);
    // run.out is a location, not an experiment input; it stays out of the hash.

    std::sort(rows.begin(), rows.end());
    std::string out;
    for (const auto& [k, v] : rows) out += k + "=" + v + "\n";
    return out;
}

std::string ExperimentConfig::hash_hex() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical())));
    return buf;
}

Dataset ExperimentConfig::build_dataset() const {
    if (data_task == "sequence") {
        return gen_sequence_task(data_vocab, data_seq_len, data_classes, data_n_per_class,
                                 data_seed);
    }
    if (data_task == "clusters") {
        return gen_gaussian_clusters(data_classes, data_dim, data_separation,
                                     data_n_per_class, data_seed);
    }
    if (data_task == "csv") {
        if (data_csv_path.empty()) throw ConfigError("missing required config key: data.csv_path");
        return load_csv_dataset(data_csv_path, data_seed);
    }
    if (data_idx_images.empty() || data_idx_labels.empty()) {
        throw ConfigError("missing required config key: data.idx_images / data.idx_labels");
    }
    return load_idx_dataset(data_idx_images, data_idx_labels, data_seed);
}

ModelSpec ExperimentConfig::build_model_spec(const Dataset& ds) const {
    ModelSpec spec;
    spec.kind = model_kind_from_name(model_kind);
    if ((spec.kind == ModelKind::TinyTransformer) != (ds.task_kind == ModelKind::TinyTransformer)) {
        throw ConfigError("model.kind " + model_kind + " does not fit data.task " + data_task);
    }
    spec.depth = model_depth;
    spec.width = model_width;
    spec.heads = model_heads;
    spec.ffn = model_ffn;
    spec.classes = ds.classes;
    if (spec.kind == ModelKind::TinyTransformer) {
        spec.vocab = ds.vocab;
        spec.seq_len = ds.seq_len;
    } else {
        spec.input_dim = ds.dim;
    }
    spec.validate();
    return spec;
}

AdamWConfig ExperimentConfig::finetune_adamw() const {
    AdamWConfig a;
    a.lr = lr;
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.eps = eps;
    a.weight_decay = weight_decay;
    return a;
}

AdamWConfig ExperimentConfig::pretrain_adamw() const {
    AdamWConfig a;
    a.lr = pre_lr;
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.eps = eps;
    a.weight_decay = pre_weight_decay;
    return a;
}

size_t ExperimentConfig::steps_per_epoch(const Dataset& ds) const {
    const size_t spe = ds.train_idx.size() / batch;
    if (spe == 0) {
        throw ConfigError("train.batch exceeds the training split (" +
                          std::to_string(ds.train_idx.size()) + " examples)");
    }
    return spe;
}

uint64_t ExperimentConfig::total_budget(const Dataset& ds) const {
    return static_cast<uint64_t>(epochs) * steps_per_epoch(ds);
}

uint64_t ExperimentConfig::derived_seed_steps(const Dataset& ds) const {
    if (seed_steps > 0) return seed_steps;
    const double t = 0.10 * static_cast<double>(ds.train_idx.size()) /
                     static_cast<double>(batch);
    return static_cast<uint64_t>(std::ceil(t - 1e-9));
}

std::string ExperimentConfig::effective_out_dir() const {
    if (!out_dir.empty()) return out_dir;
    if (const char* env = std::getenv("ISP_OUT_ROOT"); env && *env) return env;
    return "runs";
}

namespace {

json ledger_json(const BudgetLedger& ledger) {
    json phases = json::object();
    for (size_t i = 0; i < kPhaseCount; ++i) {
        const auto& e = ledger.by_phase[i];
        phases[phase_name(static_cast<Phase>(i))] = {{"steps", e.steps}, {"flops", e.flops}};
    }
    json out;
    out["phases"] = phases;
    out["optimizer_steps"] = ledger.optimizer_steps();
    uint64_t train_flops = 0;
    for (size_t i = 0; i < kPhaseCount; ++i) {
        if (static_cast<Phase>(i) != Phase::Eval) train_flops += ledger.by_phase[i].flops;
    }
    out["train_flops"] = train_flops;
    out["total_flops"] = ledger.total_flops();
    if (ledger.step_budget) out["step_budget"] = *ledger.step_budget;
    return out;
}

json spec_json(const ModelSpec& spec) {
    json out;
    out["kind"] = model_kind_name(spec.kind);
    out["depth"] = spec.depth;
    out["width"] = spec.width;
    out["heads"] = spec.heads;
    out["ffn"] = spec.ffn;
    out["vocab"] = spec.vocab;
    out["seq_len"] = spec.seq_len;
    out["input_dim"] = spec.input_dim;
    out["classes"] = spec.classes;
    return out;
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.kind = model_kind_from_name(j.at("kind").get<std::string>());
    spec.depth = j.at("depth").get<size_t>();
    spec.width = j.at("width").get<size_t>();
    spec.heads = j.at("heads").get<size_t>();
    spec.ffn = j.at("ffn").get<size_t>();
    spec.vocab = j.at("vocab").get<size_t>();
    spec.seq_len = j.at("seq_len").get<size_t>();
    spec.input_dim = j.at("input_dim").get<size_t>();
    spec.classes = j.at("classes").get<size_t>();
    return spec;
}

struct TraceWriter {
    std::ofstream out;

    explicit TraceWriter(const std::string& path) : out(path, std::ios::trunc) {
        if (!out) throw std::runtime_error("cannot open trace file: " + path);
    }
    StepHook hook() {
        return [this](const TraceRow& row) {
            json j;
            j["schema"] = "trace-v1";
            j["step"] = row.step;
            j["phase"] = phase_name(row.phase);
            j["lr"] = row.lr;
            j["sparsity"] = row.sparsity;
            j["loss"] = row.loss;
            j["density"] = row.density;
            j["batch"] = row.batch;
            out << j.dump() << "\n";
        };
    }
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << text;
}

// Pretraining shared by prune/ims/compare runs: load the configured
// checkpoint when given, otherwise train one from scratch right here.
TrainState prepare_pretrained(const ExperimentConfig& cfg, const Dataset& ds,
                              BudgetLedger* ledger_out = nullptr,
                              const StepHook& hook = nullptr) {
    const ModelSpec spec = cfg.build_model_spec(ds);
    if (!cfg.pretrain_ckpt.empty()) {
        TrainState st = load_checkpoint(cfg.pretrain_ckpt);
        if (!(st.model.spec() == spec)) {
            throw ConfigError("pretrain.ckpt model does not match this config: " +
                              cfg.pretrain_ckpt);
        }
        return st;
    }
    const uint64_t steps = static_cast<uint64_t>(cfg.pre_epochs) * cfg.steps_per_epoch(ds);
    TrainState st = make_train_state(spec, derive_seed(cfg.seed, "init"),
                                     cfg.pretrain_adamw(), derive_seed(cfg.seed, "pretrain_data"),
                                     steps == 0 ? 1 : steps);
    BudgetLedger local;
    BudgetLedger& ledger = ledger_out ? *ledger_out : local;
    train_steps(st, ds, ds.train_idx, cfg.batch, steps, nullptr, Phase::Pretrain, ledger,
                hook);
    return st;
}

// A pruning run starts from pretrained weights with a fresh optimizer, a
// fresh data order, and the configured fine-tuning protocol.
TrainState prune_start_state(const ExperimentConfig& cfg, const TrainState& pretrained,
                             uint64_t total_steps) {
    TrainState st;
    st.model = pretrained.model;
    st.opt = make_optimizer(st.model, cfg.finetune_adamw());
    st.stream = DataStream{derive_seed(cfg.seed, "run_data"), 0};
    st.global_step = 0;
    st.lr_total_steps = total_steps == 0 ? 1 : total_steps;
    st.base_lr = cfg.lr;
    return st;
}

DenoiserConfig denoiser_from(const ExperimentConfig& cfg) {
    DenoiserConfig d;
    d.N = cfg.denoisers;
    d.C = cfg.look_ahead;
    d.subset_fraction = cfg.subset_fraction;
    d.fresh_optimizer = cfg.fresh_lookahead_optimizer;
    return d;
}

uint64_t imp_step_cap(const ExperimentConfig& cfg, uint64_t T, uint64_t per_round,
                      uint64_t rewind) {
    return rewind + static_cast<uint64_t>(cfg.imp_rounds) * per_round + T;
}

}  // namespace

std::string execute_prune_run(const ExperimentConfig& base_cfg, const std::string& method,
                              const std::string& run_dir) {
    ExperimentConfig cfg = base_cfg;
    cfg.method = method;
    fs::create_directories(run_dir);
    fs::create_directories(run_dir + "/masks");

    const Dataset ds = cfg.build_dataset();
    const uint64_t T = cfg.total_budget(ds);
    const TrainState pretrained = prepare_pretrained(cfg, ds);
    TrainState start = prune_start_state(cfg, pretrained, T);

    TraceWriter trace(run_dir + "/trace.jsonl");
    std::vector<std::string> mask_paths;
    RunHooks hooks;
    hooks.on_step = trace.hook();
    hooks.on_mask = [&](size_t idx, const Mask& m) {
        const std::string path = run_dir + "/masks/call_" + std::to_string(idx) + ".mask";
        save_mask(m, path);
        mask_paths.push_back("masks/call_" + std::to_string(idx) + ".mask");
    };

    BudgetLedger ledger;
    RunResult result;
    uint64_t per_round = 0, rewind = 0;
    if (method == "isp") {
        IspParams p;
        p.schedule = PruneSchedule::derive(cfg.derived_seed_steps(ds), cfg.rate,
                                           cfg.target_sparsity, T, cfg.mask_budget);
        p.denoiser = denoiser_from(cfg);
        p.batch_size = cfg.batch;
        p.seed = derive_seed(cfg.seed, "isp");
        ledger.step_budget = T;
        result = isp_run(std::move(start), ds, p, ledger, hooks);
    } else if (method == "imp" || method == "imp-rewind") {
        ImpParams p;
        p.rounds = cfg.imp_rounds;
        const size_t pre = cfg.imp_per_round_epochs == 0 ? cfg.epochs : cfg.imp_per_round_epochs;
        p.per_round_budget = static_cast<uint64_t>(pre) * cfg.steps_per_epoch(ds);
        p.rate = cfg.rate;
        p.rewind_step = method == "imp" ? 0 : cfg.imp_rewind_step;
        if (method == "imp-rewind" && p.rewind_step == 0) {
            p.rewind_step = std::max<uint64_t>(1, T / 20);
        }
        p.target_sparsity = cfg.target_sparsity;
        p.final_budget = T;
        p.batch_size = cfg.batch;
        per_round = p.per_round_budget;
        rewind = p.rewind_step;
        ledger.step_budget = imp_step_cap(cfg, T, per_round, rewind);
        result = imp_run(start, ds, p, ledger, hooks);
    } else if (method == "progressive") {
        ProgressiveParams p;
        p.intervals = cfg.prog_intervals;
        p.target_sparsity = cfg.target_sparsity;
        p.total_budget = T;
        p.batch_size = cfg.batch;
        ledger.step_budget = T;
        result = progressive_run(std::move(start), ds, p, ledger, hooks);
    } else {
        OneShotParams p;
        p.criterion = method == "oneshot"  ? OneShotCriterion::Magnitude
                      : method == "random" ? OneShotCriterion::Random
                                           : OneShotCriterion::Snip;
        p.target_sparsity = cfg.target_sparsity;
        p.total_budget = T;
        p.batch_size = cfg.batch;
        p.seed = derive_seed(cfg.seed, "one_shot");
        ledger.step_budget = T;
        result = one_shot_run(std::move(start), ds, p, ledger, hooks);
    }

    save_checkpoint(result.state, run_dir + "/final.ckpt");
    save_mask(result.mask, run_dir + "/final.mask");

    const SparsityReport rep = result.mask.density();
    json record;
    record["schema"] = "runrecord-v1";
    record["config_hash"] = cfg.hash_hex();
    record["seed"] = cfg.seed;
    record["method"] = method;
    record["model"] = spec_json(result.state.model.spec());
    record["budget_steps"] = T;
    record["final_sparsity"] = rep.sparsity;
    record["final_kept"] = rep.kept;
    record["prunable_total"] = rep.total;
    record["final_val_accuracy"] = result.val.accuracy;
    record["final_test_accuracy"] = result.test.accuracy;
    record["look_ahead_steps"] = result.look_ahead_steps;
    record["ledger"] = ledger_json(ledger);
    json calls = json::array();
    for (const auto& c : result.calls) {
        calls.push_back({{"index", c.index},
                         {"at_step", c.at_step},
                         {"rate", c.rate},
                         {"kept_before", c.kept_before},
                         {"kept_after", c.kept_after},
                         {"sparsity_after", c.sparsity_after}});
    }
    record["prune_calls"] = calls;
    record["artifacts"] = {{"checkpoint", "final.ckpt"},
                           {"final_mask", "final.mask"},
                           {"masks", mask_paths},
                           {"trace", "trace.jsonl"}};
    if (method == "imp" || method == "imp-rewind") {
        record["imp"] = {{"rounds", cfg.imp_rounds},
                         {"per_round_budget", per_round},
                         {"rewind_step", rewind}};
    }
    write_text(run_dir + "/run.json", record.dump(2) + "\n");
    return run_dir;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
    const Dataset ds = cfg.build_dataset();
    const std::string dir =
        cfg.effective_out_dir() + "/pretrain_s" + std::to_string(cfg.seed);
    fs::create_directories(dir);

    TraceWriter trace(dir + "/trace.jsonl");
    BudgetLedger ledger;
    ExperimentConfig local = cfg;
    local.pretrain_ckpt.clear();  // always train here, even if a ckpt is configured
    TrainState st = prepare_pretrained(local, ds, &ledger, trace.hook());
    save_checkpoint(st, dir + "/checkpoint.ckpt");

    const EvalResult val = evaluate(st.model, ds, ds.val_idx, nullptr, cfg.eval_batch, &ledger);
    const EvalResult test = evaluate(st.model, ds, ds.test_idx, nullptr, cfg.eval_batch, &ledger);

    json record;
    record["schema"] = "runrecord-v1";
    record["config_hash"] = cfg.hash_hex();
    record["seed"] = cfg.seed;
    record["method"] = "pretrain";
    record["model"] = spec_json(st.model.spec());
    record["budget_steps"] = static_cast<uint64_t>(cfg.pre_epochs) * cfg.steps_per_epoch(ds);
    record["final_val_accuracy"] = val.accuracy;
    record["final_test_accuracy"] = test.accuracy;
    record["ledger"] = ledger_json(ledger);
    record["artifacts"] = {{"checkpoint", "checkpoint.ckpt"}, {"trace", "trace.jsonl"}};
    write_text(dir + "/run.json", record.dump(2) + "\n");
    std::printf("pretrain: %s val_acc=%.4f test_acc=%.4f\n", dir.c_str(), val.accuracy,
                test.accuracy);
    return 0;
}

int cmd_prune(const ExperimentConfig& cfg) {
    const std::string dir = cfg.effective_out_dir() + "/" + cfg.method + "_s" +
                            std::to_string(cfg.seed);
    execute_prune_run(cfg, cfg.method, dir);
    std::ifstream in(dir + "/run.json");
    json record = json::parse(in);
    std::printf("%s: %s sparsity=%.4f val_acc=%.4f test_acc=%.4f steps=%llu\n",
                cfg.method.c_str(), dir.c_str(),
                record["final_sparsity"].get<double>(),
                record["final_val_accuracy"].get<double>(),
                record["final_test_accuracy"].get<double>(),
                static_cast<unsigned long long>(
                    record["ledger"]["optimizer_steps"].get<uint64_t>()));
    return 0;
}

int cmd_ims(const ExperimentConfig& cfg) {
    const Dataset ds = cfg.build_dataset();
    const std::string dir = cfg.effective_out_dir() + "/ims_s" + std::to_string(cfg.seed);
    fs::create_directories(dir);

    const TrainState pretrained = prepare_pretrained(cfg, ds);
    TrainState start = prune_start_state(cfg, pretrained, std::max<uint64_t>(cfg.ims_steps, 1));

    SoupConfig soup;
    soup.K = cfg.ims_k;
    soup.C = cfg.ims_steps;
    soup.sparsity_pool = cfg.ims_sparsity_pool;
    soup.alpha_grid = cfg.ims_alpha_grid;
    soup.subset_fraction = cfg.ims_subset_fraction;
    soup.batch_size = cfg.batch;
    soup.select_by_loss = cfg.ims_select_by_loss;

    TraceWriter trace(dir + "/trace.jsonl");
    BudgetLedger ledger;
    const ImsResult result =
        ims_run(start, ds, soup, ledger, derive_seed(cfg.seed, "ims"), trace.hook());

    save_checkpoint(result.state, dir + "/final.ckpt");
    const EvalResult test =
        evaluate(result.state.model, ds, ds.test_idx, nullptr, cfg.eval_batch, &ledger);

    std::string soup_csv = "k,s_k,alpha,val_before,val_after\n";
    for (const auto& row : result.log) {
        char line[160];
        std::snprintf(line, sizeof(line), "%zu,%s,%s,%s,%s\n", row.k,
                      fmt_double(row.s_k).c_str(), fmt_double(row.alpha).c_str(),
                      fmt_double(row.val_before).c_str(), fmt_double(row.val_after).c_str());
        soup_csv += line;
    }
    write_text(dir + "/soup_log.csv", soup_csv);

    json record;
    record["schema"] = "runrecord-v1";
    record["config_hash"] = cfg.hash_hex();
    record["seed"] = cfg.seed;
    record["method"] = "ims";
    record["model"] = spec_json(result.state.model.spec());
    record["val_before"] = result.val_before;
    record["final_val_accuracy"] = result.val_after;
    record["final_test_accuracy"] = test.accuracy;
    record["soup_rows"] = result.log.size();
    record["ledger"] = ledger_json(ledger);
    record["artifacts"] = {{"checkpoint", "final.ckpt"},
                           {"soup_log", "soup_log.csv"},
                           {"trace", "trace.jsonl"}};
    write_text(dir + "/run.json", record.dump(2) + "\n");
    std::printf("ims: %s val %.4f -> %.4f test_acc=%.4f\n", dir.c_str(), result.val_before,
                result.val_after, test.accuracy);
    return 0;
}

int cmd_mask_compare(const ExperimentConfig& cfg) {
    const Dataset ds = cfg.build_dataset();
    const std::string dir =
        cfg.effective_out_dir() + "/mask_compare_s" + std::to_string(cfg.seed);
    fs::create_directories(dir);

    const TrainState pretrained = prepare_pretrained(cfg, ds);
    auto reg = registry_from_model(pretrained.model);

    auto build_mask = [&](const std::string& method, double sparsity) -> Mask {
        const Mask ones = Mask::ones(reg);
        if (method == "oneshot") {
            return magnitude_prune(pretrained.model, ones, sparsity);
        }
        if (method == "random") {
            Rng stream(derive_seed(cfg.seed, "compare_random",
                                   static_cast<uint64_t>(sparsity * 1e6)));
            return random_prune(ones, sparsity, stream);
        }
        if (method == "snip") {
            DataStream s{derive_seed(cfg.seed, "compare_snip"), 0};
            Batch batch = next_batch(ds, ds.train_idx, s, cfg.batch);
            Model scratch = pretrained.model;
            return snip_prune(scratch, ones, sparsity, batch);
        }
        // imp: magnitude rounds with retraining between, mask only (no final
        // fine-tune), final round clamped onto the requested sparsity. Rounds
        // retrain under the pretraining recipe: the study asks how masks
        // diverge when weights keep moving, and the fine-tune LR is too cold
        // to move them.
        ImpParams p;
        p.rate = cfg.compare_rate;
        p.rounds = static_cast<size_t>(
            std::ceil(std::log1p(-sparsity) / std::log1p(-cfg.compare_rate) - 1e-12));
        if (p.rounds == 0) p.rounds = 1;
        p.per_round_budget = cfg.compare_round_budget;
        p.target_sparsity = sparsity;
        p.final_budget = 0;
        p.batch_size = cfg.batch;
        BudgetLedger scratch_ledger;
        TrainState start = prune_start_state(cfg, pretrained, p.per_round_budget);
        start.opt = make_optimizer(start.model, cfg.pretrain_adamw());
        start.base_lr = cfg.pre_lr;
        return imp_run(start, ds, p, scratch_ledger, {}).mask;
    };

    std::string csv = "sparsity,method_a,method_b,cosine_keep,cosine_prune\n";
    for (double sparsity : cfg.compare_grid) {
        std::vector<std::pair<std::string, Mask>> masks;
        for (const auto& m : cfg.compare_methods) masks.emplace_back(m, build_mask(m, sparsity));
        for (size_t a = 0; a < masks.size(); ++a) {
            for (size_t b = a; b < masks.size(); ++b) {
                const double ck = cosine_similarity(masks[a].second, masks[b].second);
                const double cp = cosine_similarity_pruned(masks[a].second, masks[b].second);
                char line[200];
                std::snprintf(line, sizeof(line), "%s,%s,%s,%s,%s\n",
                              fmt_double(sparsity).c_str(), masks[a].first.c_str(),
                              masks[b].first.c_str(), fmt_double(ck).c_str(),
                              fmt_double(cp).c_str());
                csv += line;
            }
        }
    }
    write_text(dir + "/compare.csv", csv);
    std::printf("mask-compare: %s/compare.csv\n", dir.c_str());
    return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
    const std::string dir =
        cfg.effective_out_dir() + "/sweep_" + cfg.sweep_axis + "_s" + std::to_string(cfg.seed);
    fs::create_directories(dir);

    std::string csv =
        "axis,value,seed,final_sparsity,final_val_accuracy,final_test_accuracy,"
        "optimizer_steps,train_flops,total_flops\n";
    for (uint64_t value : cfg.sweep_values) {
        ExperimentConfig point = cfg;
        if (cfg.sweep_axis == "denoiser_count") {
            point.denoisers = value;
        } else {
            point.look_ahead = value;
        }
        const std::string run_dir = dir + "/v" + std::to_string(value);
        execute_prune_run(point, "isp", run_dir);
        std::ifstream in(run_dir + "/run.json");
        json record = json::parse(in);
        char line[320];
        std::snprintf(line, sizeof(line), "%s,%llu,%llu,%s,%s,%s,%llu,%llu,%llu\n",
                      cfg.sweep_axis.c_str(), static_cast<unsigned long long>(value),
                      static_cast<unsigned long long>(cfg.seed),
                      fmt_double(record["final_sparsity"].get<double>()).c_str(),
                      fmt_double(record["final_val_accuracy"].get<double>()).c_str(),
                      fmt_double(record["final_test_accuracy"].get<double>()).c_str(),
                      static_cast<unsigned long long>(
                          record["ledger"]["optimizer_steps"].get<uint64_t>()),
                      static_cast<unsigned long long>(
                          record["ledger"]["train_flops"].get<uint64_t>()),
                      static_cast<unsigned long long>(
                          record["ledger"]["total_flops"].get<uint64_t>()));
        csv += line;
    }
    write_text(dir + "/sweep.csv", csv);
    std::printf("sweep: %s/sweep.csv\n", dir.c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_csv) {
    std::string csv =
        "config_hash,seed,method,final_sparsity,final_val_accuracy,final_test_accuracy,"
        "optimizer_steps,train_flops,total_flops\n";
    for (const auto& dir : run_dirs) {
        std::ifstream in(dir + "/run.json");
        if (!in) throw ConfigError("report: missing run.json under " + dir);
        json record = json::parse(in);

        // FLOP honesty: the ledger's training total must be recomputable from
        // the step trace, exactly.
        const std::string trace_path =
            dir + "/" + record["artifacts"]["trace"].get<std::string>();
        std::ifstream trace(trace_path);
        if (!trace) throw ConfigError("report: missing trace under " + dir);
        const ModelSpec spec = spec_from_json(record["model"]);
        uint64_t recomputed = 0;
        std::string line;
        while (std::getline(trace, line)) {
            if (line.empty()) continue;
            json row = json::parse(line);
            recomputed += flops_per_step(spec, row["batch"].get<size_t>(),
                                         row["density"].get<double>());
        }
        const uint64_t recorded = record["ledger"]["train_flops"].get<uint64_t>();
        if (recomputed != recorded) {
            throw std::runtime_error("report: trace FLOPs " + std::to_string(recomputed) +
                                     " disagree with ledger " + std::to_string(recorded) +
                                     " in " + dir);
        }

        const double sparsity = record.contains("final_sparsity")
                                    ? record["final_sparsity"].get<double>()
                                    : 0.0;
        char buf[320];
        std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%s,%s,%s,%llu,%llu,%llu\n",
                      record["config_hash"].get<std::string>().c_str(),
                      static_cast<unsigned long long>(record["seed"].get<uint64_t>()),
                      record["method"].get<std::string>().c_str(),
                      fmt_double(sparsity).c_str(),
                      fmt_double(record["final_val_accuracy"].get<double>()).c_str(),
                      fmt_double(record["final_test_accuracy"].get<double>()).c_str(),
                      static_cast<unsigned long long>(
                          record["ledger"]["optimizer_steps"].get<uint64_t>()),
                      static_cast<unsigned long long>(
                          record["ledger"]["train_flops"].get<uint64_t>()),
                      static_cast<unsigned long long>(
                          record["ledger"]["total_flops"].get<uint64_t>()));
        csv += buf;
    }
    write_text(out_csv, csv);
    std::printf("report: %s (%zu runs)\n", out_csv.c_str(), run_dirs.size());
    return 0;
}

int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const ConfigError&) {
        return 2;
    } catch (const BudgetError&) {
        return 3;
    } catch (const NumericError&) {
        return 4;
    } catch (...) {
        return 1;
    }
}

}  // namespace isp
