#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "isp/checkpoint.hpp"
#include "isp/prune.hpp"
#include "isp/soup.hpp"

namespace isp {

// Flat key=value config file: one `key = value` pair per line, '#' comments.
// Unknown keys are rejected so sweep-config typos fail loudly.
std::map<std::string, std::string> parse_kv_file(const std::string& path);

struct CliOverrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> method;
};

struct ExperimentConfig {
    // dataset
    std::string data_task;  // sequence | clusters | csv | idx (required)
    size_t data_classes = 8;
    size_t data_vocab = 32;
    size_t data_seq_len = 8;
    size_t data_dim = 16;
    size_t data_n_per_class = 500;
    double data_separation = 4.0;
    uint64_t data_seed = 7;
    std::string data_csv_path;
    std::string data_idx_images, data_idx_labels;

    // model
    std::string model_kind = "transformer";
    size_t model_depth = 2;
    size_t model_width = 16;
    size_t model_heads = 4;
    size_t model_ffn = 64;

    // fine-tuning protocol (the per-run hyperparameter row)
    double lr = 1e-3;
    size_t epochs = 10;
    size_t batch = 32;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    // pretraining protocol
    double pre_lr = 3e-3;
    size_t pre_epochs = 30;
    double pre_weight_decay = 0.0;
    std::string pretrain_ckpt;  // load instead of pretraining inline

    // pruning
    std::string method = "isp";
    double rate = 0.15;
    double target_sparsity = 0.5;
    uint64_t look_ahead = 50;
    size_t denoisers = 4;
    uint64_t seed_steps = 0;   // 0: ceil(0.10 * |train| / batch)
    uint64_t mask_budget = 0;  // 0: derived from the schedule
    double subset_fraction = 0.10;
    bool fresh_lookahead_optimizer = true;

    size_t imp_rounds = 5;
    uint64_t imp_rewind_step = 0;
    size_t imp_per_round_epochs = 0;  // 0: same as epochs
    size_t prog_intervals = 5;

    // instant model soup
    size_t ims_k = 4;
    uint64_t ims_steps = 100;
    double ims_subset_fraction = 0.10;
    bool ims_select_by_loss = false;
    std::vector<double> ims_sparsity_pool = {0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<double> ims_alpha_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                          0.6, 0.7, 0.8, 0.9, 1.0};

    // mask comparison
    std::vector<std::string> compare_methods = {"oneshot", "imp"};
    std::vector<double> compare_grid = {0.1, 0.2, 0.3, 0.5, 0.8};
    double compare_rate = 0.2;
    uint64_t compare_round_budget = 100;

    // sweep
    std::string sweep_axis = "denoiser_count";  // or look_ahead
    std::vector<uint64_t> sweep_values = {0, 2, 4, 6, 8, 16};

    // run
    uint64_t seed = 1;
    std::string out_dir;
    size_t eval_batch = 64;

    static ExperimentConfig from_map(std::map<std::string, std::string> kv,
                                     const CliOverrides& over = {});
    static ExperimentConfig load(const std::string& path, const CliOverrides& over = {});

    // Canonical sorted key=value rendering of the effective config; the run
    // fingerprint is the FNV hash of this text.
    std::string canonical() const;
    std::string hash_hex() const;

    Dataset build_dataset() const;
    ModelSpec build_model_spec(const Dataset& ds) const;
    AdamWConfig finetune_adamw() const;
    AdamWConfig pretrain_adamw() const;
    size_t steps_per_epoch(const Dataset& ds) const;
    uint64_t total_budget(const Dataset& ds) const;    // T = epochs * steps/epoch
    uint64_t derived_seed_steps(const Dataset& ds) const;  // t
    std::string effective_out_dir() const;  // out key, else $ISP_OUT_ROOT, else ./runs
};

// Commands. Each writes artifacts under its run directory and returns 0.
int cmd_pretrain(const ExperimentConfig& cfg);
int cmd_prune(const ExperimentConfig& cfg);
int cmd_ims(const ExperimentConfig& cfg);
int cmd_mask_compare(const ExperimentConfig& cfg);
int cmd_sweep(const ExperimentConfig& cfg);
int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_csv);

// Exit-code policy: 0 ok, 2 config, 3 budget, 4 numeric, 1 anything else.
int exit_code_for_current_exception();

// Shared by cmd_prune and cmd_sweep; returns the run directory it wrote.
std::string execute_prune_run(const ExperimentConfig& cfg, const std::string& method,
                              const std::string& run_dir);

}  // namespace isp
