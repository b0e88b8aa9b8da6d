#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "subseg/dataset.hpp"
#include "subseg/losses.hpp"
#include "subseg/net.hpp"

namespace subseg {

// Every hyper-parameter of one training run. labeled_per_batch must stay
// below batch_size whenever an unlabeled pool is in play; supervised-only
// runs (empty unlabeled pool) fill whole batches with labeled samples.
struct TrainConfig {
    std::int64_t iterations = 1000;
    int batch_size = 4;
    int labeled_per_batch = 1;
    double learning_rate = 1e-2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double alpha = 0.99;  // EMA coefficient
    LossWeights weights;
    bool scs_enabled = true;  // auxiliary subclass task participates at all
    bool rotate = true;       // shared right-angle rotation per sample
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 100;

    void validate(bool has_unlabeled) const;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// UTF-8 "key=value" lines, '#' comments, blank lines ignored
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap read_kv_file(const std::string& path);
void write_kv_file(const std::string& path, const KvMap& kv);

// section prefixes: "net.", "train.", "synth."
void net_config_to_kv(const NetConfig& c, KvMap& kv);
NetConfig net_config_from_kv(const KvMap& kv);
void train_config_to_kv(const TrainConfig& c, KvMap& kv);
TrainConfig train_config_from_kv(const KvMap& kv);
void synth_spec_to_kv(const SynthSpec& s, KvMap& kv);
SynthSpec synth_spec_from_kv(const KvMap& kv);

// rejects keys outside the documented sections/key sets (typo guard)
void reject_unknown_keys(const KvMap& kv);

}  // namespace subseg
