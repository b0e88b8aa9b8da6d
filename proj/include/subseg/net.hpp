#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "subseg/tensor.hpp"

namespace subseg {

struct NetConfig {
    int in_channels = 1;
    int base_channels = 8;
    int num_parent_classes = 6;  // K+1, background included
    int num_subclasses = 12;     // K_sub+1, background included
    int height = 32;
    int width = 32;

    void validate() const;
};

// One parameter set: conv/norm weights plus per-layer running statistics.
struct Params {
    std::map<std::string, Tensor> weights;
    std::map<std::string, RunningStat> stats;
};

// Student/teacher pair. The teacher mirrors the student name-by-name and is
// only ever touched through ema_update.
struct ModelState {
    NetConfig config;
    Params student;
    Params teacher;
    std::int64_t step = 0;
};

enum class Member { student, teacher };

struct ForwardOptions {
    Tape* tape = nullptr;      // non-null records the pass for backward
    NormMode mode = NormMode::train;
    bool update_stats = false;  // fold batch stats into running stats (student train passes)
    bool mos_only = false;      // skip the SCS decoder entirely
    // out-param: parameter leaves bound on the tape, for gradient collection
    std::map<std::string, Tensor>* leaves = nullptr;
};

struct NetOutput {
    Tensor mos_probs;
    Tensor scs_probs;     // empty when mos_only was set
    Tensor mos_features;  // MoS decoder hidden map feeding the head
};

// Shared encoder (4 down blocks), two task decoders (3 up blocks + 1x1 head
// each, U-Net skips from the encoder). Teacher starts as an exact copy.
ModelState build(const NetConfig& config, std::uint64_t seed);

NetOutput forward(ModelState& state, Member who, const Tensor& x, const ForwardOptions& opts);

// teacher <- alpha * teacher + (1 - alpha) * student, weights and stats alike
void ema_update(ModelState& state, double alpha);

// Teacher encoder + MoS decoder in eval mode; per-pixel argmax over parent
// classes, ties broken toward the lowest class index. Returns N*H*W labels.
std::vector<std::uint16_t> inference(ModelState& state, const Tensor& x);

std::int64_t parameter_count(const Params& p, const std::string& prefix);

}  // namespace subseg
