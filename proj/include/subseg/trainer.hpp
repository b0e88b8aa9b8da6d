#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "subseg/checkpoint.hpp"
#include "subseg/config.hpp"
#include "subseg/dataset.hpp"
#include "subseg/losses.hpp"
#include "subseg/net.hpp"

namespace subseg {

struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::int64_t t = 0;
};

// Labeled-first sample stack for one step. Images are rotated but noise-free;
// the per-model Gaussian fields come from perturb().
struct Batch {
    Tensor images;  // {B, C, H, W}
    int labeled_count = 0;
    std::vector<std::uint16_t> labels;           // labeled_count * H * W
    std::vector<std::uint16_t> subclass_labels;  // same extent, or empty
    std::vector<int> rotations;                  // quarter turns per sample
    std::vector<std::size_t> labeled_indices;
    std::vector<std::size_t> unlabeled_indices;
};

// clockwise quarter-turn rotation; odd turn counts require h == w
template <typename T>
std::vector<T> rotate_quarters(const std::vector<T>& src, int h, int w, int turns) {
    std::vector<T> out = src;
    int ch = h, cw = w;
    for (int t = 0; t < ((turns % 4) + 4) % 4; ++t) {
        std::vector<T> next(out.size());
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x)
                next[static_cast<std::size_t>(x) * ch + (ch - 1 - y)] =
                    out[static_cast<std::size_t>(y) * cw + x];
        out = std::move(next);
        std::swap(ch, cw);
    }
    return out;
}

// Without-replacement epoch cycling for both pools, reshuffled per epoch from
// a step-derived seed; one shared rotation per sample. Pure in (config, step).
Batch assemble_batch(const DatasetContainer& labeled, const DatasetContainer& unlabeled,
                     const TrainConfig& config, std::int64_t step, bool need_subclass);

// batch images plus an independent Gaussian field per model
Tensor perturb(const Batch& batch, Member who, double sigma, const TrainConfig& config,
               std::int64_t step);

// One optimization step: student forward on tape, tape-free teacher forward,
// weighted objective, Adam update on the student, EMA update of the teacher.
LossBreakdown train_step(ModelState& state, AdamState& adam, const Batch& batch,
                         const TrainConfig& config, const SubclassTable* table,
                         std::int64_t step);

struct FitOptions {
    std::string out_dir;                          // empty: no files written
    const DatasetContainer* validation = nullptr;  // teacher Dice at checkpoints
    std::string resume_checkpoint;                 // empty: fresh start
};

struct FitResult {
    ModelState state;
    std::vector<LossBreakdown> losses;  // one row per executed step
};

// the full loop; table may be null when config.scs_enabled is false
FitResult fit(const DatasetContainer& labeled, const DatasetContainer& unlabeled,
              const SubclassTable* table, const NetConfig& net_config, const TrainConfig& config,
              const FitOptions& opts = {});

std::string loss_csv_header();
std::string loss_csv_row(std::int64_t step, const LossBreakdown& b);

// optimizer-state checkpoint entries live next to the model under "opt/"
void pack_adam(const AdamState& adam, std::map<std::string, NamedArray>& into);
AdamState unpack_adam(const std::map<std::string, NamedArray>& entries);

}  // namespace subseg
