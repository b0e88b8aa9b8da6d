#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "subseg/partition.hpp"
#include "subseg/trainer.hpp"

namespace subseg {

// (A) supervised-only baseline, (B) + model consistency, (C) + balanced SCS
// task, (D) + task consistency, (E) the full objective over a plain-k-means
// partition, (F) the full objective over the balanced partition.
enum class Variant { A, B, C, D, E, F };

std::string variant_name(Variant v);
std::vector<Variant> all_variants();

struct AblationConfig {
    SynthSpec synth;             // geometry/imbalance template; per-seed containers derive from it
    int labeled_count = 4;
    int unlabeled_count = 40;
    int test_count = 10;
    TrainConfig train;           // the variant knobs are overridden per variant
    std::int64_t pretrain_iterations = 200;
    int num_seeds = 3;
    std::uint64_t base_seed = 1;
};

struct VariantOutcome {
    Variant variant = Variant::A;
    std::uint64_t seed = 0;
    EvalReport report;
    double minority = 0.0;  // mean Dice over the smallest half of the classes
};

struct AblationResult {
    int num_classes = 0;
    std::vector<VariantOutcome> outcomes;  // one row per (seed, variant)
};

// Same data, partitions, and training seed per seed index across variants;
// independent runs may execute on worker threads without changing results.
AblationResult ablation_harness(const AblationConfig& config,
                                const std::vector<Variant>& variants);

void write_ablation_csv(const std::string& path, const AblationResult& result);
void write_ablation_json(const std::string& path, const AblationResult& result);

}  // namespace subseg
