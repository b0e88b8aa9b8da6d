#include "subseg/ablation.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "subseg/rng.hpp"

namespace subseg {

namespace {

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct SeedData {
    DatasetContainer labeled;
    DatasetContainer unlabeled;
    DatasetContainer test;
    PartitionArtifact balanced;  // labeled set with balanced subclass labels
    PartitionArtifact plain;     // same counts, unconstrained k-means
};

PartitionArtifact make_artifact(ModelState& backbone, const DatasetContainer& labeled,
                                bool balanced, std::uint64_t seed) {
    PartitionOptions opts;
    opts.balanced = balanced;
    PartitionResult pr = build_partition(backbone, labeled, opts, seed);
    PartitionArtifact artifact;
    artifact.table = pr.table;
    artifact.labeled_with_sub = labeled;
    artifact.labeled_with_sub.num_subclasses = pr.table.num_subclasses();
    for (std::size_t i = 0; i < labeled.samples.size(); ++i) {
        artifact.labeled_with_sub.samples[i].subclass_labels = pr.subclass_maps[i];
    }
    return artifact;
}

SeedData prepare_seed(const AblationConfig& cfg, std::uint64_t seed) {
    SeedData data;
    SynthSpec spec = cfg.synth;
    spec.samples = cfg.labeled_count;
    spec.seed = seed_from(seed, 0x6c6162);
    data.labeled = generate(spec);
    spec.samples = cfg.unlabeled_count;
    spec.seed = seed_from(seed, 0x756e6c);
    data.unlabeled = generate(spec);
    spec.samples = cfg.test_count;
    spec.seed = seed_from(seed, 0x746573);
    data.test = generate(spec);

    NetConfig pre_net;
    pre_net.in_channels = 1;
    pre_net.height = cfg.synth.height;
    pre_net.width = cfg.synth.width;
    pre_net.num_parent_classes = cfg.synth.num_classes + 1;
    pre_net.num_subclasses = pre_net.num_parent_classes;  // decoder width is irrelevant here
    ModelState backbone = pretrain_backbone(data.labeled, pre_net, cfg.train,
                                            cfg.pretrain_iterations, seed_from(seed, 0x707265));
    data.balanced = make_artifact(backbone, data.labeled, true, seed_from(seed, 0x62616c));
    data.plain = make_artifact(backbone, data.labeled, false, seed_from(seed, 0x706c6e));
    return data;
}

VariantOutcome run_variant(const AblationConfig& cfg, const SeedData& data, Variant v,
                           std::uint64_t seed) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    const PartitionArtifact* artifact = nullptr;
    bool semi = true;
    switch (v) {
        case Variant::A:
            tc.scs_enabled = false;
            tc.weights = LossWeights{0.0, 0.0, 0.0, 0.0};
            tc.alpha = 0.0;  // plain supervised baseline: teacher equals student
            semi = false;
            break;
        case Variant::B:
            tc.scs_enabled = false;
            tc.weights = LossWeights{0.0, tc.weights.lambda1_max, 0.0, 0.0};
            break;
        case Variant::C:
            tc.scs_enabled = true;
            tc.weights.lambda2 = 0.0;
            tc.weights.lambda3 = 0.0;
            artifact = &data.balanced;
            break;
        case Variant::D:
            tc.scs_enabled = true;
            tc.weights.lambda3 = 0.0;
            artifact = &data.balanced;
            break;
        case Variant::E:
            tc.scs_enabled = true;
            artifact = &data.plain;
            break;
        case Variant::F:
            tc.scs_enabled = true;
            artifact = &data.balanced;
            break;
    }
    if (!semi) tc.labeled_per_batch = tc.batch_size;

    NetConfig net;
    net.in_channels = 1;
    net.height = cfg.synth.height;
    net.width = cfg.synth.width;
    net.num_parent_classes = cfg.synth.num_classes + 1;
    net.num_subclasses = artifact ? artifact->table.num_subclasses()
                                  : data.balanced.table.num_subclasses();

    const DatasetContainer& labeled = artifact ? artifact->labeled_with_sub : data.labeled;
    static const DatasetContainer kEmpty;
    const DatasetContainer& unlabeled = semi ? data.unlabeled : kEmpty;
    FitResult fitres = fit(labeled, unlabeled, artifact ? &artifact->table : nullptr, net, tc);

    VariantOutcome outcome;
    outcome.variant = v;
    outcome.seed = seed;
    outcome.report = evaluate(fitres.state, data.test);
    outcome.minority = minority_dice(outcome.report, data.test);
    return outcome;
}

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::A: return "A";
        case Variant::B: return "B";
        case Variant::C: return "C";
        case Variant::D: return "D";
        case Variant::E: return "E";
        case Variant::F: return "F";
    }
    return "?";
}

std::vector<Variant> all_variants() {
    return {Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F};
}

AblationResult ablation_harness(const AblationConfig& config,
                                const std::vector<Variant>& variants) {
    if (config.num_seeds < 1) throw std::invalid_argument("ablation: need at least one seed");
    AblationResult result;
    result.num_classes = config.synth.num_classes + 1;
    result.outcomes.resize(static_cast<std::size_t>(config.num_seeds) * variants.size());

    unsigned workers = std::max(1u, std::thread::hardware_concurrency());
    for (int si = 0; si < config.num_seeds; ++si) {
        std::uint64_t seed = seed_from(config.base_seed, 0xab1a7e, static_cast<std::uint64_t>(si));
        SeedData data = prepare_seed(config, seed);
        // variant runs are independent; fan out over a bounded worker set
        for (std::size_t begin = 0; begin < variants.size(); begin += workers) {
            std::vector<std::thread> pool;
            std::size_t end = std::min(variants.size(), begin + workers);
            for (std::size_t vi = begin; vi < end; ++vi) {
                std::size_t slot = static_cast<std::size_t>(si) * variants.size() + vi;
                pool.emplace_back([&, vi, slot] {
                    result.outcomes[slot] = run_variant(config, data, variants[vi], seed);
                });
            }
            for (auto& t : pool) t.join();
        }
    }
    return result;
}

void write_ablation_csv(const std::string& path, const AblationResult& result) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("ablation: cannot open " + path);
    os << "seed,variant";
    for (int c = 1; c < result.num_classes; ++c) os << ",class" << c;
    os << ",avg,minority\n";
    for (const VariantOutcome& o : result.outcomes) {
        os << o.seed << "," << variant_name(o.variant);
        for (int c = 1; c < result.num_classes; ++c) {
            os << "," << fmt17(o.report.class_dice[static_cast<std::size_t>(c)]);
        }
        os << "," << fmt17(o.report.average) << "," << fmt17(o.minority) << "\n";
    }
}

void write_ablation_json(const std::string& path, const AblationResult& result) {
    nlohmann::json rows = nlohmann::json::array();
    for (const VariantOutcome& o : result.outcomes) {
        nlohmann::json row;
        row["seed"] = o.seed;
        row["variant"] = variant_name(o.variant);
        row["average"] = o.report.average;
        row["minority"] = o.minority;
        for (int c = 1; c < result.num_classes; ++c) {
            row["per_class"][std::to_string(c)] = o.report.class_dice[static_cast<std::size_t>(c)];
        }
        rows.push_back(row);
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("ablation: cannot open " + path);
    os << rows.dump(2) << "\n";
}

}  // namespace subseg
