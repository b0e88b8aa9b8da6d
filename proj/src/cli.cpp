#include "subseg/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "subseg/ablation.hpp"
#include "subseg/checkpoint.hpp"
#include "subseg/config.hpp"
#include "subseg/dataset.hpp"
#include "subseg/partition.hpp"
#include "subseg/trainer.hpp"

namespace subseg {

namespace {

constexpr const char* kVersion = "1.0.0";

struct CliError : std::runtime_error {
    std::string code;
    CliError(std::string code, const std::string& message)
        : std::runtime_error(message), code(std::move(code)) {}
};

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string labeled, unlabeled, partition, checkpoint, data, validation;
};

KvMap load_config(const CommonArgs& args) {
    KvMap kv;
    if (!args.config_path.empty()) {
        if (!std::filesystem::exists(args.config_path)) {
            throw CliError("missing_file", "config file not found: " + args.config_path);
        }
        kv = read_kv_file(args.config_path);
        reject_unknown_keys(kv);
    }
    return kv;
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) {
        throw CliError("usage", std::string("missing required flag for ") + what);
    }
    if (!std::filesystem::exists(path)) {
        throw CliError("missing_file", std::string(what) + " not found: " + path);
    }
}

// manifest written before the work starts, finalized with timing afterwards
class Manifest {
public:
    Manifest(const std::string& command, const CommonArgs& args, const KvMap& effective_config)
        : path_(args.out_dir + "/manifest.json"), start_(std::chrono::steady_clock::now()) {
        std::filesystem::create_directories(args.out_dir);
        j_["command"] = command;
        j_["version"] = kVersion;
        nlohmann::json cfg;
        for (const auto& [k, v] : effective_config) cfg[k] = v;
        j_["config"] = cfg;
        if (args.seed) j_["seed"] = *args.seed;
        nlohmann::json inputs;
        if (!args.labeled.empty()) inputs["labeled"] = args.labeled;
        if (!args.unlabeled.empty()) inputs["unlabeled"] = args.unlabeled;
        if (!args.partition.empty()) inputs["partition"] = args.partition;
        if (!args.checkpoint.empty()) inputs["checkpoint"] = args.checkpoint;
        if (!args.data.empty()) inputs["data"] = args.data;
        if (!args.validation.empty()) inputs["validation"] = args.validation;
        j_["inputs"] = inputs;
        j_["out"] = args.out_dir;
        write();
    }

    void finalize() {
        auto elapsed = std::chrono::steady_clock::now() - start_;
        j_["wall_seconds"] =
            std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count() / 1000.0;
        write();
    }

private:
    void write() const {
        std::ofstream os(path_, std::ios::trunc);
        if (!os) throw CliError("io", "cannot write " + path_);
        os << j_.dump(2) << "\n";
    }

    std::string path_;
    std::chrono::steady_clock::time_point start_;
    nlohmann::json j_;
};

int cmd_synth(const CommonArgs& args) {
    KvMap kv = load_config(args);
    SynthSpec spec = synth_spec_from_kv(kv);
    if (args.seed) spec.seed = *args.seed;
    KvMap effective;
    synth_spec_to_kv(spec, effective);
    Manifest manifest("synth", args, effective);
    DatasetContainer data = generate(spec);
    write_container(args.out_dir + "/data.segd", data);
    manifest.finalize();
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    KvMap kv = load_config(args);
    require_file(args.labeled, "--labeled");
    DatasetContainer labeled = read_container(args.labeled);

    TrainConfig tc = train_config_from_kv(kv);
    if (args.seed) tc.seed = *args.seed;
    std::int64_t iterations = 200;
    if (kv.count("pretrain.iterations")) iterations = std::stoll(kv.at("pretrain.iterations"));

    NetConfig net = net_config_from_kv(kv);
    net.height = labeled.height;
    net.width = labeled.width;
    net.num_parent_classes = labeled.num_classes;
    net.num_subclasses = std::max(net.num_subclasses, net.num_parent_classes);

    KvMap effective;
    net_config_to_kv(net, effective);
    train_config_to_kv(tc, effective);
    effective["pretrain.iterations"] = std::to_string(iterations);
    Manifest manifest("pretrain", args, effective);

    ModelState backbone = pretrain_backbone(labeled, net, tc, iterations, tc.seed);
    write_checkpoint(args.out_dir + "/backbone.basc", pack_model(backbone));
    write_kv_file(args.out_dir + "/backbone.basc.cfg", effective);
    manifest.finalize();
    return 0;
}

int cmd_partition(const CommonArgs& args) {
    KvMap kv = load_config(args);
    require_file(args.labeled, "--labeled");
    require_file(args.checkpoint, "--checkpoint (pretrained backbone)");
    DatasetContainer labeled = read_container(args.labeled);

    KvMap side = read_kv_file(args.checkpoint + ".cfg");
    NetConfig net = net_config_from_kv(side);
    ModelState backbone = unpack_model(read_checkpoint(args.checkpoint), net);

    PartitionOptions opts;
    if (kv.count("partition.cap_per_class"))
        opts.cap_per_class = static_cast<int>(std::stoll(kv.at("partition.cap_per_class")));
    if (kv.count("partition.balanced"))
        opts.balanced = kv.at("partition.balanced") == "true" || kv.at("partition.balanced") == "1";
    std::uint64_t seed = args.seed.value_or(0);

    KvMap effective = side;
    effective["partition.cap_per_class"] = std::to_string(opts.cap_per_class);
    effective["partition.balanced"] = opts.balanced ? "true" : "false";
    Manifest manifest("partition", args, effective);

    PartitionResult result = build_partition(backbone, labeled, opts, seed);
    write_partition(args.out_dir, result, labeled);
    manifest.finalize();
    return 0;
}

int cmd_train(const CommonArgs& args) {
    KvMap kv = load_config(args);
    require_file(args.labeled, "--labeled");
    TrainConfig tc = train_config_from_kv(kv);
    if (args.seed) tc.seed = *args.seed;

    DatasetContainer labeled = read_container(args.labeled);
    DatasetContainer unlabeled;
    if (!args.unlabeled.empty()) {
        require_file(args.unlabeled, "--unlabeled");
        unlabeled = read_container(args.unlabeled);
    }

    std::optional<PartitionArtifact> artifact;
    if (tc.scs_enabled) {
        if (args.partition.empty()) {
            throw CliError("missing_stage",
                           "train requires --partition (run the partition stage first)");
        }
        if (!std::filesystem::exists(args.partition + "/table.txt")) {
            throw CliError("missing_file",
                           "partition artifact not found under " + args.partition);
        }
        artifact = read_partition(args.partition);
        if (artifact->labeled_with_sub.samples.size() != labeled.samples.size()) {
            throw CliError("bad_input", "partition artifact does not match --labeled container");
        }
        for (std::size_t i = 0; i < labeled.samples.size(); ++i) {
            if (artifact->labeled_with_sub.samples[i].image != labeled.samples[i].image ||
                artifact->labeled_with_sub.samples[i].labels != labeled.samples[i].labels) {
                throw CliError("bad_input",
                               "partition artifact does not match --labeled container");
            }
        }
    }

    NetConfig net = net_config_from_kv(kv);
    net.height = labeled.height;
    net.width = labeled.width;
    net.num_parent_classes = labeled.num_classes;
    net.num_subclasses = artifact ? artifact->table.num_subclasses() : net.num_parent_classes;

    DatasetContainer validation;
    FitOptions opts;
    opts.out_dir = args.out_dir;
    opts.resume_checkpoint = args.checkpoint;
    if (!args.validation.empty()) {
        require_file(args.validation, "--val");
        validation = read_container(args.validation);
        opts.validation = &validation;
    }

    KvMap effective;
    net_config_to_kv(net, effective);
    train_config_to_kv(tc, effective);
    Manifest manifest("train", args, effective);

    fit(artifact ? artifact->labeled_with_sub : labeled, unlabeled,
        artifact ? &artifact->table : nullptr, net, tc, opts);
    manifest.finalize();
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    require_file(args.checkpoint, "--checkpoint");
    require_file(args.data, "--data");
    KvMap side = read_kv_file(args.checkpoint + ".cfg");
    NetConfig net = net_config_from_kv(side);
    ModelState state = unpack_model(read_checkpoint(args.checkpoint), net);
    DatasetContainer test = read_container(args.data);

    Manifest manifest("eval", args, side);
    EvalReport report = evaluate(state, test);
    write_eval_csv(args.out_dir + "/eval.csv", report);
    write_eval_json(args.out_dir + "/eval.json", report);
    manifest.finalize();
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    KvMap kv = load_config(args);
    AblationConfig cfg;
    cfg.synth = synth_spec_from_kv(kv);
    cfg.train = train_config_from_kv(kv);
    if (kv.count("ablate.test_samples"))
        cfg.test_count = static_cast<int>(std::stoll(kv.at("ablate.test_samples")));
    if (kv.count("ablate.num_seeds"))
        cfg.num_seeds = static_cast<int>(std::stoll(kv.at("ablate.num_seeds")));
    if (kv.count("pretrain.iterations"))
        cfg.pretrain_iterations = std::stoll(kv.at("pretrain.iterations"));
    if (args.seed) cfg.base_seed = *args.seed;

    KvMap effective;
    synth_spec_to_kv(cfg.synth, effective);
    train_config_to_kv(cfg.train, effective);
    effective["ablate.test_samples"] = std::to_string(cfg.test_count);
    effective["ablate.num_seeds"] = std::to_string(cfg.num_seeds);
    effective["pretrain.iterations"] = std::to_string(cfg.pretrain_iterations);
    Manifest manifest("ablate", args, effective);

    AblationResult result = ablation_harness(cfg, all_variants());
    write_ablation_csv(args.out_dir + "/ablation.csv", result);
    write_ablation_json(args.out_dir + "/ablation.json", result);
    manifest.finalize();
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"balanced-subclass semi-supervised segmentation pipeline"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&](CLI::App* sub, bool needs_out) {
        sub->add_option("--config", args.config_path, "key=value config file");
        auto* out = sub->add_option("--out", args.out_dir, "output directory");
        if (needs_out) out->required();
        sub->add_option("--seed", [&args](const std::vector<std::string>& vals) {
            args.seed = std::stoull(vals.at(0));
            return true;
        }, "seed override");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(synth, true);

    CLI::App* pretrain = app.add_subcommand("pretrain", "supervised backbone for the partition");
    add_common(pretrain, true);
    pretrain->add_option("--labeled", args.labeled, "labeled SEGD container");

    CLI::App* partition = app.add_subcommand("partition", "balanced subclass partition");
    add_common(partition, true);
    partition->add_option("--labeled", args.labeled, "labeled SEGD container");
    partition->add_option("--checkpoint", args.checkpoint, "pretrained backbone checkpoint");

    CLI::App* train = app.add_subcommand("train", "semi-supervised training");
    add_common(train, true);
    train->add_option("--labeled", args.labeled, "labeled SEGD container");
    train->add_option("--unlabeled", args.unlabeled, "unlabeled SEGD container");
    train->add_option("--partition", args.partition, "partition artifact directory");
    train->add_option("--checkpoint", args.checkpoint, "checkpoint to resume from");
    train->add_option("--val", args.validation, "validation SEGD container");

    CLI::App* eval = app.add_subcommand("eval", "Dice evaluation of a checkpoint");
    add_common(eval, true);
    eval->add_option("--checkpoint", args.checkpoint, "model checkpoint");
    eval->add_option("--data", args.data, "test SEGD container");

    CLI::App* ablate = app.add_subcommand("ablate", "component ablation table");
    add_common(ablate, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help / --version
            return app.exit(e);
        }
        std::cerr << "error usage: " << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(args);
        if (pretrain->parsed()) return cmd_pretrain(args);
        if (partition->parsed()) return cmd_partition(args);
        if (train->parsed()) return cmd_train(args);
        if (eval->parsed()) return cmd_eval(args);
        if (ablate->parsed()) return cmd_ablate(args);
        std::cerr << "error usage: no subcommand\n";
        return 2;
    } catch (const CliError& e) {
        std::cerr << "error " << e.code << ": " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error config: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error runtime: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace subseg
