#include "subseg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "subseg/rng.hpp"

namespace subseg {

namespace {

constexpr std::uint64_t kTagLabeled = 0x6c61624c;
constexpr std::uint64_t kTagUnlabeled = 0x756e6c61;
constexpr std::uint64_t kTagRotation = 0x726f7461;
constexpr std::uint64_t kTagStudentNoise = 0x73747564;
constexpr std::uint64_t kTagTeacherNoise = 0x74656163;

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// without-replacement cycling: position g walks a per-epoch permutation
std::size_t cycled_index(std::size_t pool, std::int64_t global_pos, std::uint64_t seed,
                         std::uint64_t tag) {
    std::int64_t epoch = global_pos / static_cast<std::int64_t>(pool);
    std::int64_t pos = global_pos % static_cast<std::int64_t>(pool);
    std::vector<std::size_t> perm(pool);
    std::iota(perm.begin(), perm.end(), 0);
    RandomStream rs(seed_from(seed, tag, static_cast<std::uint64_t>(epoch)));
    rs.shuffle(perm);
    return perm[static_cast<std::size_t>(pos)];
}

void check_finite(double v, const char* term, std::int64_t step) {
    if (!std::isfinite(v)) {
        throw std::runtime_error("train_step: non-finite " + std::string(term) + " at step " +
                                 std::to_string(step));
    }
}

}  // namespace

Batch assemble_batch(const DatasetContainer& labeled, const DatasetContainer& unlabeled,
                     const TrainConfig& config, std::int64_t step, bool need_subclass) {
    if (labeled.samples.empty()) {
        throw std::invalid_argument("assemble_batch: labeled pool is empty");
    }
    const bool has_unlabeled = !unlabeled.samples.empty();
    const int n = config.labeled_per_batch;
    const int m = config.batch_size - n;
    if (m > 0 && !has_unlabeled) {
        throw std::invalid_argument("assemble_batch: batch expects unlabeled samples but the pool is empty");
    }
    if (need_subclass && labeled.num_subclasses <= 0) {
        throw std::invalid_argument("assemble_batch: labeled container carries no subclass labels");
    }
    const int H = labeled.height, W = labeled.width;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const bool square = H == W;

    Batch batch;
    batch.labeled_count = n;
    batch.images = Tensor::zeros({config.batch_size, 1, H, W});
    batch.labels.resize(static_cast<std::size_t>(n) * plane);
    if (need_subclass) batch.subclass_labels.resize(static_cast<std::size_t>(n) * plane);
    batch.rotations.resize(static_cast<std::size_t>(config.batch_size), 0);

    for (int slot = 0; slot < config.batch_size; ++slot) {
        const bool is_labeled = slot < n;
        const DatasetContainer& pool = is_labeled ? labeled : unlabeled;
        std::int64_t global_pos = is_labeled
                                      ? step * n + slot
                                      : step * m + (slot - n);
        std::size_t idx = cycled_index(pool.samples.size(), global_pos, config.seed,
                                       is_labeled ? kTagLabeled : kTagUnlabeled);
        (is_labeled ? batch.labeled_indices : batch.unlabeled_indices).push_back(idx);
        const Sample& s = pool.samples[idx];

        int turns = 0;
        if (config.rotate) {
            RandomStream rr(seed_from(config.seed, kTagRotation, static_cast<std::uint64_t>(step),
                                      static_cast<std::uint64_t>(slot)));
            turns = static_cast<int>(rr.below(4));
            if (!square && (turns % 2) == 1) turns = (turns + 1) % 4;
        }
        batch.rotations[static_cast<std::size_t>(slot)] = turns;

        std::vector<double> img = rotate_quarters(s.image, H, W, turns);
        std::copy(img.begin(), img.end(),
                  batch.images.data.begin() + static_cast<std::ptrdiff_t>(slot * plane));
        if (is_labeled) {
            std::vector<std::uint16_t> lab = rotate_quarters(s.labels, H, W, turns);
            std::copy(lab.begin(), lab.end(),
                      batch.labels.begin() + static_cast<std::ptrdiff_t>(slot * plane));
            if (need_subclass) {
                std::vector<std::uint16_t> sub = rotate_quarters(s.subclass_labels, H, W, turns);
                std::copy(sub.begin(), sub.end(),
                          batch.subclass_labels.begin() +
                              static_cast<std::ptrdiff_t>(slot * plane));
            }
        }
    }
    return batch;
}

Tensor perturb(const Batch& batch, Member who, double sigma, const TrainConfig& config,
               std::int64_t step) {
    if (sigma < 0.0) throw std::invalid_argument("perturb: sigma must be >= 0");
    Tensor out = batch.images.detached();
    if (sigma == 0.0) return out;
    RandomStream rs(seed_from(config.seed,
                              who == Member::student ? kTagStudentNoise : kTagTeacherNoise,
                              static_cast<std::uint64_t>(step)));
    for (double& v : out.data) v += sigma * rs.gaussian();
    return out;
}

LossBreakdown train_step(ModelState& state, AdamState& adam, const Batch& batch,
                         const TrainConfig& config, const SubclassTable* table,
                         std::int64_t step) {
    const int n = batch.labeled_count;
    const int m = batch.images.shape[0] - n;
    const bool scs = config.scs_enabled;
    if (scs && table == nullptr) {
        throw std::invalid_argument("train_step: subclass task enabled but no partition table");
    }

    Tensor x_student = perturb(batch, Member::student, config.noise_sigma, config, step);
    Tape tape;
    std::map<std::string, Tensor> leaves;
    ForwardOptions sopts;
    sopts.tape = &tape;
    sopts.mode = NormMode::train;
    sopts.update_stats = true;
    sopts.mos_only = !scs;
    sopts.leaves = &leaves;
    NetOutput sout = forward(state, Member::student, x_student, sopts);

    Tensor mos_l = slice_batch(sout.mos_probs, 0, n);
    Tensor scs_l = scs ? slice_batch(sout.scs_probs, 0, n) : Tensor{};
    double mu = scs ? config.weights.mu : 0.0;
    Tensor sup = supervised_loss(mos_l, scs_l, batch.labels, batch.subclass_labels, mu);

    Tensor model_con, task_con;
    if (m > 0 && (config.weights.lambda1_max > 0.0 || config.weights.lambda2 > 0.0)) {
        Tensor x_teacher = perturb(batch, Member::teacher, config.noise_sigma, config, step);
        ForwardOptions topts;
        topts.mode = NormMode::train;  // batch statistics, running stats move by EMA only
        topts.update_stats = false;
        topts.mos_only = !scs;
        NetOutput tout = forward(state, Member::teacher, x_teacher, topts);

        Tensor mos_u_s = slice_batch(sout.mos_probs, n, m);
        Tensor mos_u_t = slice_batch(tout.mos_probs, n, m);
        if (config.weights.lambda1_max > 0.0) {
            model_con = model_consistency_loss(mos_u_s, scs ? slice_batch(sout.scs_probs, n, m)
                                                            : Tensor{},
                                               mos_u_t, scs ? slice_batch(tout.scs_probs, n, m)
                                                            : Tensor{});
        }
        if (scs && config.weights.lambda2 > 0.0) {
            task_con = task_consistency_loss(mos_u_s, slice_batch(tout.scs_probs, n, m), *table);
        }
    }

    Tensor cnf;
    if (scs && config.weights.lambda3 > 0.0) {
        cnf = conflict_loss(scs_l, batch.subclass_labels, *table);
    }

    LossBreakdown breakdown;
    Tensor total = total_loss(sup, model_con, task_con, cnf, config.weights, step,
                              config.iterations, &breakdown);
    check_finite(breakdown.sup, "L_sup", step);
    check_finite(breakdown.model_con, "L_model_con", step);
    check_finite(breakdown.task_con, "L_task_con", step);
    check_finite(breakdown.cnf, "L_cnf", step);
    check_finite(breakdown.total, "L_total", step);

    tape.backward(total);

    adam.t += 1;
    const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(adam.t));
    for (const auto& [name, leaf] : leaves) {
        Tensor g = tape.grad_of(leaf);
        Tensor& w = state.student.weights.at(name);
        auto& mbuf = adam.m[name];
        auto& vbuf = adam.v[name];
        if (mbuf.empty()) mbuf.assign(w.data.size(), 0.0);
        if (vbuf.empty()) vbuf.assign(w.data.size(), 0.0);
        for (std::size_t i = 0; i < w.data.size(); ++i) {
            mbuf[i] = config.adam_beta1 * mbuf[i] + (1.0 - config.adam_beta1) * g.data[i];
            vbuf[i] = config.adam_beta2 * vbuf[i] + (1.0 - config.adam_beta2) * g.data[i] * g.data[i];
            double mhat = mbuf[i] / bc1;
            double vhat = vbuf[i] / bc2;
            w.data[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps);
        }
    }

    ema_update(state, config.alpha);
    state.step = step + 1;
    return breakdown;
}

std::string loss_csv_header() {
    return "step,l_sup,l_model_con,l_task_con,l_cnf,lambda1,total";
}

std::string loss_csv_row(std::int64_t step, const LossBreakdown& b) {
    std::string row = std::to_string(step);
    for (double v : {b.sup, b.model_con, b.task_con, b.cnf, b.lambda1, b.total}) {
        row += ",";
        row += fmt17(v);
    }
    return row;
}

void pack_adam(const AdamState& adam, std::map<std::string, NamedArray>& into) {
    into["opt/t"] = NamedArray{{1}, {static_cast<double>(adam.t)}};
    for (const auto& [name, buf] : adam.m) {
        into["opt/m/" + name] = NamedArray{{static_cast<int>(buf.size())}, buf};
    }
    for (const auto& [name, buf] : adam.v) {
        into["opt/v/" + name] = NamedArray{{static_cast<int>(buf.size())}, buf};
    }
}

AdamState unpack_adam(const std::map<std::string, NamedArray>& entries) {
    AdamState adam;
    auto it = entries.find("opt/t");
    if (it != entries.end()) adam.t = static_cast<std::int64_t>(it->second.data.at(0));
    for (const auto& [name, arr] : entries) {
        if (name.rfind("opt/m/", 0) == 0) adam.m[name.substr(6)] = arr.data;
        if (name.rfind("opt/v/", 0) == 0) adam.v[name.substr(6)] = arr.data;
    }
    return adam;
}

FitResult fit(const DatasetContainer& labeled, const DatasetContainer& unlabeled,
              const SubclassTable* table, const NetConfig& net_config, const TrainConfig& config,
              const FitOptions& opts) {
    const bool has_unlabeled = !unlabeled.samples.empty();
    config.validate(has_unlabeled);
    net_config.validate();
    if (labeled.samples.empty()) throw std::invalid_argument("fit: labeled set is empty");
    if (config.scs_enabled) {
        if (table == nullptr) throw std::invalid_argument("fit: subclass task needs a partition table");
        if (table->num_subclasses() != net_config.num_subclasses) {
            throw std::invalid_argument("fit: table has " +
                                        std::to_string(table->num_subclasses()) +
                                        " subclasses, net expects " +
                                        std::to_string(net_config.num_subclasses));
        }
    }

    FitResult result;
    AdamState adam;
    std::int64_t start = 0;
    if (!opts.resume_checkpoint.empty()) {
        ArrayMap entries = read_checkpoint(opts.resume_checkpoint);
        result.state = unpack_model(entries, net_config);
        adam = unpack_adam(entries);
        start = result.state.step;
    } else {
        result.state = build(net_config, config.seed);
    }

    const bool io = !opts.out_dir.empty();
    std::ofstream loss_log;
    std::ofstream val_log;
    if (io) {
        std::filesystem::create_directories(opts.out_dir);
        loss_log.open(opts.out_dir + "/loss_log.csv", std::ios::trunc);
        loss_log << loss_csv_header() << "\n";
        if (opts.validation) {
            val_log.open(opts.out_dir + "/val_log.csv", std::ios::trunc);
            val_log << "step";
            for (int c = 1; c < net_config.num_parent_classes; ++c) val_log << ",class" << c;
            val_log << ",avg\n";
        }
    }

    auto save = [&](const std::string& name) {
        if (!io) return;
        ArrayMap entries = pack_model(result.state);
        pack_adam(adam, entries);
        std::string path = opts.out_dir + "/" + name;
        write_checkpoint(path, entries);
        KvMap kv;
        net_config_to_kv(net_config, kv);
        train_config_to_kv(config, kv);
        write_kv_file(path + ".cfg", kv);
    };

    for (std::int64_t step = start; step < config.iterations; ++step) {
        Batch batch = assemble_batch(labeled, unlabeled, config, step, config.scs_enabled);
        LossBreakdown b = train_step(result.state, adam, batch, config, table, step);
        result.losses.push_back(b);
        if (io) loss_log << loss_csv_row(step, b) << "\n";
        bool at_checkpoint = (step + 1) % config.checkpoint_every == 0 ||
                             step + 1 == config.iterations;
        if (at_checkpoint) {
            save("ckpt_" + std::to_string(step + 1) + ".basc");
            if (io && opts.validation) {
                EvalReport report = evaluate(result.state, *opts.validation);
                val_log << (step + 1);
                for (int c = 1; c < report.num_classes; ++c) {
                    val_log << "," << fmt17(report.class_dice[static_cast<std::size_t>(c)]);
                }
                val_log << "," << fmt17(report.average) << "\n";
            }
        }
    }
    save("model.basc");
    return result;
}

}  // namespace subseg
