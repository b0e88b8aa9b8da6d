#include "subseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace subseg {

namespace {

constexpr double kLogClamp = 1e-12;
constexpr double kDiceEps = 1e-5;

void check_probs_4d(const Tensor& probs, const char* op) {
    if (probs.shape.size() != 4) {
        throw std::invalid_argument(std::string(op) + ": expected NCHW probabilities, got " +
                                    shape_str(probs.shape));
    }
}

void check_label_count(const Tensor& probs, const std::vector<std::uint16_t>& labels,
                       const char* op) {
    std::int64_t pixels = static_cast<std::int64_t>(probs.shape[0]) * probs.shape[2] *
                          probs.shape[3];
    if (pixels != static_cast<std::int64_t>(labels.size())) {
        throw std::invalid_argument(std::string(op) + ": " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(pixels) + " pixels");
    }
}

}  // namespace

// ---- SubclassTable ---------------------------------------------------------

SubclassTable SubclassTable::identity(int num_parent_classes) {
    std::vector<int> parent_of(static_cast<std::size_t>(num_parent_classes));
    for (int i = 0; i < num_parent_classes; ++i) parent_of[static_cast<std::size_t>(i)] = i;
    return from_parent_of(std::move(parent_of), num_parent_classes);
}

SubclassTable SubclassTable::from_parent_of(std::vector<int> parent_of, int num_parent_classes) {
    SubclassTable t;
    t.parent_of = std::move(parent_of);
    t.children_of.assign(static_cast<std::size_t>(num_parent_classes), {});
    for (std::size_t s = 0; s < t.parent_of.size(); ++s) {
        int p = t.parent_of[s];
        if (p < 0 || p >= num_parent_classes) {
            throw std::invalid_argument("subclass table: parent id " + std::to_string(p) +
                                        " of subclass " + std::to_string(s) + " out of range");
        }
        t.children_of[static_cast<std::size_t>(p)].push_back(static_cast<int>(s));
    }
    t.validate();
    return t;
}

void SubclassTable::validate() const {
    if (parent_of.empty() || children_of.empty()) {
        throw std::invalid_argument("subclass table: empty mapping");
    }
    if (parent_of[0] != 0) {
        throw std::invalid_argument("subclass table: background subclass 0 must map to parent 0");
    }
    if (children_of[0] != std::vector<int>{0}) {
        throw std::invalid_argument("subclass table: background parent must own exactly {0}");
    }
    std::vector<int> seen(parent_of.size(), 0);
    for (std::size_t p = 0; p < children_of.size(); ++p) {
        if (children_of[p].empty()) {
            throw std::invalid_argument("subclass table: parent " + std::to_string(p) +
                                        " has no subclasses");
        }
        if (!std::is_sorted(children_of[p].begin(), children_of[p].end())) {
            throw std::invalid_argument("subclass table: children of parent " + std::to_string(p) +
                                        " are not sorted");
        }
        for (int s : children_of[p]) {
            if (s < 0 || s >= static_cast<int>(parent_of.size()) ||
                parent_of[static_cast<std::size_t>(s)] != static_cast<int>(p)) {
                throw std::invalid_argument("subclass table: inconsistent entry for subclass " +
                                            std::to_string(s));
            }
            seen[static_cast<std::size_t>(s)] += 1;
        }
    }
    for (std::size_t s = 0; s < seen.size(); ++s) {
        if (seen[s] != 1) {
            throw std::invalid_argument("subclass table: subclass " + std::to_string(s) +
                                        " covered " + std::to_string(seen[s]) + " times");
        }
    }
}

std::string SubclassTable::to_text() const {
    std::ostringstream os;
    for (std::size_t s = 0; s < parent_of.size(); ++s) {
        os << s << " " << parent_of[s] << "\n";
    }
    return os.str();
}

SubclassTable SubclassTable::from_text(const std::string& text) {
    std::istringstream is(text);
    std::vector<int> parent_of;
    int max_parent = 0;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        long long sid = -1, pid = -1;
        if (!(ls >> sid >> pid)) {
            throw std::invalid_argument("subclass table: malformed line '" + line + "'");
        }
        if (sid != static_cast<long long>(parent_of.size())) {
            throw std::invalid_argument("subclass table: ids must be contiguous, saw " +
                                        std::to_string(sid) + " at position " +
                                        std::to_string(parent_of.size()));
        }
        parent_of.push_back(static_cast<int>(pid));
        max_parent = std::max(max_parent, static_cast<int>(pid));
    }
    return from_parent_of(std::move(parent_of), max_parent + 1);
}

// ---- losses -----------------------------------------------------------------

double lambda1_ramp(double lambda1_max, std::int64_t step, std::int64_t total_steps) {
    double ratio = total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps)
                                   : 1.0;
    ratio = std::min(ratio, 1.0);
    double t = 1.0 - ratio;
    return lambda1_max * std::exp(-5.0 * t * t);
}

Tensor one_hot(const std::vector<std::uint16_t>& labels, int batch, int channels, int height,
               int width) {
    const std::int64_t plane = static_cast<std::int64_t>(height) * width;
    if (static_cast<std::int64_t>(labels.size()) != batch * plane) {
        throw std::invalid_argument("one_hot: label count does not match geometry");
    }
    Tensor t = Tensor::zeros({batch, channels, height, width});
    for (int n = 0; n < batch; ++n) {
        for (std::int64_t i = 0; i < plane; ++i) {
            int cls = labels[static_cast<std::size_t>(n * plane + i)];
            if (cls >= channels) {
                throw std::invalid_argument("one_hot: label " + std::to_string(cls) +
                                            " out of range for " + std::to_string(channels) +
                                            " channels");
            }
            t.data[(static_cast<std::int64_t>(n) * channels + cls) * plane + i] = 1.0;
        }
    }
    return t;
}

Tensor cross_entropy(const Tensor& probs, const Tensor& soft_target) {
    check_probs_4d(probs, "cross_entropy");
    if (probs.shape != soft_target.shape) {
        throw std::invalid_argument("cross_entropy: probs " + shape_str(probs.shape) +
                                    " vs target " + shape_str(soft_target.shape));
    }
    Tensor target = soft_target.detached();
    const double pixels = static_cast<double>(probs.shape[0]) * probs.shape[2] * probs.shape[3];
    Tensor ll = mul(log_elem(clamp_min(probs, kLogClamp)), target);
    return scale(sum_all(ll), -1.0 / pixels);
}

Tensor cross_entropy(const Tensor& probs, const std::vector<std::uint16_t>& labels) {
    check_probs_4d(probs, "cross_entropy");
    check_label_count(probs, labels, "cross_entropy");
    return cross_entropy(probs, one_hot(labels, probs.shape[0], probs.shape[1], probs.shape[2],
                                        probs.shape[3]));
}

Tensor dice_loss(const Tensor& probs, const Tensor& soft_target) {
    check_probs_4d(probs, "dice_loss");
    if (probs.shape != soft_target.shape) {
        throw std::invalid_argument("dice_loss: probs " + shape_str(probs.shape) + " vs target " +
                                    shape_str(soft_target.shape));
    }
    Tensor target = soft_target.detached();
    const int C = probs.shape[1];
    Tensor inter = sum_channels(mul(probs, target));
    Tensor denom = add(sum_channels(probs), sum_channels(target));
    Tensor frac = div_elem(add_scalar(scale(inter, 2.0), kDiceEps), add_scalar(denom, kDiceEps));
    return add_scalar(scale(sum_all(frac), -1.0 / C), 1.0);
}

Tensor dice_loss(const Tensor& probs, const std::vector<std::uint16_t>& labels) {
    check_probs_4d(probs, "dice_loss");
    check_label_count(probs, labels, "dice_loss");
    return dice_loss(probs, one_hot(labels, probs.shape[0], probs.shape[1], probs.shape[2],
                                    probs.shape[3]));
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape != target.shape) {
        throw std::invalid_argument("mse: pred " + shape_str(pred.shape) + " vs target " +
                                    shape_str(target.shape));
    }
    Tensor d = sub(pred, target.detached());
    return scale(sum_all(mul(d, d)), 1.0 / static_cast<double>(pred.numel()));
}

Tensor map_subclass_probs(const Tensor& scs_probs, const SubclassTable& table) {
    check_probs_4d(scs_probs, "map_subclass_probs");
    if (scs_probs.shape[1] != table.num_subclasses()) {
        throw std::invalid_argument("map_subclass_probs: " + std::to_string(scs_probs.shape[1]) +
                                    " channels but table has " +
                                    std::to_string(table.num_subclasses()) + " subclasses");
    }
    return group_channels(scs_probs, table.parent_of, table.num_parents());
}

std::vector<std::uint16_t> map_subclass_labels(const std::vector<std::uint16_t>& subclass_labels,
                                               const SubclassTable& table) {
    std::vector<std::uint16_t> out(subclass_labels.size());
    for (std::size_t i = 0; i < subclass_labels.size(); ++i) {
        int s = subclass_labels[i];
        if (s >= table.num_subclasses()) {
            throw std::invalid_argument("map_subclass_labels: label " + std::to_string(s) +
                                        " out of range for " +
                                        std::to_string(table.num_subclasses()) + " subclasses");
        }
        out[i] = static_cast<std::uint16_t>(table.parent_of[static_cast<std::size_t>(s)]);
    }
    return out;
}

Tensor task_consistency_loss(const Tensor& student_mos_probs, const Tensor& teacher_scs_probs,
                             const SubclassTable& table) {
    Tensor target = map_subclass_probs(teacher_scs_probs.detached(), table);
    if (student_mos_probs.shape != target.shape) {
        throw std::invalid_argument("task_consistency_loss: student MoS " +
                                    shape_str(student_mos_probs.shape) + " vs mapped teacher " +
                                    shape_str(target.shape));
    }
    return add(cross_entropy(student_mos_probs, target), dice_loss(student_mos_probs, target));
}

Tensor conflict_loss(const Tensor& student_scs_probs,
                     const std::vector<std::uint16_t>& subclass_labels,
                     const SubclassTable& table) {
    check_probs_4d(student_scs_probs, "conflict_loss");
    check_label_count(student_scs_probs, subclass_labels, "conflict_loss");
    if (student_scs_probs.shape[1] != table.num_subclasses()) {
        throw std::invalid_argument("conflict_loss: channel count " +
                                    std::to_string(student_scs_probs.shape[1]) +
                                    " does not match table");
    }
    const int N = student_scs_probs.shape[0], C = student_scs_probs.shape[1];
    const int H = student_scs_probs.shape[2], W = student_scs_probs.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;

    // constant selector: one-hot at the subclass label on conflicting pixels only
    Tensor selector = Tensor::zeros({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        const double* base =
            student_scs_probs.data.data() + static_cast<std::int64_t>(n) * C * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            int pred = 0;
            double bv = base[i];
            for (int c = 1; c < C; ++c) {
                if (base[c * plane + i] > bv) {
                    bv = base[c * plane + i];
                    pred = c;
                }
            }
            int truth = subclass_labels[static_cast<std::size_t>(n * plane + i)];
            if (truth >= table.num_subclasses()) {
                throw std::invalid_argument("conflict_loss: subclass label " +
                                            std::to_string(truth) + " out of range");
            }
            bool conflict = table.parent_of[static_cast<std::size_t>(pred)] !=
                            table.parent_of[static_cast<std::size_t>(truth)];
            if (conflict) {
                selector.data[(static_cast<std::int64_t>(n) * C + truth) * plane + i] = 1.0;
            }
        }
    }
    double pixels = static_cast<double>(N) * H * W;
    Tensor masked = mul(log_elem(clamp_min(student_scs_probs, kLogClamp)), selector);
    return scale(sum_all(masked), -1.0 / pixels);
}

Tensor supervised_loss(const Tensor& mos_probs, const Tensor& scs_probs,
                       const std::vector<std::uint16_t>& labels,
                       const std::vector<std::uint16_t>& subclass_labels, double mu) {
    Tensor seg = add(cross_entropy(mos_probs, labels), dice_loss(mos_probs, labels));
    if (mu == 0.0) return seg;
    Tensor seg_sub =
        add(cross_entropy(scs_probs, subclass_labels), dice_loss(scs_probs, subclass_labels));
    return add(seg, scale(seg_sub, mu));
}

Tensor model_consistency_loss(const Tensor& student_mos, const Tensor& student_scs,
                              const Tensor& teacher_mos, const Tensor& teacher_scs) {
    Tensor m = mse(student_mos, teacher_mos);
    if (student_scs.data.empty() && teacher_scs.data.empty()) return m;
    return add(m, mse(student_scs, teacher_scs));
}

Tensor total_loss(const Tensor& sup, const Tensor& model_con, const Tensor& task_con,
                  const Tensor& cnf, const LossWeights& weights, std::int64_t step,
                  std::int64_t total_steps, LossBreakdown* breakdown) {
    double lambda1 = lambda1_ramp(weights.lambda1_max, step, total_steps);
    Tensor total = sup;
    if (!model_con.data.empty()) total = add(total, scale(model_con, lambda1));
    if (!task_con.data.empty()) total = add(total, scale(task_con, weights.lambda2));
    if (!cnf.data.empty()) total = add(total, scale(cnf, weights.lambda3));
    if (breakdown) {
        breakdown->sup = sup.scalar();
        breakdown->model_con = model_con.data.empty() ? 0.0 : model_con.scalar();
        breakdown->task_con = task_con.data.empty() ? 0.0 : task_con.scalar();
        breakdown->cnf = cnf.data.empty() ? 0.0 : cnf.scalar();
        breakdown->lambda1 = lambda1;
        breakdown->total = total.scalar();
    }
    return total;
}

}  // namespace subseg
