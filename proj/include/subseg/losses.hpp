#pragma once

#include <cstdint>
#include <vector>

#include "subseg/subclass_table.hpp"
#include "subseg/tensor.hpp"

namespace subseg {

struct LossWeights {
    double mu = 1.0;
    double lambda1_max = 0.1;
    double lambda2 = 0.5;
    double lambda3 = 1.0;
};

// lambda1(step) = lambda1_max * exp(-5 * (1 - step/total)^2), clamped to the
// final value once step reaches total.
double lambda1_ramp(double lambda1_max, std::int64_t step, std::int64_t total_steps);

// dense one-hot map from hard labels, detached
Tensor one_hot(const std::vector<std::uint16_t>& labels, int batch, int channels, int height,
               int width);

// mean over all pixels of -sum_c target_c * log(max(p_c, 1e-12));
// the target is treated as a constant
Tensor cross_entropy(const Tensor& probs, const Tensor& soft_target);
Tensor cross_entropy(const Tensor& probs, const std::vector<std::uint16_t>& labels);

// 1 - mean_c (2*sum p*g + eps) / (sum p + sum g + eps), sums over the whole
// batch, every channel included
Tensor dice_loss(const Tensor& probs, const Tensor& soft_target);
Tensor dice_loss(const Tensor& probs, const std::vector<std::uint16_t>& labels);

Tensor mse(const Tensor& pred, const Tensor& target);

// soft marginalization: parent channel sums its subclass channels
Tensor map_subclass_probs(const Tensor& scs_probs, const SubclassTable& table);
std::vector<std::uint16_t> map_subclass_labels(const std::vector<std::uint16_t>& subclass_labels,
                                               const SubclassTable& table);

// CE+Dice of the student MoS output against the mapped (detached) teacher SCS
// output on the unlabeled batch
Tensor task_consistency_loss(const Tensor& student_mos_probs, const Tensor& teacher_scs_probs,
                             const SubclassTable& table);

// per-pixel CE against the subclass label, kept only where the predicted
// subclass maps to the wrong parent; normalized by the total pixel count
Tensor conflict_loss(const Tensor& student_scs_probs,
                     const std::vector<std::uint16_t>& subclass_labels,
                     const SubclassTable& table);

// L_seg(mos, y) + mu * L_seg(scs, y_sub), L_seg = CE + Dice. scs_probs may be
// empty when mu == 0.
Tensor supervised_loss(const Tensor& mos_probs, const Tensor& scs_probs,
                       const std::vector<std::uint16_t>& labels,
                       const std::vector<std::uint16_t>& subclass_labels, double mu);

// MSE(mos_s, mos_t) + MSE(scs_s, scs_t); the SCS pair may be empty
Tensor model_consistency_loss(const Tensor& student_mos, const Tensor& student_scs,
                              const Tensor& teacher_mos, const Tensor& teacher_scs);

struct LossBreakdown {
    double sup = 0.0;
    double model_con = 0.0;
    double task_con = 0.0;
    double cnf = 0.0;
    double lambda1 = 0.0;
    double total = 0.0;
};

// weighted sum per the training objective; absent terms come in as empty
// tensors and contribute nothing
Tensor total_loss(const Tensor& sup, const Tensor& model_con, const Tensor& task_con,
                  const Tensor& cnf, const LossWeights& weights, std::int64_t step,
                  std::int64_t total_steps, LossBreakdown* breakdown = nullptr);

}  // namespace subseg
