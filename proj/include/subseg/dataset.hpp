#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "subseg/net.hpp"

namespace subseg {

// Synthetic class-imbalanced segmentation data: K non-overlapping ellipses
// per image whose expected areas fall geometrically with the class index.
struct SynthSpec {
    int height = 32;
    int width = 32;
    int num_classes = 5;      // foreground classes; labels run 0..num_classes
    double area_ratio = 3.0;  // expected area of class c+1 is area of c divided by this
    std::vector<double> intensity_means;  // size num_classes+1 incl background; empty = spaced defaults
    double noise_sigma = 0.05;
    double fill_fraction = 0.35;  // share of the image budgeted to foreground
    int samples = 10;
    std::uint64_t seed = 0;

    std::vector<double> resolved_means() const;
};

struct Sample {
    std::vector<double> image;                   // H*W
    std::vector<std::uint16_t> labels;           // H*W, values 0..K
    std::vector<std::uint16_t> subclass_labels;  // empty, or H*W values 0..K_sub
};

struct DatasetContainer {
    int height = 0;
    int width = 0;
    int num_classes = 0;     // K+1 including background
    int num_subclasses = 0;  // K_sub+1 including background; 0 = absent
    std::vector<Sample> samples;

    void validate() const;
    Tensor image_tensor(std::size_t index) const;  // {1,1,H,W}
};

DatasetContainer generate(const SynthSpec& spec);

// on-disk format: magic "SEGD", version u32 LE, sample count u32, height u32,
// width u32, num_classes u32, num_subclasses u32 (0 = absent); per sample the
// image as f64 LE, labels as u16 LE, subclass labels as u16 LE when present
void write_container(const std::string& path, const DatasetContainer& container);
DatasetContainer read_container(const std::string& path);

// 2|A∩B| / (|A|+|B|) on binarized masks; both masks empty counts as 1
double dice_coefficient(const std::vector<std::uint16_t>& pred,
                        const std::vector<std::uint16_t>& truth, int cls);

struct EvalReport {
    int num_classes = 0;             // K+1
    std::vector<double> class_dice;  // size K+1; [0] = background, excluded from the average
    double average = 0.0;            // mean over foreground classes
};

// teacher inference per image, Dice per foreground class averaged over images
EvalReport evaluate(ModelState& state, const DatasetContainer& test);

void write_eval_csv(const std::string& path, const EvalReport& report);
void write_eval_json(const std::string& path, const EvalReport& report);

// mean Dice over the ceil(K/2) foreground classes with the smallest true area
double minority_dice(const EvalReport& report, const DatasetContainer& test);

}  // namespace subseg
