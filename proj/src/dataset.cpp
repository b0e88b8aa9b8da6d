#include "subseg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "subseg/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset payloads are written as raw little-endian scalars");

namespace subseg {

namespace {

constexpr char kMagic[4] = {'S', 'E', 'G', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr int kPlacementTries = 200;
constexpr int kSampleRestarts = 60;

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw std::runtime_error(std::string("dataset: truncated while reading ") + what);
    }
    return v;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::vector<double> SynthSpec::resolved_means() const {
    if (!intensity_means.empty()) {
        if (static_cast<int>(intensity_means.size()) != num_classes + 1) {
            throw std::invalid_argument("synth: intensity_means must list background plus " +
                                        std::to_string(num_classes) + " classes");
        }
        return intensity_means;
    }
    std::vector<double> means(static_cast<std::size_t>(num_classes) + 1);
    means[0] = 0.1;
    for (int c = 1; c <= num_classes; ++c) {
        means[static_cast<std::size_t>(c)] = 0.1 + 0.8 * c / num_classes;
    }
    return means;
}

void DatasetContainer::validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        std::size_t px = static_cast<std::size_t>(height) * width;
        if (s.image.size() != px || s.labels.size() != px) {
            throw std::runtime_error("dataset: sample " + std::to_string(i) +
                                     " has inconsistent geometry");
        }
        for (auto v : s.labels) {
            if (v >= num_classes) {
                throw std::runtime_error("dataset: sample " + std::to_string(i) + " label " +
                                         std::to_string(v) + " out of range");
            }
        }
        if (num_subclasses > 0) {
            if (s.subclass_labels.size() != px) {
                throw std::runtime_error("dataset: sample " + std::to_string(i) +
                                         " missing subclass labels");
            }
            for (auto v : s.subclass_labels) {
                if (v >= num_subclasses) {
                    throw std::runtime_error("dataset: subclass label " + std::to_string(v) +
                                             " out of range");
                }
            }
        } else if (!s.subclass_labels.empty()) {
            throw std::runtime_error("dataset: unexpected subclass labels in sample " +
                                     std::to_string(i));
        }
    }
}

Tensor DatasetContainer::image_tensor(std::size_t index) const {
    const Sample& s = samples.at(index);
    Tensor t;
    t.shape = {1, 1, height, width};
    t.data = s.image;
    return t;
}

DatasetContainer generate(const SynthSpec& spec) {
    if (spec.num_classes < 1) throw std::invalid_argument("synth: need at least one class");
    if (spec.area_ratio < 1.0) throw std::invalid_argument("synth: area_ratio must be >= 1");
    std::vector<double> means = spec.resolved_means();

    // geometric budget: area_c = a0 / ratio^(c-1), total bounded by the fill fraction
    double geo = 0.0;
    for (int c = 0; c < spec.num_classes; ++c) geo += std::pow(spec.area_ratio, -c);
    double a0 = spec.fill_fraction * spec.height * spec.width / geo;

    DatasetContainer out;
    out.height = spec.height;
    out.width = spec.width;
    out.num_classes = spec.num_classes + 1;
    out.num_subclasses = 0;
    out.samples.resize(static_cast<std::size_t>(spec.samples));

    for (int si = 0; si < spec.samples; ++si) {
        RandomStream rs(seed_from(spec.seed, 0x73796e, static_cast<std::uint64_t>(si)));
        Sample& s = out.samples[static_cast<std::size_t>(si)];

        // a stuck layout aborts the sample and redraws everything
        int failed_class = 0;
        bool done = false;
        for (int restart = 0; restart < kSampleRestarts && !done; ++restart) {
            s.labels.assign(static_cast<std::size_t>(spec.height) * spec.width, 0);
            s.image.assign(s.labels.size(), means[0]);
            done = true;
            for (int c = 1; c <= spec.num_classes && done; ++c) {
                double area = a0 * std::pow(spec.area_ratio, -(c - 1));
                bool placed = false;
                for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
                    double aspect = rs.uniform(0.6, 1.6);
                    double ra = std::max(0.8, std::sqrt(area * aspect / M_PI));
                    double rb = std::max(0.8, std::sqrt(area / (aspect * M_PI)));
                    if (2.0 * ra + 1.0 >= spec.width || 2.0 * rb + 1.0 >= spec.height) continue;
                    double cx = rs.uniform(ra, spec.width - 1.0 - ra);
                    double cy = rs.uniform(rb, spec.height - 1.0 - rb);
                    int x0 = static_cast<int>(std::floor(cx - ra));
                    int x1 = static_cast<int>(std::ceil(cx + ra));
                    int y0 = static_cast<int>(std::floor(cy - rb));
                    int y1 = static_cast<int>(std::ceil(cy + rb));
                    bool overlap = false;
                    for (int y = y0; y <= y1 && !overlap; ++y)
                        for (int x = x0; x <= x1 && !overlap; ++x) {
                            double dx = (x - cx) / ra, dy = (y - cy) / rb;
                            if (dx * dx + dy * dy <= 1.0 && s.labels[y * spec.width + x] != 0)
                                overlap = true;
                        }
                    if (overlap) continue;
                    for (int y = y0; y <= y1; ++y)
                        for (int x = x0; x <= x1; ++x) {
                            double dx = (x - cx) / ra, dy = (y - cy) / rb;
                            if (dx * dx + dy * dy <= 1.0) {
                                s.labels[y * spec.width + x] = static_cast<std::uint16_t>(c);
                                s.image[y * spec.width + x] = means[static_cast<std::size_t>(c)];
                            }
                        }
                    placed = true;
                }
                if (!placed) {
                    failed_class = c;
                    done = false;
                }
            }
        }
        if (!done) {
            throw std::runtime_error("synth: cannot place class " + std::to_string(failed_class) +
                                     " after " + std::to_string(kSampleRestarts) +
                                     " layout attempts (sample " + std::to_string(si) + ")");
        }
        if (spec.noise_sigma > 0.0) {
            for (double& v : s.image) v += spec.noise_sigma * rs.gaussian();
        }
    }
    out.validate();
    return out;
}

void write_container(const std::string& path, const DatasetContainer& container) {
    container.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(container.samples.size()));
    put_u32(os, static_cast<std::uint32_t>(container.height));
    put_u32(os, static_cast<std::uint32_t>(container.width));
    put_u32(os, static_cast<std::uint32_t>(container.num_classes));
    put_u32(os, static_cast<std::uint32_t>(container.num_subclasses));
    for (const Sample& s : container.samples) {
        os.write(reinterpret_cast<const char*>(s.image.data()),
                 static_cast<std::streamsize>(s.image.size() * sizeof(double)));
        os.write(reinterpret_cast<const char*>(s.labels.data()),
                 static_cast<std::streamsize>(s.labels.size() * sizeof(std::uint16_t)));
        if (container.num_subclasses > 0) {
            os.write(reinterpret_cast<const char*>(s.subclass_labels.data()),
                     static_cast<std::streamsize>(s.subclass_labels.size() *
                                                  sizeof(std::uint16_t)));
        }
    }
    if (!os) throw std::runtime_error("dataset: write to " + path + " failed");
}

DatasetContainer read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("dataset: " + path + " is not a SEGD container");
    }
    std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
        throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
    }
    DatasetContainer out;
    std::uint32_t count = get_u32(is, "sample count");
    out.height = static_cast<int>(get_u32(is, "height"));
    out.width = static_cast<int>(get_u32(is, "width"));
    out.num_classes = static_cast<int>(get_u32(is, "class count"));
    out.num_subclasses = static_cast<int>(get_u32(is, "subclass count"));
    const std::size_t px = static_cast<std::size_t>(out.height) * out.width;
    out.samples.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Sample& s = out.samples[i];
        s.image.resize(px);
        s.labels.resize(px);
        if (!is.read(reinterpret_cast<char*>(s.image.data()),
                     static_cast<std::streamsize>(px * sizeof(double))) ||
            !is.read(reinterpret_cast<char*>(s.labels.data()),
                     static_cast<std::streamsize>(px * sizeof(std::uint16_t)))) {
            throw std::runtime_error("dataset: truncated sample " + std::to_string(i));
        }
        if (out.num_subclasses > 0) {
            s.subclass_labels.resize(px);
            if (!is.read(reinterpret_cast<char*>(s.subclass_labels.data()),
                         static_cast<std::streamsize>(px * sizeof(std::uint16_t)))) {
                throw std::runtime_error("dataset: truncated subclass labels in sample " +
                                         std::to_string(i));
            }
        }
    }
    out.validate();
    return out;
}

double dice_coefficient(const std::vector<std::uint16_t>& pred,
                        const std::vector<std::uint16_t>& truth, int cls) {
    if (pred.size() != truth.size()) {
        throw std::invalid_argument("dice_coefficient: mask sizes differ, " +
                                    std::to_string(pred.size()) + " vs " +
                                    std::to_string(truth.size()));
    }
    std::int64_t a = 0, b = 0, inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool in_a = pred[i] == cls;
        bool in_b = truth[i] == cls;
        a += in_a;
        b += in_b;
        inter += in_a && in_b;
    }
    if (a + b == 0) return 1.0;  // class absent from both masks
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

EvalReport evaluate(ModelState& state, const DatasetContainer& test) {
    if (test.num_classes != state.config.num_parent_classes) {
        throw std::invalid_argument("evaluate: container has " +
                                    std::to_string(test.num_classes) + " classes, model expects " +
                                    std::to_string(state.config.num_parent_classes));
    }
    EvalReport report;
    report.num_classes = test.num_classes;
    report.class_dice.assign(static_cast<std::size_t>(test.num_classes), 0.0);
    if (test.samples.empty()) return report;
    for (std::size_t i = 0; i < test.samples.size(); ++i) {
        auto pred = inference(state, test.image_tensor(i));
        for (int c = 0; c < test.num_classes; ++c) {
            report.class_dice[static_cast<std::size_t>(c)] +=
                dice_coefficient(pred, test.samples[i].labels, c);
        }
    }
    for (double& v : report.class_dice) v /= static_cast<double>(test.samples.size());
    double sum = 0.0;
    for (int c = 1; c < test.num_classes; ++c)
        sum += report.class_dice[static_cast<std::size_t>(c)];
    report.average = sum / static_cast<double>(test.num_classes - 1);
    return report;
}

void write_eval_csv(const std::string& path, const EvalReport& report) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("evaluate: cannot open " + path);
    os << "class,dice\n";
    for (int c = 1; c < report.num_classes; ++c) {
        os << c << "," << format_double(report.class_dice[static_cast<std::size_t>(c)]) << "\n";
    }
    os << "avg," << format_double(report.average) << "\n";
}

void write_eval_json(const std::string& path, const EvalReport& report) {
    nlohmann::json j;
    j["num_classes"] = report.num_classes;
    for (int c = 1; c < report.num_classes; ++c) {
        j["per_class"][std::to_string(c)] = report.class_dice[static_cast<std::size_t>(c)];
    }
    j["average"] = report.average;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("evaluate: cannot open " + path);
    os << j.dump(2) << "\n";
}

double minority_dice(const EvalReport& report, const DatasetContainer& test) {
    const int K = report.num_classes - 1;
    std::vector<std::int64_t> area(static_cast<std::size_t>(report.num_classes), 0);
    for (const Sample& s : test.samples)
        for (auto v : s.labels) area[v] += 1;
    std::vector<int> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), 1);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (area[static_cast<std::size_t>(a)] != area[static_cast<std::size_t>(b)])
            return area[static_cast<std::size_t>(a)] < area[static_cast<std::size_t>(b)];
        return a < b;
    });
    int take = (K + 1) / 2;
    double sum = 0.0;
    for (int i = 0; i < take; ++i) sum += report.class_dice[static_cast<std::size_t>(order[i])];
    return sum / take;
}

}  // namespace subseg
