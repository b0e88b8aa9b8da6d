#include "subseg/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace subseg {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double get_double(const KvMap& kv, const std::string& key, double def) {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    try {
        std::size_t used = 0;
        double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + " has non-numeric value '" + it->second + "'");
    }
}

long long get_int(const KvMap& kv, const std::string& key, long long def) {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    try {
        std::size_t used = 0;
        long long v = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + " has non-integer value '" + it->second + "'");
    }
}

bool get_bool(const KvMap& kv, const std::string& key, bool def) {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config: key " + key + " expects true/false, got '" + it->second + "'");
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "net.in_channels", "net.base_channels", "net.num_parent_classes", "net.num_subclasses",
        "net.height", "net.width",
        "train.iterations", "train.batch_size", "train.labeled_per_batch",
        "train.learning_rate", "train.adam_beta1", "train.adam_beta2", "train.adam_eps",
        "train.alpha", "train.mu", "train.lambda1_max", "train.lambda2", "train.lambda3",
        "train.scs_enabled", "train.rotate", "train.noise_sigma", "train.seed",
        "train.checkpoint_every",
        "synth.height", "synth.width", "synth.num_classes", "synth.area_ratio",
        "synth.intensity_means", "synth.noise_sigma", "synth.fill_fraction", "synth.samples",
        "synth.seed",
        "pretrain.iterations", "partition.cap_per_class", "partition.balanced",
        "ablate.test_samples", "ablate.num_seeds",
    };
    return keys;
}

}  // namespace

void TrainConfig::validate(bool has_unlabeled) const {
    if (iterations < 0) throw ConfigError("config: train.iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("config: train.batch_size must be >= 1");
    if (labeled_per_batch < 1) throw ConfigError("config: train.labeled_per_batch must be >= 1");
    if (has_unlabeled && labeled_per_batch >= batch_size) {
        throw ConfigError("config: labeled_per_batch (" + std::to_string(labeled_per_batch) +
                          ") must be < batch_size (" + std::to_string(batch_size) +
                          ") so every step carries unlabeled samples");
    }
    if (!has_unlabeled && labeled_per_batch != batch_size) {
        throw ConfigError("config: supervised-only runs require labeled_per_batch == batch_size");
    }
    if (learning_rate <= 0) throw ConfigError("config: train.learning_rate must be positive");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("config: train.alpha outside [0, 1]");
    if (noise_sigma < 0.0) throw ConfigError("config: train.noise_sigma must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("config: train.checkpoint_every must be >= 1");
}

KvMap parse_kv_text(const std::string& text) {
    KvMap kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" +
                              t + "'");
        }
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config: empty key on line " + std::to_string(lineno));
        }
        kv[key] = val;
    }
    return kv;
}

KvMap read_kv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_kv_text(text);
}

void write_kv_file(const std::string& path, const KvMap& kv) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("config: cannot open " + path + " for writing");
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
}

void net_config_to_kv(const NetConfig& c, KvMap& kv) {
    kv["net.in_channels"] = std::to_string(c.in_channels);
    kv["net.base_channels"] = std::to_string(c.base_channels);
    kv["net.num_parent_classes"] = std::to_string(c.num_parent_classes);
    kv["net.num_subclasses"] = std::to_string(c.num_subclasses);
    kv["net.height"] = std::to_string(c.height);
    kv["net.width"] = std::to_string(c.width);
}

NetConfig net_config_from_kv(const KvMap& kv) {
    NetConfig c;
    c.in_channels = static_cast<int>(get_int(kv, "net.in_channels", c.in_channels));
    c.base_channels = static_cast<int>(get_int(kv, "net.base_channels", c.base_channels));
    c.num_parent_classes =
        static_cast<int>(get_int(kv, "net.num_parent_classes", c.num_parent_classes));
    c.num_subclasses = static_cast<int>(get_int(kv, "net.num_subclasses", c.num_subclasses));
    c.height = static_cast<int>(get_int(kv, "net.height", c.height));
    c.width = static_cast<int>(get_int(kv, "net.width", c.width));
    return c;
}

void train_config_to_kv(const TrainConfig& c, KvMap& kv) {
    kv["train.iterations"] = std::to_string(c.iterations);
    kv["train.batch_size"] = std::to_string(c.batch_size);
    kv["train.labeled_per_batch"] = std::to_string(c.labeled_per_batch);
    kv["train.learning_rate"] = fmt(c.learning_rate);
    kv["train.adam_beta1"] = fmt(c.adam_beta1);
    kv["train.adam_beta2"] = fmt(c.adam_beta2);
    kv["train.adam_eps"] = fmt(c.adam_eps);
    kv["train.alpha"] = fmt(c.alpha);
    kv["train.mu"] = fmt(c.weights.mu);
    kv["train.lambda1_max"] = fmt(c.weights.lambda1_max);
    kv["train.lambda2"] = fmt(c.weights.lambda2);
    kv["train.lambda3"] = fmt(c.weights.lambda3);
    kv["train.scs_enabled"] = c.scs_enabled ? "true" : "false";
    kv["train.rotate"] = c.rotate ? "true" : "false";
    kv["train.noise_sigma"] = fmt(c.noise_sigma);
    kv["train.seed"] = std::to_string(c.seed);
    kv["train.checkpoint_every"] = std::to_string(c.checkpoint_every);
}

TrainConfig train_config_from_kv(const KvMap& kv) {
    TrainConfig c;
    c.iterations = get_int(kv, "train.iterations", c.iterations);
    c.batch_size = static_cast<int>(get_int(kv, "train.batch_size", c.batch_size));
    c.labeled_per_batch =
        static_cast<int>(get_int(kv, "train.labeled_per_batch", c.labeled_per_batch));
    c.learning_rate = get_double(kv, "train.learning_rate", c.learning_rate);
    c.adam_beta1 = get_double(kv, "train.adam_beta1", c.adam_beta1);
    c.adam_beta2 = get_double(kv, "train.adam_beta2", c.adam_beta2);
    c.adam_eps = get_double(kv, "train.adam_eps", c.adam_eps);
    c.alpha = get_double(kv, "train.alpha", c.alpha);
    c.weights.mu = get_double(kv, "train.mu", c.weights.mu);
    c.weights.lambda1_max = get_double(kv, "train.lambda1_max", c.weights.lambda1_max);
    c.weights.lambda2 = get_double(kv, "train.lambda2", c.weights.lambda2);
    c.weights.lambda3 = get_double(kv, "train.lambda3", c.weights.lambda3);
    c.scs_enabled = get_bool(kv, "train.scs_enabled", c.scs_enabled);
    c.rotate = get_bool(kv, "train.rotate", c.rotate);
    c.noise_sigma = get_double(kv, "train.noise_sigma", c.noise_sigma);
    c.seed = static_cast<std::uint64_t>(get_int(kv, "train.seed", 0));
    c.checkpoint_every = get_int(kv, "train.checkpoint_every", c.checkpoint_every);
    return c;
}

void synth_spec_to_kv(const SynthSpec& s, KvMap& kv) {
    kv["synth.height"] = std::to_string(s.height);
    kv["synth.width"] = std::to_string(s.width);
    kv["synth.num_classes"] = std::to_string(s.num_classes);
    kv["synth.area_ratio"] = fmt(s.area_ratio);
    kv["synth.noise_sigma"] = fmt(s.noise_sigma);
    kv["synth.fill_fraction"] = fmt(s.fill_fraction);
    kv["synth.samples"] = std::to_string(s.samples);
    kv["synth.seed"] = std::to_string(s.seed);
    if (!s.intensity_means.empty()) {
        std::string joined;
        for (std::size_t i = 0; i < s.intensity_means.size(); ++i) {
            if (i) joined += ",";
            joined += fmt(s.intensity_means[i]);
        }
        kv["synth.intensity_means"] = joined;
    }
}

SynthSpec synth_spec_from_kv(const KvMap& kv) {
    SynthSpec s;
    s.height = static_cast<int>(get_int(kv, "synth.height", s.height));
    s.width = static_cast<int>(get_int(kv, "synth.width", s.width));
    s.num_classes = static_cast<int>(get_int(kv, "synth.num_classes", s.num_classes));
    s.area_ratio = get_double(kv, "synth.area_ratio", s.area_ratio);
    s.noise_sigma = get_double(kv, "synth.noise_sigma", s.noise_sigma);
    s.fill_fraction = get_double(kv, "synth.fill_fraction", s.fill_fraction);
    s.samples = static_cast<int>(get_int(kv, "synth.samples", s.samples));
    s.seed = static_cast<std::uint64_t>(get_int(kv, "synth.seed", 0));
    auto it = kv.find("synth.intensity_means");
    if (it != kv.end() && !it->second.empty()) {
        std::istringstream is(it->second);
        std::string part;
        while (std::getline(is, part, ',')) {
            try {
                s.intensity_means.push_back(std::stod(part));
            } catch (const std::exception&) {
                throw ConfigError("config: synth.intensity_means has non-numeric entry '" + part +
                                  "'");
            }
        }
    }
    return s;
}

void reject_unknown_keys(const KvMap& kv) {
    for (const auto& [key, value] : kv) {
        if (known_keys().count(key) == 0) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
}

}  // namespace subseg
