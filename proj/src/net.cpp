#include "subseg/net.hpp"

#include <cmath>
#include <stdexcept>

#include "subseg/rng.hpp"

namespace subseg {

namespace {

constexpr double kBnMomentum = 0.9;
constexpr double kBnEps = 1e-5;

struct ConvSpec {
    std::string name;
    int in_ch;
    int out_ch;
    int k;
    bool normed;  // conv followed by norm+relu (heads are bare)
};

std::vector<ConvSpec> conv_specs(const NetConfig& c) {
    const int b = c.base_channels;
    std::vector<ConvSpec> specs = {
        {"enc/b1/1", c.in_channels, b, 3, true},
        {"enc/b1/2", b, b, 3, true},
        {"enc/b2/1", b, 2 * b, 3, true},
        {"enc/b2/2", 2 * b, 2 * b, 3, true},
        {"enc/b3/1", 2 * b, 4 * b, 3, true},
        {"enc/b3/2", 4 * b, 4 * b, 3, true},
        {"enc/b4/1", 4 * b, 8 * b, 3, true},
        {"enc/b4/2", 8 * b, 8 * b, 3, true},
    };
    auto decoder = [&](const std::string& d, int classes) {
        specs.push_back({d + "/u3/1", 8 * b, 4 * b, 3, true});
        specs.push_back({d + "/u3/2", 8 * b, 4 * b, 3, true});  // concat with 4b skip
        specs.push_back({d + "/u2/1", 4 * b, 2 * b, 3, true});
        specs.push_back({d + "/u2/2", 4 * b, 2 * b, 3, true});
        specs.push_back({d + "/u1/1", 2 * b, b, 3, true});
        specs.push_back({d + "/u1/2", 2 * b, b, 3, true});
        specs.push_back({d + "/head", b, classes, 1, false});
    };
    decoder("mos", c.num_parent_classes);
    decoder("scs", c.num_subclasses);
    return specs;
}

// Per-pass parameter binder: binds each weight to the tape at most once so
// gradients accumulate on a single leaf per parameter.
struct Ctx {
    Params& p;
    const ForwardOptions& o;
    std::map<std::string, Tensor> bound;

    Tensor get(const std::string& name) {
        auto hit = bound.find(name);
        if (hit != bound.end()) return hit->second;
        auto it = p.weights.find(name);
        if (it == p.weights.end()) {
            throw std::runtime_error("forward: missing parameter " + name);
        }
        Tensor t = o.tape ? o.tape->leaf(it->second, true) : it->second.detached();
        bound.emplace(name, t);
        if (o.leaves && o.tape) (*o.leaves)[name] = t;
        return t;
    }

    Tensor conv_block(const Tensor& x, const std::string& prefix, int stride) {
        Tensor y = conv2d(x, get(prefix + "/w"), get(prefix + "/b"), stride, 1);
        y = batchnorm2d(y, get(prefix + "/g"), get(prefix + "/be"), p.stats.at(prefix), o.mode,
                        kBnMomentum, kBnEps, o.update_stats);
        return relu(y);
    }

    Tensor up_block(const Tensor& x, const Tensor& skip, const std::string& prefix) {
        Tensor y = upsample2x(x);
        y = conv_block(y, prefix + "/1", 1);
        y = concat_channels(y, skip);
        return conv_block(y, prefix + "/2", 1);
    }
};

}  // namespace

void NetConfig::validate() const {
    if (in_channels < 1) throw std::invalid_argument("config: in_channels must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
    if (num_parent_classes < 2) {
        throw std::invalid_argument("config: need background plus at least one class");
    }
    if (num_subclasses < num_parent_classes) {
        throw std::invalid_argument("config: num_subclasses (" + std::to_string(num_subclasses) +
                                    ") must be >= num_parent_classes (" +
                                    std::to_string(num_parent_classes) + ")");
    }
    if (height % 8 != 0 || width % 8 != 0) {
        throw std::invalid_argument("config: image size " + std::to_string(height) + "x" +
                                    std::to_string(width) +
                                    " must be divisible by 8 (three stride-2 stages)");
    }
}

ModelState build(const NetConfig& config, std::uint64_t seed) {
    config.validate();
    ModelState state;
    state.config = config;
    RandomStream rs(seed_from(seed, 0x6e6574));
    for (const ConvSpec& spec : conv_specs(config)) {
        Tensor w = Tensor::zeros({spec.out_ch, spec.in_ch, spec.k, spec.k});
        double std = std::sqrt(2.0 / (spec.in_ch * spec.k * spec.k));
        for (double& v : w.data) v = std * rs.gaussian();
        state.student.weights[spec.name + "/w"] = std::move(w);
        state.student.weights[spec.name + "/b"] = Tensor::zeros({spec.out_ch});
        if (spec.normed) {
            state.student.weights[spec.name + "/g"] = Tensor::full({spec.out_ch}, 1.0);
            state.student.weights[spec.name + "/be"] = Tensor::zeros({spec.out_ch});
            state.student.stats[spec.name] = RunningStat::init(spec.out_ch);
        }
    }
    state.teacher = state.student;  // theta'_0 = theta_0
    return state;
}

NetOutput forward(ModelState& state, Member who, const Tensor& x, const ForwardOptions& opts) {
    const NetConfig& c = state.config;
    if (x.shape.size() != 4 || x.shape[1] != c.in_channels || x.shape[2] != c.height ||
        x.shape[3] != c.width) {
        throw std::invalid_argument("forward: input " + shape_str(x.shape) +
                                    " does not match configured Nx" +
                                    std::to_string(c.in_channels) + "x" +
                                    std::to_string(c.height) + "x" + std::to_string(c.width));
    }
    Params& p = who == Member::student ? state.student : state.teacher;
    Ctx ctx{p, opts, {}};

    Tensor f1 = ctx.conv_block(x, "enc/b1/1", 1);
    Tensor e1 = ctx.conv_block(f1, "enc/b1/2", 2);
    Tensor f2 = ctx.conv_block(e1, "enc/b2/1", 1);
    Tensor e2 = ctx.conv_block(f2, "enc/b2/2", 2);
    Tensor f3 = ctx.conv_block(e2, "enc/b3/1", 1);
    Tensor e3 = ctx.conv_block(f3, "enc/b3/2", 2);
    Tensor e4 = ctx.conv_block(e3, "enc/b4/1", 1);
    e4 = ctx.conv_block(e4, "enc/b4/2", 1);

    auto decode = [&](const std::string& d) {
        Tensor h = ctx.up_block(e4, f3, d + "/u3");
        h = ctx.up_block(h, f2, d + "/u2");
        h = ctx.up_block(h, f1, d + "/u1");
        Tensor logits = conv2d(h, ctx.get(d + "/head/w"), ctx.get(d + "/head/b"), 1, 0);
        return std::pair<Tensor, Tensor>(softmax_channel(logits), h);
    };

    NetOutput out;
    auto mos = decode("mos");
    out.mos_probs = std::move(mos.first);
    out.mos_features = std::move(mos.second);
    if (!opts.mos_only) out.scs_probs = decode("scs").first;
    return out;
}

void ema_update(ModelState& state, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("ema_update: alpha " + std::to_string(alpha) +
                                    " outside [0, 1]");
    }
    for (auto& [name, tw] : state.teacher.weights) {
        const Tensor& sw = state.student.weights.at(name);
        for (std::size_t i = 0; i < tw.data.size(); ++i) {
            tw.data[i] = alpha * tw.data[i] + (1.0 - alpha) * sw.data[i];
        }
    }
    for (auto& [name, ts] : state.teacher.stats) {
        const RunningStat& ss = state.student.stats.at(name);
        for (std::size_t i = 0; i < ts.mean.size(); ++i) {
            ts.mean[i] = alpha * ts.mean[i] + (1.0 - alpha) * ss.mean[i];
            ts.var[i] = alpha * ts.var[i] + (1.0 - alpha) * ss.var[i];
        }
        ts.count = alpha * ts.count + (1.0 - alpha) * ss.count;
    }
}

std::vector<std::uint16_t> inference(ModelState& state, const Tensor& x) {
    ForwardOptions opts;
    opts.mode = NormMode::eval;
    opts.mos_only = true;
    NetOutput out = forward(state, Member::teacher, x, opts);
    const int N = out.mos_probs.shape[0], C = out.mos_probs.shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(out.mos_probs.shape[2]) *
                               out.mos_probs.shape[3];
    std::vector<std::uint16_t> labels(static_cast<std::size_t>(N) * plane);
    for (int n = 0; n < N; ++n) {
        const double* base = out.mos_probs.data.data() + static_cast<std::int64_t>(n) * C * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            int best = 0;
            double bv = base[i];
            for (int c = 1; c < C; ++c) {
                if (base[c * plane + i] > bv) {  // strict: ties keep the lower index
                    bv = base[c * plane + i];
                    best = c;
                }
            }
            labels[static_cast<std::size_t>(n) * plane + i] = static_cast<std::uint16_t>(best);
        }
    }
    return labels;
}

std::int64_t parameter_count(const Params& p, const std::string& prefix) {
    std::int64_t n = 0;
    for (const auto& [name, t] : p.weights) {
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    }
    return n;
}

}  // namespace subseg
