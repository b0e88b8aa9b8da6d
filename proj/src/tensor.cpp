#include "subseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace subseg {

namespace {

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tape != nullptr && tape != t->tape) {
            throw std::invalid_argument("op inputs are recorded on different tapes");
        }
        tape = t->tape;
    }
    return tape;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
    }
}

void check_4d(const Tensor& a, const char* op) {
    if (a.shape.size() != 4) {
        throw std::invalid_argument(std::string(op) + ": expected 4-d NCHW tensor, got " +
                                    shape_str(a.shape));
    }
}

Tensor make_result(std::vector<int> shape, std::vector<double> data, Tape* tape) {
    Tensor out;
    out.shape = std::move(shape);
    out.data = std::move(data);
    out.tape = tape;
    out.requires_grad = tape != nullptr;
    return out;
}

void accum(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

double Tensor::scalar() const {
    if (numel() != 1) {
        throw std::invalid_argument("scalar(): tensor has shape " + shape_str(shape));
    }
    return data[0];
}

Tensor Tensor::zeros(std::vector<int> shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t;
    t.shape = std::move(shape);
    std::int64_t n = t.numel();
    if (n < 0) throw std::invalid_argument("negative tensor extent in " + shape_str(t.shape));
    t.data.assign(static_cast<std::size_t>(n), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shape);
    if (t.numel() != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("from(): data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(t.shape));
    }
    t.data = std::move(values);
    return t;
}

Tensor Tensor::scalar_of(double value) { return from({1}, {value}); }

// ---- Tape ----------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value, bool requires_grad) {
    Tensor t = value.detached();
    t.requires_grad = requires_grad;
    if (requires_grad) {
        t.tape = this;
        t.node = add_node(t.shape, nullptr);
    }
    return t;
}

int Tape::add_node(const std::vector<int>& shape,
                   std::function<void(Tape&, const std::vector<double>&)> back) {
    Node nd;
    nd.shape = shape;
    nd.numel = 1;
    for (int e : shape) nd.numel *= e;
    nd.back = std::move(back);
    nodes_.push_back(std::move(nd));
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buf(int node) {
    Node& nd = nodes_.at(static_cast<std::size_t>(node));
    if (nd.grad.empty()) nd.grad.assign(static_cast<std::size_t>(nd.numel), 0.0);
    return nd.grad;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.on_tape() || loss.tape != this) {
        throw std::invalid_argument("backward: loss tensor is detached from this tape");
    }
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
    }
    if (backward_done_) {
        throw std::runtime_error("backward: tape already consumed by a previous backward");
    }
    backward_done_ = true;
    grad_buf(loss.node)[0] = 1.0;
    for (int i = loss.node; i >= 0; --i) {
        Node& nd = nodes_[static_cast<std::size_t>(i)];
        if (!nd.back || nd.grad.empty()) continue;
        nd.back(*this, nd.grad);
    }
}

Tensor Tape::grad_of(const Tensor& t) const {
    if (!t.on_tape() || t.tape != this) {
        throw std::invalid_argument("grad_of: tensor is not recorded on this tape");
    }
    if (!backward_done_) throw std::runtime_error("grad_of: backward has not run");
    const Node& nd = nodes_.at(static_cast<std::size_t>(t.node));
    Tensor g;
    g.shape = nd.shape;
    if (nd.grad.empty()) {
        g.data.assign(static_cast<std::size_t>(nd.numel), 0.0);
    } else {
        g.data = nd.grad;
    }
    return g;
}

// ---- elementwise ops ------------------------------------------------------

namespace {

// shared skeleton for same-shape binary ops
template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd make_back) {
    check_same_shape(a, b, name);
    Tape* tape = common_tape({&a, &b});
    std::size_t n = a.data.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data[i], b.data[i]);
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        r.node = tape->add_node(r.shape, make_back(a, b));
    }
    return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](const Tensor& a, const Tensor& b) {
            int pa = a.node, pb = b.node;
            return [pa, pb](Tape& t, const std::vector<double>& g) {
                if (pa >= 0) accum(t.grad_buf(pa), g);
                if (pb >= 0) accum(t.grad_buf(pb), g);
            };
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](const Tensor& a, const Tensor& b) {
            int pa = a.node, pb = b.node;
            return [pa, pb](Tape& t, const std::vector<double>& g) {
                if (pa >= 0) accum(t.grad_buf(pa), g);
                if (pb >= 0) {
                    auto& gb = t.grad_buf(pb);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                }
            };
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](const Tensor& a, const Tensor& b) {
            int pa = a.node, pb = b.node;
            std::vector<double> av = pb >= 0 ? a.data : std::vector<double>{};
            std::vector<double> bv = pa >= 0 ? b.data : std::vector<double>{};
            return [pa, pb, av = std::move(av), bv = std::move(bv)](Tape& t,
                                                                    const std::vector<double>& g) {
                if (pa >= 0) {
                    auto& ga = t.grad_buf(pa);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                }
                if (pb >= 0) {
                    auto& gb = t.grad_buf(pb);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                }
            };
        });
}

Tensor div_elem(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](const Tensor& a, const Tensor& b) {
            int pa = a.node, pb = b.node;
            std::vector<double> av = a.data;
            std::vector<double> bv = b.data;
            return [pa, pb, av = std::move(av), bv = std::move(bv)](Tape& t,
                                                                    const std::vector<double>& g) {
                if (pa >= 0) {
                    auto& ga = t.grad_buf(pa);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
                }
                if (pb >= 0) {
                    auto& gb = t.grad_buf(pb);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            };
        });
}

Tensor scale(const Tensor& a, double s) {
    Tape* tape = common_tape({&a});
    std::vector<double> out(a.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * s;
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        r.node = tape->add_node(r.shape, [pa, s](Tape& t, const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return r;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tape* tape = common_tape({&a});
    std::vector<double> out(a.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] + s;
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        r.node = tape->add_node(r.shape, [pa](Tape& t, const std::vector<double>& g) {
            accum(t.grad_buf(pa), g);
        });
    }
    return r;
}

Tensor relu(const Tensor& a) {
    Tape* tape = common_tape({&a});
    std::vector<double> out(a.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        std::vector<double> av = a.data;
        r.node = tape->add_node(r.shape, [pa, av = std::move(av)](Tape& t,
                                                                  const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] > 0.0) ga[i] += g[i];
        });
    }
    return r;
}

Tensor log_elem(const Tensor& a) {
    Tape* tape = common_tape({&a});
    std::vector<double> out(a.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data[i]);
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        std::vector<double> av = a.data;
        r.node = tape->add_node(r.shape, [pa, av = std::move(av)](Tape& t,
                                                                  const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
        });
    }
    return r;
}

Tensor clamp_min(const Tensor& a, double lo) {
    Tape* tape = common_tape({&a});
    std::vector<double> out(a.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data[i], lo);
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        std::vector<double> av = a.data;
        r.node = tape->add_node(r.shape, [pa, lo, av = std::move(av)](
                                             Tape& t, const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] > lo) ga[i] += g[i];
        });
    }
    return r;
}

// ---- reductions, shape ops -------------------------------------------------

Tensor sum_all(const Tensor& a) {
    Tape* tape = common_tape({&a});
    double s = 0.0;
    for (double v : a.data) s += v;
    Tensor r = make_result({1}, {s}, tape);
    if (tape) {
        int pa = a.node;
        std::size_t n = a.data.size();
        r.node = tape->add_node(r.shape, [pa, n](Tape& t, const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
        });
    }
    return r;
}

Tensor sum_channels(const Tensor& a) {
    check_4d(a, "sum_channels");
    Tape* tape = common_tape({&a});
    const int N = a.shape[0], C = a.shape[1], H = a.shape[2], W = a.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(C), 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = a.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double s = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) s += p[i];
            out[static_cast<std::size_t>(c)] += s;
        }
    Tensor r = make_result({C}, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        r.node = tape->add_node(r.shape, [pa, N, C, plane](Tape& t,
                                                           const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double* p = ga.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                    double gv = g[static_cast<std::size_t>(c)];
                    for (std::int64_t i = 0; i < plane; ++i) p[i] += gv;
                }
        });
    }
    return r;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_4d(a, "concat_channels");
    check_4d(b, "concat_channels");
    if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3]) {
        throw std::invalid_argument("concat_channels: non-channel dims differ, " +
                                    shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    Tape* tape = common_tape({&a, &b});
    const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1], H = a.shape[2], W = a.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * (Ca + Cb) * plane);
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data.data() + static_cast<std::int64_t>(n) * Ca * plane, Ca * plane,
                    out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane);
        std::copy_n(b.data.data() + static_cast<std::int64_t>(n) * Cb * plane, Cb * plane,
                    out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane + Ca * plane);
    }
    Tensor r = make_result({N, Ca + Cb, H, W}, std::move(out), tape);
    if (tape) {
        int pa = a.node, pb = b.node;
        r.node = tape->add_node(
            r.shape, [pa, pb, N, Ca, Cb, plane](Tape& t, const std::vector<double>& g) {
                for (int n = 0; n < N; ++n) {
                    const double* gn = g.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane;
                    if (pa >= 0) {
                        auto& ga = t.grad_buf(pa);
                        double* d = ga.data() + static_cast<std::int64_t>(n) * Ca * plane;
                        for (std::int64_t i = 0; i < Ca * plane; ++i) d[i] += gn[i];
                    }
                    if (pb >= 0) {
                        auto& gb = t.grad_buf(pb);
                        double* d = gb.data() + static_cast<std::int64_t>(n) * Cb * plane;
                        for (std::int64_t i = 0; i < Cb * plane; ++i) d[i] += gn[Ca * plane + i];
                    }
                }
            });
    }
    return r;
}

Tensor slice_batch(const Tensor& a, int start, int count) {
    check_4d(a, "slice_batch");
    if (start < 0 || count < 0 || start + count > a.shape[0]) {
        throw std::invalid_argument("slice_batch: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + count) + ") out of batch size " +
                                    std::to_string(a.shape[0]));
    }
    Tape* tape = common_tape({&a});
    const int C = a.shape[1], H = a.shape[2], W = a.shape[3];
    const std::int64_t per = static_cast<std::int64_t>(C) * H * W;
    std::vector<double> out(static_cast<std::size_t>(count) * per);
    std::copy_n(a.data.data() + start * per, count * per, out.data());
    Tensor r = make_result({count, C, H, W}, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        r.node = tape->add_node(r.shape,
                                [pa, start, count, per](Tape& t, const std::vector<double>& g) {
                                    auto& ga = t.grad_buf(pa);
                                    for (std::int64_t i = 0; i < count * per; ++i)
                                        ga[static_cast<std::size_t>(start * per + i)] += g[i];
                                });
    }
    return r;
}

Tensor softmax_channel(const Tensor& a) {
    check_4d(a, "softmax_channel");
    Tape* tape = common_tape({&a});
    const int N = a.shape[0], C = a.shape[1], H = a.shape[2], W = a.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(a.data.size());
    for (int n = 0; n < N; ++n) {
        const double* xn = a.data.data() + static_cast<std::int64_t>(n) * C * plane;
        double* on = out.data() + static_cast<std::int64_t>(n) * C * plane;
        for (std::int64_t px = 0; px < plane; ++px) {
            double mx = xn[px];
            for (int c = 1; c < C; ++c) mx = std::max(mx, xn[c * plane + px]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                double e = std::exp(xn[c * plane + px] - mx);
                on[c * plane + px] = e;
                z += e;
            }
            for (int c = 0; c < C; ++c) on[c * plane + px] /= z;
        }
    }
    Tensor r = make_result(a.shape, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        std::vector<double> probs = r.data;
        r.node = tape->add_node(
            r.shape, [pa, N, C, plane, probs = std::move(probs)](Tape& t,
                                                                 const std::vector<double>& g) {
                auto& ga = t.grad_buf(pa);
                for (int n = 0; n < N; ++n) {
                    const std::int64_t base = static_cast<std::int64_t>(n) * C * plane;
                    for (std::int64_t px = 0; px < plane; ++px) {
                        double dot = 0.0;
                        for (int c = 0; c < C; ++c)
                            dot += probs[base + c * plane + px] * g[base + c * plane + px];
                        for (int c = 0; c < C; ++c) {
                            std::int64_t i = base + c * plane + px;
                            ga[i] += probs[i] * (g[i] - dot);
                        }
                    }
                }
            });
    }
    return r;
}

Tensor group_channels(const Tensor& a, const std::vector<int>& group_of, int num_groups) {
    check_4d(a, "group_channels");
    if (static_cast<int>(group_of.size()) != a.shape[1]) {
        throw std::invalid_argument("group_channels: mapping covers " +
                                    std::to_string(group_of.size()) + " channels, tensor has " +
                                    std::to_string(a.shape[1]));
    }
    for (int g : group_of) {
        if (g < 0 || g >= num_groups) {
            throw std::invalid_argument("group_channels: group id " + std::to_string(g) +
                                        " out of range [0, " + std::to_string(num_groups) + ")");
        }
    }
    Tape* tape = common_tape({&a});
    const int N = a.shape[0], C = a.shape[1], H = a.shape[2], W = a.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * num_groups * plane, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = a.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double* dst =
                out.data() + (static_cast<std::int64_t>(n) * num_groups + group_of[c]) * plane;
            for (std::int64_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
    Tensor r = make_result({N, num_groups, H, W}, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        std::vector<int> gof = group_of;
        r.node = tape->add_node(
            r.shape, [pa, N, C, num_groups, plane, gof = std::move(gof)](
                         Tape& t, const std::vector<double>& g) {
                auto& ga = t.grad_buf(pa);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        double* dst = ga.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                        const double* src =
                            g.data() + (static_cast<std::int64_t>(n) * num_groups + gof[c]) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) dst[i] += src[i];
                    }
            });
    }
    return r;
}

Tensor upsample2x(const Tensor& a) {
    check_4d(a, "upsample2x");
    Tape* tape = common_tape({&a});
    const int N = a.shape[0], C = a.shape[1], H = a.shape[2], W = a.shape[3];
    std::vector<double> out(static_cast<std::size_t>(N) * C * 4 * H * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src =
                a.data.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
            double* dst =
                out.data() + (static_cast<std::int64_t>(n) * C + c) * 4 * H * W;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double v = src[h * W + w];
                    std::int64_t o = static_cast<std::int64_t>(2 * h) * (2 * W) + 2 * w;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + 2 * W] = v;
                    dst[o + 2 * W + 1] = v;
                }
        }
    Tensor r = make_result({N, C, 2 * H, 2 * W}, std::move(out), tape);
    if (tape) {
        int pa = a.node;
        r.node = tape->add_node(r.shape, [pa, N, C, H, W](Tape& t,
                                                          const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double* dst = ga.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
                    const double* src =
                        g.data() + (static_cast<std::int64_t>(n) * C + c) * 4 * H * W;
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            std::int64_t o = static_cast<std::int64_t>(2 * h) * (2 * W) + 2 * w;
                            dst[h * W + w] += src[o] + src[o + 1] + src[o + 2 * W] +
                                              src[o + 2 * W + 1];
                        }
                }
        });
    }
    return r;
}

// ---- conv2d ----------------------------------------------------------------

namespace {

struct ConvDims {
    int N, Cin, H, W, O, K, Ho, Wo, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    check_4d(x, "conv2d input");
    check_4d(w, "conv2d kernel");
    if (b.shape.size() != 1) {
        throw std::invalid_argument("conv2d: bias must be 1-d, got " + shape_str(b.shape));
    }
    if (w.shape[2] != w.shape[3]) {
        throw std::invalid_argument("conv2d: kernel must be square, got " + shape_str(w.shape));
    }
    if (w.shape[2] % 2 == 0) {
        throw std::invalid_argument("conv2d: kernel spatial size must be odd, got " +
                                    std::to_string(w.shape[2]));
    }
    if (w.shape[1] != x.shape[1]) {
        throw std::invalid_argument("conv2d: input channel dim " + std::to_string(x.shape[1]) +
                                    " != kernel input channel dim " + std::to_string(w.shape[1]));
    }
    if (b.shape[0] != w.shape[0]) {
        throw std::invalid_argument("conv2d: bias extent " + std::to_string(b.shape[0]) +
                                    " != kernel output channel dim " + std::to_string(w.shape[0]));
    }
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
    ConvDims d;
    d.N = x.shape[0];
    d.Cin = x.shape[1];
    d.H = x.shape[2];
    d.W = x.shape[3];
    d.O = w.shape[0];
    d.K = w.shape[2];
    d.stride = stride;
    d.pad = padding;
    d.Ho = (d.H + 2 * padding - d.K) / stride + 1;
    d.Wo = (d.W + 2 * padding - d.K) / stride + 1;
    if (d.H + 2 * padding < d.K || d.W + 2 * padding < d.K) {
        throw std::invalid_argument("conv2d: kernel size " + std::to_string(d.K) +
                                    " exceeds padded input " +
                                    std::to_string(d.H + 2 * padding) + "x" +
                                    std::to_string(d.W + 2 * padding));
    }
    return d;
}

// valid output-column range so that iw = ow*stride - pad + kw stays inside [0, W)
inline void ow_range(int kw, const ConvDims& d, int& lo, int& hi) {
    int min_iw = -d.pad + kw;
    lo = min_iw >= 0 ? 0 : (d.pad - kw + d.stride - 1) / d.stride;
    int max_allowed = d.W - 1 + d.pad - kw;
    hi = max_allowed < 0 ? -1 : std::min(d.Wo - 1, max_allowed / d.stride);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    ConvDims d = conv_dims(x, w, b, stride, padding);
    Tape* tape = common_tape({&x, &w, &b});
    std::vector<double> out(static_cast<std::size_t>(d.N) * d.O * d.Ho * d.Wo);

    for (int n = 0; n < d.N; ++n) {
        for (int o = 0; o < d.O; ++o) {
            double* oplane = out.data() + (static_cast<std::int64_t>(n) * d.O + o) * d.Ho * d.Wo;
            std::fill_n(oplane, d.Ho * d.Wo, b.data[static_cast<std::size_t>(o)]);
            for (int i = 0; i < d.Cin; ++i) {
                const double* xplane =
                    x.data.data() + (static_cast<std::int64_t>(n) * d.Cin + i) * d.H * d.W;
                const double* wbase =
                    w.data.data() + (static_cast<std::int64_t>(o) * d.Cin + i) * d.K * d.K;
                for (int kh = 0; kh < d.K; ++kh) {
                    for (int kw = 0; kw < d.K; ++kw) {
                        double wv = wbase[kh * d.K + kw];
                        int lo, hi;
                        ow_range(kw, d, lo, hi);
                        for (int oh = 0; oh < d.Ho; ++oh) {
                            int ih = oh * d.stride - d.pad + kh;
                            if (ih < 0 || ih >= d.H) continue;
                            const double* xrow = xplane + static_cast<std::int64_t>(ih) * d.W;
                            double* orow = oplane + static_cast<std::int64_t>(oh) * d.Wo;
                            int iw = lo * d.stride - d.pad + kw;
                            for (int ow = lo; ow <= hi; ++ow, iw += d.stride) {
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor r = make_result({d.N, d.O, d.Ho, d.Wo}, std::move(out), tape);
    if (tape) {
        int px = x.node, pw = w.node, pb = b.node;
        std::vector<double> xv = x.data;
        std::vector<double> wv = w.data;
        r.node = tape->add_node(
            r.shape, [px, pw, pb, d, xv = std::move(xv), wv = std::move(wv)](
                         Tape& t, const std::vector<double>& g) {
                if (pb >= 0) {
                    auto& gb = t.grad_buf(pb);
                    for (int n = 0; n < d.N; ++n)
                        for (int o = 0; o < d.O; ++o) {
                            const double* gplane =
                                g.data() + (static_cast<std::int64_t>(n) * d.O + o) * d.Ho * d.Wo;
                            double s = 0.0;
                            for (int i = 0; i < d.Ho * d.Wo; ++i) s += gplane[i];
                            gb[static_cast<std::size_t>(o)] += s;
                        }
                }
                if (pw >= 0) {
                    auto& gw = t.grad_buf(pw);
                    for (int n = 0; n < d.N; ++n)
                        for (int o = 0; o < d.O; ++o) {
                            const double* gplane =
                                g.data() + (static_cast<std::int64_t>(n) * d.O + o) * d.Ho * d.Wo;
                            for (int i = 0; i < d.Cin; ++i) {
                                const double* xplane =
                                    xv.data() +
                                    (static_cast<std::int64_t>(n) * d.Cin + i) * d.H * d.W;
                                double* gwbase =
                                    gw.data() +
                                    (static_cast<std::int64_t>(o) * d.Cin + i) * d.K * d.K;
                                for (int kh = 0; kh < d.K; ++kh)
                                    for (int kw = 0; kw < d.K; ++kw) {
                                        int lo, hi;
                                        ow_range(kw, d, lo, hi);
                                        double s = 0.0;
                                        for (int oh = 0; oh < d.Ho; ++oh) {
                                            int ih = oh * d.stride - d.pad + kh;
                                            if (ih < 0 || ih >= d.H) continue;
                                            const double* xrow =
                                                xplane + static_cast<std::int64_t>(ih) * d.W;
                                            const double* grow =
                                                gplane + static_cast<std::int64_t>(oh) * d.Wo;
                                            int iw = lo * d.stride - d.pad + kw;
                                            for (int ow = lo; ow <= hi; ++ow, iw += d.stride)
                                                s += grow[ow] * xrow[iw];
                                        }
                                        gwbase[kh * d.K + kw] += s;
                                    }
                            }
                        }
                }
                if (px >= 0) {
                    auto& gx = t.grad_buf(px);
                    for (int n = 0; n < d.N; ++n)
                        for (int o = 0; o < d.O; ++o) {
                            const double* gplane =
                                g.data() + (static_cast<std::int64_t>(n) * d.O + o) * d.Ho * d.Wo;
                            for (int i = 0; i < d.Cin; ++i) {
                                double* gxplane =
                                    gx.data() +
                                    (static_cast<std::int64_t>(n) * d.Cin + i) * d.H * d.W;
                                const double* wbase =
                                    wv.data() +
                                    (static_cast<std::int64_t>(o) * d.Cin + i) * d.K * d.K;
                                for (int kh = 0; kh < d.K; ++kh)
                                    for (int kw = 0; kw < d.K; ++kw) {
                                        double wval = wbase[kh * d.K + kw];
                                        int lo, hi;
                                        ow_range(kw, d, lo, hi);
                                        for (int oh = 0; oh < d.Ho; ++oh) {
                                            int ih = oh * d.stride - d.pad + kh;
                                            if (ih < 0 || ih >= d.H) continue;
                                            double* gxrow =
                                                gxplane + static_cast<std::int64_t>(ih) * d.W;
                                            const double* grow =
                                                gplane + static_cast<std::int64_t>(oh) * d.Wo;
                                            int iw = lo * d.stride - d.pad + kw;
                                            for (int ow = lo; ow <= hi; ++ow, iw += d.stride)
                                                gxrow[iw] += grow[ow] * wval;
                                        }
                                    }
                            }
                        }
                }
            });
    }
    return r;
}

// ---- batch normalization -----------------------------------------------------

RunningStat RunningStat::init(int channels) {
    RunningStat rs;
    rs.mean.assign(static_cast<std::size_t>(channels), 0.0);
    rs.var.assign(static_cast<std::size_t>(channels), 1.0);
    rs.count = 0;
    return rs;
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStat& stats,
                   NormMode mode, double momentum, double eps, bool update_stats) {
    check_4d(x, "batchnorm2d");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (eps <= 0.0) throw std::invalid_argument("batchnorm2d: eps must be positive");
    if (gamma.shape != std::vector<int>{C} || beta.shape != std::vector<int>{C}) {
        throw std::invalid_argument("batchnorm2d: gamma/beta must have shape [" +
                                    std::to_string(C) + "]");
    }
    if (static_cast<int>(stats.mean.size()) != C) {
        throw std::invalid_argument("batchnorm2d: running stats cover " +
                                    std::to_string(stats.mean.size()) + " channels, input has " +
                                    std::to_string(C));
    }
    Tape* tape = common_tape({&x, &gamma, &beta});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t m = static_cast<std::int64_t>(N) * plane;  // per-channel sample count
    std::vector<double> out(x.data.size());

    if (mode == NormMode::train) {
        std::vector<double> mu(static_cast<std::size_t>(C), 0.0);
        std::vector<double> var(static_cast<std::size_t>(C), 0.0);
        std::vector<double> inv_sigma(static_cast<std::size_t>(C), 0.0);
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) s += p[i];
            }
            mu[c] = s / static_cast<double>(m);
            double sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    double dlt = p[i] - mu[c];
                    sq += dlt * dlt;
                }
            }
            var[c] = sq / static_cast<double>(m);
            inv_sigma[c] = 1.0 / std::sqrt(var[c] + eps);
        }
        std::vector<double> xhat(x.data.size());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* p = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                double* xh = xhat.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                double* po = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                double gm = gamma.data[static_cast<std::size_t>(c)];
                double bt = beta.data[static_cast<std::size_t>(c)];
                for (std::int64_t i = 0; i < plane; ++i) {
                    xh[i] = (p[i] - mu[c]) * inv_sigma[c];
                    po[i] = gm * xh[i] + bt;
                }
            }
        if (update_stats) {
            for (int c = 0; c < C; ++c) {
                stats.mean[c] = momentum * stats.mean[c] + (1.0 - momentum) * mu[c];
                stats.var[c] = momentum * stats.var[c] + (1.0 - momentum) * var[c];
            }
            stats.count += 1.0;
        }
        Tensor r = make_result(x.shape, std::move(out), tape);
        if (tape) {
            int px = x.node, pg = gamma.node, pb = beta.node;
            std::vector<double> gm = gamma.data;
            r.node = tape->add_node(
                r.shape,
                [px, pg, pb, N, C, plane, m, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma), gm = std::move(gm)](
                    Tape& t, const std::vector<double>& g) {
                    for (int c = 0; c < C; ++c) {
                        // channel-wise sums for the coupled batch-stat terms
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (int n = 0; n < N; ++n) {
                            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                sum_g += g[base + i];
                                sum_gx += g[base + i] * xhat[base + i];
                            }
                        }
                        if (pg >= 0) t.grad_buf(pg)[static_cast<std::size_t>(c)] += sum_gx;
                        if (pb >= 0) t.grad_buf(pb)[static_cast<std::size_t>(c)] += sum_g;
                        if (px >= 0) {
                            auto& gx = t.grad_buf(px);
                            double mean_g = sum_g / static_cast<double>(m);
                            double mean_gx = sum_gx / static_cast<double>(m);
                            double k = gm[static_cast<std::size_t>(c)] * inv_sigma[c];
                            for (int n = 0; n < N; ++n) {
                                const std::int64_t base =
                                    (static_cast<std::int64_t>(n) * C + c) * plane;
                                for (std::int64_t i = 0; i < plane; ++i) {
                                    gx[base + i] +=
                                        k * (g[base + i] - mean_g - xhat[base + i] * mean_gx);
                                }
                            }
                        }
                    }
                });
        }
        return r;
    }

    // eval mode
    if (!stats.initialized()) {
        throw std::runtime_error("batchnorm2d: uninitialized running statistics");
    }
    std::vector<double> inv_sigma(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) inv_sigma[c] = 1.0 / std::sqrt(stats.var[c] + eps);
    std::vector<double> xhat(x.data.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double* xh = xhat.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double* po = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double gm = gamma.data[static_cast<std::size_t>(c)];
            double bt = beta.data[static_cast<std::size_t>(c)];
            double mu = stats.mean[c];
            for (std::int64_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - mu) * inv_sigma[c];
                po[i] = gm * xh[i] + bt;
            }
        }
    Tensor r = make_result(x.shape, std::move(out), tape);
    if (tape) {
        int px = x.node, pg = gamma.node, pb = beta.node;
        std::vector<double> gm = gamma.data;
        r.node = tape->add_node(
            r.shape, [px, pg, pb, N, C, plane, xhat = std::move(xhat),
                      inv_sigma = std::move(inv_sigma), gm = std::move(gm)](
                         Tape& t, const std::vector<double>& g) {
                for (int c = 0; c < C; ++c) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xhat[base + i];
                        }
                    }
                    if (pg >= 0) t.grad_buf(pg)[static_cast<std::size_t>(c)] += sum_gx;
                    if (pb >= 0) t.grad_buf(pb)[static_cast<std::size_t>(c)] += sum_g;
                    if (px >= 0) {
                        auto& gx = t.grad_buf(px);
                        double k = gm[static_cast<std::size_t>(c)] * inv_sigma[c];
                        for (int n = 0; n < N; ++n) {
                            const std::int64_t base =
                                (static_cast<std::int64_t>(n) * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += k * g[base + i];
                        }
                    }
                }
            });
    }
    return r;
}

// ---- finite differences -------------------------------------------------------

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double step) {
    Tape tape;
    Tensor leaf = tape.leaf(x, true);
    Tensor loss = f(tape, leaf);
    if (loss.numel() != 1) {
        throw std::invalid_argument("grad_check: function must return a scalar");
    }
    tape.backward(loss);
    Tensor analytic = tape.grad_of(leaf);

    auto eval = [&f](const Tensor& xv) {
        Tape t;
        Tensor in = t.leaf(xv, false);  // detached: forward value only
        return f(t, in).scalar();
    };

    double worst = 0.0;
    Tensor probe = x.detached();
    for (std::size_t i = 0; i < probe.data.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + step;
        double up = eval(probe);
        probe.data[i] = orig - step;
        double down = eval(probe);
        probe.data[i] = orig;
        double numeric = (up - down) / (2.0 * step);
        double err = std::abs(analytic.data[i] - numeric) /
                     std::max(1.0, std::abs(analytic.data[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace subseg
