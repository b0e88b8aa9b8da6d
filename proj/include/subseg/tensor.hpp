#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace subseg {

class Tape;

// Dense row-major f64 tensor. A tensor is either detached (tape == nullptr)
// or recorded as node `node` on a live tape; ops propagate the tape from
// their inputs so teacher forward passes stay tape-free by construction.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }

    bool on_tape() const { return tape != nullptr && node >= 0; }
    bool is_scalar() const { return numel() == 1; }
    double scalar() const;

    // detached value copy
    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> values);
    static Tensor scalar_of(double value);
};

std::string shape_str(const std::vector<int>& shape);

// Append-only record of one forward pass. Nodes hold a backward closure that
// scatters the node's output gradient into its parents' buffers; node ids are
// topologically ordered because the tape only grows.
class Tape {
public:
    Tensor leaf(const Tensor& value, bool requires_grad = true);

    // records a node; `back` receives this node's output gradient
    int add_node(const std::vector<int>& shape,
                 std::function<void(Tape&, const std::vector<double>&)> back);

    // seeds d(loss)/d(loss)=1 and walks the tape in reverse. One shot per tape.
    void backward(const Tensor& loss);

    bool backward_done() const { return backward_done_; }

    // gradient of a leaf (or any recorded node) after backward
    Tensor grad_of(const Tensor& t) const;
    std::vector<double>& grad_buf(int node);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::int64_t numel = 0;
        std::vector<int> shape;
        std::function<void(Tape&, const std::vector<double>&)> back;
        std::vector<double> grad;
    };
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// ---- differentiable ops ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_elem(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor log_elem(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor sum_all(const Tensor& a);                      // -> {1}
Tensor sum_channels(const Tensor& a);                 // NCHW -> {C}
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_batch(const Tensor& a, int start, int count);
Tensor softmax_channel(const Tensor& a);              // over dim 1 of NCHW
// parent channel g sums the subclass channels with group_of[c] == g
Tensor group_channels(const Tensor& a, const std::vector<int>& group_of, int num_groups);
Tensor upsample2x(const Tensor& a);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

enum class NormMode { train, eval };

// per-channel running statistics of a normalization layer
struct RunningStat {
    std::vector<double> mean;
    std::vector<double> var;
    double count = 0;  // number of train-mode batches folded in; 0 = uninitialized

    static RunningStat init(int channels);
    bool initialized() const { return count > 0; }
};

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   RunningStat& stats, NormMode mode, double momentum, double eps,
                   bool update_stats = true);

// ---- verification -------------------------------------------------------

// max over elements of |analytic - central difference| / max(1, |analytic|)
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                  const Tensor& x, double step);

}  // namespace subseg
