#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "subseg/checkpoint.hpp"
#include "subseg/net.hpp"
#include "subseg/rng.hpp"

using namespace subseg;

namespace {

Tensor random_input(const NetConfig& c, int batch, std::uint64_t seed) {
    Tensor x = Tensor::zeros({batch, c.in_channels, c.height, c.width});
    RandomStream rs(seed);
    for (double& v : x.data) v = rs.uniform(-1.0, 1.0);
    return x;
}

NetConfig desk_config() {
    NetConfig c;
    c.in_channels = 1;
    c.base_channels = 8;
    c.num_parent_classes = 6;
    c.num_subclasses = 12;
    c.height = 32;
    c.width = 32;
    return c;
}

NetConfig tiny_config() {
    NetConfig c;
    c.in_channels = 1;
    c.base_channels = 2;
    c.num_parent_classes = 3;
    c.num_subclasses = 5;
    c.height = 16;
    c.width = 16;
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("build produces the documented output shapes") {
    NetConfig c = desk_config();
    ModelState state = build(c, 7);
    Tensor x = random_input(c, 2, 1);
    ForwardOptions opts;
    opts.mode = NormMode::train;
    NetOutput out = forward(state, Member::student, x, opts);
    CHECK(out.mos_probs.shape == std::vector<int>{2, 6, 32, 32});
    CHECK(out.scs_probs.shape == std::vector<int>{2, 12, 32, 32});
    CHECK(out.mos_features.shape == std::vector<int>{2, 8, 32, 32});
}

TEST_CASE("build rejects indivisible image sizes") {
    NetConfig c = desk_config();
    c.height = 20;
    CHECK_THROWS_AS(build(c, 1), std::invalid_argument);
    c = desk_config();
    c.num_subclasses = 4;  // below num_parent_classes
    CHECK_THROWS_AS(build(c, 1), std::invalid_argument);
}

TEST_CASE("teacher equals student immediately after build") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 3);
    Tensor x = random_input(c, 1, 9);
    ForwardOptions opts;  // train-mode stats, no updates: purely a function of params
    NetOutput s = forward(state, Member::student, x, opts);
    NetOutput t = forward(state, Member::teacher, x, opts);
    CHECK(s.mos_probs.data == t.mos_probs.data);
    CHECK(s.scs_probs.data == t.scs_probs.data);
}

TEST_CASE("decoders are twins except for head width") {
    NetConfig c = desk_config();
    ModelState state = build(c, 5);
    std::int64_t mos = parameter_count(state.student, "mos/");
    std::int64_t scs = parameter_count(state.student, "scs/");
    // heads: base*1*1 kernel per class plus bias
    std::int64_t mos_head = static_cast<std::int64_t>(c.num_parent_classes) * (c.base_channels + 1);
    std::int64_t scs_head = static_cast<std::int64_t>(c.num_subclasses) * (c.base_channels + 1);
    CHECK(mos - mos_head == scs - scs_head);
}

TEST_CASE("forward outputs are channel-normalized and eval is pure") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 11);
    Tensor x = random_input(c, 2, 12);
    ForwardOptions train_opts;
    train_opts.update_stats = true;
    forward(state, Member::student, x, train_opts);

    ForwardOptions eval_opts;
    eval_opts.mode = NormMode::eval;
    NetOutput a = forward(state, Member::student, x, eval_opts);
    NetOutput b = forward(state, Member::student, x, eval_opts);
    CHECK(a.mos_probs.data == b.mos_probs.data);
    CHECK(a.scs_probs.data == b.scs_probs.data);

    const int C = c.num_parent_classes, plane = c.height * c.width;
    for (int n = 0; n < 2; ++n)
        for (int px = 0; px < plane; ++px) {
            double s = 0.0;
            for (int ch = 0; ch < C; ++ch) s += a.mos_probs.data[(n * C + ch) * plane + px];
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
}

TEST_CASE("perturbing the SCS decoder leaves MoS output unchanged") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 13);
    Tensor x = random_input(c, 1, 14);
    ForwardOptions opts;
    NetOutput before = forward(state, Member::student, x, opts);
    for (auto& [name, t] : state.student.weights) {
        if (name.rfind("scs/", 0) == 0) {
            for (double& v : t.data) v += 0.37;
        }
    }
    NetOutput after = forward(state, Member::student, x, opts);
    CHECK(before.mos_probs.data == after.mos_probs.data);
    CHECK(before.scs_probs.data != after.scs_probs.data);
}

TEST_CASE("gradient routing between the two heads") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 17);
    Tensor x = random_input(c, 1, 18);

    auto head_loss = [&](bool use_mos) {
        Tape tape;
        std::map<std::string, Tensor> leaves;
        ForwardOptions opts;
        opts.tape = &tape;
        opts.leaves = &leaves;
        NetOutput out = forward(state, Member::student, x, opts);
        Tensor target = tape.leaf(
            Tensor::full((use_mos ? out.mos_probs : out.scs_probs).shape, 0.5), false);
        Tensor loss = sum_all(mul(use_mos ? out.mos_probs : out.scs_probs, target));
        tape.backward(loss);
        std::map<std::string, double> norms;
        for (const auto& [name, leaf] : leaves) {
            double m = 0.0;
            for (double v : tape.grad_of(leaf).data) m = std::max(m, std::abs(v));
            norms[name] = m;
        }
        return norms;
    };

    auto mos_norms = head_loss(true);
    double enc_max = 0.0;
    for (const auto& [name, m] : mos_norms) {
        if (name.rfind("scs/", 0) == 0) CHECK(m == 0.0);
        if (name.rfind("enc/", 0) == 0) enc_max = std::max(enc_max, m);
    }
    CHECK(enc_max > 0.0);

    auto scs_norms = head_loss(false);
    enc_max = 0.0;
    for (const auto& [name, m] : scs_norms) {
        if (name.rfind("mos/", 0) == 0) CHECK(m == 0.0);
        if (name.rfind("enc/", 0) == 0) enc_max = std::max(enc_max, m);
    }
    CHECK(enc_max > 0.0);
}

TEST_CASE("ema_update identities and geometric decay") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 19);
    for (auto& [name, t] : state.student.weights)
        for (double& v : t.data) v = 0.0;
    for (auto& [name, t] : state.teacher.weights)
        for (double& v : t.data) v = 1.0;

    ModelState snap = state;
    ema_update(snap, 1.0);  // teacher untouched
    for (const auto& [name, t] : snap.teacher.weights)
        for (double v : t.data) CHECK(v == 1.0);

    snap = state;
    ema_update(snap, 0.0);  // teacher becomes the student
    for (const auto& [name, t] : snap.teacher.weights)
        for (double v : t.data) CHECK(v == 0.0);

    for (int t = 0; t < 100; ++t) ema_update(state, 0.99);
    double want = std::pow(0.99, 100);
    CHECK(want == doctest::Approx(0.3660323).epsilon(1e-6));
    for (const auto& [name, t] : state.teacher.weights)
        for (double v : t.data) CHECK(std::abs(v - want) <= 1e-12);

    CHECK_THROWS_AS(ema_update(state, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(ema_update(state, -0.1), std::invalid_argument);
}

TEST_CASE("inference uses only the teacher MoS path") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 23);
    Tensor x = random_input(c, 2, 24);
    ForwardOptions warm;
    warm.update_stats = true;
    forward(state, Member::student, x, warm);
    ema_update(state, 0.0);  // give the teacher initialized stats

    auto labels = inference(state, x);
    REQUIRE(labels.size() == static_cast<std::size_t>(2 * c.height * c.width));
    for (auto v : labels) CHECK(v < c.num_parent_classes);

    // matches the argmax of the teacher's eval-mode MoS probabilities
    ForwardOptions eval_opts;
    eval_opts.mode = NormMode::eval;
    NetOutput out = forward(state, Member::teacher, x, eval_opts);
    const int C = c.num_parent_classes, plane = c.height * c.width;
    for (int n = 0; n < 2; ++n)
        for (int px = 0; px < plane; ++px) {
            int best = 0;
            double bv = out.mos_probs.data[(n * C + 0) * plane + px];
            for (int ch = 1; ch < C; ++ch) {
                double v = out.mos_probs.data[(n * C + ch) * plane + px];
                if (v > bv) {
                    bv = v;
                    best = ch;
                }
            }
            CHECK(labels[n * plane + px] == best);
        }

    // pruning: zeroing the teacher SCS decoder cannot change inference
    for (auto& [name, t] : state.teacher.weights) {
        if (name.rfind("scs/", 0) == 0)
            for (double& v : t.data) v = 0.0;
    }
    CHECK(inference(state, x) == labels);
}

TEST_CASE("checkpoint round-trips losslessly") {
    NetConfig c = tiny_config();
    ModelState state = build(c, 29);
    Tensor x = random_input(c, 1, 30);
    ForwardOptions warm;
    warm.update_stats = true;
    forward(state, Member::student, x, warm);
    ema_update(state, 0.5);
    state.step = 42;

    std::string p1 = "ckpt_roundtrip_a.basc";
    std::string p2 = "ckpt_roundtrip_b.basc";
    write_checkpoint(p1, pack_model(state));
    ModelState loaded = unpack_model(read_checkpoint(p1), c);
    CHECK(loaded.step == 42);
    write_checkpoint(p2, pack_model(loaded));
    CHECK(read_file(p1) == read_file(p2));
    CHECK(!read_file(p1).empty());

    ForwardOptions opts;
    NetOutput a = forward(state, Member::teacher, x, opts);
    NetOutput b = forward(loaded, Member::teacher, x, opts);
    CHECK(a.mos_probs.data == b.mos_probs.data);

    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("checkpoint reader rejects foreign files") {
    std::string path = "ckpt_bogus.bin";
    {
        std::ofstream os(path, std::ios::binary);
        os << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(read_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}
