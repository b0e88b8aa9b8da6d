#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "subseg/partition.hpp"
#include "subseg/rng.hpp"

using namespace subseg;

namespace {

// Exhaustive oracle: minimal within-cluster squared distance over all
// balanced assignments (sizes in {floor(n/k), ceil(n/k)}).
void enumerate_balanced(std::size_t i, std::vector<int>& assignment,
                        std::vector<int>& sizes, std::size_t n, int k,
                        const std::function<void(const std::vector<int>&)>& visit) {
    if (i == n) {
        visit(assignment);
        return;
    }
    std::size_t q = n / static_cast<std::size_t>(k);
    std::size_t r = n % static_cast<std::size_t>(k);
    for (int c = 0; c < k; ++c) {
        std::size_t cap = q + 1;
        if (static_cast<std::size_t>(sizes[static_cast<std::size_t>(c)]) == cap) continue;
        // feasibility pruning: do not exceed the number of allowed ceil-size clusters
        sizes[static_cast<std::size_t>(c)] += 1;
        std::size_t over = 0;
        for (int j = 0; j < k; ++j)
            if (static_cast<std::size_t>(sizes[static_cast<std::size_t>(j)]) > q) over += 1;
        if (over <= r) {
            assignment[i] = c;
            enumerate_balanced(i + 1, assignment, sizes, n, k, visit);
        }
        sizes[static_cast<std::size_t>(c)] -= 1;
    }
}

double brute_force_optimum(const std::vector<std::vector<double>>& points, int k) {
    std::vector<int> assignment(points.size(), -1);
    std::vector<int> sizes(static_cast<std::size_t>(k), 0);
    double best = std::numeric_limits<double>::infinity();
    enumerate_balanced(0, assignment, sizes, points.size(), k,
                       [&](const std::vector<int>& a) {
                           best = std::min(best, clustering_objective(points, a, k));
                       });
    return best;
}

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t dims,
                                               std::uint64_t seed) {
    RandomStream rs(seed);
    std::vector<std::vector<double>> pts(n, std::vector<double>(dims));
    for (auto& p : pts)
        for (double& v : p) v = rs.uniform(-1.0, 1.0);
    return pts;
}

std::vector<int> random_balanced_assignment(std::size_t n, int k, RandomStream& rs) {
    std::vector<int> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = static_cast<int>(i % static_cast<std::size_t>(k));
    rs.shuffle(a);
    return a;
}

SynthSpec small_spec(std::uint64_t seed, int samples) {
    SynthSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.num_classes = 3;
    spec.samples = samples;
    spec.seed = seed;
    return spec;
}

NetConfig small_net(const SynthSpec& spec) {
    NetConfig nc;
    nc.base_channels = 4;
    nc.height = spec.height;
    nc.width = spec.width;
    nc.num_parent_classes = spec.num_classes + 1;
    nc.num_subclasses = spec.num_classes + 1;
    return nc;
}

TrainConfig small_train() {
    TrainConfig tc;
    tc.batch_size = 2;
    tc.labeled_per_batch = 1;
    tc.learning_rate = 1e-3;
    return tc;
}

}  // namespace

TEST_CASE("allocate_subclass_counts follows the proportional rule") {
    // background plus A:900 B:90 C:10
    auto counts = allocate_subclass_counts({5000, 900, 90, 10});
    CHECK(counts == std::vector<int>{1, 90, 9, 1});

    auto equal = allocate_subclass_counts({100, 40, 40, 40});
    CHECK(equal == std::vector<int>{1, 1, 1, 1});

    auto close = allocate_subclass_counts({0, 100, 100, 95});
    CHECK(close == std::vector<int>{1, 1, 1, 1});  // round(100/95) = 1

    CHECK_THROWS_WITH_AS(allocate_subclass_counts({10, 5, 0, 3}),
                         doctest::Contains("class 2"), std::invalid_argument);
}

TEST_CASE("balanced_kmeans degenerate and hand-checkable cases") {
    auto pts = random_points(6, 3, 41);
    ClusterResult one = balanced_kmeans(pts, 1, 7, 50);
    CHECK(std::all_of(one.assignment.begin(), one.assignment.end(),
                      [](int a) { return a == 0; }));
    for (std::size_t d = 0; d < 3; ++d) {
        double mean = 0.0;
        for (const auto& p : pts) mean += p[d];
        mean /= 6.0;
        CHECK(one.centroids[0][d] == doctest::Approx(mean).epsilon(1e-12));
    }

    // two tight pairs far apart
    std::vector<std::vector<double>> quad = {{0, 0}, {0, 1}, {10, 0}, {10, 1}};
    ClusterResult two = balanced_kmeans(quad, 2, 3, 50);
    CHECK(two.assignment[0] == two.assignment[1]);
    CHECK(two.assignment[2] == two.assignment[3]);
    CHECK(two.assignment[0] != two.assignment[2]);

    CHECK_THROWS_AS(balanced_kmeans(quad, 5, 1, 10), std::invalid_argument);
    CHECK_THROWS_AS(balanced_kmeans(quad, 0, 1, 10), std::invalid_argument);
}

TEST_CASE("balanced_kmeans sizes are exactly floor/ceil of n/k") {
    RandomStream rs(55);
    for (int trial = 0; trial < 25; ++trial) {
        std::size_t n = 5 + rs.below(60);
        int k = 1 + static_cast<int>(rs.below(std::min<std::uint64_t>(n, 7)));
        auto pts = random_points(n, 2 + rs.below(4), 500 + trial);
        ClusterResult res = balanced_kmeans(pts, k, 600 + trial, 50);
        std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
        for (int a : res.assignment) {
            REQUIRE(a >= 0);
            REQUIRE(a < k);
            sizes[static_cast<std::size_t>(a)] += 1;
        }
        std::size_t q = n / static_cast<std::size_t>(k);
        for (std::size_t s : sizes) {
            CHECK(s >= q);
            CHECK(s <= q + 1);
        }
    }
}

TEST_CASE("balanced_kmeans quality versus the exhaustive oracle") {
    RandomStream rs(77);
    for (int trial = 0; trial < 24; ++trial) {
        std::size_t n = 4 + rs.below(5);  // up to 8
        int k = 2 + static_cast<int>(rs.below(2));
        if (static_cast<std::size_t>(k) > n) k = static_cast<int>(n);
        auto pts = random_points(n, 2, 7000 + trial);
        ClusterResult res = balanced_kmeans(pts, k, 8000 + trial, 50);
        double got = clustering_objective(pts, res.assignment, k);
        double best = brute_force_optimum(pts, k);
        CHECK(got <= 1.25 * best + 1e-12);

        double random_mean = 0.0;
        RandomStream ra(9000 + trial);
        for (int r = 0; r < 100; ++r) {
            auto a = random_balanced_assignment(n, k, ra);
            random_mean += clustering_objective(pts, a, k);
        }
        random_mean /= 100.0;
        CHECK(got <= random_mean + 1e-12);
    }
}

TEST_CASE("plain_kmeans converges to valid unconstrained clusters") {
    auto pts = random_points(40, 3, 91);
    ClusterResult res = plain_kmeans(pts, 4, 5, 50);
    for (int a : res.assignment) {
        CHECK(a >= 0);
        CHECK(a < 4);
    }
    // Lloyd iterations never increase the objective relative to a random start
    RandomStream ra(92);
    auto rand_assign = random_balanced_assignment(40, 4, ra);
    CHECK(clustering_objective(pts, res.assignment, 4) <=
          clustering_objective(pts, rand_assign, 4) + 1e-12);
}

TEST_CASE("pretrain_backbone learns and is reproducible") {
    SynthSpec spec = small_spec(101, 4);
    DatasetContainer labeled = generate(spec);
    NetConfig nc = small_net(spec);
    TrainConfig tc = small_train();

    ModelState fresh = pretrain_backbone(labeled, nc, tc, 0, 11);
    ModelState reference = build(nc, 11);
    for (const auto& [name, t] : fresh.student.weights) {
        CHECK(t.data == reference.student.weights.at(name).data);
    }

    // training moves the supervised loss down
    TrainConfig probe = tc;
    probe.iterations = 120;
    probe.seed = 11;
    probe.scs_enabled = false;
    probe.weights = LossWeights{0.0, 0.0, 0.0, 0.0};
    probe.labeled_per_batch = probe.batch_size;
    probe.alpha = 0.0;
    DatasetContainer empty;
    empty.height = labeled.height;
    empty.width = labeled.width;
    empty.num_classes = labeled.num_classes;
    FitResult run = fit(labeled, empty, nullptr, nc, probe);
    double first = run.losses.front().sup;
    double last10 = 0.0;
    for (std::size_t i = run.losses.size() - 10; i < run.losses.size(); ++i)
        last10 += run.losses[i].sup;
    last10 /= 10.0;
    CHECK(last10 < first);

    ModelState a = pretrain_backbone(labeled, nc, tc, 25, 13);
    ModelState b = pretrain_backbone(labeled, nc, tc, 25, 13);
    for (const auto& [name, t] : a.student.weights) {
        CHECK(t.data == b.student.weights.at(name).data);
    }
}

TEST_CASE("extract_features groups decoder features by class") {
    SynthSpec spec = small_spec(103, 3);
    DatasetContainer labeled = generate(spec);
    NetConfig nc = small_net(spec);
    ModelState backbone = pretrain_backbone(labeled, nc, small_train(), 30, 3);

    PixelFeatures pf = extract_features(backbone, labeled);
    CHECK(pf.channels == nc.base_channels);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(labeled.num_classes), 0);
    for (const Sample& s : labeled.samples)
        for (auto v : s.labels) counts[v] += 1;
    for (int c = 0; c < labeled.num_classes; ++c) {
        CHECK(static_cast<std::int64_t>(pf.by_class[static_cast<std::size_t>(c)].size()) ==
              counts[static_cast<std::size_t>(c)]);
        CHECK(pf.by_class[static_cast<std::size_t>(c)].size() ==
              pf.origin_by_class[static_cast<std::size_t>(c)].size());
    }

    PixelFeatures again = extract_features(backbone, labeled);
    for (int c = 0; c < labeled.num_classes; ++c) {
        CHECK(pf.by_class[static_cast<std::size_t>(c)] ==
              again.by_class[static_cast<std::size_t>(c)]);
    }
}

TEST_CASE("build_partition refines the parent labeling") {
    SynthSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.num_classes = 3;
    spec.area_ratio = 3.0;
    spec.samples = 4;
    spec.seed = 107;
    DatasetContainer labeled = generate(spec);
    NetConfig nc = small_net(spec);
    ModelState backbone = pretrain_backbone(labeled, nc, small_train(), 40, 5);

    PartitionOptions opts;
    PartitionResult pr = build_partition(backbone, labeled, opts, 9);
    pr.table.validate();

    // refinement: parent_of(y_sub) == y_L at every pixel
    for (std::size_t img = 0; img < labeled.samples.size(); ++img) {
        for (std::size_t px = 0; px < labeled.samples[img].labels.size(); ++px) {
            int sub = pr.subclass_maps[img][px];
            CHECK(pr.table.parent_of[static_cast<std::size_t>(sub)] ==
                  labeled.samples[img].labels[px]);
        }
    }

    // balance over the clustered core (cap covers everything here): per class,
    // subclass pixel counts differ by at most 1
    std::map<int, std::int64_t> sub_counts;
    for (std::size_t img = 0; img < pr.subclass_maps.size(); ++img)
        for (auto v : pr.subclass_maps[img]) sub_counts[v] += 1;
    for (int parent = 1; parent < pr.table.num_parents(); ++parent) {
        std::int64_t lo = -1, hi = -1;
        for (int s : pr.table.children_of[static_cast<std::size_t>(parent)]) {
            std::int64_t n = sub_counts[s];
            lo = lo < 0 ? n : std::min(lo, n);
            hi = hi < 0 ? n : std::max(hi, n);
        }
        CHECK(hi - lo <= 1);
    }

    // subclass pixel counts vary less than parent pixel counts
    auto coeff_var = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= v.size();
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        return std::sqrt(var / v.size()) / mean;
    };
    std::vector<double> parent_sizes, subclass_sizes;
    std::map<int, std::int64_t> parent_counts;
    for (const Sample& s : labeled.samples)
        for (auto v : s.labels)
            if (v != 0) parent_counts[v] += 1;
    for (auto& [cls, n] : parent_counts) parent_sizes.push_back(static_cast<double>(n));
    for (auto& [sub, n] : sub_counts)
        if (pr.table.parent_of[static_cast<std::size_t>(sub)] != 0)
            subclass_sizes.push_back(static_cast<double>(n));
    CHECK(coeff_var(subclass_sizes) < coeff_var(parent_sizes));

    // determinism: same seed, same table and maps
    PartitionResult again = build_partition(backbone, labeled, opts, 9);
    CHECK(again.table.parent_of == pr.table.parent_of);
    CHECK(again.subclass_maps == pr.subclass_maps);
}

TEST_CASE("degenerate partition equals the parent labeling") {
    // equal expected areas: every K_c collapses to 1
    SynthSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.num_classes = 3;
    spec.area_ratio = 1.0;
    spec.fill_fraction = 0.3;
    spec.samples = 3;
    spec.seed = 109;
    DatasetContainer labeled = generate(spec);
    NetConfig nc = small_net(spec);
    ModelState backbone = pretrain_backbone(labeled, nc, small_train(), 20, 7);
    PartitionResult pr = build_partition(backbone, labeled, PartitionOptions{}, 21);
    if (pr.table.num_subclasses() == labeled.num_classes) {
        for (std::size_t img = 0; img < labeled.samples.size(); ++img) {
            for (std::size_t px = 0; px < labeled.samples[img].labels.size(); ++px) {
                CHECK(pr.subclass_maps[img][px] == labeled.samples[img].labels[px]);
            }
        }
    }
}

TEST_CASE("partition artifact round-trips through the filesystem") {
    SynthSpec spec = small_spec(113, 3);
    DatasetContainer labeled = generate(spec);
    NetConfig nc = small_net(spec);
    ModelState backbone = pretrain_backbone(labeled, nc, small_train(), 20, 3);
    PartitionResult pr = build_partition(backbone, labeled, PartitionOptions{}, 5);

    std::string dir = "partition_artifact_test";
    write_partition(dir, pr, labeled);
    PartitionArtifact artifact = read_partition(dir);
    CHECK(artifact.table.parent_of == pr.table.parent_of);
    CHECK(artifact.labeled_with_sub.num_subclasses == pr.table.num_subclasses());
    for (std::size_t i = 0; i < labeled.samples.size(); ++i) {
        CHECK(artifact.labeled_with_sub.samples[i].subclass_labels == pr.subclass_maps[i]);
    }
    std::filesystem::remove_all(dir);
}
