#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "subseg/cli.hpp"
#include "subseg/config.hpp"

namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
    std::vector<const char*> argv = {"subseg"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return subseg::run_cli(static_cast<int>(argv.size()), argv.data());
}

struct CaptureStderr {
    std::ostringstream sink;
    std::streambuf* old;
    CaptureStderr() : old(std::cerr.rdbuf(sink.rdbuf())) {}
    ~CaptureStderr() { std::cerr.rdbuf(old); }
    std::string text() const { return sink.str(); }
};

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    os << text;
}

const std::string kRoot = "cli_test_work";

std::string tiny_config() {
    std::string path = kRoot + "/tiny.cfg";
    write_text(path,
               "synth.height=16\n"
               "synth.width=16\n"
               "synth.num_classes=3\n"
               "synth.samples=3\n"
               "net.base_channels=2\n"
               "train.batch_size=3\n"
               "train.labeled_per_batch=1\n"
               "train.learning_rate=0.001\n"
               "train.iterations=8\n"
               "train.checkpoint_every=4\n"
               "pretrain.iterations=10\n");
    return path;
}

}  // namespace

TEST_CASE("synth is deterministic per seed") {
    fs::create_directories(kRoot);
    std::string cfg = tiny_config();
    REQUIRE(run({"synth", "--config", cfg, "--seed", "7", "--out", kRoot + "/synth_a"}) == 0);
    REQUIRE(run({"synth", "--config", cfg, "--seed", "7", "--out", kRoot + "/synth_b"}) == 0);
    CHECK(read_file(kRoot + "/synth_a/data.segd") == read_file(kRoot + "/synth_b/data.segd"));
    CHECK(!read_file(kRoot + "/synth_a/data.segd").empty());
    CHECK(fs::exists(kRoot + "/synth_a/manifest.json"));

    REQUIRE(run({"synth", "--config", cfg, "--seed", "8", "--out", kRoot + "/synth_c"}) == 0);
    CHECK(read_file(kRoot + "/synth_a/data.segd") != read_file(kRoot + "/synth_c/data.segd"));
}

TEST_CASE("train refuses to run without the partition stage") {
    fs::create_directories(kRoot);
    std::string cfg = tiny_config();
    REQUIRE(run({"synth", "--config", cfg, "--seed", "1", "--out", kRoot + "/lab"}) == 0);
    REQUIRE(run({"synth", "--config", cfg, "--seed", "2", "--out", kRoot + "/unlab"}) == 0);
    CaptureStderr capture;
    int rc = run({"train", "--config", cfg, "--labeled", kRoot + "/lab/data.segd", "--unlabeled",
                  kRoot + "/unlab/data.segd", "--out", kRoot + "/train_fail"});
    CHECK(rc != 0);
    CHECK(capture.text().find("error missing_stage:") != std::string::npos);
    CHECK(capture.text().find("--partition") != std::string::npos);
}

TEST_CASE("config contradictions and unknown keys fail cleanly") {
    fs::create_directories(kRoot);
    std::string bad = kRoot + "/bad.cfg";
    write_text(bad, "train.batch_size=2\ntrain.labeled_per_batch=2\nsynth.samples=2\n"
                    "synth.height=16\nsynth.width=16\nsynth.num_classes=2\nnet.base_channels=2\n"
                    "train.iterations=2\npretrain.iterations=2\n");
    REQUIRE(run({"synth", "--config", bad, "--seed", "3", "--out", kRoot + "/bad_lab"}) == 0);
    REQUIRE(run({"synth", "--config", bad, "--seed", "4", "--out", kRoot + "/bad_unlab"}) == 0);
    {
        CaptureStderr capture;
        int rc = run({"train", "--config", bad, "--labeled", kRoot + "/bad_lab/data.segd",
                      "--unlabeled", kRoot + "/bad_unlab/data.segd", "--partition",
                      kRoot + "/nowhere", "--out", kRoot + "/bad_train"});
        CHECK(rc != 0);
        CHECK(capture.text().find("error") != std::string::npos);
    }
    std::string unknown = kRoot + "/unknown.cfg";
    write_text(unknown, "train.batch_sz=4\n");
    {
        CaptureStderr capture;
        int rc = run({"synth", "--config", unknown, "--out", kRoot + "/unknown_out"});
        CHECK(rc != 0);
        CHECK(capture.text().find("unknown key") != std::string::npos);
    }
    {
        CaptureStderr capture;
        int rc = run({"eval", "--checkpoint", kRoot + "/does_not_exist.basc", "--data",
                      kRoot + "/bad_lab/data.segd", "--out", kRoot + "/eval_fail"});
        CHECK(rc != 0);
        CHECK(capture.text().find("error missing_file:") != std::string::npos);
    }
}

TEST_CASE("full pipeline runs end to end at toy scale") {
    fs::create_directories(kRoot);
    std::string cfg = tiny_config();
    REQUIRE(run({"synth", "--config", cfg, "--seed", "11", "--out", kRoot + "/p_lab"}) == 0);
    REQUIRE(run({"synth", "--config", cfg, "--seed", "12", "--out", kRoot + "/p_unlab"}) == 0);
    REQUIRE(run({"synth", "--config", cfg, "--seed", "13", "--out", kRoot + "/p_test"}) == 0);

    REQUIRE(run({"pretrain", "--config", cfg, "--labeled", kRoot + "/p_lab/data.segd", "--seed",
                 "5", "--out", kRoot + "/p_backbone"}) == 0);
    CHECK(fs::exists(kRoot + "/p_backbone/backbone.basc"));

    REQUIRE(run({"partition", "--config", cfg, "--labeled", kRoot + "/p_lab/data.segd",
                 "--checkpoint", kRoot + "/p_backbone/backbone.basc", "--seed", "6", "--out",
                 kRoot + "/p_part"}) == 0);
    CHECK(fs::exists(kRoot + "/p_part/table.txt"));
    CHECK(fs::exists(kRoot + "/p_part/labeled_sub.segd"));

    REQUIRE(run({"train", "--config", cfg, "--labeled", kRoot + "/p_lab/data.segd",
                 "--unlabeled", kRoot + "/p_unlab/data.segd", "--partition", kRoot + "/p_part",
                 "--seed", "7", "--val", kRoot + "/p_test/data.segd", "--out",
                 kRoot + "/p_train"}) == 0);
    CHECK(fs::exists(kRoot + "/p_train/model.basc"));
    CHECK(fs::exists(kRoot + "/p_train/loss_log.csv"));
    CHECK(fs::exists(kRoot + "/p_train/val_log.csv"));

    REQUIRE(run({"eval", "--checkpoint", kRoot + "/p_train/model.basc", "--data",
                 kRoot + "/p_test/data.segd", "--out", kRoot + "/p_eval"}) == 0);

    // the CSV avg row equals the mean of the class rows
    std::ifstream is(kRoot + "/p_eval/eval.csv");
    std::string line;
    std::getline(is, line);
    double sum = 0.0, avg = -1.0;
    int rows = 0;
    while (std::getline(is, line)) {
        auto comma = line.find(',');
        std::string key = line.substr(0, comma);
        double value = std::stod(line.substr(comma + 1));
        if (key == "avg") {
            avg = value;
        } else {
            sum += value;
            rows += 1;
        }
    }
    REQUIRE(rows == 3);
    CHECK(std::abs(avg - sum / rows) <= 1e-12);

    // inputs were not mutated by any stage
    REQUIRE(run({"synth", "--config", cfg, "--seed", "11", "--out", kRoot + "/p_lab_again"}) == 0);
    CHECK(read_file(kRoot + "/p_lab/data.segd") == read_file(kRoot + "/p_lab_again/data.segd"));

    fs::remove_all(kRoot);
}
