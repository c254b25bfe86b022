#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include <json.hpp>

#include "test_util.hpp"
#include "widecorrect/checkpoint.hpp"
#include "widecorrect/io.hpp"
#include "widecorrect/synthdata.hpp"

using namespace widecorrect;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(WIDECORRECT_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ModelConfig small_model() {
    ModelConfig c;
    c.input_h = 32;
    c.input_w = 32;
    c.patch_size = 2;
    c.base_channels = 8;
    c.stage_depths = {2};
    c.head_count = 2;
    return c;
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run("--help"), 0);
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("frobnicate"), 1);
    EXPECT_EQ(run("gen-data --count 2"), 1);
    EXPECT_EQ(run("gen-data --out /tmp/x --count 2 --bogus"), 1);
    EXPECT_EQ(run("gen-data --out /tmp/x --count 2 --size 12by3"), 1);
    EXPECT_EQ(run("gradcheck --module nothing"), 1);
}

TEST(Cli, DataErrors) {
    wctest::TempDir dir;
    std::ofstream(dir / "bad.ckpt") << "nope";
    EXPECT_EQ(run("eval --ckpt " + (dir / "bad.ckpt").string() + " --data " + dir.path().string() + " --report " +
                  (dir / "r.json").string()),
              2);
    std::ofstream(dir / "cfg.json") << "{\"lr\": 1e-4, \"typo\": 1}";
    EXPECT_EQ(run("gen-data --out " + (dir / "d").string() + " --count 2 --size 32x32"), 0);
    EXPECT_EQ(run("train --data " + (dir / "d").string() + " --config " + (dir / "cfg.json").string() + " --out " +
                  (dir / "m.ckpt").string()),
              2);
    EXPECT_EQ(run("train --data " + (dir / "missing").string() + " --config " + (dir / "cfg.json").string() +
                  " --out " + (dir / "m.ckpt").string()),
              2);
}

TEST(Cli, GradcheckSingleModule) { EXPECT_EQ(run("gradcheck --module loss_m1 --seed 3"), 0); }

TEST(Cli, GenTrainEvalCorrect) {
    wctest::TempDir dir;
    const std::string data = (dir / "data").string(), ckpt = (dir / "m.ckpt").string();
    ASSERT_EQ(run("gen-data --out " + data + " --count 6 --labeled-frac 0.5 --seed 2 --size 32x32"), 0);
    EXPECT_EQ(read_dataset(data).size(), 6u);

    nlohmann::json cfg = {{"model", config_to_json(small_model())}, {"pretrain_epochs", 1}, {"main_epochs", 1},
                          {"batch_size", 2}, {"val_frac", 0.34}, {"checkpoint_every", 1}};
    std::ofstream(dir / "cfg.json") << cfg.dump();
    ASSERT_EQ(run("train --data " + data + " --config " + (dir / "cfg.json").string() + " --out " + ckpt), 0);
    const auto log = lines_of(ckpt + ".log.jsonl");
    ASSERT_EQ(log.size(), 4u);
    EXPECT_EQ(nlohmann::json::parse(log[0]).at("event"), "config");
    EXPECT_EQ(nlohmann::json::parse(log[0]).at("unlabeled"), 3);
    EXPECT_EQ(nlohmann::json::parse(log[2]).at("phase"), "main");
    const auto done = nlohmann::json::parse(log[3]);
    EXPECT_EQ(done.at("checksum").get<std::string>().size(), 16u);
    EXPECT_TRUE(done.contains("final_validation"));
    EXPECT_NO_THROW(load_checkpoint(ckpt));
    EXPECT_NO_THROW(load_checkpoint(ckpt + ".epoch1.ckpt"));
    EXPECT_EQ(load_checkpoint(ckpt + ".epoch2.ckpt").weights, load_checkpoint(ckpt).weights);

    const std::string report = (dir / "r.json").string();
    ASSERT_EQ(run("eval --ckpt " + ckpt + " --data " + data + " --report " + report), 0);
    std::ifstream rin(report);
    const auto rep = nlohmann::json::parse(rin);
    EXPECT_EQ(rep.at("samples").size(), 6u);

    const std::string in = data + "/s00000.png";
    ASSERT_EQ(run("correct --ckpt " + ckpt + " --in " + in + " --out " + (dir / "c.png").string() + " --dump-flow " +
                  (dir / "c.flo").string() + " --dump-mask " + (dir / "c.mask.png").string()),
              0);
    EXPECT_EQ(io::read_flo(dir / "c.flo").height, 32);
    EXPECT_EQ(io::read_seg_mask(dir / "c.mask.png").height, 32);
    EXPECT_TRUE(fs::exists(dir / "c.mask.preview.png"));
    EXPECT_EQ(io::read_png(dir / "c.png").width, 32);
}

TEST(Cli, ZeroFlowHeadReturnsInput) {
    wctest::TempDir dir;
    const ModelConfig c = small_model();
    auto w = init_weights<float>(c, 4);
    for (auto& v : w["head.flow.weight"]) v = 0.0f;
    for (auto& v : w["head.flow.bias"]) v = 0.0f;
    save_checkpoint(dir / "z.ckpt", c, w);
    io::write_png(dir / "in.png", wctest::random_image(3, 32, 32, 8));
    ASSERT_EQ(run("correct --ckpt " + (dir / "z.ckpt").string() + " --in " + (dir / "in.png").string() + " --out " +
                  (dir / "out.png").string()),
              0);
    EXPECT_GT(wctest::psnr(io::read_png(dir / "in.png"), io::read_png(dir / "out.png")), 40.0);
    io::write_png(dir / "small.png", wctest::random_image(3, 16, 16, 8));
    EXPECT_EQ(run("correct --ckpt " + (dir / "z.ckpt").string() + " --in " + (dir / "small.png").string() +
                  " --out " + (dir / "o2.png").string()),
              2);
}
