#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "solider/cli.hpp"

namespace solider {
namespace {

namespace fs = std::filesystem;

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "solider");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::vector<std::string> kSmall = {
    "--set", "data.image_h=32",        "--set", "data.image_w=16",        "--set", "data.identities=2",
    "--set", "data.images_per_identity=4", "--set", "model.embed_dim=8",  "--set", "model.depths=1,1",
    "--set", "model.heads=1,2",        "--set", "model.window=2",         "--set", "model.mlp_ratio=2",
    "--set", "model.controller_hidden=4", "--set", "model.dino_hidden=16", "--set", "model.prototypes=32",
    "--set", "model.semantic_blocks=1", "--set", "model.semantic_hidden=8", "--set", "train.batch_size=4",
    "--set", "train.phase1_epochs=1",  "--set", "train.phase2_epochs=1"};

class CliTest : public ::testing::Test {
protected:
    fs::path dir;
    void SetUp() override {
        dir = fs::temp_directory_path() / ("solider_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string p(const std::string& name) const { return (dir / name).string(); }

    std::string pretrained() {
        std::vector<std::string> args{"pretrain", "--out", p("p1.ckpt"), "--seed", "3"};
        args.insert(args.end(), kSmall.begin(), kSmall.end());
        const auto r = run(args);
        EXPECT_EQ(r.code, 0) << r.err;
        return p("p1.ckpt");
    }
};

TEST_F(CliTest, HelpAndVersion) {
    auto r = run({"--help"});
    EXPECT_EQ(r.code, 0);
    for (const char* s : cli::kSubcommands) EXPECT_NE(r.out.find(s), std::string::npos) << s;
    r = run({"--version"});
    EXPECT_EQ(r.code, 0);
    EXPECT_EQ(r.out, std::string(SOLIDER_VERSION) + "\n");
}

TEST_F(CliTest, UnknownSubcommand) {
    const auto r = run({"frobnicate"});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err, "error[unknown_subcommand]: unknown subcommand 'frobnicate'\n");
}

TEST_F(CliTest, UnknownFlagBeatsMissingFlag) {
    const auto r = run({"pretrain", "--bogus"});
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(lines(r.err), 1u);
    EXPECT_EQ(r.err.rfind("error[unknown_flag]", 0), 0u);
}

TEST_F(CliTest, MissingRequiredFlag) {
    const auto r = run({"pretrain"});
    EXPECT_EQ(r.code, 4);
    EXPECT_EQ(r.err, "error[missing_flag]: --out is required\n");
}

TEST_F(CliTest, ConfigErrors) {
    auto r = run({"gen-data", "--out", p("c"), "--set", "bogus=1"});
    EXPECT_EQ(r.code, 5);
    EXPECT_EQ(r.err.rfind("error[config]: unknown config key 'bogus'", 0), 0u);
    {
        std::ofstream(p("bad.conf")) << "train.lr = quick\n";
    }
    r = run({"pretrain", "--out", p("x.ckpt"), "--config", p("bad.conf")});
    EXPECT_EQ(r.code, 5);
    EXPECT_EQ(lines(r.err), 1u);
}

TEST_F(CliTest, GenDataWritesCorpusAndProvenance) {
    const auto r = run({"gen-data", "--out", p("corpus"), "--seed", "4", "--set", "data.identities=2", "--set", "data.images_per_identity=3"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "corpus" / "img_00005.png"));
    EXPECT_TRUE(fs::exists(dir / "corpus" / "labels.bin"));
    std::ifstream prov(dir / "corpus" / "corpus.config");
    std::string first, text;
    std::getline(prov, first);
    EXPECT_EQ(first, "# solider " + std::string(SOLIDER_VERSION));
    std::stringstream ss;
    ss << prov.rdbuf();
    Config c;
    c.merge_text(ss.str());
    EXPECT_EQ(c.integer("seed"), 4);
    EXPECT_EQ(c.count("data.identities"), 2u);
}

TEST_F(CliTest, SeedPrecedence) {
    ::setenv("SOLIDER_SEED", "8", 1);
    cli::ConfigSources src;
    EXPECT_EQ(cli::resolve_config(src).integer("seed"), 8);
    src.overrides = {"seed=9"};
    EXPECT_EQ(cli::resolve_config(src).integer("seed"), 9);
    src.seed = 10;
    EXPECT_EQ(cli::resolve_config(src).integer("seed"), 10);
    ::unsetenv("SOLIDER_SEED");
    EXPECT_EQ(cli::resolve_config({}).integer("seed"), 0);
}

TEST_F(CliTest, FullPipeline) {
    const auto ckpt = pretrained();
    ASSERT_TRUE(fs::exists(ckpt + ".config"));
    auto r = run({"finetune", "--from", ckpt, "--out", p("p2.ckpt"), "--metrics", p("m.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream m(p("m.csv"));
    std::string header;
    std::getline(m, header);
    EXPECT_EQ(header, "step,lambda,l_dino,l_sm,total,lr,degenerate_count");

    r = run({"gen-data", "--out", p("imgs"), "--seed", "3", "--set", "data.image_h=32", "--set", "data.image_w=16", "--set",
             "data.identities=1", "--set", "data.images_per_identity=3"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"extract", "--ckpt", p("p2.ckpt"), "--lambda", "0.5", "--images", p("imgs"), "--out", p("f.bin")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream f(p("f.bin"), std::ios::binary);
    char magic[9] = {};
    f.read(magic, 8);
    EXPECT_STREQ(magic, "SOLFEAT1");
    std::uint32_t dims[4];
    f.read(reinterpret_cast<char*>(dims), 16);
    EXPECT_EQ(dims[0], 3u);
    EXPECT_EQ(dims[1], 16u);
    EXPECT_EQ(dims[2], 4u);
    EXPECT_EQ(dims[3], 2u);

    r = run({"analyze", "--ckpt", p("p2.ckpt"), "--out", p("sweep.csv"), "--lambdas", "0,0.5,1", "--part-features", p("parts.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream s(p("sweep.csv"));
    std::stringstream ss;
    ss << s.rdbuf();
    EXPECT_EQ(lines(ss.str()), 4u);
    EXPECT_NE(r.out.find("spearman(intra, lambda)="), std::string::npos);
    EXPECT_TRUE(fs::exists(p("sweep.csv") + ".config"));
}

TEST_F(CliTest, LambdaOutOfRange) {
    const auto ckpt = pretrained();
    const auto r = run({"extract", "--ckpt", ckpt, "--lambda", "1.5", "--images", dir.string(), "--out", p("f.bin")});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err, "error[invalid_argument]: lambda must be in [0,1]\n");
    const auto a = run({"analyze", "--ckpt", ckpt, "--out", p("s.csv"), "--lambdas", "0,-0.1"});
    EXPECT_EQ(a.code, 2);
    EXPECT_EQ(a.err, "error[invalid_argument]: lambda must be in [0,1]\n");
}

TEST_F(CliTest, RuntimeFailures) {
    {
        std::ofstream(p("junk.ckpt")) << "garbage";
    }
    auto r = run({"finetune", "--from", p("junk.ckpt"), "--out", p("o.ckpt")});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error[runtime]: checkpoint checksum mismatch", 0), 0u) << r.err;
    const auto ckpt = pretrained();
    fs::create_directories(dir / "empty");
    r = run({"extract", "--ckpt", ckpt, "--lambda", "0", "--images", (dir / "empty").string(), "--out", p("f.bin")});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(lines(r.err), 1u);
}

}  // namespace
}  // namespace solider
