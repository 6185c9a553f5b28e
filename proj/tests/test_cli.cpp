#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "vqct/vqct.hpp"

namespace fs = std::filesystem;
using namespace vqct;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("vqct_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& rel) { return (workdir() / rel).string(); }

int run(const std::string& args) {
  const std::string cmd = std::string(VQCT_CLI_PATH) + " " + args + " >" + at("last.log") + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) { return io::read_file(path); }

}  // namespace

TEST(Cli, ExitCodesForUsageErrors) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("bogus"), 1);
  EXPECT_EQ(run("phantom"), 1);  // --out missing
  EXPECT_EQ(run("phantom --dims 16 --out " + at("small")), 1);
  EXPECT_EQ(run("phantom --count x --out " + at("small")), 1);
  EXPECT_EQ(run("phantom --help"), 0);
}

TEST(Cli, PhantomCountAndDeterminism) {
  ASSERT_EQ(run("phantom --count 5 --dims 32 --seed 7 --out " + at("ph_a")), 0);
  ASSERT_EQ(run("phantom --count 5 --dims 32 --seed 7 --out " + at("ph_b")), 0);
  int mvol = 0, truth = 0;
  for (const auto& e : fs::directory_iterator(at("ph_a"))) {
    const auto name = e.path().filename().string();
    if (e.path().extension() == ".mvol") ++mvol;
    if (name.find("_truth.json") != std::string::npos) ++truth;
    if (name == "run_config.json") continue;  // records the output path
    EXPECT_EQ(slurp(e.path().string()), slurp((fs::path(at("ph_b")) / name).string())) << name;
  }
  EXPECT_EQ(mvol, 10);
  EXPECT_EQ(truth, 5);
  const Volume ct = read_volume(at("ph_a/case_3_ct.mvol"));
  EXPECT_EQ(ct.dims, (Dims{32, 32, 32}));
  EXPECT_EQ(ct.space, IntensitySpace::HU);
  EXPECT_EQ(read_volume(at("ph_a/case_3_pet.mvol")).space, IntensitySpace::Activity);
}

TEST(Cli, IoAndFormatErrorsExitTwo) {
  EXPECT_EQ(run("translate --ckpt " + at("missing.vqck") + " --pet x --out " + at("x.mvol")), 2);
  io::write_file(at("junk.vqck"), "not a checkpoint");
  EXPECT_EQ(run("translate --ckpt " + at("junk.vqck") + " --pet x --out " + at("x.mvol")), 2);
  EXPECT_EQ(run("phantom --config " + at("missing.json") + " --out " + at("p")), 2);
  io::write_file(at("bad.json"), "{\"steps\": ");
  EXPECT_EQ(run("phantom --config " + at("bad.json") + " --out " + at("p")), 1);
}

TEST(Cli, EvaluateIdentityAndStats) {
  ASSERT_EQ(run("phantom --count 5 --dims 32 --seed 1 --out " + at("ev")), 0);
  std::string files;
  for (int i = 0; i < 5; ++i) files += " " + at("ev/case_" + std::to_string(i) + "_ct.mvol");
  ASSERT_EQ(run("evaluate --pred" + files + " --gt" + files + " --out " + at("self.csv") + " --diff-dir " + at("maps")), 0);
  const auto rows = csv_to_rows(slurp(at("self.csv")));
  EXPECT_EQ(rows.size(), 5u * 12u);
  for (const auto& r : rows)
    if (r.metric == "MAE") {
      EXPECT_EQ(r.value, 0.0) << r.case_id << " " << to_string(r.region);
    }
  EXPECT_TRUE(fs::exists(at("maps/case_0_diff_z16.ppm")));
  EXPECT_EQ(slurp(at("maps/case_0_diff_z16.ppm")).substr(0, 9), "P6\n32 32\n");
  EXPECT_EQ(run("stats --a " + at("self.csv") + " --b " + at("self.csv") + " --out " + at("s.json")), 1);
  EXPECT_EQ(run("evaluate --pred " + at("ev/case_0_ct.mvol") + " --gt" + files + " --out " + at("bad.csv")), 1);
}

TEST(Cli, TrainTranslateEvaluateRoundTrip) {
  ASSERT_EQ(run("phantom --count 5 --dims 32 --seed 2 --out " + at("pipe")), 0);
  const std::string model = " --depth 2 --base-channels 4 --codebook-size 8 --codebook-dim 4";
  ASSERT_EQ(run("pretrain --textures 2 --texture-dims 16 --steps 4 --lr 1e-3 --seed 1" + model + " --out " +
                at("pre.vqck")),
            0);
  EXPECT_EQ(load_checkpoint(at("pre.vqck")).provenance, Provenance::Pretrained);
  EXPECT_TRUE(fs::exists(at("pre.vqck.log.csv")));
  io::write_file(at("ft.json"), R"({"mode": "encfrozen", "steps": 9, "lr": 0.001, "batch-size": 2})");
  ASSERT_EQ(run("finetune --config " + at("ft.json") + " --steps 3 --base " + at("pre.vqck") + " --cases " + at("pipe") +
                " --out " + at("ft.vqck")),
            0);
  const auto ft = load_checkpoint(at("ft.vqck"));
  EXPECT_EQ(ft.step, 3u);  // flag beats file
  EXPECT_EQ(ft.provenance, Provenance::Finetuned);
  const auto resolved = nlohmann::json::parse(slurp(at("ft.vqck.config.json")));
  EXPECT_EQ(resolved.at("mode"), "encfrozen");
  EXPECT_EQ(resolved.at("steps"), 3);

  // Replaying the resolved record reproduces the checkpoint byte for byte.
  ASSERT_EQ(run("finetune --config " + at("ft.vqck.config.json") + " --out " + at("ft2.vqck")), 0);
  EXPECT_EQ(slurp(at("ft2.vqck")), slurp(at("ft.vqck")));
  EXPECT_EQ(run("pretrain --config " + at("ft.vqck.config.json") + " --out " + at("ft3.vqck")), 1);

  ASSERT_EQ(run("translate --dump-planes --ckpt " + at("ft.vqck") + " --pet " + at("pipe/case_0_pet.mvol") + " --out " +
                at("sct.mvol")),
            0);
  const Volume sct = read_volume(at("sct.mvol"));
  EXPECT_EQ(sct.space, IntensitySpace::HU);
  EXPECT_TRUE(fs::exists(at("sct_coronal.mvol")));
  ASSERT_EQ(run("evaluate --pred " + at("sct.mvol") + " --gt " + at("pipe/case_0_ct.mvol") + " --out " + at("sct.csv")),
            0);
  EXPECT_EQ(csv_to_rows(slurp(at("sct.csv"))).size(), 12u);

  ASSERT_EQ(run("reconstruct --ckpt " + at("pre.vqck") + " --ct " + at("pipe/case_1_ct.mvol") + " --out " +
                at("rec.mvol")),
            0);
  ASSERT_EQ(run("select --ckpt " + at("pre.vqck") + " " + at("pre.vqck") + " --ct " + at("pipe/case_1_ct.mvol") +
                " --out " + at("sel.json")),
            0);
  const auto sel = nlohmann::json::parse(slurp(at("sel.json")));
  EXPECT_EQ(sel.at("index"), 0);
  EXPECT_EQ(sel.at("mse_hu").size(), 2u);
  EXPECT_EQ(run("finetune --mode frozen --base " + at("pre.vqck") + " --cases " + at("pipe") + " --out " + at("z.vqck")),
            1);
}
