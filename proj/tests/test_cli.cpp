#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "metadec/cli.hpp"
#include "metadec/image_io.hpp"
#include "metadec/training.hpp"

using namespace metadec;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "metadec");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_command(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("metadec_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("unknown verb and missing arguments") {
  auto r = run({"frobnicate"});
  CHECK(r.code == kExitUnknownVerb);
  CHECK(r.err.find("frobnicate") != std::string::npos);
  CHECK(run({"synth", "--out", "x"}).code == kExitBadFlags);
  CHECK(run({}).code == kExitBadFlags);
  CHECK(run({"inspect-layout", "--profile", "desk", "--num_heads", "5"}).code == kExitBadFlags);
  r = run({"inspect-layout", "--config", "/nonexistent/run.cfg"});
  CHECK(r.code == kExitMissingFile);
  CHECK(r.err.find("/nonexistent/run.cfg") != std::string::npos);
  CHECK(run({"eval", "--checkpoint", "/nonexistent.ckpt", "--data", "."}).code == kExitMissingFile);
}

TEST_CASE("inspect-layout totals per variant") {
  const auto dir = scratch("layout");
  auto r = run({"inspect-layout", "--variant", "basic", "--profile", "desk", "--out",
                (dir / "l.csv").string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("decoder_variant = basic") != std::string::npos);
  CHECK(r.out.find("total,,,,0,128,,288,,256\n") != std::string::npos);
  CHECK(slurp(dir / "l.csv").find("total,,,,0,128,,288,,256") != std::string::npos);
  r = run({"inspect-layout", "--profile", "desk"});
  CHECK(r.out.find("total,,,,0,832,,288,,640\n") != std::string::npos);
  r = run({"inspect-layout", "--profile", "desk", "--decoder_variant", "multiscale"});
  CHECK(r.out.find("total,,,,0,576,,288,,640\n") != std::string::npos);
  std::ofstream(dir / "run.cfg") << "profile = desk\ndecoder_width = 16\n";
  r = run({"inspect-layout", "--config", (dir / "run.cfg").string(), "--variant", "basic"});
  CHECK(r.out.find("total,,,,0,64,,144,,128\n") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("synth, then eval of a silent model on target-free images is perfect") {
  const auto dir = scratch("eval");
  std::ofstream(dir / "spec.txt") << "scenarios = sky,ground\ntrain = 2\ntest = 2\nheight = 16\nwidth = 16\n"
                                     "min_targets = 0\nmax_targets = 0\n";
  auto r = run({"synth", "--spec", (dir / "spec.txt").string(), "--out", (dir / "data").string(),
                "--seed", "4"});
  REQUIRE(r.code == kExitOk);
  CHECK(fs::exists(dir / "data" / "images" / "sky_0000.png"));
  CHECK(fs::exists(dir / "data" / "splits" / "test.txt"));
  CHECK(slurp(dir / "data" / "scenarios.csv").rfind("id,label\n", 0) == 0);

  Model<float> m(validate_config({{"profile", "tiny"}}));
  m.store().get("decoder.head.bias").mutable_value()[0] = -30.0f;
  save_checkpoint((dir / "silent.ckpt").string(), m, nullptr, TrainState{});
  r = run({"eval", "--checkpoint", (dir / "silent.ckpt").string(), "--data", (dir / "data").string(),
           "--split", "test", "--out", (dir / "m.csv").string()});
  REQUIRE(r.code == kExitOk);
  const auto csv = slurp(dir / "m.csv");
  CHECK(csv.rfind("split,scenario,IoU,Pd,Fa,n_images,n_targets\ntest,all,1,1,0,4,0\n", 0) == 0);
  CHECK(csv.find("test,sky,1,1,0,2,0") != std::string::npos);

  r = run({"infer", "--checkpoint", (dir / "silent.ckpt").string(), "--input",
           (dir / "data" / "images").string(), "--out", (dir / "pred").string(), "--dump-highpass"});
  REQUIRE(r.code == kExitOk);
  const auto mask = read_png_gray((dir / "pred" / "ground_0000.png").string());
  CHECK(mask.shape() == Shape{16, 16});
  for (auto v : mask.values()) CHECK(v == 0);
  CHECK(fs::exists(dir / "pred" / "ground_0000_highpass.png"));

  r = run({"drift-report", "--checkpoint", (dir / "silent.ckpt").string(), "--data",
           (dir / "data").string(), "--split", "test", "--out", (dir / "d.csv").string()});
  REQUIRE(r.code == kExitOk);
  CHECK(slurp(dir / "d.csv").find("\nall,4,0,") != std::string::npos);

  std::ofstream(dir / "bad.ckpt") << "garbage";
  CHECK(run({"eval", "--checkpoint", (dir / "bad.ckpt").string(), "--data", (dir / "data").string()}).code ==
        kExitBadData);
  fs::remove_all(dir);
}

TEST_CASE("train writes checkpoints, log and resolved config") {
  const auto dir = scratch("train");
  REQUIRE(run({"synth", "--out", (dir / "data").string(), "--seed", "1"}).code == kExitOk);
  // default synth spec is 64×64; train on the tiny profile with a matching input size
  auto r = run({"train", "--data", (dir / "data").string(), "--out", (dir / "run").string(), "--seed", "2",
                "--profile", "tiny", "--input_size", "64", "--steps", "2", "--val-split", "none"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.rfind("# resolved config", 0) == 0);
  CHECK(fs::exists(dir / "run" / "last.ckpt"));
  CHECK(slurp(dir / "run" / "config.cfg").find("seed = 2") != std::string::npos);
  CHECK(slurp(dir / "run" / "train_log.csv").rfind("step,lr,loss,val_iou,val_pd,val_fa\n0,", 0) == 0);
  fs::remove_all(dir);
}
