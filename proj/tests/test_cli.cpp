#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "elf/cli.hpp"
#include "elf/image_io.hpp"
#include "elf/run_config.hpp"
#include <algorithm>

#include "test_util.hpp"

using namespace elf;
namespace fs = std::filesystem;

namespace {

int cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"elf"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int cli_capture(const std::vector<std::string>& args, std::string& out) {
  std::ostringstream captured;
  std::streambuf* old = std::cout.rdbuf(captured.rdbuf());
  const int code = cli(args);
  std::cout.rdbuf(old);
  out = captured.str();
  return code;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string tiny_run_config(const fs::path& data_dir, const fs::path& ckpt_dir,
                            const fs::path& log) {
  RunConfig cfg;
  cfg.model.base_channels = 4;
  cfg.model.rtb_depth = 1;
  cfg.model.heads = 1;
  cfg.model.ca_reduction = 2;
  cfg.model.ffn_expansion = 2;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.patch_size = 32;
  cfg.max_steps = 2;
  cfg.checkpoint_interval = 1;
  cfg.data_dir = data_dir.string();
  cfg.eval_dir = data_dir.string();  // also exercises the best-PSNR checkpoint
  cfg.checkpoint_dir = ckpt_dir.string();
  cfg.log_file = log.string();
  return cfg.serialize();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config round trip is canonical and stable") {
  RunConfig defaults;
  const std::string canon = defaults.serialize();
  CHECK(RunConfig::parse(canon).serialize() == canon);

  // reordered keys, comments and spacing normalize to the same canonical text
  const std::string messy =
      "# comment\n  epochs = 42 \nuse_mam=false\n\nbase_channels=8\nheads=2\nca_reduction=2\n";
  RunConfig parsed = RunConfig::parse(messy);
  CHECK(parsed.epochs == 42);
  CHECK(parsed.model.base_channels == 8);
  CHECK(!parsed.model.use_mam);
  CHECK(RunConfig::parse(parsed.serialize()).serialize() == parsed.serialize());

  CHECK_THROWS_AS(RunConfig::parse("nonsense_key=1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("epochs=abc\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("epochs=1\nepochs=2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("heads=7\n"), ConfigError);  // must divide channels
  CHECK_THROWS_AS(RunConfig::parse("no equals sign"), ConfigError);
}

TEST_CASE("degradation spec parsing") {
  DegradationSpec s = parse_degradation_spec("kind=lowlight\ngamma_min=2\ngamma_max=2.5\n");
  CHECK(s.kind == DegradationKind::lowlight);
  CHECK(s.gamma_min == 2.0);
  CHECK_THROWS_AS(parse_degradation_spec("kind=fog\n"), ConfigError);
  CHECK_THROWS_AS(parse_degradation_spec("intensity_max=0.9\n"), ConfigError);  // > 0.6
}

TEST_CASE("synth is idempotent given identical seeds") {
  TempDir a("elf_cli_synth_a"), b("elf_cli_synth_b");
  CHECK(cli({"synth", "--clean-count", "3", "--out", a.path.string(), "--seed", "9",
             "--size", "48"}) == 0);
  CHECK(cli({"synth", "--clean-count", "3", "--out", b.path.string(), "--seed", "9",
             "--size", "48"}) == 0);
  for (const auto& entry : fs::directory_iterator(a.path)) {
    const fs::path other = b.path / entry.path().filename();
    REQUIRE(fs::exists(other));
    CHECK(read_file(entry.path()) == read_file(other));  // byte-identical
  }
}

TEST_CASE("png round trip through save/load") {
  TempDir dir("elf_cli_png");
  Tensor<float> img = texture_image(3, 20, 24);
  const std::string p1 = (dir.path / "x.png").string();
  const std::string p2 = (dir.path / "y.png").string();
  save_png(img, p1);
  Tensor<float> loaded = load_png(p1);
  CHECK(loaded.shape() == img.shape());
  save_png(loaded, p2);
  CHECK(read_file(p1) == read_file(p2));  // save-load-save byte-stable
  CHECK(elf::test::max_abs_diff(loaded, img) <= 0.5f / 255.0f + 1e-6f);

  // u8 boundary values survive exactly
  Tensor<float> extremes({3, 1, 2}, {0.0f, 1.0f, 128.0f / 255.0f, 0.2f, 0.6f, 1.0f});
  const std::string p3 = (dir.path / "z.png").string();
  save_png(extremes, p3);
  Tensor<float> back = load_png(p3);
  CHECK(back.at(0) == 0.0f);
  CHECK(back.at(1) == 1.0f);
  CHECK(back.at(2) == 128.0f / 255.0f);

  CHECK_THROWS_AS(load_png((dir.path / "missing.png").string()), IoError);
  std::ofstream(dir.path / "junk.png") << "not a png";
  CHECK_THROWS_AS(load_png((dir.path / "junk.png").string()), IoError);

  // a valid 4x4 8-bit grayscale PNG is rejected as non-RGB
  static const unsigned char kGray[] = {
      137, 80, 78, 71, 13, 10, 26, 10, 0, 0, 0, 13, 73, 72, 68, 82, 0, 0, 0, 4,
      0, 0, 0, 4, 8, 0, 0, 0, 0, 140, 154, 193, 162, 0, 0, 0, 21, 73, 68, 65,
      84, 120, 156, 99, 96, 0, 1, 1, 32, 96, 80, 0, 2, 6, 3, 32, 0, 0, 8, 212,
      1, 129, 93, 4, 152, 28, 0, 0, 0, 0, 73, 69, 78, 68, 174, 66, 96, 130};
  std::ofstream(dir.path / "gray.png", std::ios::binary)
      .write(reinterpret_cast<const char*>(kGray), sizeof(kGray));
  CHECK_THROWS_WITH_AS(load_png((dir.path / "gray.png").string()),
                       doctest::Contains("non-RGB"), IoError);
}

TEST_CASE("train-infer-eval workflow with padding") {
  TempDir data("elf_cli_data"), ckpt("elf_cli_ckpt"), in("elf_cli_in"), out("elf_cli_out");
  CHECK(cli({"synth", "--clean-count", "4", "--out", data.path.string(), "--seed", "2",
             "--size", "64"}) == 0);

  const fs::path cfg_path = data.path / "run.cfg";
  std::ofstream(cfg_path) << tiny_run_config(data.path, ckpt.path, data.path / "log.csv");
  CHECK(cli({"train", "--config", cfg_path.string()}) == 0);
  REQUIRE(fs::exists(ckpt.path / "ckpt_epoch_00000.elf"));
  CHECK(fs::exists(ckpt.path / "ckpt_best.elf"));
  {
    std::ifstream log(data.path / "log.csv");
    std::string header;
    std::getline(log, header);
    CHECK(header == "epoch,step,loss,lr");
    std::string line;
    int lines = 0;
    while (std::getline(log, line))
      if (!line.empty()) ++lines;
    CHECK(lines == 2);  // max_steps
  }

  // 100x100 input must pad to 112 internally and come back exactly 100x100
  save_png(texture_image(77, 100, 100), (in.path / "odd.png").string());
  CHECK(cli({"infer", "--checkpoint", (ckpt.path / "ckpt_epoch_00000.elf").string(),
             "--input", in.path.string(), "--output", out.path.string(),
             "--config", cfg_path.string()}) == 0);
  Tensor<float> restored = load_png((out.path / "odd.png").string());
  CHECK(restored.shape() == Shape{3, 100, 100});

  // infer twice is byte-identical
  TempDir out2("elf_cli_out2");
  CHECK(cli({"infer", "--checkpoint", (ckpt.path / "ckpt_epoch_00000.elf").string(),
             "--input", in.path.string(), "--output", out2.path.string(),
             "--config", cfg_path.string()}) == 0);
  CHECK(read_file(out.path / "odd.png") == read_file(out2.path / "odd.png"));

  // eval of a directory against itself: psnr inf, ssim 1
  std::string csv;
  CHECK(cli_capture({"eval", "--pred", in.path.string(), "--gt", in.path.string()}, csv) == 0);
  CHECK(csv.find("mean_psnr,mean_ssim") != std::string::npos);
  CHECK(csv.find("inf,1") != std::string::npos);
}

TEST_CASE("lowlight synthesis via spec file") {
  TempDir dir("elf_cli_lowlight");
  std::ofstream(dir.path / "spec.cfg") << "kind=lowlight\nnoise_sigma=0\n";
  CHECK(cli({"synth", "--clean-count", "2", "--out", (dir.path / "out").string(), "--seed",
             "4", "--size", "32", "--spec", (dir.path / "spec.cfg").string()}) == 0);
  std::ifstream manifest(dir.path / "out" / "manifest.txt");
  std::string line;
  std::getline(manifest, line);
  CHECK(line.find("lowlight") != std::string::npos);
  // darkening only: degraded <= clean everywhere (sigma 0)
  Tensor<float> clean = load_png((dir.path / "out" / "clean_00000.png").string());
  Tensor<float> degraded = load_png((dir.path / "out" / "degraded_00000.png").string());
  for (Index i = 0; i < clean.size(); ++i) CHECK(degraded.at(i) <= clean.at(i));
}

TEST_CASE("gradcheck suite reports failures under an impossible tolerance") {
  GradSuiteOptions opt;
  opt.tol = 1e-14;  // below f64 finite-difference resolution
  opt.probes = 4;
  opt.block_probes = 2;
  opt.include_pipeline = false;
  const auto reports = gradcheck_ops(opt);
  CHECK(!std::all_of(reports.begin(), reports.end(),
                     [](const GradReport& r) { return r.pass; }));
}

TEST_CASE("exit codes") {
  CHECK(cli({"train"}) == 2);                                // missing required option
  CHECK(cli({"train", "--config", "/does/not/exist"}) == 4);  // I/O
  TempDir dir("elf_cli_badcfg");
  std::ofstream(dir.path / "bad.cfg") << "unknown_key=1\n";
  CHECK(cli({"train", "--config", (dir.path / "bad.cfg").string()}) == 3);  // config
  std::ofstream(dir.path / "badval.cfg") << "subsample=3\n";
  CHECK(cli({"train", "--config", (dir.path / "badval.cfg").string()}) == 3);
}
