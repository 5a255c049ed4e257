#include "elf/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "elf/gradcheck_suite.hpp"
#include "elf/image_io.hpp"
#include "elf/run_config.hpp"

namespace elf {

namespace {

namespace fs = std::filesystem;

int worker_threads(std::size_t jobs) {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ELF_THREADS")) {
    try {
      n = std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      throw ConfigError("ELF_THREADS: not an integer");
    }
  }
  return std::max(1, std::min<int>(n, static_cast<int>(jobs)));
}

/// Order-independent parallel map over [0,n); results must not share state.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const int workers = worker_threads(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::atomic<bool> failed{false};
  std::string error;
  std::mutex error_mu;
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(error_mu);
          failed = true;
          error = e.what();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed) throw IoError(error);
}

std::vector<fs::path> list_pngs(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::string two_sig_name(const char* stem, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.png", stem, index);
  return buf;
}

int cmd_synth(int count, const std::string& out_dir, std::uint64_t seed,
              const std::string& spec_path, const std::string& kind, Index size) {
  DegradationSpec spec;
  if (!spec_path.empty()) spec = parse_degradation_spec_file(spec_path);
  if (!kind.empty()) {
    if (kind == "rain") spec.kind = DegradationKind::rain;
    else if (kind == "lowlight") spec.kind = DegradationKind::lowlight;
    else throw ConfigError("synth: unknown kind '" + kind + "'");
  }
  fs::create_directories(out_dir);

  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(count));
  std::uint64_t state = seed;
  for (auto& s : seeds) s = splitmix64(state);

  parallel_for(seeds.size(), [&](std::size_t i) {
    const Tensor<float> clean = texture_image(seeds[i], size, size);
    const Sample sample = synth(clean, spec, seeds[i]);
    save_png(sample.clean, (fs::path(out_dir) / two_sig_name("clean", i)).string());
    save_png(sample.degraded, (fs::path(out_dir) / two_sig_name("degraded", i)).string());
    save_png(sample.degradation_map, (fs::path(out_dir) / two_sig_name("map", i)).string());
  });

  std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
  if (!manifest) throw IoError("synth: cannot write manifest");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    manifest << i << '\t' << seeds[i] << '\t'
             << (spec.kind == DegradationKind::rain ? "rain" : "lowlight") << '\n';
  std::cout << "wrote " << count << " samples to " << out_dir << "\n";
  return 0;
}

std::vector<Sample> load_dataset(const std::string& dir) {
  std::vector<Sample> out;
  for (const auto& path : list_pngs(dir)) {
    const std::string name = path.filename().string();
    if (!name.starts_with("clean_")) continue;
    const fs::path degraded = path.parent_path() / ("degraded_" + name.substr(6));
    if (!fs::exists(degraded)) continue;
    Sample s;
    s.clean = load_png(path.string());
    s.degraded = load_png(degraded.string());
    const fs::path map = path.parent_path() / ("map_" + name.substr(6));
    if (fs::exists(map)) {
      s.degradation_map = load_png(map.string());
    } else {
      std::vector<float> diff(static_cast<std::size_t>(s.clean.size()));
      for (Index i = 0; i < s.clean.size(); ++i)
        diff[static_cast<std::size_t>(i)] =
            std::max(0.0f, s.degraded.at(i) - s.clean.at(i));
      s.degradation_map = Tensor<float>(s.clean.shape(), std::move(diff));
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("no clean_*/degraded_* PNG pairs in '" + dir + "'");
  return out;
}

int cmd_train(const std::string& config_path) {
  const RunConfig cfg = RunConfig::parse_file(config_path);
  if (cfg.data_dir.empty()) throw ConfigError("config: data_dir is required for training");
  const std::vector<Sample> train_set = load_dataset(cfg.data_dir);
  std::vector<Sample> eval_set;
  if (!cfg.eval_dir.empty()) eval_set = load_dataset(cfg.eval_dir);

  ElfModel<float> model = build_model<float>(cfg.model, cfg.seed);
  std::cout << "model parameters: " << count_params(model) << "\n";
  const TrainResult result = run_training(model, train_set, eval_set, cfg.train_config());

  std::ostream* log = &std::cout;
  std::ofstream file;
  if (!cfg.log_file.empty()) {
    file.open(cfg.log_file);
    if (!file) throw IoError("train: cannot open log file '" + cfg.log_file + "'");
    log = &file;
  }
  (*log) << "epoch,step,loss,lr\n";
  for (const std::string& line : result.log_lines) (*log) << line << "\n";

  if (result.aborted) {
    std::cerr << "training aborted: " << result.abort_reason
              << (result.last_checkpoint.empty()
                      ? ""
                      : " (last good checkpoint: " + result.last_checkpoint + ")")
              << "\n";
    return 1;
  }
  if (!eval_set.empty()) {
    const EvalResult ev = evaluate(model, eval_set);
    std::cout << "eval: restored " << ev.psnr_restored << " dB / " << ev.ssim_restored
              << " ssim; degraded input " << ev.psnr_degraded << " dB / " << ev.ssim_degraded
              << " ssim\n";
  }
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& input_dir,
              const std::string& output_dir, const std::string& config_path) {
  ElfConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::parse_file(config_path).model;
  ElfModel<float> model = build_model<float>(cfg, 0);
  load_checkpoint(checkpoint, model, nullptr);

  const std::vector<fs::path> files = list_pngs(input_dir);
  if (files.empty()) throw IoError("infer: no PNG files in '" + input_dir + "'");
  fs::create_directories(output_dir);

  const Index mult = cfg.size_multiple();
  parallel_for(files.size(), [&](std::size_t i) {
    const Tensor<float> img = load_png(files[i].string());
    const Index h = img.dim(1), w = img.dim(2);
    const Index ph = (h + mult - 1) / mult * mult;
    const Index pw = (w + mult - 1) / mult * mult;
    Tensor<float> padded = (ph == h && pw == w) ? img : pad_reflect(img, ph, pw);
    auto y = elf_forward(model, reshape(padded, {1, 3, ph, pw}));
    Tensor<float> restored = crop_top_left(reshape(y.restored_full, {3, ph, pw}), h, w);
    save_png(clip01(restored), (fs::path(output_dir) / files[i].filename()).string());
  });
  std::cout << "restored " << files.size() << " images to " << output_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir) {
  const std::vector<fs::path> files = list_pngs(pred_dir);
  if (files.empty()) throw IoError("eval: no PNG files in '" + pred_dir + "'");
  LossConfig lc;
  double total_psnr = 0, total_ssim = 0;
  bool any_inf = false;
  for (const auto& path : files) {
    const fs::path gt_path = fs::path(gt_dir) / path.filename();
    if (!fs::exists(gt_path))
      throw IoError("eval: missing ground truth for '" + path.filename().string() + "'");
    const Tensor<float> pred = load_png(path.string());
    const Tensor<float> gt = load_png(gt_path.string());
    const double p = psnr(pred, gt);
    if (std::isinf(p)) any_inf = true;
    else total_psnr += p;
    total_ssim += ssim(reshape(pred, {1, 3, pred.dim(1), pred.dim(2)}),
                       reshape(gt, {1, 3, gt.dim(1), gt.dim(2)}), lc)
                      .item();
  }
  const double n = static_cast<double>(files.size());
  std::cout << "mean_psnr,mean_ssim\n";
  if (any_inf) std::cout << "inf";  // a mean containing +inf is +inf
  else std::cout << total_psnr / n;
  std::cout << "," << total_ssim / n << "\n";
  return 0;
}

int cmd_gradcheck(double tol) {
  GradSuiteOptions opt;
  opt.tol = tol;
  const std::vector<GradReport> reports = run_gradcheck_suite(opt);
  print_report_table(std::cout, reports);
  const bool all_pass = std::all_of(reports.begin(), reports.end(),
                                    [](const GradReport& r) { return r.pass; });
  std::cout << (all_pass ? "all checks passed" : "GRADCHECK FAILED") << "\n";
  return all_pass ? 0 : 5;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"ELF two-stage image restoration: degradation estimation in a "
               "subsampled space, attention-guided association, background "
               "reconstruction"};
  app.require_subcommand(1);

  auto* synth_cmd = app.add_subcommand("synth", "generate a procedural degradation dataset");
  int clean_count = 50;
  std::string out_dir, spec_path, kind;
  std::uint64_t seed = 0;
  Index size = 128;
  synth_cmd->add_option("--clean-count", clean_count, "number of samples")->required();
  synth_cmd->add_option("--out", out_dir, "output directory")->required();
  synth_cmd->add_option("--seed", seed, "master seed");
  synth_cmd->add_option("--spec", spec_path, "degradation spec file (key=value)");
  synth_cmd->add_option("--kind", kind, "rain|lowlight (overrides spec)");
  synth_cmd->add_option("--size", size, "square image side in px");

  auto* train_cmd = app.add_subcommand("train", "train from a run-config file");
  std::string config_path;
  train_cmd->add_option("--config", config_path, "run config (key=value)")->required();

  auto* infer_cmd = app.add_subcommand("infer", "restore a directory of PNG images");
  std::string checkpoint, input_dir, output_dir, infer_config;
  infer_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  infer_cmd->add_option("--input", input_dir, "input directory")->required();
  infer_cmd->add_option("--output", output_dir, "output directory")->required();
  infer_cmd->add_option("--config", infer_config, "run config matching the checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "mean PSNR/SSIM of pred vs gt directories");
  std::string pred_dir, gt_dir;
  eval_cmd->add_option("--pred", pred_dir, "predictions directory")->required();
  eval_cmd->add_option("--gt", gt_dir, "ground-truth directory")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  double tol = 1e-4;
  grad_cmd->add_option("--tol", tol, "relative-error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(clean_count, out_dir, seed, spec_path, kind, size);
    if (train_cmd->parsed()) return cmd_train(config_path);
    if (infer_cmd->parsed()) return cmd_infer(checkpoint, input_dir, output_dir, infer_config);
    if (eval_cmd->parsed()) return cmd_eval(pred_dir, gt_dir);
    if (grad_cmd->parsed()) return cmd_gradcheck(tol);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace elf
