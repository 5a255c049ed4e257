// Acceptance suite: one pass/fail line per criterion, exit 0 iff all pass.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "elf/gradcheck_suite.hpp"
#include "elf/run_config.hpp"
#include "elf/train.hpp"

using namespace elf;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int index, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s — %s\n", pass ? "PASS" : "FAIL", index, name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

// -- criterion 1: gradient suite ---------------------------------------------------

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteOptions opt;
  opt.tol = 1e-4;
  opt.pipeline_tol = 1e-3;
  opt.probes = 100;
  opt.block_probes = 24;
  const std::vector<GradReport> reports = run_gradcheck_suite(opt);
  const double elapsed = seconds_since(t0);

  bool all_pass = true;
  double worst = 0;
  std::string worst_name = "-";
  long long probe_total = 0;
  std::string failures;
  for (const GradReport& r : reports) {
    probe_total += r.probe_count;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.op_name;
    }
    if (!r.pass) {
      all_pass = false;
      failures += " " + r.op_name + "(rel=" + fmt(r.max_rel_error) + ")";
    }
  }
  const bool in_time = elapsed < 120.0;
  report(1, "gradient suite (ops, blocks, tiny pipeline)", all_pass && in_time,
         std::to_string(reports.size()) + " checks, " + std::to_string(probe_total) +
             " probes, worst rel " + fmt(worst) + " (" + worst_name + "), " + fmt(elapsed, "%.1f") +
             " s" + (failures.empty() ? "" : "; FAILED:" + failures) +
             (in_time ? "" : "; over 120 s budget"));
}

// -- criterion 2: closed-form loss identities --------------------------------------

void criterion_loss_identities() {
  LossConfig lc;  // alpha=-0.15, lambda=1, eps=1e-3
  Tensor<double> gt_sub = random_uniform<double>({2, 3, 24, 24}, 0.05, 0.95, 11);
  Tensor<double> gt_full = random_uniform<double>({2, 3, 48, 48}, 0.05, 0.95, 12);
  const double stage = loss_stage(gt_sub, gt_sub, lc).item();
  const double total = loss_total(gt_sub, gt_sub, gt_full, gt_full, lc).item();
  const bool ok = std::abs(stage - (-0.149)) < 1e-9 && std::abs(total - (-0.298)) < 1e-9;
  report(2, "loss identities at gt (alpha=-0.15, lambda=1, eps=1e-3)", ok,
         "loss_stage(gt,gt)=" + fmt(stage, "%.12f") + " (want -0.149), loss_total=" +
             fmt(total, "%.12f") + " (want -0.298)");
}

// -- criterion 3: toy convergence ----------------------------------------------------

void criterion_toy_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  ElfConfig cfg;
  cfg.base_channels = 8;
  cfg.rtb_depth = 2;
  cfg.subsample = 2;

  DegradationSpec spec;  // default rain spec
  std::vector<Sample> train_set, eval_set;
  for (std::uint64_t i = 0; i < 50; ++i)
    train_set.push_back(synth_rain(texture_image(i, 64, 64), spec, i));
  for (std::uint64_t i = 0; i < 10; ++i)  // held out: disjoint seeds
    eval_set.push_back(synth_rain(texture_image(1000 + i, 64, 64), spec, 1000 + i));

  TrainConfig tc;
  tc.epochs = 1000;
  tc.batch_size = 4;
  tc.patch_size = 64;
  tc.base_lr = 2e-4;
  tc.max_steps = 300;
  tc.seed = 1;

  auto model = build_model<float>(cfg, 1);
  const TrainResult run1 = run_training(model, train_set, {}, tc);
  const EvalResult ev = evaluate(model, eval_set);

  auto model2 = build_model<float>(cfg, 1);
  const TrainResult run2 = run_training(model2, train_set, {}, tc);

  const double gain = ev.psnr_restored - ev.psnr_degraded;
  const double elapsed = seconds_since(t0);
  const bool converged = !run1.aborted && run1.steps == 300 && gain >= 2.0;
  const bool deterministic = run1.log_lines == run2.log_lines;
  const bool in_time = elapsed < 900.0;
  report(3, "toy convergence (C=8, depth 2, 300 steps, lr 2e-4)",
         converged && deterministic && in_time,
         "restored " + fmt(ev.psnr_restored, "%.2f") + " dB vs degraded " +
             fmt(ev.psnr_degraded, "%.2f") + " dB (gain " + fmt(gain, "%.2f") +
             " dB, need >= 2.0); identical seeded logs: " + (deterministic ? "yes" : "NO") +
             "; " + fmt(elapsed, "%.0f") + " s (budget 900)");
}

// -- criterion 4: metric oracles ------------------------------------------------------

void criterion_metric_oracles() {
  LossConfig lc;
  Tensor<double> base = Tensor<double>::full({1, 3, 16, 16}, 0.3);
  const double p = psnr(add_scalar(base, 0.1), base);  // MSE = 0.01 exactly
  const bool psnr_ok = std::abs(p - 20.0) < 1e-6;

  const double s01 = ssim(Tensor<double>::zeros({1, 3, 16, 16}),
                          Tensor<double>::ones({1, 3, 16, 16}), lc)
                         .item();
  const double want = lc.c1 / (1.0 + lc.c1);
  const bool ssim_ok = std::abs(s01 - want) < 1e-6;

  Tensor<double> x = random_uniform<double>({2, 3, 8, 8}, 0, 1, 13);
  const double ch = charbonnier(x, x, 1e-3).item();
  const bool charb_ok = std::abs(ch - 1e-3) < 1e-15;  // exact up to final rounding

  report(4, "metric oracles", psnr_ok && ssim_ok && charb_ok,
         "psnr(MSE=0.01)=" + fmt(p, "%.9f") + "; ssim(0,1)=" + fmt(s01, "%.9g") + " (want " +
             fmt(want, "%.9g") + "); charbonnier(x,x)-eps=" + fmt(ch - 1e-3, "%.3g"));
}

// -- criterion 5: attention invariants -------------------------------------------------

void criterion_attention() {
  bool rows_ok = true;
  double worst_row = 0;
  {
    BlockSpec spec;
    spec.channels = 16;
    spec.heads = 4;
    spec.ca_reduction = 4;
    ParameterStore<double> ps(31);
    add_mdta(ps, "a", spec);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Tensor<double> x = random_uniform<double>({2, 16, 7, 9}, -1, 1, 300 + seed);
      MdtaProbe<double> probe;
      mdta_forward(x, x, x, ParamView<double>(ps, "a"), spec, &probe);
      const Index d = spec.channels / spec.heads;
      const Index rows = probe.attention.size() / d;
      for (Index r = 0; r < rows; ++r) {
        double sum = 0;
        for (Index j = 0; j < d; ++j) sum += probe.attention.at(r * d + j);
        worst_row = std::max(worst_row, std::abs(sum - 1.0));
      }
    }
    rows_ok = worst_row < 1e-6;
  }

  bool d1_ok = true;
  {
    BlockSpec spec;
    spec.channels = 6;
    spec.heads = 6;  // d = 1
    spec.ca_reduction = 2;
    ParameterStore<double> ps(32);
    add_mdta(ps, "a", spec);
    Tensor<double> x = random_uniform<double>({1, 6, 5, 5}, -1, 1, 33);
    MdtaProbe<double> probe;
    mdta_forward(x, x, x, ParamView<double>(ps, "a"), spec, &probe);
    for (Index i = 0; i < probe.attention.size(); ++i)
      d1_ok = d1_ok && probe.attention.at(i) == 1.0;
    for (Index i = 0; i < probe.head_output.size(); ++i)
      d1_ok = d1_ok && probe.head_output.at(i) == probe.value_heads.at(i);
  }
  report(5, "attention invariants", rows_ok && d1_ok,
         "max |row sum - 1| = " + fmt(worst_row, "%.3g") +
             "; d=1 head reproduces V exactly: " + (d1_ok ? "yes" : "NO"));
}

// -- criterion 6: parameter accounting -------------------------------------------------

void criterion_parameters() {
  ElfConfig def;
  auto model = build_model<float>(def, 1);
  const Index count = count_params(model);

  ElfConfig nodsc = def;
  nodsc.use_dsc = false;
  const Index count_nodsc = count_params(build_model<float>(nodsc, 1));
  const double saving = 100.0 * static_cast<double>(count_nodsc - count) /
                        static_cast<double>(count_nodsc);

  const double reference = 1.532e6;
  const double delta_pct = 100.0 * (static_cast<double>(count) - reference) / reference;

  std::string breakdown;
  for (const auto& [group, n] : param_breakdown(model))
    breakdown += "    " + group + ": " + std::to_string(n) + "\n";

  const bool band_ok = count >= 1000000 && count <= 2000000;
  const bool saving_ok = saving >= 4.0 && saving <= 12.0;
  report(6, "parameter accounting", band_ok && saving_ok,
         "default count " + std::to_string(count) + " in [1.0M, 2.0M]: " +
             (band_ok ? "yes" : "NO") + "; encoder-DSC saving " + fmt(saving, "%.2f") +
             "% of " + std::to_string(count_nodsc) + " (band [4%,12%]): " +
             (saving_ok ? "yes" : "NO"));
  std::printf(
      "  reconciliation: %lld parameters vs the published 1.532M baseline (%+.1f%%).\n"
      "  The architecture follows the stated configuration (48 filters, RTB depth 10,\n"
      "  1 RCAB per stage, three enc/dec stages, asymmetric-DSC encoder); internals the\n"
      "  reference leaves unstated (FFN expansion 6, per-stage three-input fusion with\n"
      "  stem injection) were sized so that a transformer block (39,028) stays close to\n"
      "  one RCAB (42,780), matching the near-neutral w/o-SA swap the baseline reports.\n"
      "  Component totals:\n%s",
      static_cast<long long>(count), delta_pct, breakdown.c_str());
}

// -- criterion 7: structural ablations ---------------------------------------------------

void criterion_ablations() {
  ElfConfig def;
  const Index base = count_params(build_model<float>(def, 1));

  struct Variant {
    const char* name;
    std::function<void(ElfConfig&)> apply;
    Index expected_delta;
  };
  Index mam_total = 0;
  {
    auto m = build_model<float>(def, 1);
    for (const auto& n : m.params.names())
      if (n.starts_with("mam.")) mam_total += m.params.at(n).size();
  }
  const std::vector<Variant> variants = {
      {"w/o SA", [](ElfConfig& c) { c.use_sa = false; }, 75040},
      {"w/o DSC", [](ElfConfig& c) { c.use_dsc = false; }, 215424},
      {"w/o HFB", [](ElfConfig& c) { c.use_hfb = false; }, -367944},
      {"w/o MAM", [&](ElfConfig& c) { c.use_mam = false; }, -mam_total},
      {"w/o SSIM", [](ElfConfig& c) { c.use_ssim_loss = false; }, 0},
      {"ELF* (full-res)", [](ElfConfig& c) { c.use_sr = false; }, 0},
  };

  DegradationSpec spec;
  std::vector<Sample> ds;
  for (std::uint64_t i = 0; i < 4; ++i)
    ds.push_back(synth_rain(texture_image(50 + i, 32, 32), spec, 50 + i));

  bool all_ok = true;
  std::string detail;
  for (const Variant& v : variants) {
    ElfConfig cfg = def;
    v.apply(cfg);
    const Index delta = count_params(build_model<float>(cfg, 1)) - base;
    const bool count_ok = delta == v.expected_delta;

    ElfConfig toy = cfg;
    toy.base_channels = 8;
    toy.rtb_depth = 1;
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.patch_size = 32;
    tc.max_steps = 1;
    auto m = build_model<float>(toy, 2);
    const TrainResult r = run_training(m, ds, {}, tc);
    const bool step_ok = !r.aborted && r.steps == 1;

    all_ok = all_ok && count_ok && step_ok;
    detail += std::string(v.name) + " d=" + std::to_string(delta) +
              (count_ok ? "" : "(want " + std::to_string(v.expected_delta) + ")") +
              (step_ok ? "" : " STEP-FAILED") + "; ";
  }
  report(7, "structural ablations build, train one step, move counts as documented", all_ok,
         detail);
}

// -- criterion 8: persistence -----------------------------------------------------------

void criterion_persistence() {
  const fs::path dir = fs::temp_directory_path() / "elf_acceptance_ckpt";
  fs::create_directories(dir);
  ElfConfig cfg = tiny_config();
  auto model = build_model<float>(cfg, 77);
  AdamState<float> opt;
  opt.t = 3;

  DegradationSpec spec;
  std::vector<Sample> eval_set;
  for (std::uint64_t i = 0; i < 3; ++i)
    eval_set.push_back(synth_rain(texture_image(70 + i, 32, 32), spec, 70 + i));
  const EvalResult before = evaluate(model, eval_set);

  const std::string p1 = (dir / "a.elf").string(), p2 = (dir / "b.elf").string();
  save_checkpoint(p1, model, opt, 5);
  auto model2 = build_model<float>(cfg, 78);
  AdamState<float> opt2;
  const std::uint32_t epoch = load_checkpoint(p1, model2, &opt2);
  save_checkpoint(p2, model2, opt2, epoch);

  auto bytes = [](const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  const std::string b1 = bytes(p1), b2 = bytes(p2);
  const bool roundtrip_ok = !b1.empty() && b1 == b2;

  std::string corrupted = b1;
  corrupted[corrupted.size() / 3] ^= 0x10;
  std::ofstream(dir / "c.elf", std::ios::binary) << corrupted;
  bool crc_ok = false;
  try {
    auto m3 = build_model<float>(cfg, 79);
    load_checkpoint((dir / "c.elf").string(), m3, nullptr);
  } catch (const IoError& e) {
    crc_ok = std::string(e.what()).find("corrupt") != std::string::npos;
  }

  const EvalResult after = evaluate(model2, eval_set);
  const bool metrics_ok = before.psnr_restored == after.psnr_restored &&
                          before.ssim_restored == after.ssim_restored;

  fs::remove_all(dir);
  report(8, "checkpoint persistence", roundtrip_ok && crc_ok && metrics_ok,
         std::string("save-load-save byte-identical: ") + (roundtrip_ok ? "yes" : "NO") +
             "; corrupted byte detected via CRC: " + (crc_ok ? "yes" : "NO") +
             "; metrics bit-identical across round trip: " + (metrics_ok ? "yes" : "NO"));
}

// -- criterion 9: sub-space statistics premise ---------------------------------------------

void criterion_histogram() {
  DegradationSpec spec;
  const int bins = 32;
  double total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor<float> clean = texture_image(500 + seed, 96, 96);
    Sample s = synth_rain(clean, spec, seed);
    Tensor<float> half =
        reshape(bilinear_resize(reshape(s.degraded, {1, 3, 96, 96}), 48, 48), {3, 48, 48});
    total += histogram_l1(luminance_histogram(s.degraded, bins), luminance_histogram(half, bins));
  }
  const double mean = total / 20.0;
  report(9, "subsampled degraded images keep the luminance histogram", mean < 0.1,
         "mean 32-bin L1 distance over 20 seeds: " + fmt(mean, "%.4f") + " (< 0.1)");
}

}  // namespace

int main() {
  std::printf("acceptance suite\n================\n");
  criterion_gradients();
  criterion_loss_identities();
  criterion_toy_convergence();
  criterion_metric_oracles();
  criterion_attention();
  criterion_parameters();
  criterion_ablations();
  criterion_persistence();
  criterion_histogram();
  std::printf("================\n%s (%d failure%s)\n", g_failures == 0 ? "ALL PASS" : "FAILED",
              g_failures, g_failures == 1 ? "" : "s");
  return g_failures == 0 ? 0 : 1;
}
