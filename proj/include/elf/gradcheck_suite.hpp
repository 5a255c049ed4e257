#pragma once

#include "elf/gradcheck.hpp"
#include "elf/losses.hpp"
#include "elf/model.hpp"

namespace elf {

/// Uniform random tensor in [lo,hi), deterministic in seed.
template <typename S>
Tensor<S> random_uniform(Shape shape, double lo, double hi, std::uint64_t seed) {
  std::uint64_t state = seed * 0x9E3779B97F4A7C15ull + 1;
  const Index n = numel(shape);
  std::vector<S> data(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    data[static_cast<std::size_t>(i)] = static_cast<S>(uniform_in(state, lo, hi));
  return Tensor<S>(std::move(shape), std::move(data));
}

/// Uniform random tensor whose entries keep a margin away from zero; used to
/// place relu inputs away from the kink, where the op is non-differentiable
/// and a finite-difference probe would be meaningless.
template <typename S>
Tensor<S> random_away_from_zero(Shape shape, double margin, double hi, std::uint64_t seed) {
  std::uint64_t state = seed * 0x9E3779B97F4A7C15ull + 1;
  const Index n = numel(shape);
  std::vector<S> data(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const double mag = uniform_in(state, margin, hi);
    data[static_cast<std::size_t>(i)] = static_cast<S>(uniform01(state) < 0.5 ? -mag : mag);
  }
  return Tensor<S>(std::move(shape), std::move(data));
}

struct GradSuiteOptions {
  double tol = 1e-4;
  double pipeline_tol = 1e-3;
  int probes = 100;            // per single-tensor op check
  int block_probes = 24;       // per tensor inside block checks
  std::uint64_t seed = 7;
  bool include_pipeline = true;
};

namespace detail {

/// Weighted sum to a scalar with fixed (untracked) weights; a plain sum would
/// feed a uniform output gradient and mask transposition bugs.
template <typename S>
Tensor<S> weighted_sum(const Tensor<S>& y, std::uint64_t seed) {
  Tensor<S> w = random_away_from_zero<S>(y.shape(), 0.2, 1.0, seed ^ 0xFEEDull);
  return reduce_sum(mul(y, w.detached()));
}

/// Check d(loss)/d(tensor) for one op: fn maps the varied tensor to a scalar.
template <typename S>
void run_check(std::vector<GradReport>& out, const std::string& name,
               const std::function<Tensor<S>(const Tensor<S>&)>& fn, const Tensor<S>& x,
               const GradSuiteOptions& opt) {
  out.push_back(finite_diff_check<S>(name, fn, x, S(1e-4), static_cast<S>(opt.tol), opt.probes,
                                     opt.seed));
}

/// Block-style check: one tape pass gives analytic grads for the input and
/// every parameter; each is then validated against finite differences.
template <typename S, typename Forward>
GradReport check_with_params(const std::string& name, Forward forward, const Tensor<S>& x,
                             const ParameterStore<S>& ps, double tol, int probes_per_tensor,
                             std::uint64_t seed, const std::vector<std::string>& param_subset = {}) {
  Tape<S> tape;
  ParameterStore<S> tracked = ps.tracked(tape);
  Tensor<S> leaf = tape.leaf(x);
  Tensor<S> loss = forward(leaf, tracked);
  require(loss.size() == 1, "gradcheck: forward must produce a scalar");
  tape.backward(loss);

  GradReport agg;
  agg.op_name = name;
  agg.pass = true;
  auto fold = [&](const GradReport& r) {
    agg.max_rel_error = std::max(agg.max_rel_error, r.max_rel_error);
    agg.max_abs_error = std::max(agg.max_abs_error, r.max_abs_error);
    agg.probe_count += r.probe_count;
    agg.pass = agg.pass && r.pass;
  };

  // input
  {
    Tensor<S> analytic = tape.grad(leaf);
    auto fn = [&](const Tensor<S>& t) { return forward(t, ps); };
    fold(finite_diff_compare<S>(name + "/input", fn, x, analytic, S(1e-4), static_cast<S>(tol),
                                std::max(probes_per_tensor, 100), seed));
  }
  // parameters
  const std::vector<std::string>& names = param_subset.empty() ? ps.names() : param_subset;
  for (const std::string& pname : names) {
    Tensor<S> analytic = tape.grad(tracked.at(pname));
    auto fn = [&](const Tensor<S>& t) {
      ParameterStore<S> altered = ps;  // shallow tensor copies
      altered.set(pname, t);
      return forward(x, altered);
    };
    fold(finite_diff_compare<S>(name + "/" + pname, fn, ps.at(pname), analytic, S(1e-4),
                                static_cast<S>(tol), probes_per_tensor, seed ^ fnv1a64(pname)));
  }
  return agg;
}

}  // namespace detail

/// Finite-difference validation of every differentiable op (f64).
inline std::vector<GradReport> gradcheck_ops(const GradSuiteOptions& opt = {}) {
  using T = Tensor<double>;
  std::vector<GradReport> out;
  const std::uint64_t sd = opt.seed;
  const Shape img{2, 3, 6, 6};

  T a = random_uniform<double>(img, -1, 1, sd + 1);
  T b = random_uniform<double>(img, -1, 1, sd + 2);
  T pos = random_uniform<double>(img, 0.5, 1.5, sd + 3);

  detail::run_check<double>(out, "add/a", [&](const T& t) { return detail::weighted_sum(add(t, b), sd); }, a, opt);
  detail::run_check<double>(out, "add/b", [&](const T& t) { return detail::weighted_sum(add(a, t), sd); }, b, opt);
  {
    T bias = random_uniform<double>({3}, -1, 1, sd + 4);
    detail::run_check<double>(out, "add/channel_bias",
                              [&](const T& t) { return detail::weighted_sum(add(a, t), sd); }, bias, opt);
  }
  detail::run_check<double>(out, "sub", [&](const T& t) { return detail::weighted_sum(sub(t, b), sd); }, a, opt);
  detail::run_check<double>(out, "mul/a", [&](const T& t) { return detail::weighted_sum(mul(t, b), sd); }, a, opt);
  detail::run_check<double>(out, "mul/b", [&](const T& t) { return detail::weighted_sum(mul(a, t), sd); }, b, opt);
  detail::run_check<double>(out, "div/a", [&](const T& t) { return detail::weighted_sum(div(t, pos), sd); }, a, opt);
  detail::run_check<double>(out, "div/b", [&](const T& t) { return detail::weighted_sum(div(a, t), sd); }, pos, opt);
  detail::run_check<double>(out, "scale", [&](const T& t) { return detail::weighted_sum(scale(t, 1.7), sd); }, a, opt);
  detail::run_check<double>(out, "relu",
                            [&](const T& t) { return detail::weighted_sum(relu(t), sd); },
                            random_away_from_zero<double>(img, 0.05, 1.0, sd + 5), opt);
  detail::run_check<double>(out, "gelu", [&](const T& t) { return detail::weighted_sum(gelu(t), sd); }, a, opt);
  detail::run_check<double>(out, "sigmoid", [&](const T& t) { return detail::weighted_sum(sigmoid(t), sd); }, a, opt);
  detail::run_check<double>(out, "sqrt", [&](const T& t) { return detail::weighted_sum(sqrt(t), sd); }, pos, opt);
  detail::run_check<double>(out, "square", [&](const T& t) { return detail::weighted_sum(square(t), sd); }, a, opt);

  {
    T ma = random_uniform<double>({2, 3, 4}, -1, 1, sd + 6);
    T mb = random_uniform<double>({2, 4, 5}, -1, 1, sd + 7);
    detail::run_check<double>(out, "matmul/a",
                              [&](const T& t) { return detail::weighted_sum(matmul(t, mb), sd); }, ma, opt);
    detail::run_check<double>(out, "matmul/b",
                              [&](const T& t) { return detail::weighted_sum(matmul(ma, t), sd); }, mb, opt);
    detail::run_check<double>(out, "transpose_last2",
                              [&](const T& t) { return detail::weighted_sum(transpose_last2(t), sd); }, ma, opt);
  }
  detail::run_check<double>(out, "reshape",
                            [&](const T& t) { return detail::weighted_sum(reshape(t, {2, 3, 36}), sd); }, a, opt);
  detail::run_check<double>(out, "concat",
                            [&](const T& t) {
                              return detail::weighted_sum(concat<double>({t, b.detached()}, 1), sd);
                            },
                            a, opt);
  detail::run_check<double>(out, "split",
                            [&](const T& t) {
                              auto parts = split(t, 1, {1, 2});
                              return add(detail::weighted_sum(parts[0], sd),
                                         detail::weighted_sum(parts[1], sd + 1));
                            },
                            a, opt);

  {
    T x = random_uniform<double>({2, 3, 6, 6}, -1, 1, sd + 8);
    T w = random_uniform<double>({4, 3, 3, 3}, -0.5, 0.5, sd + 9);
    T bias = random_uniform<double>({4}, -0.2, 0.2, sd + 10);
    auto cv = [&](const T& xx, const T& ww, const T& bb) {
      return detail::weighted_sum(conv2d(xx, ww, bb, 1, 1), sd);
    };
    detail::run_check<double>(out, "conv2d/x", [&](const T& t) { return cv(t, w, bias); }, x, opt);
    detail::run_check<double>(out, "conv2d/w", [&](const T& t) { return cv(x, t, bias); }, w, opt);
    detail::run_check<double>(out, "conv2d/b", [&](const T& t) { return cv(x, w, t); }, bias, opt);
    detail::run_check<double>(out, "conv2d/stride2",
                              [&](const T& t) {
                                return detail::weighted_sum(conv2d(t, w, bias, 2, 1), sd);
                              },
                              random_uniform<double>({2, 3, 7, 7}, -1, 1, sd + 11), opt);
    T dw = random_uniform<double>({3, 1, 3, 3}, -0.5, 0.5, sd + 12);
    T dbias = random_uniform<double>({3}, -0.2, 0.2, sd + 13);
    auto dcv = [&](const T& xx, const T& ww, const T& bb) {
      return detail::weighted_sum(depthwise_conv2d(xx, ww, bb, 1, 1), sd);
    };
    detail::run_check<double>(out, "depthwise_conv2d/x", [&](const T& t) { return dcv(t, dw, dbias); }, x, opt);
    detail::run_check<double>(out, "depthwise_conv2d/w", [&](const T& t) { return dcv(x, t, dbias); }, dw, opt);
    detail::run_check<double>(out, "depthwise_conv2d/b", [&](const T& t) { return dcv(x, dw, t); }, dbias, opt);
  }

  detail::run_check<double>(out, "bilinear_resize/up",
                            [&](const T& t) { return detail::weighted_sum(bilinear_resize(t, 11, 13), sd); },
                            a, opt);
  detail::run_check<double>(out, "bilinear_resize/down",
                            [&](const T& t) { return detail::weighted_sum(bilinear_resize(t, 3, 4), sd); },
                            a, opt);
  detail::run_check<double>(out, "softmax/last",
                            [&](const T& t) { return detail::weighted_sum(softmax(t, -1), sd); }, a, opt);
  detail::run_check<double>(out, "softmax/channel",
                            [&](const T& t) { return detail::weighted_sum(softmax(t, 1), sd); }, a, opt);
  {
    T gamma = random_uniform<double>({3}, 0.5, 1.5, sd + 14);
    T beta = random_uniform<double>({3}, -0.5, 0.5, sd + 15);
    detail::run_check<double>(out, "layer_norm/x",
                              [&](const T& t) {
                                return detail::weighted_sum(layer_norm(t, gamma, beta, 1e-5), sd);
                              },
                              a, opt);
    detail::run_check<double>(out, "layer_norm/gamma",
                              [&](const T& t) {
                                return detail::weighted_sum(layer_norm(a, t, beta, 1e-5), sd);
                              },
                              gamma, opt);
    detail::run_check<double>(out, "layer_norm/beta",
                              [&](const T& t) {
                                return detail::weighted_sum(layer_norm(a, gamma, t, 1e-5), sd);
                              },
                              beta, opt);
  }
  detail::run_check<double>(out, "reduce_sum/axes",
                            [&](const T& t) { return detail::weighted_sum(reduce_sum(t, {1}, false), sd); },
                            a, opt);
  detail::run_check<double>(out, "reduce_mean/all",
                            [&](const T& t) { return reduce_mean(t); }, a, opt);
  detail::run_check<double>(out, "global_avg_pool",
                            [&](const T& t) { return detail::weighted_sum(global_avg_pool(t), sd); },
                            a, opt);

  // losses
  {
    LossConfig lc;
    T p = random_uniform<double>({1, 3, 12, 12}, 0.1, 0.9, sd + 16);
    T g = random_uniform<double>({1, 3, 12, 12}, 0.1, 0.9, sd + 17);
    detail::run_check<double>(out, "charbonnier",
                              [&](const T& t) { return charbonnier(t, g, 1e-3); }, p, opt);
    detail::run_check<double>(out, "ssim", [&](const T& t) { return ssim(t, g, lc); }, p, opt);
    detail::run_check<double>(out, "loss_stage",
                              [&](const T& t) { return loss_stage(t, g, lc); }, p, opt);
    T ps_ = random_uniform<double>({1, 3, 12, 12}, 0.1, 0.9, sd + 18);
    T gs = random_uniform<double>({1, 3, 12, 12}, 0.1, 0.9, sd + 19);
    detail::run_check<double>(out, "loss_total",
                              [&](const T& t) { return loss_total(ps_, gs, t, g, lc); }, p, opt);
  }
  return out;
}

/// Finite-difference validation of every composite block (f64), including
/// gradients w.r.t. all block parameters.
inline std::vector<GradReport> gradcheck_blocks(const GradSuiteOptions& opt = {}) {
  using D = double;
  std::vector<GradReport> out;
  const std::uint64_t sd = opt.seed;

  BlockSpec spec;
  spec.channels = 8;
  spec.heads = 2;
  spec.ffn_expansion = 2;
  spec.ca_reduction = 2;
  spec.dsc = true;
  const Shape img{2, spec.channels, 8, 8};
  const Tensor<D> x = random_uniform<D>(img, -0.9, 0.9, sd + 30);

  auto block = [&](const std::string& name, auto forward, const ParameterStore<D>& ps,
                   const Tensor<D>& input, double tol) {
    out.push_back(detail::check_with_params<D>(name, forward, input, ps, tol, opt.block_probes,
                                               sd + fnv1a64(name)));
  };
  // Push relu pre-activations well away from the kink, where the finite
  // difference is meaningless; the 0-branch derivative is covered by the
  // dedicated relu op check.
  auto bias_relus = [](ParameterStore<D>& ps, const std::vector<std::string>& names) {
    for (const std::string& n : names)
      ps.set(n, Tensor<D>::full(ps.at(n).shape(), 2.0));
  };

  {
    ParameterStore<D> ps(sd + 31);
    add_dsc(ps, "u", spec.channels, spec.channels, spec.kernel);
    block("dsc_forward",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(dsc_forward(t, ParamView<D>(p, "u")), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 32);
    add_channel_attention(ps, "ca", spec.channels, spec.ca_reduction);
    bias_relus(ps, {"ca.reduce.bias"});
    block("channel_attention_forward",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(channel_attention_forward(t, ParamView<D>(p, "ca")), sd);
          },
          ps, x, opt.tol);
  }
  for (bool dsc_flag : {false, true}) {
    BlockSpec s = spec;
    s.dsc = dsc_flag;
    ParameterStore<D> ps(sd + 33 + (dsc_flag ? 1 : 0));
    add_rcab(ps, "r", s);
    bias_relus(ps, {dsc_flag ? "r.conv1.pw.bias" : "r.conv1.bias", "r.ca.reduce.bias"});
    block(dsc_flag ? "rcab_forward/dsc" : "rcab_forward/std",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(rcab_forward(t, ParamView<D>(p, "r")), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 35);
    add_mdta(ps, "attn", spec);
    const Tensor<D> xk = random_uniform<D>(img, -0.9, 0.9, sd + 36);
    block("mdta_forward/self",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(mdta_forward(t, t, t, ParamView<D>(p, "attn"), spec), sd);
          },
          ps, x, opt.tol);
    block("mdta_forward/cross",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(mdta_forward(t, xk, t, ParamView<D>(p, "attn"), spec), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 37);
    add_ffn(ps, "ffn", spec);
    block("ffn_forward",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(ffn_forward(t, ParamView<D>(p, "ffn")), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 38);
    add_transformer_block(ps, "tb", spec);
    block("transformer_block_forward",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(transformer_block_forward(t, ParamView<D>(p, "tb"), spec), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 39);
    add_hfb(ps, "h2", {spec.channels, spec.channels}, spec.channels, spec);
    bias_relus(ps, {"h2.ca.reduce.bias"});
    const Tensor<D> other = random_uniform<D>(img, -0.9, 0.9, sd + 40);
    block("hfb_forward/2in",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(hfb_forward<D>({t, other}, ParamView<D>(p, "h2")), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 41);
    add_hfb(ps, "h3", {spec.channels, spec.channels, spec.channels}, spec.channels, spec);
    bias_relus(ps, {"h3.ca.reduce.bias"});
    const Tensor<D> o1 = random_uniform<D>(img, -0.9, 0.9, sd + 42);
    const Tensor<D> o2 = random_uniform<D>(img, -0.9, 0.9, sd + 43);
    block("hfb_forward/3in",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(hfb_forward<D>({t, o1, o2}, ParamView<D>(p, "h3")), sd);
          },
          ps, x, opt.tol);
  }
  {
    ParameterStore<D> ps(sd + 44);
    add_resample(ps, "rs", spec.channels);
    block("resample_layer_forward/down2",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(resample_layer_forward(t, ParamView<D>(p, "rs"), Resample::down2), sd);
          },
          ps, x, opt.tol);
    block("resample_layer_forward/up2",
          [&](const Tensor<D>& t, const ParameterStore<D>& p) {
            return detail::weighted_sum(resample_layer_forward(t, ParamView<D>(p, "rs"), Resample::up2), sd);
          },
          ps, x, opt.tol);
  }
  return out;
}

inline ElfConfig tiny_config() {
  ElfConfig cfg;
  cfg.base_channels = 4;
  cfg.rtb_depth = 1;
  cfg.heads = 1;
  cfg.ffn_expansion = 2;
  cfg.ca_reduction = 2;
  cfg.subsample = 2;
  return cfg;
}

/// MAM and full-pipeline checks at a tiny configuration (f64, tol 1e-3).
inline std::vector<GradReport> gradcheck_pipeline(const GradSuiteOptions& opt = {}) {
  using D = double;
  std::vector<GradReport> out;
  const std::uint64_t sd = opt.seed;
  const ElfConfig cfg = tiny_config();
  ElfModel<D> model = build_model<D>(cfg, sd + 50);

  // deterministic spread of parameter tensors across submodules
  std::vector<std::string> subset;
  const auto& names = model.params.names();
  for (std::size_t i = 0; i < names.size(); i += std::max<std::size_t>(1, names.size() / 12))
    subset.push_back(names[i]);

  {
    const Tensor<D> rain_map = random_uniform<D>({1, 3, 8, 8}, 0.0, 0.4, sd + 51);
    const Tensor<D> derained = random_uniform<D>({1, 3, 8, 8}, 0.1, 0.9, sd + 52);
    const Tensor<D> rainy = random_uniform<D>({1, 3, 16, 16}, 0.1, 0.9, sd + 53);
    out.push_back(detail::check_with_params<D>(
        "mam_forward",
        [&](const Tensor<D>& t, const ParameterStore<D>& p) {
          return detail::weighted_sum(mam_forward(cfg, p, rain_map, derained, t), sd);
        },
        rainy, model.params, opt.pipeline_tol, 10, sd + 54, subset));
  }
  {
    const Tensor<D> rainy = random_uniform<D>({1, 3, 16, 16}, 0.1, 0.9, sd + 55);
    const Tensor<D> gt = random_uniform<D>({1, 3, 16, 16}, 0.1, 0.9, sd + 56);
    LossConfig lc;
    lc.use_ssim = true;
    lc.ssim_window = 7;  // the 16x16 pipeline's stage-1 output is 8x8
    out.push_back(detail::check_with_params<D>(
        "elf_pipeline",
        [&](const Tensor<D>& t, const ParameterStore<D>& p) {
          auto y = elf_forward(cfg, p, t);
          Tensor<D> gt_sub = bilinear_resize(gt, 8, 8);
          return loss_total(y.derained_sub, gt_sub, y.restored_full, gt, lc);
        },
        rainy, model.params, opt.pipeline_tol, 10, sd + 57, subset));
  }
  return out;
}

inline std::vector<GradReport> run_gradcheck_suite(const GradSuiteOptions& opt = {}) {
  std::vector<GradReport> all = gradcheck_ops(opt);
  std::vector<GradReport> blocks = gradcheck_blocks(opt);
  all.insert(all.end(), blocks.begin(), blocks.end());
  if (opt.include_pipeline) {
    std::vector<GradReport> pipe = gradcheck_pipeline(opt);
    all.insert(all.end(), pipe.begin(), pipe.end());
  }
  return all;
}

}  // namespace elf
