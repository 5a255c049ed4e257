#pragma once

#include <cstdio>
#include <filesystem>
#include <map>

#include "elf/checkpoint.hpp"
#include "elf/losses.hpp"
#include "elf/model.hpp"
#include "elf/synth.hpp"

namespace elf {

/// Bias-corrected Adam moments, keyed by parameter name.
template <typename S>
struct AdamState {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;
  std::map<std::string, std::vector<S>> m, v;
};

inline double lr_at_epoch(int epoch, double base_lr = 2e-4, double decay = 0.8,
                          int interval = 65) {
  require(epoch >= 0, "lr_at_epoch: epoch must be >= 0");
  return base_lr * std::pow(decay, static_cast<double>(epoch / interval));
}

/// Gradients of the backward'd loss for every named parameter of a tracked
/// store; parameters the loss never touched get zeros.
template <typename S>
std::map<std::string, Tensor<S>> gradients_by_name(const Tape<S>& tape,
                                                   const ParameterStore<S>& tracked) {
  std::map<std::string, Tensor<S>> out;
  for (const std::string& name : tracked.names()) out.emplace(name, tape.grad(tracked.at(name)));
  return out;
}

/// One bias-corrected Adam update over every parameter; t increments once.
/// Non-finite gradients abort with a diagnostic naming the parameter.
template <typename S>
void adam_step(ParameterStore<S>& params, const std::map<std::string, Tensor<S>>& grads,
               AdamState<S>& state) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (const std::string& name : params.names()) {
    auto git = grads.find(name);
    require(git != grads.end(), "adam: missing gradient for '" + name + "'");
    const Tensor<S>& g = git->second;
    const Tensor<S>& p = params.at(name);
    require(g.shape() == p.shape(), "adam: gradient shape mismatch for '" + name + "'");
    for (Index i = 0; i < g.size(); ++i)
      if (!std::isfinite(static_cast<double>(g.at(i))))
        fail("adam: non-finite gradient in '" + name + "'");

    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(static_cast<std::size_t>(p.size()), S(0));
    if (v.empty()) v.assign(static_cast<std::size_t>(p.size()), S(0));

    std::vector<S> updated(p.values());
    const S lr = static_cast<S>(state.lr);
    for (Index i = 0; i < p.size(); ++i) {
      const std::size_t k = static_cast<std::size_t>(i);
      m[k] = static_cast<S>(state.beta1) * m[k] + static_cast<S>(1.0 - state.beta1) * g.at(i);
      v[k] = static_cast<S>(state.beta2) * v[k] + static_cast<S>(1.0 - state.beta2) * g.at(i) * g.at(i);
      const double mh = static_cast<double>(m[k]) / bc1;
      const double vh = static_cast<double>(v[k]) / bc2;
      const S step = static_cast<S>(mh / (std::sqrt(vh) + state.eps));
      updated[k] -= lr * step;
    }
    params.set(name, Tensor<S>(p.shape(), std::move(updated)));
  }
}

// -- checkpoint binding ----------------------------------------------------------

inline constexpr const char* kOptPrefix = "opt.adam.";

inline void save_checkpoint(const std::string& path, const ElfModel<float>& model,
                            const AdamState<float>& opt, std::uint32_t epoch) {
  CheckpointData data;
  data.epoch = epoch;
  for (const std::string& name : model.params.names())
    data.tensors.emplace_back(name, model.params.at(name));
  data.tensors.emplace_back(std::string(kOptPrefix) + "t",
                            Tensor<float>::scalar(static_cast<float>(opt.t)));
  for (const std::string& name : model.params.names()) {
    auto mit = opt.m.find(name);
    if (mit == opt.m.end()) continue;
    const Shape& shape = model.params.at(name).shape();
    data.tensors.emplace_back(std::string(kOptPrefix) + "m." + name,
                              Tensor<float>(shape, mit->second));
    data.tensors.emplace_back(std::string(kOptPrefix) + "v." + name,
                              Tensor<float>(shape, opt.v.at(name)));
  }
  write_checkpoint_file(path, data);
}

/// Restore weights and optimizer state into a model built from the matching
/// config. The checkpoint's non-optimizer name set must equal the model's
/// parameter names exactly.
inline std::uint32_t load_checkpoint(const std::string& path, ElfModel<float>& model,
                                     AdamState<float>* opt) {
  const CheckpointData data = read_checkpoint_file(path);
  std::map<std::string, const Tensor<float>*> by_name;
  std::size_t model_tensor_count = 0;
  for (const auto& [name, tensor] : data.tensors) {
    by_name[name] = &tensor;
    if (!name.starts_with(kOptPrefix)) ++model_tensor_count;
  }
  if (model_tensor_count != model.params.count())
    throw IoError("checkpoint: incompatible model (tensor count mismatch)");
  for (const std::string& name : model.params.names()) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw IoError("checkpoint: incompatible model (missing '" + name + "')");
    if (it->second->shape() != model.params.at(name).shape())
      throw IoError("checkpoint: incompatible model (shape mismatch for '" + name + "')");
    model.params.set(name, *it->second);
  }
  if (opt) {
    opt->t = 0;
    opt->m.clear();
    opt->v.clear();
    if (auto it = by_name.find(std::string(kOptPrefix) + "t"); it != by_name.end())
      opt->t = static_cast<std::int64_t>(it->second->item());
    for (const std::string& name : model.params.names()) {
      auto mit = by_name.find(std::string(kOptPrefix) + "m." + name);
      auto vit = by_name.find(std::string(kOptPrefix) + "v." + name);
      if (mit != by_name.end() && vit != by_name.end()) {
        opt->m[name] = mit->second->values();
        opt->v[name] = vit->second->values();
      }
    }
  }
  return data.epoch;
}

// -- training loop -----------------------------------------------------------------

struct TrainConfig {
  int epochs = 500;
  int batch_size = 12;
  int patch_size = 256;
  std::uint64_t seed = 0;
  double base_lr = 2e-4;
  double lr_decay = 0.8;
  int lr_decay_interval = 65;
  int checkpoint_interval = 10;
  int max_steps = 0;  // 0 = no cap
  std::string checkpoint_dir;

  void validate(const ElfConfig& model_cfg) const {
    require(epochs >= 1, "train: epochs must be >= 1");
    require(batch_size >= 1, "train: batch_size must be >= 1");
    require(patch_size >= 1 && patch_size % model_cfg.size_multiple() == 0,
            "train: patch_size must be divisible by " +
                std::to_string(model_cfg.size_multiple()));
    require(base_lr > 0 && lr_decay > 0 && lr_decay_interval >= 1, "train: bad lr schedule");
  }
};

struct TrainResult {
  std::vector<std::string> log_lines;  // "epoch,step,loss,lr"
  int steps = 0;
  double final_loss = 0;
  bool aborted = false;
  std::string abort_reason;
  std::string last_checkpoint;
};

struct EvalResult {
  double psnr_restored = 0, ssim_restored = 0;
  double psnr_degraded = 0, ssim_degraded = 0;
  int count = 0;
};

template <typename S>
Tensor<S> stack_images(const std::vector<const Tensor<float>*>& images) {
  require(!images.empty(), "stack: no images");
  const Shape& s0 = images[0]->shape();
  std::vector<S> out;
  out.reserve(images.size() * static_cast<std::size_t>(numel(s0)));
  for (const Tensor<float>* img : images) {
    require(img->shape() == s0, "stack: image size mismatch");
    for (Index i = 0; i < img->size(); ++i) out.push_back(static_cast<S>(img->at(i)));
  }
  return Tensor<S>(Shape{static_cast<Index>(images.size()), s0[0], s0[1], s0[2]}, std::move(out));
}

inline LossConfig loss_config_of(const ElfConfig& cfg) {
  LossConfig lc;
  lc.alpha = cfg.loss_alpha;
  lc.lambda = cfg.loss_lambda;
  lc.eps = cfg.loss_eps;
  lc.use_ssim = cfg.use_ssim_loss;
  return lc;
}

/// Inference with clipping; reports restored-vs-clean and degraded-vs-clean
/// so the improvement is self-evident.
template <typename S>
EvalResult evaluate(const ElfModel<S>& model, const std::vector<Sample>& set) {
  EvalResult r;
  LossConfig lc = loss_config_of(model.config);
  for (const Sample& sample : set) {
    Tensor<S> x = stack_images<S>({&sample.degraded});
    Tensor<S> gt = stack_images<S>({&sample.clean});
    auto y = elf_forward(model, x);
    Tensor<S> restored = clip01(y.restored_full);
    r.psnr_restored += psnr(restored, gt);
    r.ssim_restored += ssim(restored, gt, lc).item();
    r.psnr_degraded += psnr(x, gt);
    r.ssim_degraded += ssim(x, gt, lc).item();
    ++r.count;
  }
  if (r.count > 0) {
    r.psnr_restored /= r.count;
    r.ssim_restored /= r.count;
    r.psnr_degraded /= r.count;
    r.ssim_degraded /= r.count;
  }
  return r;
}

namespace detail {

inline std::string format_log_line(int epoch, int step, double loss, double lr) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g", epoch, step, loss, lr);
  return buf;
}

}  // namespace detail

/// Epoch loop minimizing the joint two-stage objective with Adam and the
/// step-decay schedule. Deterministic given the seed; a non-finite loss or
/// gradient aborts with the last-good checkpoint retained on disk.
template <typename S>
TrainResult run_training(ElfModel<S>& model, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& eval_set, const TrainConfig& cfg) {
  cfg.validate(model.config);
  require(!train_set.empty(), "train: dataset is empty");
  for (const Sample& s : train_set)
    require(s.clean.dim(1) >= cfg.patch_size && s.clean.dim(2) >= cfg.patch_size,
            "train: sample smaller than patch size");

  const LossConfig lc = loss_config_of(model.config);
  const Index sub = model.config.use_sr ? model.config.subsample : 1;
  require(!lc.use_ssim || cfg.patch_size / sub >= lc.ssim_window,
          "train: patch/subsample smaller than the SSIM window");

  AdamState<S> opt;
  opt.lr = cfg.base_lr;

  TrainResult result;
  std::uint64_t shuffle_rng = cfg.seed * 0x9E3779B97F4A7C15ull + 0x5EEDull;
  std::uint64_t patch_rng = cfg.seed * 0xD1B54A32D192ED03ull + 0xCA0Full;
  const int steps_per_epoch = std::max<int>(1, static_cast<int>(train_set.size()) / cfg.batch_size);

  double best_psnr = -1;
  auto maybe_checkpoint = [&](int epoch, bool force) {
    if (cfg.checkpoint_dir.empty()) return;
    if (!force && (epoch % cfg.checkpoint_interval) != 0) return;
    if constexpr (std::is_same_v<S, float>) {
      namespace fs = std::filesystem;
      fs::create_directories(cfg.checkpoint_dir);
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%05d.elf", epoch);
      const std::string path = (fs::path(cfg.checkpoint_dir) / name).string();
      save_checkpoint(path, model, opt, static_cast<std::uint32_t>(epoch));
      result.last_checkpoint = path;
      if (!eval_set.empty()) {
        const EvalResult ev = evaluate(model, eval_set);
        if (ev.psnr_restored > best_psnr) {
          best_psnr = ev.psnr_restored;
          save_checkpoint((fs::path(cfg.checkpoint_dir) / "ckpt_best.elf").string(), model, opt,
                          static_cast<std::uint32_t>(epoch));
        }
      }
    }
  };

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  int global_step = 0;
  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      opt.lr = lr_at_epoch(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_decay_interval);
      for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = splitmix64(shuffle_rng) % i;
        std::swap(order[i - 1], order[j]);
      }
      for (int step = 0; step < steps_per_epoch; ++step) {
        std::vector<Sample> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
          const Sample& src = train_set[order[(static_cast<std::size_t>(step) * cfg.batch_size + b) %
                                              order.size()]];
          Sample patch = (src.clean.dim(1) == cfg.patch_size && src.clean.dim(2) == cfg.patch_size)
                             ? src
                             : crop_patch(src, cfg.patch_size, patch_rng,
                                          model.config.size_multiple());
          batch.push_back(augment(patch, patch_rng));
        }
        std::vector<const Tensor<float>*> degraded, clean;
        for (const Sample& s : batch) {
          degraded.push_back(&s.degraded);
          clean.push_back(&s.clean);
        }
        Tensor<S> x = stack_images<S>(degraded);
        Tensor<S> gt = stack_images<S>(clean);

        Tape<S> tape;
        ParameterStore<S> tracked = model.params.tracked(tape);
        auto y = elf_forward(model.config, tracked, x);
        Tensor<S> gt_sub = bilinear_resize(gt, gt.dim(2) / sub, gt.dim(3) / sub);
        Tensor<S> loss = loss_total(y.derained_sub, gt_sub, y.restored_full, gt, lc);
        const double loss_value = static_cast<double>(loss.item());
        require(std::isfinite(loss_value), "train: non-finite loss");
        tape.backward(loss);
        adam_step(model.params, gradients_by_name(tape, tracked), opt);

        result.log_lines.push_back(detail::format_log_line(epoch, global_step, loss_value, opt.lr));
        result.final_loss = loss_value;
        ++global_step;
        if (cfg.max_steps > 0 && global_step >= cfg.max_steps) {
          result.steps = global_step;
          maybe_checkpoint(epoch, true);
          return result;
        }
      }
      maybe_checkpoint(epoch, epoch + 1 == cfg.epochs);
    }
  } catch (const TensorError& e) {
    result.aborted = true;
    result.abort_reason = e.what();
  }
  result.steps = global_step;
  return result;
}

}  // namespace elf
