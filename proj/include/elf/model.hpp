#pragma once

#include <map>

#include "elf/blocks.hpp"

namespace elf {

/// Full architecture description: one record drives model construction.
/// Ablation flags correspond to the buildable model variants.
struct ElfConfig {
  Index base_channels = 48;
  Index rtb_depth = 10;
  Index rcab_per_stage = 1;
  Index heads = 4;
  Index ffn_expansion = 6;
  Index ca_reduction = 4;
  Index subsample = 2;  // s; the two-stage pipeline works at H/s then H

  bool use_sa = true;    // transformer blocks in the RTB (else RCABs)
  bool use_dsc = true;   // asymmetric U: encoder conv units are DSC
  bool use_hfb = true;   // hybrid fusion blocks (else concat + 1x1)
  bool use_mam = true;   // cross-attention association module
  bool use_ssim_loss = true;
  bool use_sr = true;    // stage 1 in subsampled space (else full resolution)

  double loss_alpha = -0.15;
  double loss_lambda = 1.0;
  double loss_eps = 1e-3;

  static constexpr Index kEdbStages = 3;  // per side: 3 encoder + 3 decoder

  void validate() const {
    require(base_channels >= 1, "config: base_channels must be >= 1");
    require(heads >= 1 && base_channels % heads == 0, "config: heads must divide base_channels");
    require(ca_reduction >= 1 && base_channels % ca_reduction == 0,
            "config: ca_reduction must divide base_channels");
    require(subsample == 1 || subsample == 2 || subsample == 4,
            "config: subsample must be 1, 2 or 4");
    require(rtb_depth >= 1, "config: rtb_depth must be >= 1");
    require(rcab_per_stage >= 1, "config: rcab_per_stage must be >= 1");
    require(loss_eps > 0, "config: loss_eps must be > 0");
  }

  BlockSpec block_spec(bool dsc_convs) const {
    BlockSpec s;
    s.channels = base_channels;
    s.heads = heads;
    s.ffn_expansion = ffn_expansion;
    s.ca_reduction = ca_reduction;
    s.dsc = dsc_convs;
    return s;
  }

  /// Spatial dims of stage-1 inputs must be divisible by this.
  Index size_multiple() const { return (use_sr ? subsample : 1) * 8; }
};

/// IDN and BRN share topology but have disjoint parameters; MAM associates
/// the stage-1 outputs with the full-resolution input.
template <typename S>
struct ElfModel {
  ElfConfig config;
  ParameterStore<S> params;
};

namespace detail {

template <typename S>
void add_fuse(ParameterStore<S>& ps, const std::string& p, const std::vector<Index>& cins,
              Index cout, const ElfConfig& cfg, const BlockSpec& spec) {
  if (cfg.use_hfb) add_hfb(ps, p, cins, cout, spec);
  else add_concat_fuse(ps, p, cins, cout);
}

/// Dual-branch backbone: stem -> {RTB || EDB} -> fusion -> output conv.
/// EDB stages follow "resample, fuse, RCAB"; the stem features are injected
/// into every stage's fusion, and decoder stages additionally take the
/// resolution-matched encoder skip.
template <typename S>
void add_backbone(ParameterStore<S>& ps, const std::string& p, Index in_channels,
                  const ElfConfig& cfg) {
  const Index c = cfg.base_channels;
  const BlockSpec std_spec = cfg.block_spec(false);
  const BlockSpec enc_spec = cfg.block_spec(cfg.use_dsc);

  add_conv(ps, p + ".stem", in_channels, c, Index{3});
  for (Index i = 0; i < cfg.rtb_depth; ++i) {
    const std::string bp = p + ".rtb.block" + std::to_string(i);
    if (cfg.use_sa) add_transformer_block(ps, bp, std_spec);
    else add_rcab(ps, bp, std_spec);
  }
  for (Index i = 0; i < ElfConfig::kEdbStages; ++i) {
    const std::string sp = p + ".edb.enc" + std::to_string(i);
    add_resample(ps, sp + ".down", c);
    add_fuse(ps, sp + ".fuse", {c, c}, c, cfg, std_spec);
    for (Index j = 0; j < cfg.rcab_per_stage; ++j)
      add_rcab(ps, sp + ".rcab" + std::to_string(j), enc_spec);
  }
  for (Index i = 0; i < ElfConfig::kEdbStages; ++i) {
    const std::string sp = p + ".edb.dec" + std::to_string(i);
    add_resample(ps, sp + ".up", c);
    add_fuse(ps, sp + ".fuse", {c, c, c}, c, cfg, std_spec);
    for (Index j = 0; j < cfg.rcab_per_stage; ++j)
      add_rcab(ps, sp + ".rcab" + std::to_string(j), std_spec);
  }
  add_fuse(ps, p + ".fuse", {c, c, c}, c, cfg, std_spec);
  add_conv(ps, p + ".out", c, Index{3}, Index{3});
}

template <typename S>
Tensor<S> backbone_forward(const ParamView<S>& p, const Tensor<S>& x, const ElfConfig& cfg) {
  require(x.rank() == 4, "backbone: input must be [N,C,H,W]");
  require(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0,
          "backbone: spatial dims " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
              " not divisible by 8 (three encoder-decoder down-stages)");
  const BlockSpec std_spec = cfg.block_spec(false);

  Tensor<S> f0 = conv_forward(x, p.sub("stem"));

  Tensor<S> rtb = f0;
  for (Index i = 0; i < cfg.rtb_depth; ++i) {
    const ParamView<S> bp = p.sub("rtb.block" + std::to_string(i));
    rtb = cfg.use_sa ? transformer_block_forward(rtb, bp, std_spec) : rcab_forward(rtb, bp);
  }

  Tensor<S> e = f0;
  std::vector<Tensor<S>> enc_out;
  for (Index i = 0; i < ElfConfig::kEdbStages; ++i) {
    const ParamView<S> sp = p.sub("edb.enc" + std::to_string(i));
    Tensor<S> t = resample_layer_forward(e, sp.sub("down"), Resample::down2);
    Tensor<S> stem_here = bilinear_resize(f0, t.dim(2), t.dim(3));
    t = fuse_forward<S>({t, stem_here}, sp.sub("fuse"));
    for (Index j = 0; j < cfg.rcab_per_stage; ++j)
      t = rcab_forward(t, sp.sub("rcab" + std::to_string(j)));
    e = t;
    enc_out.push_back(e);
  }
  // decoder skips, resolution-matched: enc1 (H/4), enc0 (H/2), stem (H)
  for (Index i = 0; i < ElfConfig::kEdbStages; ++i) {
    const ParamView<S> sp = p.sub("edb.dec" + std::to_string(i));
    Tensor<S> t = resample_layer_forward(e, sp.sub("up"), Resample::up2);
    Tensor<S> skip = (i + 2 <= ElfConfig::kEdbStages)
                         ? enc_out[static_cast<std::size_t>(ElfConfig::kEdbStages - 2 - i)]
                         : f0;
    Tensor<S> stem_here = bilinear_resize(f0, t.dim(2), t.dim(3));
    t = fuse_forward<S>({t, skip, stem_here}, sp.sub("fuse"));
    for (Index j = 0; j < cfg.rcab_per_stage; ++j)
      t = rcab_forward(t, sp.sub("rcab" + std::to_string(j)));
    e = t;
  }

  Tensor<S> fused = fuse_forward<S>({rtb, e, f0}, p.sub("fuse"));
  return conv_forward(fused, p.sub("out"));
}

}  // namespace detail

template <typename S>
ElfModel<S> build_model(const ElfConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ElfModel<S> m{cfg, ParameterStore<S>(seed)};
  detail::add_backbone(m.params, "idn", Index{3}, cfg);
  detail::add_backbone(m.params, "brn", cfg.base_channels, cfg);
  add_conv(m.params, "embed_background", Index{3}, cfg.base_channels, Index{3});
  if (cfg.use_mam) {
    const BlockSpec spec = cfg.block_spec(false);
    add_conv(m.params, "mam.embed_rain", Index{3}, cfg.base_channels, Index{3});
    add_conv(m.params, "mam.embed_rainmap", Index{3}, cfg.base_channels, Index{3});
    add_mdta(m.params, "mam.attn", spec);
    detail::add_fuse(m.params, "mam.fuse", {cfg.base_channels, cfg.base_channels},
                     cfg.base_channels, cfg, spec);
  }
  return m;
}

template <typename S>
Index count_params(const ElfModel<S>& m) {
  return m.params.total_scalars();
}

/// Scalar counts grouped by the first two name components, for reporting.
template <typename S>
std::map<std::string, Index> param_breakdown(const ElfModel<S>& m) {
  std::map<std::string, Index> groups;
  for (const std::string& name : m.params.names()) {
    std::size_t first = name.find('.');
    std::size_t second = first == std::string::npos ? first : name.find('.', first + 1);
    groups[name.substr(0, second)] += m.params.at(name).size();
  }
  return groups;
}

template <typename S>
struct IdnResult {
  Tensor<S> rain_map;  // predicted degradation layer, stage-1 resolution
  Tensor<S> derained;  // input minus rain map (unclipped)
};

/// Stage 1: estimate the degradation layer in the (sub)sampled space.
template <typename S>
IdnResult<S> idn_forward(const ElfConfig& cfg, const ParameterStore<S>& ps,
                         const Tensor<S>& rainy_sub) {
  Tensor<S> rain_map = detail::backbone_forward(ParamView<S>(ps, "idn"), rainy_sub, cfg);
  return {rain_map, sub(rainy_sub, rain_map)};
}

/// Cross-attention association: query/value from the full-resolution input,
/// key from the upsampled predicted rain map; fused with the embedded
/// upsampled stage-1 background.
template <typename S>
Tensor<S> mam_forward(const ElfConfig& cfg, const ParameterStore<S>& ps,
                      const Tensor<S>& rain_map_sub, const Tensor<S>& derained_sub,
                      const Tensor<S>& rainy_full, MdtaProbe<S>* probe = nullptr) {
  require(cfg.use_mam, "mam_forward: model built without the attention module");
  const Index h = rainy_full.dim(2), w = rainy_full.dim(3);
  Tensor<S> rain_up = bilinear_resize(rain_map_sub, h, w);
  Tensor<S> der_up = bilinear_resize(derained_sub, h, w);

  const ParamView<S> mam(ps, "mam");
  Tensor<S> rain_embed = conv_forward(rainy_full, mam.sub("embed_rain"));
  Tensor<S> key_embed = conv_forward(rain_up, mam.sub("embed_rainmap"));
  Tensor<S> texture = mdta_forward(rain_embed, key_embed, rain_embed, mam.sub("attn"),
                                   cfg.block_spec(false), probe);
  Tensor<S> background = conv_forward(der_up, ParamView<S>(ps, "embed_background"));
  return fuse_forward<S>({texture, background}, mam.sub("fuse"));
}

/// Stage 2: reconstruct the background; the upsampled stage-1 result enters
/// as a residual base.
template <typename S>
Tensor<S> brn_forward(const ElfConfig& cfg, const ParameterStore<S>& ps, const Tensor<S>& f_mam,
                      const Tensor<S>& derained_sub) {
  Tensor<S> residual = detail::backbone_forward(ParamView<S>(ps, "brn"), f_mam, cfg);
  Tensor<S> base = bilinear_resize(derained_sub, f_mam.dim(2), f_mam.dim(3));
  return add(residual, base);
}

template <typename S>
struct ElfOutputs {
  Tensor<S> derained_sub;   // stage-1 result at H/s
  Tensor<S> restored_full;  // stage-2 result at H
  Tensor<S> rain_map_sub;   // predicted degradation layer at H/s
};

template <typename S>
ElfOutputs<S> elf_forward(const ElfConfig& cfg, const ParameterStore<S>& ps,
                          const Tensor<S>& rainy_full) {
  require(rainy_full.rank() == 4 && rainy_full.dim(1) == 3, "elf: input must be [N,3,H,W]");
  const Index h = rainy_full.dim(2), w = rainy_full.dim(3);
  const Index mult = cfg.size_multiple();
  require(h % mult == 0 && w % mult == 0,
          "elf: input " + std::to_string(h) + "x" + std::to_string(w) +
              " must be divisible by " + std::to_string(mult));

  Tensor<S> rainy_sub = cfg.use_sr
                            ? bilinear_resize(rainy_full, h / cfg.subsample, w / cfg.subsample)
                            : rainy_full;
  auto stage1 = idn_forward(cfg, ps, rainy_sub);

  Tensor<S> features;
  if (cfg.use_mam) {
    features = mam_forward(cfg, ps, stage1.rain_map, stage1.derained, rainy_full);
  } else {
    Tensor<S> der_up = bilinear_resize(stage1.derained, h, w);
    features = conv_forward(der_up, ParamView<S>(ps, "embed_background"));
  }
  Tensor<S> restored = brn_forward(cfg, ps, features, stage1.derained);
  return {stage1.derained, restored, stage1.rain_map};
}

template <typename S>
ElfOutputs<S> elf_forward(const ElfModel<S>& m, const Tensor<S>& rainy_full) {
  return elf_forward(m.config, m.params, rainy_full);
}

}  // namespace elf
