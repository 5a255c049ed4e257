#pragma once

#include "elf/ops.hpp"
#include "elf/params.hpp"

namespace elf {

/// Shared structural knobs for the ELF building blocks.
struct BlockSpec {
  Index channels = 48;
  Index heads = 4;
  Index ffn_expansion = 6;
  Index ca_reduction = 4;
  bool dsc = true;  // depthwise-separable k x k conv units
  Index kernel = 3;

  void validate() const {
    require(channels >= 1, "spec: channels must be >= 1");
    require(heads >= 1 && channels % heads == 0, "spec: heads must divide channels");
    require(ca_reduction >= 1 && channels % ca_reduction == 0,
            "spec: ca_reduction must divide channels");
    require(kernel >= 1 && kernel % 2 == 1, "spec: kernel must be odd");
    require(ffn_expansion >= 1, "spec: ffn_expansion must be >= 1");
  }
};

inline constexpr double kLayerNormEps = 1e-5;

// -- parameter registration ----------------------------------------------------
//
// Each add_* mirrors the corresponding *_forward exactly; the forward resolves
// parameters by name under the same prefix.

template <typename S>
void add_conv(ParameterStore<S>& ps, const std::string& p, Index cin, Index cout, Index k) {
  ps.define(p + ".weight", {cout, cin, k, k}, Init::kaiming_uniform);
  ps.define(p + ".bias", {cout}, Init::zeros);
}

template <typename S>
void add_dsc(ParameterStore<S>& ps, const std::string& p, Index cin, Index cout, Index k) {
  ps.define(p + ".dw.weight", {cin, 1, k, k}, Init::kaiming_uniform);
  ps.define(p + ".dw.bias", {cin}, Init::zeros);
  ps.define(p + ".pw.weight", {cout, cin, 1, 1}, Init::kaiming_uniform);
  ps.define(p + ".pw.bias", {cout}, Init::zeros);
}

/// k x k conv unit that is either a standard conv or a DSC, per `dsc`.
template <typename S>
void add_conv_unit(ParameterStore<S>& ps, const std::string& p, Index cin, Index cout, Index k,
                   bool dsc) {
  if (dsc) add_dsc(ps, p, cin, cout, k);
  else add_conv(ps, p, cin, cout, k);
}

template <typename S>
void add_channel_attention(ParameterStore<S>& ps, const std::string& p, Index c, Index r) {
  require(c % r == 0, "channel_attention: reduction must divide channels");
  ps.define(p + ".reduce.weight", {c / r, c, 1, 1}, Init::kaiming_uniform);
  ps.define(p + ".reduce.bias", {c / r}, Init::small_positive);
  ps.define(p + ".expand.weight", {c, c / r, 1, 1}, Init::kaiming_uniform);
  ps.define(p + ".expand.bias", {c}, Init::zeros);
}

template <typename S>
void add_rcab(ParameterStore<S>& ps, const std::string& p, const BlockSpec& spec) {
  add_conv_unit(ps, p + ".conv1", spec.channels, spec.channels, spec.kernel, spec.dsc);
  add_conv_unit(ps, p + ".conv2", spec.channels, spec.channels, spec.kernel, spec.dsc);
  add_channel_attention(ps, p + ".ca", spec.channels, spec.ca_reduction);
}

template <typename S>
void add_mdta(ParameterStore<S>& ps, const std::string& p, const BlockSpec& spec) {
  const Index c = spec.channels;
  for (const char* leg : {"q", "k", "v"}) {
    ps.define(p + "." + leg + "_pointwise.weight", {c, c, 1, 1}, Init::kaiming_uniform);
    ps.define(p + "." + leg + "_pointwise.bias", {c}, Init::zeros);
    ps.define(p + "." + leg + "_depthwise.weight", {c, 1, spec.kernel, spec.kernel},
              Init::kaiming_uniform);
    ps.define(p + "." + leg + "_depthwise.bias", {c}, Init::zeros);
  }
  ps.define(p + ".temperature", {spec.heads}, Init::ones);
  ps.define(p + ".out_pointwise.weight", {c, c, 1, 1}, Init::kaiming_uniform);
  ps.define(p + ".out_pointwise.bias", {c}, Init::zeros);
}

template <typename S>
void add_ffn(ParameterStore<S>& ps, const std::string& p, const BlockSpec& spec) {
  const Index c = spec.channels, e = spec.ffn_expansion;
  ps.define(p + ".expand.weight", {e * c, c, 1, 1}, Init::kaiming_uniform);
  ps.define(p + ".expand.bias", {e * c}, Init::zeros);
  ps.define(p + ".contract.weight", {c, e * c, 1, 1}, Init::kaiming_uniform);
  ps.define(p + ".contract.bias", {c}, Init::zeros);
}

template <typename S>
void add_layer_norm(ParameterStore<S>& ps, const std::string& p, Index c) {
  ps.define(p + ".gamma", {c}, Init::ones);
  ps.define(p + ".beta", {c}, Init::zeros);
}

template <typename S>
void add_transformer_block(ParameterStore<S>& ps, const std::string& p, const BlockSpec& spec) {
  add_layer_norm(ps, p + ".norm1", spec.channels);
  add_mdta(ps, p + ".attn", spec);
  add_layer_norm(ps, p + ".norm2", spec.channels);
  add_ffn(ps, p + ".ffn", spec);
}

template <typename S>
void add_hfb(ParameterStore<S>& ps, const std::string& p, const std::vector<Index>& cins,
             Index cout, const BlockSpec& spec) {
  Index total = 0;
  for (Index c : cins) total += c;
  require(total >= 1, "hfb: no input channels");
  require(total % spec.ca_reduction == 0, "hfb: ca_reduction must divide concat width");
  add_dsc(ps, p + ".mix", total, total, spec.kernel);
  add_channel_attention(ps, p + ".ca", total, spec.ca_reduction);
  add_conv(ps, p + ".out", total, cout, Index{1});
}

/// Plain fusion used by the w/o-HFB ablation: concat + 1x1 conv.
template <typename S>
void add_concat_fuse(ParameterStore<S>& ps, const std::string& p, const std::vector<Index>& cins,
                     Index cout) {
  Index total = 0;
  for (Index c : cins) total += c;
  add_conv(ps, p + ".out", total, cout, Index{1});
}

template <typename S>
void add_resample(ParameterStore<S>& ps, const std::string& p, Index c) {
  add_conv(ps, p + ".project", c, c, Index{1});
}

// -- forwards --------------------------------------------------------------------

template <typename S>
Tensor<S> conv_forward(const Tensor<S>& x, const ParamView<S>& p, Index stride = 1) {
  const Tensor<S>& w = p["weight"];
  return conv2d(x, w, p["bias"], stride, w.dim(2) / 2);
}

/// Depthwise k x k followed by pointwise 1x1.
template <typename S>
Tensor<S> dsc_forward(const Tensor<S>& x, const ParamView<S>& p, Index stride = 1) {
  const Tensor<S>& dw = p["dw.weight"];
  Tensor<S> t = depthwise_conv2d(x, dw, p["dw.bias"], stride, dw.dim(2) / 2);
  return conv2d(t, p["pw.weight"], p["pw.bias"], Index{1}, Index{0});
}

template <typename S>
Tensor<S> conv_unit_forward(const Tensor<S>& x, const ParamView<S>& p, Index stride = 1) {
  return p.has("dw.weight") ? dsc_forward(x, p, stride) : conv_forward(x, p, stride);
}

/// Squeeze-excite gate: x * sigmoid(expand(relu(reduce(gap(x))))).
template <typename S>
Tensor<S> channel_attention_forward(const Tensor<S>& x, const ParamView<S>& p) {
  Tensor<S> s = global_avg_pool(x);
  s = conv2d(s, p["reduce.weight"], p["reduce.bias"], Index{1}, Index{0});
  s = relu(s);
  s = conv2d(s, p["expand.weight"], p["expand.bias"], Index{1}, Index{0});
  s = sigmoid(s);
  return mul(x, s);
}

template <typename S>
Tensor<S> rcab_forward(const Tensor<S>& x, const ParamView<S>& p) {
  Tensor<S> t = conv_unit_forward(x, p.sub("conv1"));
  t = relu(t);
  t = conv_unit_forward(t, p.sub("conv2"));
  t = channel_attention_forward(t, p.sub("ca"));
  return add(x, t);
}

/// Optional capture of attention internals for tests and diagnostics.
template <typename S>
struct MdtaProbe {
  Tensor<S> attention;    // [N,h,d,d], rows sum to 1
  Tensor<S> value_heads;  // [N,h,d,H*W]
  Tensor<S> head_output;  // [N,h,d,H*W]
};

/// Transposed multi-head channel attention. Per input: 1x1 conv then k x k
/// depthwise conv; heads attend over the channel dimension with a d x d map
/// (linear in pixel count). Self-attention is mdta_forward(x, x, x, ...).
template <typename S>
Tensor<S> mdta_forward(const Tensor<S>& xq, const Tensor<S>& xk, const Tensor<S>& xv,
                       const ParamView<S>& p, const BlockSpec& spec,
                       MdtaProbe<S>* probe = nullptr) {
  require(xq.shape() == xk.shape() && xq.shape() == xv.shape(),
          "mdta: query/key/value shapes must match");
  require(xq.rank() == 4 && xq.dim(1) == spec.channels, "mdta: input must be [N,C,H,W]");
  const Index n = xq.dim(0), c = spec.channels, h = xq.dim(2), w = xq.dim(3);
  const Index heads = spec.heads, d = c / heads, hw = h * w;

  auto embed = [&](const Tensor<S>& x, const char* leg) {
    Tensor<S> t = conv2d(x, p[std::string(leg) + "_pointwise.weight"],
                         p[std::string(leg) + "_pointwise.bias"], Index{1}, Index{0});
    const Tensor<S>& dw = p[std::string(leg) + "_depthwise.weight"];
    return depthwise_conv2d(t, dw, p[std::string(leg) + "_depthwise.bias"], Index{1},
                            dw.dim(2) / 2);
  };
  Tensor<S> q = reshape(embed(xq, "q"), {n, heads, d, hw});
  Tensor<S> k = reshape(embed(xk, "k"), {n, heads, d, hw});
  Tensor<S> v = reshape(embed(xv, "v"), {n, heads, d, hw});

  Tensor<S> logits = matmul(q, transpose_last2(k));       // [N,h,d,d]
  logits = mul(logits, p["temperature"]);                 // per-head scale
  Tensor<S> attn = softmax(logits, -1);
  Tensor<S> head_out = matmul(attn, v);                   // [N,h,d,hw]
  if (probe) {
    probe->attention = attn.detached();
    probe->value_heads = v.detached();
    probe->head_output = head_out.detached();
  }
  Tensor<S> merged = reshape(head_out, {n, c, h, w});
  return conv2d(merged, p["out_pointwise.weight"], p["out_pointwise.bias"], Index{1}, Index{0});
}

template <typename S>
Tensor<S> ffn_forward(const Tensor<S>& x, const ParamView<S>& p) {
  Tensor<S> t = conv2d(x, p["expand.weight"], p["expand.bias"], Index{1}, Index{0});
  t = gelu(t);
  return conv2d(t, p["contract.weight"], p["contract.bias"], Index{1}, Index{0});
}

/// Pre-norm residual composition: y = x + MDTA(LN(x)); out = y + FFN(LN(y)).
template <typename S>
Tensor<S> transformer_block_forward(const Tensor<S>& x, const ParamView<S>& p,
                                    const BlockSpec& spec, MdtaProbe<S>* probe = nullptr) {
  const ParamView<S> n1 = p.sub("norm1"), n2 = p.sub("norm2");
  Tensor<S> t = layer_norm(x, n1["gamma"], n1["beta"], S(kLayerNormEps));
  Tensor<S> y = add(x, mdta_forward(t, t, t, p.sub("attn"), spec, probe));
  Tensor<S> u = layer_norm(y, n2["gamma"], n2["beta"], S(kLayerNormEps));
  return add(y, ffn_forward(u, p.sub("ffn")));
}

/// Hybrid fusion: concat -> DSC k x k -> channel attention -> 1x1 conv.
/// Caller resizes inputs to a common H,W beforehand.
template <typename S>
Tensor<S> hfb_forward(const std::vector<Tensor<S>>& inputs, const ParamView<S>& p) {
  require(!inputs.empty(), "hfb: no inputs");
  for (const Tensor<S>& t : inputs)
    require(t.rank() == 4 && t.dim(0) == inputs[0].dim(0) && t.dim(2) == inputs[0].dim(2) &&
                t.dim(3) == inputs[0].dim(3),
            "hfb: inputs must share N,H,W");
  Tensor<S> t = concat(inputs, 1);
  t = dsc_forward(t, p.sub("mix"));
  t = channel_attention_forward(t, p.sub("ca"));
  return conv2d(t, p["out.weight"], p["out.bias"], Index{1}, Index{0});
}

/// Fusion dispatch: full HFB when its parameters exist, else concat + 1x1.
template <typename S>
Tensor<S> fuse_forward(const std::vector<Tensor<S>>& inputs, const ParamView<S>& p) {
  if (p.has("mix.dw.weight")) return hfb_forward(inputs, p);
  Tensor<S> t = concat(inputs, 1);
  return conv2d(t, p["out.weight"], p["out.bias"], Index{1}, Index{0});
}

enum class Resample { down2, up2 };

/// Bilinear rescale (x0.5 or x2 per side) followed by a 1x1 conv; channel
/// count preserved.
template <typename S>
Tensor<S> resample_layer_forward(const Tensor<S>& x, const ParamView<S>& p, Resample direction) {
  require(x.rank() == 4, "resample: input must be [N,C,H,W]");
  Index oh, ow;
  if (direction == Resample::down2) {
    oh = x.dim(2) / 2;
    ow = x.dim(3) / 2;
    require(oh >= 1 && ow >= 1, "resample: output side < 1");
  } else {
    oh = x.dim(2) * 2;
    ow = x.dim(3) * 2;
  }
  Tensor<S> t = bilinear_resize(x, oh, ow);
  const ParamView<S> proj = p.sub("project");
  return conv2d(t, proj["weight"], proj["bias"], Index{1}, Index{0});
}

/// One freshly initialized parameter set per block family; deterministic in
/// the seed via per-name substreams.
template <typename S>
ParameterStore<S> init_params(const BlockSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParameterStore<S> ps(seed);
  add_conv_unit(ps, "conv_unit", spec.channels, spec.channels, spec.kernel, spec.dsc);
  add_channel_attention(ps, "ca", spec.channels, spec.ca_reduction);
  add_rcab(ps, "rcab", spec);
  add_transformer_block(ps, "block", spec);
  add_hfb(ps, "hfb", {spec.channels, spec.channels}, spec.channels, spec);
  add_resample(ps, "resample", spec.channels);
  return ps;
}

}  // namespace elf
