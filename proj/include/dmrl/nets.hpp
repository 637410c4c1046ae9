#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dmrl/autograd.hpp"
#include "dmrl/rng.hpp"

namespace dmrl {

enum class EncMode { kConv, kCondConv };

inline std::string enc_mode_name(EncMode m) { return m == EncMode::kConv ? "conv" : "condconv"; }
inline EncMode enc_mode_from_name(const std::string& s) {
  if (s == "conv") return EncMode::kConv;
  if (s == "condconv") return EncMode::kCondConv;
  throw ConfigError("unknown encoder mode '" + s + "' (expected conv|condconv)");
}

// Architecture hyperparameters. Defaults follow the reference setup:
// anatomical encoder C32-C64-C128-C256 + C256 bottleneck with mirrored
// upsampling blocks, modality encoder 16-32-64-128-128 with a 16-D head,
// SPADE-conditioned decoder seeded at H/8 with three upsampling stages.
struct ModelConfig {
  EncMode mode = EncMode::kCondConv;
  int modalities = 2;  // m
  int experts = 4;     // n (CondConv mode)
  int in_channels = 1;
  int height = 64;
  int width = 64;
  std::vector<int> ea_widths = {32, 64, 128, 256};
  int ea_bottleneck = 256;
  std::vector<int> em_widths = {16, 32, 64, 128, 128};
  int z_dim = 16;
  int s_channels = 4;
  std::vector<int> dec_widths = {128, 64, 32};
  int dec_seed_channels = 128;
  int spade_hidden = 32;
  // When set, the mixture convolution applies a sigmoid right after the
  // kernel mixing (the literal formula) instead of relying on the block's
  // own normalization+activation.
  bool condconv_sigma = false;
};

// n expert kernels with per-modality routing scores. A bank with a single
// kernel and no routing degenerates to a plain convolution.
template <typename S>
struct ExpertBank {
  std::vector<Tensor<S>> kernels;
  Tensor<S> bias;
  Tensor<S> routing;  // [m, n] raw scores, softmaxed per row; empty if plain
  int stride = 1;
  int pad = 1;
};

template <typename S>
struct BatchNorm {
  Tensor<S> gamma, beta;
  Tensor<S> running_mean, running_var;
};

template <typename S>
struct EncBlock {
  ExpertBank<S> conv;
  BatchNorm<S> bn;
};

template <typename S>
struct AnatEncoder {
  std::vector<EncBlock<S>> down;  // 4x4 stride-2 blocks
  EncBlock<S> bottleneck;         // 3x3 stride-1
  std::vector<EncBlock<S>> up;    // concat skip, upsample, 3x3 conv
  ExpertBank<S> head;             // 3x3 -> s_channels, softmax outside
};

template <typename S>
struct ModEncoder {
  std::vector<ExpertBank<S>> convs;  // 3x3 stride-2, LeakyReLU(0.2)
  Tensor<S> fc_w, fc_b;              // global-average-pooled features -> z
};

template <typename S>
struct SpadeNorm {
  BatchNorm<S> bn;  // parameter-free; running stats only
  ExpertBank<S> shared, gamma_conv, beta_conv;
};

template <typename S>
struct SpadeResBlock {
  SpadeNorm<S> norm1, norm2;
  ExpertBank<S> conv1, conv2;
  bool learned_skip = false;
  SpadeNorm<S> norm_s;
  ExpertBank<S> conv_s;  // 1x1 when channel counts differ
};

template <typename S>
struct Decoder {
  Tensor<S> fc_w, fc_b;  // z -> seed feature map
  std::vector<SpadeResBlock<S>> stages;
  ExpertBank<S> head;  // 3x3 -> in_channels, linear output
};

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S>* tensor;
};

// Complete parameter bundle. In Conv mode there are m independent encoder
// parameter sets; in CondConv mode a single set with expert banks. The
// decoder is always shared.
template <typename S>
struct Model {
  ModelConfig cfg;
  std::vector<AnatEncoder<S>> ea;
  std::vector<ModEncoder<S>> em;
  Decoder<S> dec;

  std::vector<NamedTensor<S>> params;
  std::vector<NamedTensor<S>> buffers;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Index param_count() const {
    Index n = 0;
    for (const auto& p : params) n += p.tensor->numel();
    return n;
  }
  Index param_count_excluding_routing() const {
    Index n = 0;
    for (const auto& p : params)
      if (p.name.find(".routing") == std::string::npos) n += p.tensor->numel();
    return n;
  }
};

namespace detail {

enum class Init { kZero, kOne, kHe, kHeLeaky, kLinear, kSmallNormal };

template <typename S>
struct Registrar {
  Model<S>* model;
  std::uint64_t seed;

  void param(const std::string& name, Tensor<S>& t, Init init, Index fan_in = 0) {
    Rng rng = Rng(seed).derive(name);
    switch (init) {
      case Init::kZero:
        t.flat().setZero();
        break;
      case Init::kOne:
        t.flat().setConstant(S(1));
        break;
      case Init::kHe: {
        double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal(0.0, std));
        break;
      }
      case Init::kHeLeaky: {
        double std = std::sqrt(2.0 / (1.0 + 0.2 * 0.2) / static_cast<double>(fan_in));
        for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal(0.0, std));
        break;
      }
      case Init::kLinear: {
        double std = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal(0.0, std));
        break;
      }
      case Init::kSmallNormal:
        for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal(0.0, 0.02));
        break;
    }
    model->params.push_back({name, &t});
  }

  void buffer(const std::string& name, Tensor<S>& t, S fill) {
    t.flat().setConstant(fill);
    model->buffers.push_back({name, &t});
  }

  void bank(const std::string& name, ExpertBank<S>& b, Index cout, Index cin, Index kh, Index kw,
            int stride, int pad, bool conditional, int m, int n, Init kind) {
    b.stride = stride;
    b.pad = pad;
    const int nk = conditional ? n : 1;
    b.kernels.resize(static_cast<std::size_t>(nk));
    for (int k = 0; k < nk; ++k) {
      b.kernels[static_cast<std::size_t>(k)] = Tensor<S>({cout, cin, kh, kw});
      param(name + ".w" + std::to_string(k), b.kernels[static_cast<std::size_t>(k)], kind,
            cin * kh * kw);
    }
    b.bias = Tensor<S>({cout});
    param(name + ".b", b.bias, Init::kZero);
    if (conditional) {
      b.routing = Tensor<S>({static_cast<Index>(m), static_cast<Index>(n)});
      param(name + ".routing", b.routing, Init::kZero);
    }
  }

  void batchnorm(const std::string& name, BatchNorm<S>& bn, Index c, bool affine) {
    if (affine) {
      bn.gamma = Tensor<S>({c});
      bn.beta = Tensor<S>({c});
      param(name + ".gamma", bn.gamma, Init::kOne);
      param(name + ".beta", bn.beta, Init::kZero);
    }
    bn.running_mean = Tensor<S>({c});
    bn.running_var = Tensor<S>({c});
    buffer(name + ".rmean", bn.running_mean, S(0));
    buffer(name + ".rvar", bn.running_var, S(1));
  }

  void spade(const std::string& name, SpadeNorm<S>& sn, Index c, Index s_channels, Index hidden) {
    batchnorm(name + ".bn", sn.bn, c, /*affine=*/false);
    bank(name + ".shared", sn.shared, hidden, s_channels, 3, 3, 1, 1, false, 0, 0, Init::kHe);
    bank(name + ".gamma", sn.gamma_conv, c, hidden, 3, 3, 1, 1, false, 0, 0, Init::kSmallNormal);
    bank(name + ".beta", sn.beta_conv, c, hidden, 3, 3, 1, 1, false, 0, 0, Init::kSmallNormal);
  }
};

}  // namespace detail

template <typename S>
std::unique_ptr<Model<S>> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.modalities < 2) throw ConfigError("model needs at least 2 modalities");
  if (cfg.experts < 1) throw ConfigError("model needs at least 1 expert");
  if (cfg.ea_widths.empty() || cfg.em_widths.empty() || cfg.dec_widths.empty())
    throw ConfigError("model width lists must be nonempty");
  const Index div_enc = Index(1) << cfg.ea_widths.size();
  if (cfg.height % div_enc != 0 || cfg.width % div_enc != 0)
    throw ConfigError("model spatial size must be divisible by " + std::to_string(div_enc));
  const Index div_dec = Index(1) << cfg.dec_widths.size();
  if (cfg.height % div_dec != 0 || cfg.width % div_dec != 0)
    throw ConfigError("decoder requires spatial size divisible by " + std::to_string(div_dec));

  auto model = std::make_unique<Model<S>>();
  model->cfg = cfg;
  const bool cond = cfg.mode == EncMode::kCondConv;
  const int enc_sets = cond ? 1 : cfg.modalities;
  const int m = cfg.modalities, n = cfg.experts;

  model->ea.resize(static_cast<std::size_t>(enc_sets));
  model->em.resize(static_cast<std::size_t>(enc_sets));

  detail::Registrar<S> reg{model.get(), seed};

  for (int e = 0; e < enc_sets; ++e) {
    const std::string base = "ea" + std::to_string(e);
    AnatEncoder<S>& ea = model->ea[static_cast<std::size_t>(e)];
    const int ndown = static_cast<int>(cfg.ea_widths.size());
    ea.down.resize(static_cast<std::size_t>(ndown));
    Index prev = cfg.in_channels;
    for (int i = 0; i < ndown; ++i) {
      Index width = cfg.ea_widths[static_cast<std::size_t>(i)];
      auto nm = base + ".down" + std::to_string(i);
      reg.bank(nm + ".conv", ea.down[static_cast<std::size_t>(i)].conv, width, prev, 4, 4, 2, 1,
               cond, m, n, detail::Init::kHe);
      reg.batchnorm(nm + ".bn", ea.down[static_cast<std::size_t>(i)].bn, width, true);
      prev = width;
    }
    reg.bank(base + ".bott.conv", ea.bottleneck.conv, cfg.ea_bottleneck, prev, 3, 3, 1, 1, cond, m,
             n, detail::Init::kHe);
    reg.batchnorm(base + ".bott.bn", ea.bottleneck.bn, cfg.ea_bottleneck, true);
    ea.up.resize(static_cast<std::size_t>(ndown));
    prev = cfg.ea_bottleneck;
    for (int i = 0; i < ndown; ++i) {
      // Skip from the matching-width encoder block, concatenated at the
      // coarse resolution before upsampling.
      Index skip = cfg.ea_widths[static_cast<std::size_t>(ndown - 1 - i)];
      Index width = skip;
      auto nm = base + ".up" + std::to_string(i);
      reg.bank(nm + ".conv", ea.up[static_cast<std::size_t>(i)].conv, width, prev + skip, 3, 3, 1,
               1, cond, m, n, detail::Init::kHe);
      reg.batchnorm(nm + ".bn", ea.up[static_cast<std::size_t>(i)].bn, width, true);
      prev = width;
    }
    reg.bank(base + ".head", ea.head, cfg.s_channels, prev, 3, 3, 1, 1, cond, m, n,
             detail::Init::kHe);

    const std::string mbase = "em" + std::to_string(e);
    ModEncoder<S>& em = model->em[static_cast<std::size_t>(e)];
    em.convs.resize(cfg.em_widths.size());
    prev = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.em_widths.size(); ++i) {
      Index width = cfg.em_widths[i];
      reg.bank(mbase + ".conv" + std::to_string(i), em.convs[i], width, prev, 3, 3, 2, 1, cond, m,
               n, detail::Init::kHeLeaky);
      prev = width;
    }
    em.fc_w = Tensor<S>({cfg.z_dim, prev});
    em.fc_b = Tensor<S>({cfg.z_dim});
    reg.param(mbase + ".fc.w", em.fc_w, detail::Init::kLinear, prev);
    reg.param(mbase + ".fc.b", em.fc_b, detail::Init::kZero);
  }

  // Decoder (shared across modalities).
  {
    Decoder<S>& dec = model->dec;
    const int stages = static_cast<int>(cfg.dec_widths.size());
    const Index sh = cfg.height >> stages, sw = cfg.width >> stages;
    const Index seed_feats = cfg.dec_seed_channels * sh * sw;
    dec.fc_w = Tensor<S>({seed_feats, static_cast<Index>(cfg.z_dim)});
    dec.fc_b = Tensor<S>({seed_feats});
    reg.param("dec.fc.w", dec.fc_w, detail::Init::kLinear, cfg.z_dim);
    reg.param("dec.fc.b", dec.fc_b, detail::Init::kZero);
    dec.stages.resize(static_cast<std::size_t>(stages));
    Index prev = cfg.dec_seed_channels;
    for (int i = 0; i < stages; ++i) {
      SpadeResBlock<S>& blk = dec.stages[static_cast<std::size_t>(i)];
      Index width = cfg.dec_widths[static_cast<std::size_t>(i)];
      auto nm = "dec.stage" + std::to_string(i);
      reg.spade(nm + ".norm1", blk.norm1, prev, cfg.s_channels, cfg.spade_hidden);
      reg.bank(nm + ".conv1", blk.conv1, width, prev, 3, 3, 1, 1, false, 0, 0, detail::Init::kHe);
      reg.spade(nm + ".norm2", blk.norm2, width, cfg.s_channels, cfg.spade_hidden);
      reg.bank(nm + ".conv2", blk.conv2, width, width, 3, 3, 1, 1, false, 0, 0, detail::Init::kHe);
      blk.learned_skip = prev != width;
      if (blk.learned_skip) {
        reg.spade(nm + ".norms", blk.norm_s, prev, cfg.s_channels, cfg.spade_hidden);
        reg.bank(nm + ".convs", blk.conv_s, width, prev, 1, 1, 1, 0, false, 0, 0,
                 detail::Init::kHe);
      }
      prev = width;
    }
    reg.bank("dec.head", dec.head, cfg.in_channels, prev, 3, 3, 1, 1, false, 0, 0,
             detail::Init::kHe);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Modality-conditioned convolution: the expert kernels are mixed with the
// softmaxed routing row first, then a single convolution is applied.
// Returns the pre-activation output.
template <typename S>
Var cond_conv(Tape<S>& t, ExpertBank<S>& bank, Var x, int modality) {
  Var w;
  if (bank.routing.numel() > 0) {
    if (modality < 0 || modality >= bank.routing.dim(0))
      throw ArgumentError("cond_conv: modality id " + std::to_string(modality) +
                          " out of range for " + std::to_string(bank.routing.dim(0)) +
                          " modalities");
    Var beta = softmax_vec(t, select_row(t, t.param(bank.routing), modality));
    std::vector<Var> kernels;
    kernels.reserve(bank.kernels.size());
    for (auto& k : bank.kernels) kernels.push_back(t.param(k));
    w = mix_kernels(t, kernels, beta);
  } else {
    w = t.param(bank.kernels[0]);
  }
  return conv2d(t, x, w, t.param(bank.bias), bank.stride, bank.pad);
}

template <typename S>
Var batchnorm(Tape<S>& t, BatchNorm<S>& bn, Var x, bool training) {
  const bool affine = bn.gamma.numel() > 0;
  return batchnorm2d(t, x, affine ? t.param(bn.gamma) : Var{}, affine ? t.param(bn.beta) : Var{},
                     BnStats<S>{&bn.running_mean, &bn.running_var}, training);
}

namespace detail {

template <typename S>
Var enc_block(Tape<S>& t, EncBlock<S>& blk, Var x, int modality, bool training, bool sigma) {
  Var h = cond_conv(t, blk.conv, x, modality);
  if (sigma) h = sigmoid(t, h);
  h = batchnorm(t, blk.bn, h, training);
  return relu(t, h);
}

}  // namespace detail

template <typename S>
Var encode_anatomy(Tape<S>& t, Model<S>& model, Var x, int modality, bool training) {
  const ModelConfig& cfg = model.cfg;
  if (modality < 0 || modality >= cfg.modalities)
    throw ArgumentError("encode_anatomy: modality id out of range");
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4 || xv.dim(1) != cfg.in_channels)
    throw ShapeError("encode_anatomy: expected [N," + std::to_string(cfg.in_channels) + ",H,W]");
  const Index div = Index(1) << model.ea[0].down.size();
  if (xv.dim(2) % div != 0 || xv.dim(3) % div != 0)
    throw ShapeError("encode_anatomy: spatial size " + std::to_string(xv.dim(2)) + "x" +
                     std::to_string(xv.dim(3)) + " not divisible by " + std::to_string(div));

  AnatEncoder<S>& ea = model.ea[cfg.mode == EncMode::kCondConv ? 0 : static_cast<std::size_t>(modality)];
  const bool sigma = cfg.condconv_sigma && cfg.mode == EncMode::kCondConv;

  std::vector<Var> skips;
  Var h = x;
  for (auto& blk : ea.down) {
    h = detail::enc_block(t, blk, h, modality, training, sigma);
    skips.push_back(h);
  }
  h = detail::enc_block(t, ea.bottleneck, h, modality, training, sigma);
  for (std::size_t i = 0; i < ea.up.size(); ++i) {
    h = concat_channels(t, h, skips[skips.size() - 1 - i]);
    h = upsample_nearest2x(t, h);
    h = detail::enc_block(t, ea.up[i], h, modality, training, sigma);
  }
  Var logits = cond_conv(t, ea.head, h, modality);
  return softmax_channels(t, logits);
}

template <typename S>
Var encode_modality(Tape<S>& t, Model<S>& model, Var x, int modality, bool training) {
  (void)training;
  const ModelConfig& cfg = model.cfg;
  if (modality < 0 || modality >= cfg.modalities)
    throw ArgumentError("encode_modality: modality id out of range");
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4 || xv.dim(1) != cfg.in_channels)
    throw ShapeError("encode_modality: expected [N," + std::to_string(cfg.in_channels) + ",H,W]");
  ModEncoder<S>& em = model.em[cfg.mode == EncMode::kCondConv ? 0 : static_cast<std::size_t>(modality)];
  const Index min_size = Index(1) << em.convs.size();
  if (xv.dim(2) < min_size || xv.dim(3) < min_size)
    throw ShapeError("encode_modality: spatial size " + std::to_string(xv.dim(2)) + "x" +
                     std::to_string(xv.dim(3)) + " below minimum " + std::to_string(min_size));
  const bool sigma = cfg.condconv_sigma && cfg.mode == EncMode::kCondConv;

  Var h = x;
  for (auto& conv : em.convs) {
    h = cond_conv(t, conv, h, modality);
    if (sigma) h = sigmoid(t, h);
    h = leaky_relu(t, h, S(0.2));
  }
  Var pooled = global_avg_pool(t, h);
  return linear(t, pooled, t.param(em.fc_w), t.param(em.fc_b));
}

namespace detail {

template <typename S>
Var spade_norm(Tape<S>& t, SpadeNorm<S>& sn, Var x, Var s_resized, bool training) {
  Var xn = batchnorm(t, sn.bn, x, training);
  Var a = relu(t, cond_conv(t, sn.shared, s_resized, 0));
  Var gamma = cond_conv(t, sn.gamma_conv, a, 0);
  Var beta = cond_conv(t, sn.beta_conv, a, 0);
  return add(t, mul(t, xn, add_const(t, gamma, S(1))), beta);
}

template <typename S>
Var spade_resblock(Tape<S>& t, SpadeResBlock<S>& blk, Var x, Var s_resized, bool training) {
  Var h = cond_conv(t, blk.conv1, relu(t, spade_norm(t, blk.norm1, x, s_resized, training)), 0);
  h = cond_conv(t, blk.conv2, relu(t, spade_norm(t, blk.norm2, h, s_resized, training)), 0);
  Var skip = x;
  if (blk.learned_skip)
    skip = cond_conv(t, blk.conv_s, spade_norm(t, blk.norm_s, x, s_resized, training), 0);
  return add(t, h, skip);
}

}  // namespace detail

// D(s, z): z seeds a low-resolution feature map, three (by default)
// upsampling residual stages modulate it with spatially-adaptive
// normalization conditioned on s, and a final convolution produces a
// linear-output image in the z-scored intensity range.
template <typename S>
Var decode(Tape<S>& t, Model<S>& model, Var s, Var z, bool training) {
  const ModelConfig& cfg = model.cfg;
  const Tensor<S>& sv = t.val(s);
  if (sv.rank() != 4 || sv.dim(1) != cfg.s_channels)
    throw ShapeError("decode: anatomy rep must be [N," + std::to_string(cfg.s_channels) + ",H,W]");
  if (sv.dim(2) != cfg.height || sv.dim(3) != cfg.width)
    throw ShapeError("decode: anatomy rep is " + std::to_string(sv.dim(2)) + "x" +
                     std::to_string(sv.dim(3)) + " but the model is configured for " +
                     std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  const Tensor<S>& zv = t.val(z);
  if (zv.rank() != 2 || zv.dim(1) != cfg.z_dim || zv.dim(0) != sv.dim(0))
    throw ShapeError("decode: modality rep must be [N," + std::to_string(cfg.z_dim) + "]");

  Decoder<S>& dec = model.dec;
  const int stages = static_cast<int>(dec.stages.size());
  const Index n = sv.dim(0);
  Index sh = cfg.height >> stages, sw = cfg.width >> stages;

  Var h = linear(t, z, t.param(dec.fc_w), t.param(dec.fc_b));
  h = reshape(t, h, {n, static_cast<Index>(cfg.dec_seed_channels), sh, sw});
  for (int i = 0; i < stages; ++i) {
    h = upsample_nearest2x(t, h);
    sh *= 2;
    sw *= 2;
    Var s_res = resize_nearest(t, s, sh, sw);
    h = detail::spade_resblock(t, dec.stages[static_cast<std::size_t>(i)], h, s_res, training);
  }
  return cond_conv(t, dec.head, relu(t, h), 0);
}

// ---------------------------------------------------------------------------
// No-grad conveniences (eval mode, plain tensors)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> encode_anatomy_eval(Model<S>& model, const Tensor<S>& x, int modality) {
  Tape<S> t(false);
  return t.val(encode_anatomy(t, model, t.constant(x), modality, false));
}

template <typename S>
Tensor<S> encode_modality_eval(Model<S>& model, const Tensor<S>& x, int modality) {
  Tape<S> t(false);
  return t.val(encode_modality(t, model, t.constant(x), modality, false));
}

template <typename S>
Tensor<S> decode_eval(Model<S>& model, const Tensor<S>& s, const Tensor<S>& z) {
  Tape<S> t(false);
  return t.val(decode(t, model, t.constant(s), t.constant(z), false));
}

// x_tilde = D(E^A(x_src; src_id), E^M(x_tgt; tgt_id)); pure composition.
template <typename S>
Tensor<S> translate(Model<S>& model, const Tensor<S>& x_src, int src_id, const Tensor<S>& x_tgt,
                    int tgt_id) {
  Tape<S> t(false);
  Var s = encode_anatomy(t, model, t.constant(x_src), src_id, false);
  Var z = encode_modality(t, model, t.constant(x_tgt), tgt_id, false);
  return t.val(decode(t, model, s, z, false));
}

}  // namespace dmrl
