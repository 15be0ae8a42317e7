#pragma once

#include <functional>
#include <string>

#include "mulvit/vit.hpp"

namespace mulvit {

enum class Variant { SinVitD, SinVitW, MulVitTf, MulVitTwdnn };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);
bool is_multiview(Variant v);

/// Complete architectural description of one model. Named presets reproduce
/// the reference design-point table; tests and the reduced training runs
/// build smaller specs directly.
struct ModelSpec {
  Variant variant = Variant::MulVitTf;
  int64_t cameras = 2;  // M (1 for the single-view variants)
  EncoderConfig encoder;
  int64_t fusion_depth = 2;      // L' (transformer-fusion variant)
  int64_t fusion_ffn_ratio = 2;  // fusion blocks are slimmer than encoder blocks
  int64_t fusion_heads = 3;
  int64_t twdnn_blocks = 4;
  int64_t twdnn_hidden = 192;
  int64_t head_hidden = 128;

  int64_t head_input_dim() const { return cameras * encoder.embed_dim; }
  void validate() const;
};

/// The four named design points.
ModelSpec preset(const std::string& name);
std::vector<std::string> preset_names();

template <typename T>
struct TwdnnBlockParamsT {
  TensorT<T> ln_gamma, ln_beta;
  TensorT<T> fc1_w, fc1_b;  // [D, hidden]
  TensorT<T> fc2_w, fc2_b;  // [hidden, hidden]
  TensorT<T> fc3_w, fc3_b;  // [hidden, D]
};

template <typename T>
struct HeadParamsT {
  TensorT<T> fc1_w, fc1_b;  // [k, head_hidden]
  TensorT<T> fc2_w, fc2_b;  // [head_hidden, 1]
};

template <typename T>
struct ModelParamsT {
  std::vector<EncoderParamsT<T>> encoders;
  std::vector<BlockParamsT<T>> fusion_blocks;           // transformer fusion
  std::vector<TensorT<T>> segment;                      // [D] per camera (token-wise fusion)
  std::vector<TwdnnBlockParamsT<T>> twdnn;
  HeadParamsT<T> head;
};

using ModelParams = ModelParamsT<float>;

namespace detail {

template <typename T, typename Fn>
void for_each_block_param(BlockParamsT<T>& b, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".ln1.gamma", b.ln1_gamma);
  fn(prefix + ".ln1.beta", b.ln1_beta);
  fn(prefix + ".attn.qkv.weight", b.qkv_w);
  fn(prefix + ".attn.qkv.bias", b.qkv_b);
  fn(prefix + ".attn.proj.weight", b.proj_w);
  fn(prefix + ".attn.proj.bias", b.proj_b);
  fn(prefix + ".ln2.gamma", b.ln2_gamma);
  fn(prefix + ".ln2.beta", b.ln2_beta);
  fn(prefix + ".ffn.fc1.weight", b.fc1_w);
  fn(prefix + ".ffn.fc1.bias", b.fc1_b);
  fn(prefix + ".ffn.fc2.weight", b.fc2_w);
  fn(prefix + ".ffn.fc2.bias", b.fc2_b);
}

}  // namespace detail

/// Visits every learnable tensor with a stable, documented name. Ordering is
/// deterministic; checkpoints, optimizer state, and parameter-group rules all
/// key off these names.
template <typename T, typename Fn>
void for_each_param(ModelParamsT<T>& p, Fn&& fn) {
  for (size_t e = 0; e < p.encoders.size(); ++e) {
    const std::string enc = "enc" + std::to_string(e);
    auto& ep = p.encoders[e];
    fn(enc + ".patch_embed.weight", ep.patch_w);
    fn(enc + ".patch_embed.bias", ep.patch_b);
    fn(enc + ".pos_embed", ep.pos);
    fn(enc + ".cls_token", ep.cls);
    for (size_t l = 0; l < ep.blocks.size(); ++l)
      detail::for_each_block_param(ep.blocks[l], enc + ".block" + std::to_string(l), fn);
  }
  for (size_t l = 0; l < p.fusion_blocks.size(); ++l)
    detail::for_each_block_param(p.fusion_blocks[l], "fusion.block" + std::to_string(l), fn);
  for (size_t s = 0; s < p.segment.size(); ++s)
    fn("twdnn.seg" + std::to_string(s), p.segment[s]);
  for (size_t b = 0; b < p.twdnn.size(); ++b) {
    const std::string pre = "twdnn.block" + std::to_string(b);
    auto& tb = p.twdnn[b];
    fn(pre + ".ln.gamma", tb.ln_gamma);
    fn(pre + ".ln.beta", tb.ln_beta);
    fn(pre + ".fc1.weight", tb.fc1_w);
    fn(pre + ".fc1.bias", tb.fc1_b);
    fn(pre + ".fc2.weight", tb.fc2_w);
    fn(pre + ".fc2.bias", tb.fc2_b);
    fn(pre + ".fc3.weight", tb.fc3_w);
    fn(pre + ".fc3.bias", tb.fc3_b);
  }
  fn("head.fc1.weight", p.head.fc1_w);
  fn("head.fc1.bias", p.head.fc1_b);
  fn("head.fc2.weight", p.head.fc2_w);
  fn("head.fc2.bias", p.head.fc2_b);
}

/// Backbone parameters are the per-camera patch embeddings and transformer
/// blocks — the part a pretrained checkpoint would provide. Embedding tables
/// (pos/cls), fusion, and head always belong to the non-backbone group.
bool is_backbone_param(const std::string& name);

/// Parameters exempt from weight decay: biases, LN affines, and all
/// embedding-style tables (pos, cls, segment).
bool is_no_decay_param(const std::string& name);

namespace detail {

template <typename T>
void alloc_block(BlockParamsT<T>& b, int64_t D, int64_t ffn_ratio) {
  b.ln1_gamma = TensorT<T>::zeros({D});
  b.ln1_beta = TensorT<T>::zeros({D});
  b.qkv_w = TensorT<T>::zeros({D, 3 * D});
  b.qkv_b = TensorT<T>::zeros({3 * D});
  b.proj_w = TensorT<T>::zeros({D, D});
  b.proj_b = TensorT<T>::zeros({D});
  b.ln2_gamma = TensorT<T>::zeros({D});
  b.ln2_beta = TensorT<T>::zeros({D});
  b.fc1_w = TensorT<T>::zeros({D, ffn_ratio * D});
  b.fc1_b = TensorT<T>::zeros({ffn_ratio * D});
  b.fc2_w = TensorT<T>::zeros({ffn_ratio * D, D});
  b.fc2_b = TensorT<T>::zeros({D});
}

}  // namespace detail

/// Allocates all parameter tensors for a spec (zero-filled, requires_grad set).
template <typename T>
ModelParamsT<T> alloc_params(const ModelSpec& spec) {
  spec.validate();
  const EncoderConfig& ec = spec.encoder;
  const int64_t D = ec.embed_dim;
  ModelParamsT<T> p;
  p.encoders.resize(static_cast<size_t>(spec.cameras));
  for (auto& ep : p.encoders) {
    ep.patch_w = TensorT<T>::zeros({ec.patch_dim(), D});
    ep.patch_b = TensorT<T>::zeros({D});
    ep.pos = TensorT<T>::zeros({ec.tokens(), D});
    ep.cls = TensorT<T>::zeros({1, D});
    ep.blocks.resize(static_cast<size_t>(ec.depth));
    for (auto& b : ep.blocks) detail::alloc_block(b, D, ec.ffn_ratio);
  }
  if (spec.variant == Variant::MulVitTf) {
    p.fusion_blocks.resize(static_cast<size_t>(spec.fusion_depth));
    for (auto& b : p.fusion_blocks) detail::alloc_block(b, D, spec.fusion_ffn_ratio);
  }
  if (spec.variant == Variant::MulVitTwdnn) {
    p.segment.resize(static_cast<size_t>(spec.cameras));
    for (auto& s : p.segment) s = TensorT<T>::zeros({D});
    p.twdnn.resize(static_cast<size_t>(spec.twdnn_blocks));
    for (auto& tb : p.twdnn) {
      tb.ln_gamma = TensorT<T>::zeros({D});
      tb.ln_beta = TensorT<T>::zeros({D});
      tb.fc1_w = TensorT<T>::zeros({D, spec.twdnn_hidden});
      tb.fc1_b = TensorT<T>::zeros({spec.twdnn_hidden});
      tb.fc2_w = TensorT<T>::zeros({spec.twdnn_hidden, spec.twdnn_hidden});
      tb.fc2_b = TensorT<T>::zeros({spec.twdnn_hidden});
      tb.fc3_w = TensorT<T>::zeros({spec.twdnn_hidden, D});
      tb.fc3_b = TensorT<T>::zeros({D});
    }
  }
  p.head.fc1_w = TensorT<T>::zeros({spec.head_input_dim(), spec.head_hidden});
  p.head.fc1_b = TensorT<T>::zeros({spec.head_hidden});
  p.head.fc2_w = TensorT<T>::zeros({spec.head_hidden, 1});
  p.head.fc2_b = TensorT<T>::zeros({1});
  for_each_param(p, [](const std::string&, TensorT<T>& t) { t.set_requires_grad(true); });
  return p;
}

/// Truncated-normal (σ=0.02, clipped at 2σ) weight/embedding init, zero
/// biases, LN gamma=1 / beta=0. Each tensor draws from its own seed stream
/// derived from (seed, name), so the init of one tensor never shifts another's.
template <typename T>
ModelParamsT<T> init_params(const ModelSpec& spec, uint64_t seed) {
  auto p = alloc_params<T>(spec);
  for_each_param(p, [seed](const std::string& name, TensorT<T>& t) {
    Rng rng(Rng::mix(seed, fnv1a64(name)));
    const bool is_gamma = name.ends_with(".gamma");
    const bool is_bias_like = name.ends_with(".beta") || name.ends_with(".bias");
    if (is_gamma) {
      for (auto& v : t.values()) v = T(1);
    } else if (is_bias_like) {
      for (auto& v : t.values()) v = T(0);
    } else {
      for (auto& v : t.values()) v = static_cast<T>(rng.trunc_normal(0.02));
    }
  });
  return p;
}

namespace models {

/// Two-layer GELU regression head on a [1, k] feature row → [1, 1].
template <typename T>
TensorT<T> mlp_head(const TensorT<T>& f, const HeadParamsT<T>& hp, ForwardCtxT<T>& ctx) {
  if (f.rank() != 2 || f.dim(0) != 1 || f.dim(1) != hp.fc1_w.dim(0))
    throw ShapeError("mlp_head: feature " + shape_str(f.shape()) + " vs head input width " +
                     std::to_string(hp.fc1_w.dim(0)));
  auto h = gelu(add_row_bias(matmul(f, hp.fc1_w), hp.fc1_b), ctx.gelu_form);
  return add_row_bias(matmul(h, hp.fc2_w), hp.fc2_b);
}

/// One token-wise residual stage: out = x + FFN(LN(x)), where the FFN is
/// applied independently to every token row.
template <typename T>
TensorT<T> twdnn_block(const TensorT<T>& x, const TwdnnBlockParamsT<T>& tb, ForwardCtxT<T>& ctx) {
  auto h = layer_norm(x, tb.ln_gamma, tb.ln_beta, ctx.ln_eps);
  h = gelu(add_row_bias(matmul(h, tb.fc1_w), tb.fc1_b), ctx.gelu_form);
  h = gelu(add_row_bias(matmul(h, tb.fc2_w), tb.fc2_b), ctx.gelu_form);
  h = add_row_bias(matmul(h, tb.fc3_w), tb.fc3_b);
  return add(x, h);
}

/// Post-fusion CLS vectors, one [1, D] row per camera (a single row for the
/// single-view variants). This is the feature the head consumes; tests also
/// use it to probe the fusion mechanism directly.
template <typename T>
std::vector<TensorT<T>> fused_cls(const std::vector<TensorT<T>>& images, const ModelSpec& spec,
                                  const ModelParamsT<T>& params, ForwardCtxT<T>& ctx) {
  if (static_cast<int64_t>(images.size()) != spec.cameras)
    throw SpecError("forward: expected " + std::to_string(spec.cameras) + " images, got " +
                    std::to_string(images.size()));
  std::vector<TensorT<T>> zs;
  zs.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i)
    zs.push_back(vit::encode(images[i], spec.encoder, params.encoders[i], ctx));

  switch (spec.variant) {
    case Variant::SinVitD:
    case Variant::SinVitW:
      return {slice_rows(zs[0], 0, 1)};
    case Variant::MulVitTf: {
      // Eq. 4/5 path: stacked tokens through L' fusion blocks, CLS rows at
      // offsets m·(N+1).
      auto Z = concat_rows(zs);
      for (const auto& fb : params.fusion_blocks)
        Z = vit::transformer_block(Z, fb, spec.fusion_heads, spec.encoder.dropout, ctx);
      const int64_t t = spec.encoder.tokens();
      std::vector<TensorT<T>> cls;
      for (int64_t m = 0; m < spec.cameras; ++m) cls.push_back(slice_rows(Z, m * t, m * t + 1));
      return cls;
    }
    case Variant::MulVitTwdnn: {
      // Segment embedding broadcast over each camera's token rows, then B
      // token-wise residual blocks.
      for (size_t i = 0; i < zs.size(); ++i) zs[i] = add_row_bias(zs[i], params.segment[i]);
      auto Z = concat_rows(zs);
      for (const auto& tb : params.twdnn) Z = twdnn_block(Z, tb, ctx);
      const int64_t t = spec.encoder.tokens();
      std::vector<TensorT<T>> cls;
      for (int64_t m = 0; m < spec.cameras; ++m) cls.push_back(slice_rows(Z, m * t, m * t + 1));
      return cls;
    }
  }
  throw SpecError("unknown variant");
}

/// Transformer fusion forward (Eq. 4/5 composition ending in the head).
template <typename T>
TensorT<T> forward_mulvit_tf(const std::vector<TensorT<T>>& images, const ModelSpec& spec,
                             const ModelParamsT<T>& params, ForwardCtxT<T>& ctx) {
  if (spec.variant != Variant::MulVitTf) throw SpecError("forward_mulvit_tf: wrong variant");
  auto cls = fused_cls(images, spec, params, ctx);
  return mlp_head(concat_cols(cls), params.head, ctx);
}

/// Token-wise DNN fusion forward.
template <typename T>
TensorT<T> forward_twdnn(const std::vector<TensorT<T>>& images, const ModelSpec& spec,
                         const ModelParamsT<T>& params, ForwardCtxT<T>& ctx) {
  if (spec.variant != Variant::MulVitTwdnn) throw SpecError("forward_twdnn: wrong variant");
  auto cls = fused_cls(images, spec, params, ctx);
  return mlp_head(concat_cols(cls), params.head, ctx);
}

/// Single-view: encoder CLS row straight into the head.
template <typename T>
TensorT<T> forward_sinvit(const TensorT<T>& image, const ModelSpec& spec,
                          const ModelParamsT<T>& params, ForwardCtxT<T>& ctx) {
  if (spec.variant != Variant::SinVitD && spec.variant != Variant::SinVitW)
    throw SpecError("forward_sinvit: wrong variant");
  auto cls = fused_cls<T>({image}, spec, params, ctx);
  return mlp_head(cls[0], params.head, ctx);
}

/// Variant dispatch on a list of per-camera images.
template <typename T>
TensorT<T> forward(const std::vector<TensorT<T>>& images, const ModelSpec& spec,
                   const ModelParamsT<T>& params, ForwardCtxT<T>& ctx) {
  switch (spec.variant) {
    case Variant::SinVitD:
    case Variant::SinVitW:
      if (images.size() != 1) throw SpecError("single-view forward expects one image");
      return forward_sinvit(images[0], spec, params, ctx);
    case Variant::MulVitTf:
      return forward_mulvit_tf(images, spec, params, ctx);
    case Variant::MulVitTwdnn:
      return forward_twdnn(images, spec, params, ctx);
  }
  throw SpecError("unknown variant");
}

}  // namespace models

}  // namespace mulvit
