#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mulvit/tensor_ops.hpp"

namespace mulvit {

/// Geometry and width settings for one per-camera encoder.
struct EncoderConfig {
  int64_t image_height = 240;
  int64_t image_width = 320;
  int64_t patch_size = 16;
  int64_t channels = 3;
  int64_t embed_dim = 96;
  int64_t depth = 6;
  int64_t heads = 3;
  int64_t ffn_ratio = 4;
  double dropout = 0.1;

  int64_t patches() const {
    return (image_height / patch_size) * (image_width / patch_size);
  }
  int64_t tokens() const { return patches() + 1; }
  int64_t patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const;
};

/// Per-block forward-time context: training mode drives dropout, the probe
/// sink (when set) collects every attention matrix produced during a forward.
template <typename T>
struct ForwardCtxT {
  bool training = false;
  Rng* rng = nullptr;
  GeluForm gelu_form = GeluForm::TanhApprox;
  T ln_eps = T(1e-6);
  std::vector<TensorT<T>>* attention_probe = nullptr;
};

using ForwardCtx = ForwardCtxT<float>;

/// One pre-LN transformer block: fused qkv projection, per-head scaled
/// dot-product attention, output projection, and a two-layer GELU FFN.
template <typename T>
struct BlockParamsT {
  TensorT<T> ln1_gamma, ln1_beta;
  TensorT<T> qkv_w, qkv_b;    // [D, 3D], [3D]
  TensorT<T> proj_w, proj_b;  // [D, D], [D]
  TensorT<T> ln2_gamma, ln2_beta;
  TensorT<T> fc1_w, fc1_b;  // [D, r*D], [r*D]
  TensorT<T> fc2_w, fc2_b;  // [r*D, D], [D]
};

template <typename T>
struct EncoderParamsT {
  TensorT<T> patch_w, patch_b;  // [P*P*C, D], [D]
  TensorT<T> pos;               // [N+1, D]
  TensorT<T> cls;               // [1, D]
  std::vector<BlockParamsT<T>> blocks;
};

namespace vit {

/// Multi-head scaled dot-product attention over an already-normalized token
/// matrix [t, D], followed by the output projection and dropout.
template <typename T>
TensorT<T> attention(const TensorT<T>& z_ln, const BlockParamsT<T>& bp, int64_t heads,
                     double drop_p, ForwardCtxT<T>& ctx) {
  const int64_t D = z_ln.dim(1);
  if (D % heads != 0) throw ParameterError("attention: embed dim not divisible by heads");
  const int64_t dh = D / heads;
  auto qkv = add_row_bias(matmul(z_ln, bp.qkv_w), bp.qkv_b);
  auto q = slice_cols(qkv, 0, D);
  auto k = slice_cols(qkv, D, 2 * D);
  auto v = slice_cols(qkv, 2 * D, 3 * D);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<TensorT<T>> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int64_t hidx = 0; hidx < heads; ++hidx) {
    auto qi = slice_cols(q, hidx * dh, (hidx + 1) * dh);
    auto ki = slice_cols(k, hidx * dh, (hidx + 1) * dh);
    auto vi = slice_cols(v, hidx * dh, (hidx + 1) * dh);
    auto logits = scale(matmul(qi, transpose(ki)), inv_sqrt_dh);
    auto probs = softmax_rows(logits);
    if (ctx.attention_probe) ctx.attention_probe->push_back(probs);
    head_outs.push_back(matmul(probs, vi));
  }
  auto merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  auto out = add_row_bias(matmul(merged, bp.proj_w), bp.proj_b);
  if (ctx.training && drop_p > 0.0) out = dropout(out, drop_p, true, *ctx.rng);
  return out;
}

/// z' = MHA(LN(z)) + z;  out = FFN(LN(z')) + z'
template <typename T>
TensorT<T> transformer_block(const TensorT<T>& z, const BlockParamsT<T>& bp, int64_t heads,
                             double drop_p, ForwardCtxT<T>& ctx) {
  auto attn = attention(layer_norm(z, bp.ln1_gamma, bp.ln1_beta, ctx.ln_eps), bp, heads, drop_p,
                        ctx);
  auto z1 = add(z, attn);
  auto h = layer_norm(z1, bp.ln2_gamma, bp.ln2_beta, ctx.ln_eps);
  h = gelu(add_row_bias(matmul(h, bp.fc1_w), bp.fc1_b), ctx.gelu_form);
  h = add_row_bias(matmul(h, bp.fc2_w), bp.fc2_b);
  if (ctx.training && drop_p > 0.0) h = dropout(h, drop_p, true, *ctx.rng);
  return add(z1, h);
}

/// Patch rows → linear embedding, CLS prepend, positional embedding,
/// embedding dropout: z_0 of the token pipeline.
template <typename T>
TensorT<T> embed(const TensorT<T>& patches, const EncoderParamsT<T>& ep, double drop_p,
                 ForwardCtxT<T>& ctx) {
  if (patches.dim(1) != ep.patch_w.dim(0))
    throw ShapeError("embed: patch width " + std::to_string(patches.dim(1)) +
                     " vs embedding input " + std::to_string(ep.patch_w.dim(0)));
  auto tok = add_row_bias(matmul(patches, ep.patch_w), ep.patch_b);
  auto seq = concat_rows<T>({ep.cls, tok});
  if (seq.dim(0) != ep.pos.dim(0))
    throw ShapeError("embed: " + std::to_string(seq.dim(0)) + " tokens vs positional table " +
                     shape_str(ep.pos.shape()));
  auto z0 = add(seq, ep.pos);
  if (ctx.training && drop_p > 0.0) z0 = dropout(z0, drop_p, true, *ctx.rng);
  return z0;
}

/// Full per-camera encoder: patchify → embed → depth× transformer_block.
/// No normalization is applied after the last block.
template <typename T>
TensorT<T> encode(const TensorT<T>& image, const EncoderConfig& cfg, const EncoderParamsT<T>& ep,
                  ForwardCtxT<T>& ctx) {
  if (image.rank() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_height ||
      image.dim(2) != cfg.image_width)
    throw ShapeError("encode: image " + shape_str(image.shape()) + " vs config [" +
                     std::to_string(cfg.channels) + "," + std::to_string(cfg.image_height) + "," +
                     std::to_string(cfg.image_width) + "]");
  auto z = embed(patchify(image, cfg.patch_size), ep, cfg.dropout, ctx);
  for (const auto& bp : ep.blocks) z = transformer_block(z, bp, cfg.heads, cfg.dropout, ctx);
  return z;
}

}  // namespace vit

}  // namespace mulvit
