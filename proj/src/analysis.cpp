#include "mulvit/analysis.hpp"

#include <cmath>
#include <cstdio>

namespace mulvit {

namespace {

/// Learnable scalars in one transformer block of width D and FFN ratio r:
/// qkv (3D²+3D) + projection (D²+D) + two LN affine pairs (4D) + FFN
/// (rD²+rD + rD²+D) = (4+2r)·D² + (9+r)·D.
int64_t block_params(int64_t D, int64_t r) { return (4 + 2 * r) * D * D + (9 + r) * D; }

/// Forward matmul FLOPs of one block on t tokens: qkv 6tD² + proj 2tD² +
/// QK^T 2t²D + attn·V 2t²D + FFN 4r·tD².
int64_t block_flops(int64_t t, int64_t D, int64_t r) {
  return (8 + 4 * r) * t * D * D + 4 * t * t * D;
}

}  // namespace

double round_to_hundredth(double x) { return std::round(x * 100.0) / 100.0; }

double CostReport::params_millions() const {
  return round_to_hundredth(static_cast<double>(params_total) / 1e6);
}

double CostReport::flops_giga() const {
  return round_to_hundredth(static_cast<double>(flops_total) / 1e9);
}

CostReport analyze(const ModelSpec& spec) {
  spec.validate();
  const EncoderConfig& ec = spec.encoder;
  const int64_t D = ec.embed_dim;
  const int64_t N = ec.patches();
  const int64_t t = ec.tokens();
  const int64_t pd = ec.patch_dim();

  CostReport rep;
  rep.variant = variant_name(spec.variant);

  const int64_t enc_count = spec.cameras;
  for (int64_t e = 0; e < enc_count; ++e) {
    const std::string tag = "encoder" + std::to_string(e);
    // Patch embedding acts on the N patch rows only; the CLS row is learned.
    rep.components.push_back({tag + ".patch_embed", pd * D + D, 2 * N * pd * D});
    rep.components.push_back({tag + ".embeddings", t * D + D, 0});
    rep.components.push_back(
        {tag + ".blocks", ec.depth * block_params(D, ec.ffn_ratio),
         ec.depth * block_flops(t, D, ec.ffn_ratio)});
  }

  if (spec.variant == Variant::MulVitTf) {
    const int64_t ft = spec.cameras * t;
    rep.components.push_back({"fusion.blocks",
                              spec.fusion_depth * block_params(D, spec.fusion_ffn_ratio),
                              spec.fusion_depth * block_flops(ft, D, spec.fusion_ffn_ratio)});
  }
  if (spec.variant == Variant::MulVitTwdnn) {
    const int64_t ft = spec.cameras * t;
    const int64_t hid = spec.twdnn_hidden;
    const int64_t blk_params = 2 * D + (D * hid + hid) + (hid * hid + hid) + (hid * D + D);
    const int64_t blk_flops = 2 * ft * D * hid + 2 * ft * hid * hid + 2 * ft * hid * D;
    rep.components.push_back({"tokenwise.segments", spec.cameras * D, 0});
    rep.components.push_back(
        {"tokenwise.blocks", spec.twdnn_blocks * blk_params, spec.twdnn_blocks * blk_flops});
  }

  const int64_t k = spec.head_input_dim();
  const int64_t head_params = k * spec.head_hidden + spec.head_hidden + spec.head_hidden + 1;
  const int64_t head_flops = 2 * k * spec.head_hidden + 2 * spec.head_hidden;
  rep.components.push_back({"head", head_params, 0});

  for (const auto& c : rep.components) {
    rep.params_total += c.params;
    rep.flops_total += c.flops;
  }
  rep.flops_all_matmul = rep.flops_total + head_flops;
  return rep;
}

int64_t count_params(const ModelSpec& spec) { return analyze(spec).params_total; }
int64_t count_flops(const ModelSpec& spec) { return analyze(spec).flops_total; }

std::string format_report(const CostReport& rep) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "model: %s\n", rep.variant.c_str());
  out += line;
  std::snprintf(line, sizeof(line), "%-24s %14s %18s\n", "component", "params", "flops/sample");
  out += line;
  for (const auto& c : rep.components) {
    std::snprintf(line, sizeof(line), "%-24s %14lld %18lld\n", c.name.c_str(),
                  static_cast<long long>(c.params), static_cast<long long>(c.flops));
    out += line;
  }
  std::snprintf(line, sizeof(line), "%-24s %14lld %18lld\n", "total",
                static_cast<long long>(rep.params_total), static_cast<long long>(rep.flops_total));
  out += line;
  std::snprintf(line, sizeof(line), "rounded: %.2f M params, %.2f GFLOPs per forward sample\n",
                rep.params_millions(), rep.flops_giga());
  out += line;
  out +=
      "convention: 2 FLOPs per multiply-accumulate over patch-embed, qkv, attention\n"
      "projection, QK^T, attention-V, and FFN matmuls; layer norm, softmax, GELU,\n"
      "bias adds, and the regression head are excluded from flops/sample.\n";
  return out;
}

}  // namespace mulvit
