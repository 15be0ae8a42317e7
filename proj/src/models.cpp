#include "mulvit/models.hpp"

namespace mulvit {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::SinVitD: return "sinvit_d";
    case Variant::SinVitW: return "sinvit_w";
    case Variant::MulVitTf: return "mulvit_tf";
    case Variant::MulVitTwdnn: return "mulvit_twdnn";
  }
  throw SpecError("unknown variant");
}

Variant variant_from_name(const std::string& name) {
  std::string n = name;  // hyphen and underscore spellings are equivalent
  for (char& c : n)
    if (c == '-') c = '_';
  if (n == "sinvit_d") return Variant::SinVitD;
  if (n == "sinvit_w") return Variant::SinVitW;
  if (n == "mulvit_tf") return Variant::MulVitTf;
  if (n == "mulvit_twdnn") return Variant::MulVitTwdnn;
  throw SpecError("unknown model variant '" + name + "'");
}

bool is_multiview(Variant v) {
  return v == Variant::MulVitTf || v == Variant::MulVitTwdnn;
}

void ModelSpec::validate() const {
  encoder.validate();
  if (is_multiview(variant)) {
    if (cameras < 2) throw SpecError("multi-view variants require at least 2 cameras");
  } else {
    if (cameras != 1) throw SpecError("single-view variants use exactly 1 camera");
  }
  if (variant == Variant::MulVitTf) {
    if (fusion_depth < 0 || fusion_ffn_ratio <= 0 || fusion_heads <= 0)
      throw SpecError("invalid fusion settings");
    if (encoder.embed_dim % fusion_heads != 0)
      throw SpecError("embed_dim not divisible by fusion heads");
  }
  if (variant == Variant::MulVitTwdnn && (twdnn_blocks <= 0 || twdnn_hidden <= 0))
    throw SpecError("invalid token-wise fusion settings");
  if (head_hidden <= 0) throw SpecError("head hidden width must be positive");
}

ModelSpec preset(const std::string& name) {
  ModelSpec s;
  s.variant = variant_from_name(name);
  s.encoder.image_height = 240;
  s.encoder.image_width = 320;
  s.encoder.patch_size = 16;
  s.encoder.channels = 3;
  s.encoder.heads = 3;
  s.encoder.ffn_ratio = 4;
  s.encoder.dropout = 0.1;
  s.head_hidden = 128;
  switch (s.variant) {
    case Variant::SinVitD:
      s.cameras = 1;
      s.encoder.embed_dim = 96;
      s.encoder.depth = 12;
      break;
    case Variant::SinVitW:
      s.cameras = 1;
      s.encoder.embed_dim = 192;
      s.encoder.depth = 6;
      break;
    case Variant::MulVitTf:
      s.cameras = 2;
      s.encoder.embed_dim = 96;
      s.encoder.depth = 6;
      s.fusion_depth = 2;
      s.fusion_ffn_ratio = 2;
      s.fusion_heads = 3;
      break;
    case Variant::MulVitTwdnn:
      s.cameras = 2;
      s.encoder.embed_dim = 96;
      s.encoder.depth = 6;
      s.twdnn_blocks = 4;
      s.twdnn_hidden = 192;
      break;
  }
  s.validate();
  return s;
}

std::vector<std::string> preset_names() {
  return {"sinvit_d", "sinvit_w", "mulvit_tf", "mulvit_twdnn"};
}

bool is_backbone_param(const std::string& name) {
  if (!name.starts_with("enc")) return false;
  return name.find(".block") != std::string::npos ||
         name.find(".patch_embed.") != std::string::npos;
}

bool is_no_decay_param(const std::string& name) {
  return name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") ||
         name.ends_with(".pos_embed") || name.ends_with(".cls_token") ||
         name.find("twdnn.seg") != std::string::npos;
}

}  // namespace mulvit
