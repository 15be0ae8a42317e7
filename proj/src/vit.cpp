#include "mulvit/vit.hpp"

namespace mulvit {

void EncoderConfig::validate() const {
  if (patch_size <= 0 || channels <= 0 || embed_dim <= 0 || heads <= 0 || ffn_ratio <= 0)
    throw ParameterError("encoder config: all dimensions must be positive");
  if (depth < 0) throw ParameterError("encoder config: depth must be >= 0");
  if (image_height % patch_size != 0 || image_width % patch_size != 0)
    throw ParameterError("encoder config: " + std::to_string(image_width) + "x" +
                         std::to_string(image_height) + " not divisible by patch size " +
                         std::to_string(patch_size));
  if (embed_dim % heads != 0)
    throw ParameterError("encoder config: embed_dim " + std::to_string(embed_dim) +
                         " not divisible by heads " + std::to_string(heads));
  if (dropout < 0.0 || dropout >= 1.0)
    throw ParameterError("encoder config: dropout must be in [0,1)");
}

}  // namespace mulvit
