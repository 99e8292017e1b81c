#pragma once

#include <cstddef>
#include <cstdint>

#include "depthlens/dump_io.hpp"

namespace depthlens::synthetic {

struct DumpShape {
  std::size_t examples = 4;
  std::size_t layers = 3;
  std::size_t dim = 4;
  std::size_t vocab = 8;
  NormKind norm = NormKind::layernorm;
  bool final_logits = true;
  std::uint64_t seed = 0;
};

// Every stored value is rounded to float32 so the dump survives a disk
// round trip unchanged. final_logits (when requested) are the float32
// logit lens of the last layer; targets are their top-1 tokens.
void finish_dump(ModelDump& dump, bool with_final_logits);

// Independent Gaussian hidden states per layer, with labels:
//   pos      cycles DET, NOUN, VERB, ADP
//   fact_len "1".."3", fact_pos "1"..fact_len
//   options  "A|B|C|D"
ModelDump random_dump(const DumpShape& shape);

// Layer l holds M_l h_L + c_l for a random well-conditioned M_l, so an exact
// affine translator exists for every layer.
ModelDump affine_dump(const DumpShape& shape, double mix_scale = 0.25);

}  // namespace depthlens::synthetic
