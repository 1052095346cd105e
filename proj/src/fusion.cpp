#include "aligndet/fusion.hpp"

#include "aligndet/errors.hpp"

namespace aligndet::fusion {

void add_parameters(ParameterStore& store, int d_text, int hidden, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xf05e));
  const std::string p = kPrefix;
  store.add(p + "feat_map.w", xavier(d_text, hidden, rng));
  store.add(p + "feat_map.b", ad::Matrix::Zero(1, hidden));
  for (const char* n : {"q", "k", "v"}) {
    store.add(p + "attn.w" + n, xavier(hidden, hidden, rng));
    store.add(p + "attn.b" + n, ad::Matrix::Zero(1, hidden));
  }
  store.add(p + "attn.wo", ad::Matrix::Zero(hidden, hidden));
  store.add(p + "attn.bo", ad::Matrix::Zero(1, hidden));
}

bool present(const ParameterStore& store) { return store.contains(std::string(kPrefix) + "attn.wo"); }

ad::Var fuse(ad::Tape& tape, ad::Var image_tokens, ad::Var text, const ParameterStore& store,
             int num_heads) {
  const std::string p = kPrefix;
  auto P = [&](const std::string& n) { return tape.param(store.at(p + n)); };
  if (text.cols() != store.at(p + "feat_map.w").value.rows())
    throw ShapeError("fusion: text width differs from the feat map input");
  const ad::Var t = ad::linear(text, P("feat_map.w"), P("feat_map.b"));
  const ad::Var q = ad::linear(image_tokens, P("attn.wq"), P("attn.bq"));
  const ad::Var k = ad::linear(t, P("attn.wk"), P("attn.bk"));
  const ad::Var v = ad::linear(t, P("attn.wv"), P("attn.bv"));
  const ad::Var t2i = ad::linear(ad::attention(q, k, v, num_heads), P("attn.wo"), P("attn.bo"));
  return ad::add(image_tokens, t2i);
}

}  // namespace aligndet::fusion
