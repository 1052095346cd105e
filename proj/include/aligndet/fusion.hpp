#pragma once

#include "aligndet/autograd.hpp"
#include "aligndet/params.hpp"

/// Text-to-image feature fusion applied once between backbone and encoder.
namespace aligndet::fusion {

/// Every fusion tensor name starts with this prefix, so checkpoints without
/// fusion load into fusion-free models and vice versa.
inline constexpr const char* kPrefix = "fusion.";

/// Feat Map (d_text -> hidden) plus one multi-head cross-attention layer.
/// The output projection starts at zero, which makes fuse() the identity.
void add_parameters(ParameterStore& store, int d_text, int hidden, std::uint64_t seed);

bool present(const ParameterStore& store);

/// F_i + CrossAttn(queries = F_i, keys/values = FeatMap(F_t)).
ad::Var fuse(ad::Tape& tape, ad::Var image_tokens, ad::Var text, const ParameterStore& store,
             int num_heads);

}  // namespace aligndet::fusion
