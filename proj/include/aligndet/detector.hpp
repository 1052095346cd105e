#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "aligndet/autograd.hpp"
#include "aligndet/geometry.hpp"
#include "aligndet/image.hpp"
#include "aligndet/params.hpp"

namespace aligndet {

struct ModelConfig {
  int image_size = 64;
  int channels = 3;
  int patch_size = 8;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int num_object_queries = 20;
  int max_aux_queries = 256;
  int d_text = 32;
  double anchor_size = 0.25;  ///< side of the per-token proposal anchor
  std::uint64_t seed = 1;

  int grid() const { return image_size / patch_size; }
  int num_tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

/// The query block fed to the decoder: object queries followed by auxiliary
/// queries, with the self-attention visibility mask (true = may attend).
struct DecoderQueryBlock {
  int num_object = 0;
  ad::Matrix aux_reference;  ///< A x 4 center-form noisy boxes
  ad::BoolMatrix attention_mask;

  int num_aux() const { return static_cast<int>(aux_reference.rows()); }
  int size() const { return num_object + num_aux(); }

  /// Object rows see only object columns; auxiliary rows see everything.
  static DecoderQueryBlock make(int num_object, const std::vector<NoisySample>& samples);
  static DecoderQueryBlock objects_only(int num_object) { return make(num_object, {}); }
};

/// Predictions of one supervised level (encoder proposals or one decoder
/// layer). Boxes are sigmoid-normalized center form; logits are per
/// (query, prompt). Auxiliary entries are invalid when the block has none.
struct LevelOutput {
  ad::Var obj_logits;
  ad::Var obj_boxes;
  ad::Var aux_logits;
  ad::Var aux_boxes;

  bool has_aux() const { return aux_logits.valid(); }
};

struct QuerySelection {
  std::vector<int> indices;  ///< selected token indices, best first
  ad::Var ref_logits;        ///< N_q x 4, inverse-sigmoid space
  LevelOutput proposals;     ///< encoder-level predictions for the selection
};

struct ForwardOutput {
  std::vector<LevelOutput> levels;  ///< [0] encoder proposals, then decoder layers
  std::vector<int> selected;
};

struct Detection {
  Boxd box;
  Eigen::VectorXd scores;  ///< per-prompt probability
  int query = 0;

  double max_score() const { return scores.size() ? scores.maxCoeff() : 0.0; }
};

/// Miniature DETR-style open-vocabulary detector.
///
/// Pipeline: patch-embedding backbone, optional text-to-image fusion,
/// pre-norm transformer encoder, language-guided query selection, and a
/// decoder with iterative box refinement whose classifier is the scaled dot
/// product between decoded queries and projected prompt embeddings.
class Detector {
 public:
  explicit Detector(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Adds the fusion parameters (output projection zeroed).
  void enable_fusion(std::uint64_t seed);
  bool fusion_enabled() const;

  ad::Var backbone_forward(ad::Tape& tape, const Image& image) const;
  ad::Var project_text(ad::Tape& tape, const Eigen::MatrixXd& prompt_embeddings) const;
  ad::Var encoder_forward(ad::Tape& tape, ad::Var tokens) const;
  /// Per-(row, prompt) classification logits.
  ad::Var classify(ad::Var features, ad::Var projected_text) const;
  QuerySelection select_queries(ad::Tape& tape, ad::Var encoder_tokens, ad::Var projected_text,
                                const std::vector<int>* forced = nullptr) const;
  std::vector<LevelOutput> decoder_forward(ad::Tape& tape, ad::Var encoder_tokens,
                                           ad::Var ref_logits, const DecoderQueryBlock& block,
                                           ad::Var projected_text) const;

  /// Full pass. `forced_selection` pins the query selection (gradient checks).
  ForwardOutput forward(ad::Tape& tape, const Image& image,
                        const Eigen::MatrixXd& prompt_embeddings, const DecoderQueryBlock& block,
                        const std::vector<int>* forced_selection = nullptr) const;

  /// Object queries only, last level, best `top_k` by max prompt score.
  std::vector<Detection> inference(const Image& image, const Eigen::MatrixXd& prompt_embeddings,
                                   int top_k = 100) const;

 private:
  ad::Var mlp(ad::Tape& tape, ad::Var x, const std::string& prefix) const;
  ad::Var self_block(ad::Tape& tape, ad::Var x, const std::string& prefix) const;

  ModelConfig cfg_;
  ParameterStore params_;
  ad::Matrix positional_;  ///< T x d image positional encoding
  ad::Matrix anchors_;     ///< T x 4 inverse-sigmoid token anchors
};

ad::Matrix inverse_sigmoid(const ad::Matrix& x, double eps = 1e-4);
Boxd center_row_to_box(const ad::Matrix& boxes, Eigen::Index row);

}  // namespace aligndet
