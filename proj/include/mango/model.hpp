#pragma once
// Toy single-stream multimodal transformer: region features and token ids in,
// contextual representations and answer logits out. The sequence is
// [CLS] + text followed by regions; the answer head reads the text position-0
// output.

#include <cstdint>
#include <string>
#include <vector>

#include "mango/autodiff.hpp"
#include "mango/optimizer.hpp"
#include "mango/rng.hpp"

namespace mango {

struct ModelConfig {
  int region_dim = 16;   // raw region feature width, projected up to model_dim
  int model_dim = 32;    // token embedding width == model width
  int max_regions = 5;
  int max_tokens = 24;
  int layers = 2;
  int heads = 4;
  int num_answers = 18;
  int vocab_size = 64;
  int pad_id = 0;
  int cls_id = 1;
  int mask_id = 2;
  bool use_region_pos = true;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One minibatch on the perturbation surface: raw region features, token ids,
// visibility masks, soft answer targets.
struct EmbeddingBatch {
  int batch = 0;
  int regions = 0;  // K
  int tokens = 0;   // L
  int region_dim = 0;
  int num_answers = 0;
  std::vector<double> region_feats;    // batch x regions x region_dim
  std::vector<uint8_t> region_mask;    // batch x regions
  std::vector<int> token_ids;          // batch x tokens
  std::vector<uint8_t> token_mask;     // batch x tokens
  std::vector<double> labels;          // batch x num_answers, soft in [0, 1]
  std::vector<uint64_t> example_uids;  // stable per-example stream keys

  void validate(const ModelConfig& config) const;
};

struct LayerParams {
  ad::Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  ad::Parameter *ln1_gain, *ln1_bias, *ln2_gain, *ln2_bias;
  ad::Parameter *ffn_w1, *ffn_b1, *ffn_w2, *ffn_b2;
};

struct ModelParams {
  ModelConfig config;
  ParamSet set;
  ad::Parameter* token_embedding = nullptr;  // vocab x d
  ad::Parameter* text_pos = nullptr;         // max_tokens x d
  ad::Parameter* region_pos = nullptr;       // max_regions x d
  ad::Parameter* region_proj_w = nullptr;    // region_dim x d
  ad::Parameter* region_proj_b = nullptr;    // d
  std::vector<LayerParams> blocks;
  ad::Parameter *head_w1, *head_b1, *head_w2, *head_b2;

  static ModelParams init(const ModelConfig& config, Rng& rng);
  // Parameter count for a config, without building anything.
  static int64_t expected_param_count(const ModelConfig& config);
};

struct EmbeddingPair {
  ad::Tensor v_embed;  // [B, K, d]
  ad::Tensor w_embed;  // [B, L, d]
};

struct EncodedBatch {
  ad::Tensor z_w;    // [B, L, d]
  ad::Tensor z_v;    // [B, K, d]
  ad::Tensor z_cls;  // [B, d]
};

// Projected region features plus region-position embedding; token lookup plus
// text-position embedding; masked positions zeroed. This is the surface where
// perturbations are added.
EmbeddingPair build_embeddings(ad::Tape& tape, ModelParams& params,
                               const EmbeddingBatch& batch);

// Pre-norm transformer over [text ; regions] with attention masking of padded
// positions; zero layers means an identity encoder.
EncodedBatch encode_forward(ad::Tape& tape, ModelParams& params,
                            ad::Tensor v_embed, ad::Tensor w_embed,
                            const EmbeddingBatch& batch);

// Two-layer head on z_cls, no activation on the output.
ad::Tensor answer_logits(ad::Tape& tape, ModelParams& params,
                         const EncodedBatch& encoded);

// Argmax per row; ties broken toward the smallest index.
std::vector<int> predict_answer(std::span<const double> logits, int batch,
                                int num_answers);

}  // namespace mango
