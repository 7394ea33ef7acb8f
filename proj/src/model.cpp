#include "mango/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mango {

void ModelConfig::validate() const {
  if (model_dim <= 0 || heads <= 0 || model_dim % heads != 0) {
    throw std::invalid_argument("model_dim must be divisible by heads");
  }
  if (region_dim <= 0 || max_regions < 1 || max_tokens < 1 || layers < 0 ||
      num_answers <= 0 || vocab_size <= 0) {
    throw std::invalid_argument("invalid model config extents");
  }
  if (pad_id == cls_id || pad_id == mask_id || cls_id == mask_id ||
      pad_id >= vocab_size || cls_id >= vocab_size || mask_id >= vocab_size ||
      pad_id < 0 || cls_id < 0 || mask_id < 0) {
    throw std::invalid_argument("pad/cls/mask ids must be distinct and within vocab");
  }
}

void EmbeddingBatch::validate(const ModelConfig& config) const {
  if (batch <= 0 || regions != config.max_regions || tokens > config.max_tokens ||
      region_dim != config.region_dim || num_answers != config.num_answers) {
    throw std::invalid_argument("embedding batch does not conform to model config");
  }
  const size_t nb = static_cast<size_t>(batch);
  if (region_feats.size() != nb * regions * region_dim ||
      region_mask.size() != nb * regions || token_ids.size() != nb * tokens ||
      token_mask.size() != nb * tokens || labels.size() != nb * num_answers ||
      example_uids.size() != nb) {
    throw std::invalid_argument("embedding batch buffer sizes inconsistent");
  }
  for (int b = 0; b < batch; ++b) {
    if (token_mask[static_cast<size_t>(b) * tokens] == 0 ||
        token_ids[static_cast<size_t>(b) * tokens] != config.cls_id) {
      throw std::invalid_argument("every example must start with a valid [CLS] token");
    }
  }
  for (double v : labels) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("labels must lie in [0, 1]");
  }
}

namespace {

ad::Parameter& weight(ParamSet& set, const std::string& name, ad::Shape shape,
                      double stddev, Rng& rng) {
  ad::Parameter& p = set.create(name, std::move(shape));
  fill_truncated_normal(p.value, stddev, rng);
  return p;
}

ad::Parameter& bias(ParamSet& set, const std::string& name, int n, double value = 0.0) {
  ad::Parameter& p = set.create(name, {n});
  fill_constant(p.value, value);
  return p;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams mp;
  mp.config = config;
  const int d = config.model_dim;
  const double std = config.init_std;
  mp.token_embedding = &weight(mp.set, "token_embedding", {config.vocab_size, d}, std, rng);
  mp.text_pos = &weight(mp.set, "text_pos", {config.max_tokens, d}, std, rng);
  mp.region_pos = &weight(mp.set, "region_pos", {config.max_regions, d}, std, rng);
  mp.region_proj_w = &weight(mp.set, "region_proj.w", {config.region_dim, d}, std, rng);
  mp.region_proj_b = &bias(mp.set, "region_proj.b", d);
  for (int l = 0; l < config.layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    LayerParams lp;
    lp.wq = &weight(mp.set, pre + "attn.wq", {d, d}, std, rng);
    lp.bq = &bias(mp.set, pre + "attn.bq", d);
    lp.wk = &weight(mp.set, pre + "attn.wk", {d, d}, std, rng);
    lp.bk = &bias(mp.set, pre + "attn.bk", d);
    lp.wv = &weight(mp.set, pre + "attn.wv", {d, d}, std, rng);
    lp.bv = &bias(mp.set, pre + "attn.bv", d);
    lp.wo = &weight(mp.set, pre + "attn.wo", {d, d}, std, rng);
    lp.bo = &bias(mp.set, pre + "attn.bo", d);
    lp.ln1_gain = &bias(mp.set, pre + "ln1.gain", d, 1.0);
    lp.ln1_bias = &bias(mp.set, pre + "ln1.bias", d);
    lp.ffn_w1 = &weight(mp.set, pre + "ffn.w1", {d, 4 * d}, std, rng);
    lp.ffn_b1 = &bias(mp.set, pre + "ffn.b1", 4 * d);
    lp.ffn_w2 = &weight(mp.set, pre + "ffn.w2", {4 * d, d}, std, rng);
    lp.ffn_b2 = &bias(mp.set, pre + "ffn.b2", d);
    lp.ln2_gain = &bias(mp.set, pre + "ln2.gain", d, 1.0);
    lp.ln2_bias = &bias(mp.set, pre + "ln2.bias", d);
    mp.blocks.push_back(lp);
  }
  mp.head_w1 = &weight(mp.set, "head.w1", {d, d}, std, rng);
  mp.head_b1 = &bias(mp.set, "head.b1", d);
  mp.head_w2 = &weight(mp.set, "head.w2", {d, config.num_answers}, std, rng);
  mp.head_b2 = &bias(mp.set, "head.b2", config.num_answers);
  return mp;
}

int64_t ModelParams::expected_param_count(const ModelConfig& config) {
  const int64_t d = config.model_dim;
  int64_t n = 0;
  n += static_cast<int64_t>(config.vocab_size) * d;        // token embedding
  n += static_cast<int64_t>(config.max_tokens) * d;        // text positions
  n += static_cast<int64_t>(config.max_regions) * d;       // region positions
  n += static_cast<int64_t>(config.region_dim) * d + d;    // region projection
  n += config.layers * (4 * (d * d + d)                    // q, k, v, o
                        + 4 * d                            // two norms
                        + d * 4 * d + 4 * d                // ffn in
                        + 4 * d * d + d);                  // ffn out
  n += d * d + d + d * config.num_answers + config.num_answers;  // head
  return n;
}

EmbeddingPair build_embeddings(ad::Tape& tape, ModelParams& params,
                               const EmbeddingBatch& batch) {
  const ModelConfig& cfg = params.config;
  batch.validate(cfg);
  const int B = batch.batch, K = batch.regions, L = batch.tokens;

  ad::Tensor feats = tape.constant({B, K, cfg.region_dim}, batch.region_feats);
  ad::Tensor proj = tape.linear(feats, tape.leaf(*params.region_proj_w),
                                tape.leaf(*params.region_proj_b));
  if (cfg.use_region_pos) {
    proj = tape.add_seq(proj, tape.leaf(*params.region_pos));
  }
  std::vector<double> region_scale(batch.region_mask.begin(), batch.region_mask.end());
  ad::Tensor v_embed = tape.scale_rows(proj, std::move(region_scale));

  ad::Tensor looked = tape.embedding_lookup(tape.leaf(*params.token_embedding),
                                            batch.token_ids, B, L);
  ad::Tensor with_pos = tape.add_seq(looked, tape.leaf(*params.text_pos));
  std::vector<double> token_scale(batch.token_mask.begin(), batch.token_mask.end());
  ad::Tensor w_embed = tape.scale_rows(with_pos, std::move(token_scale));
  return {v_embed, w_embed};
}

EncodedBatch encode_forward(ad::Tape& tape, ModelParams& params,
                            ad::Tensor v_embed, ad::Tensor w_embed,
                            const EmbeddingBatch& batch) {
  const ModelConfig& cfg = params.config;
  const int B = batch.batch, K = batch.regions, L = batch.tokens;
  ad::Tensor x = tape.concat_seq(w_embed, v_embed);  // [B, L+K, d]

  std::vector<double> key_valid(static_cast<size_t>(B) * (L + K));
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < L; ++i) {
      key_valid[static_cast<size_t>(b) * (L + K) + i] =
          batch.token_mask[static_cast<size_t>(b) * L + i] ? 1.0 : 0.0;
    }
    for (int i = 0; i < K; ++i) {
      key_valid[static_cast<size_t>(b) * (L + K) + L + i] =
          batch.region_mask[static_cast<size_t>(b) * K + i] ? 1.0 : 0.0;
    }
  }

  for (const LayerParams& lp : params.blocks) {
    ad::Tensor normed = tape.layer_norm_rows(x, tape.leaf(*lp.ln1_gain),
                                             tape.leaf(*lp.ln1_bias), cfg.layer_norm_eps);
    ad::Tensor q = tape.linear(normed, tape.leaf(*lp.wq), tape.leaf(*lp.bq));
    ad::Tensor k = tape.linear(normed, tape.leaf(*lp.wk), tape.leaf(*lp.bk));
    ad::Tensor v = tape.linear(normed, tape.leaf(*lp.wv), tape.leaf(*lp.bv));
    ad::Tensor scores = tape.attention_scores(q, k, cfg.heads);
    scores = tape.mask_attention_scores(scores, key_valid);
    ad::Tensor probs = tape.softmax_rows(scores);
    ad::Tensor ctx = tape.attention_context(probs, v);
    ad::Tensor attn_out = tape.linear(ctx, tape.leaf(*lp.wo), tape.leaf(*lp.bo));
    x = tape.add(x, attn_out);

    ad::Tensor normed2 = tape.layer_norm_rows(x, tape.leaf(*lp.ln2_gain),
                                              tape.leaf(*lp.ln2_bias), cfg.layer_norm_eps);
    ad::Tensor h = tape.gelu(tape.linear(normed2, tape.leaf(*lp.ffn_w1), tape.leaf(*lp.ffn_b1)));
    ad::Tensor ffn_out = tape.linear(h, tape.leaf(*lp.ffn_w2), tape.leaf(*lp.ffn_b2));
    x = tape.add(x, ffn_out);
  }

  EncodedBatch out;
  out.z_w = tape.slice_seq(x, 0, L);
  out.z_v = tape.slice_seq(x, L, K);
  out.z_cls = tape.select_seq(x, 0);
  return out;
}

ad::Tensor answer_logits(ad::Tape& tape, ModelParams& params,
                         const EncodedBatch& encoded) {
  ad::Tensor h = tape.gelu(tape.linear(encoded.z_cls, tape.leaf(*params.head_w1),
                                       tape.leaf(*params.head_b1)));
  return tape.linear(h, tape.leaf(*params.head_w2), tape.leaf(*params.head_b2));
}

std::vector<int> predict_answer(std::span<const double> logits, int batch,
                                int num_answers) {
  if (logits.size() != static_cast<size_t>(batch) * num_answers) {
    throw std::invalid_argument("predict_answer: logits size mismatch");
  }
  std::vector<int> out(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const double* row = logits.data() + static_cast<size_t>(b) * num_answers;
    int best = 0;
    for (int a = 1; a < num_answers; ++a) {
      if (row[a] > row[best]) best = a;
    }
    if (!std::isfinite(row[best])) {
      throw std::invalid_argument("predict_answer: non-finite logit");
    }
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

}  // namespace mango
