#include "mango/noise.hpp"

#include <cmath>
#include <stdexcept>

namespace mango {

void PerturbationConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (sigma < 0.0) throw std::invalid_argument("sigma must be nonnegative");
  if (!(gaussian_fraction >= 0.0 && gaussian_fraction <= 1.0)) {
    throw std::invalid_argument("gaussian_fraction must lie in [0, 1]");
  }
  if (generator_every < 1) throw std::invalid_argument("generator_every must be >= 1");
  if (retrain_interval < generator_every) {
    throw std::invalid_argument("retrain_interval must be >= generator_every");
  }
}

void MaskingConfig::validate() const {
  if (!(p_mask_img >= 0.0 && p_mask_img <= 1.0) ||
      !(p_mask_txt >= 0.0 && p_mask_txt <= 1.0)) {
    throw std::invalid_argument("masking probabilities must lie in [0, 1]");
  }
}

std::string modality_name(Modality m) {
  return m == Modality::image ? "image" : "text";
}

NoiseGenerator NoiseGenerator::init(Modality modality, int width, Rng& rng) {
  if (width <= 0) throw std::invalid_argument("generator width must be positive");
  NoiseGenerator g;
  g.modality = modality;
  g.width = width;
  const std::string pre = "gen_" + modality_name(modality) + ".";
  g.w1 = &g.set.create(pre + "w1", {width, width});
  g.b1 = &g.set.create(pre + "b1", {width});
  g.w2 = &g.set.create(pre + "w2", {width, width});
  g.b2 = &g.set.create(pre + "b2", {width});
  fill_truncated_normal(g.w1->value, 0.02, rng);
  fill_truncated_normal(g.w2->value, 0.02, rng);
  return g;
}

void reinit_generator(NoiseGenerator& gen, Rng& rng) {
  fill_truncated_normal(gen.w1->value, 0.02, rng);
  fill_truncated_normal(gen.w2->value, 0.02, rng);
  fill_constant(gen.b1->value, 0.0);
  fill_constant(gen.b2->value, 0.0);
  for (ad::Parameter* p : gen.set.all()) {
    p->zero_grad();
    p->reset_optimizer_state();
  }
}

std::vector<double> sample_gaussian(size_t count, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("sigma must be nonnegative");
  std::vector<double> out(count, 0.0);
  if (sigma == 0.0) return out;
  for (double& v : out) v = rng.normal(0.0, sigma);
  return out;
}

void project_to_sphere(std::span<double> data, int width, double epsilon) {
  ad::scale_rows_to_norm(data, width, epsilon);
}

ad::Tensor generate_adversarial(ad::Tape& tape, NoiseGenerator& gen, int batch,
                                int seq, double epsilon, Rng& rng) {
  const size_t count = static_cast<size_t>(batch) * seq * gen.width;
  std::vector<double> alpha(count);
  for (double& v : alpha) v = rng.normal();
  ad::Tensor a = tape.constant({batch, seq, gen.width}, std::move(alpha));
  ad::Tensor h = tape.gelu(tape.linear(a, tape.leaf(*gen.w1), tape.leaf(*gen.b1)));
  ad::Tensor raw = tape.linear(h, tape.leaf(*gen.w2), tape.leaf(*gen.b2));
  return tape.project_rows(raw, epsilon);
}

ad::Tensor gaussian_perturb(ad::Tape& tape, ad::Tensor embed,
                            std::span<const uint8_t> valid,
                            std::span<const uint64_t> example_uids, double sigma,
                            double fraction, const Rng& stream) {
  const auto& shape = embed.shape();
  if (shape.size() != 3) {
    throw std::invalid_argument("gaussian_perturb expects [batch, seq, width]");
  }
  const int batch = shape[0], seq = shape[1], width = shape[2];
  if (fraction == 0.0 || sigma == 0.0) return embed;
  std::vector<double> noise(static_cast<size_t>(batch) * seq * width, 0.0);
  for (int b = 0; b < batch; ++b) {
    Rng ex = stream.child(example_uids[static_cast<size_t>(b)]);
    if (!ex.bernoulli(fraction)) continue;
    for (int s = 0; s < seq; ++s) {
      if (!valid[static_cast<size_t>(b) * seq + s]) continue;
      double* row = &noise[(static_cast<size_t>(b) * seq + s) * width];
      for (int j = 0; j < width; ++j) row[j] = ex.normal(0.0, sigma);
    }
  }
  return tape.add(embed, tape.constant(shape, std::move(noise)));
}

ad::Tensor apply_random_region_mask(ad::Tape& tape, ad::Tensor v_embed,
                                    std::span<const uint8_t> region_mask,
                                    std::span<const uint64_t> example_uids,
                                    double p_mask_img, const Rng& stream) {
  const auto& shape = v_embed.shape();
  if (shape.size() != 3) {
    throw std::invalid_argument("apply_random_region_mask expects [batch, regions, width]");
  }
  const int batch = shape[0], regions = shape[1];
  if (p_mask_img == 0.0) return v_embed;
  std::vector<double> keep(static_cast<size_t>(batch) * regions, 1.0);
  for (int b = 0; b < batch; ++b) {
    Rng ex = stream.child(example_uids[static_cast<size_t>(b)]);
    for (int r = 0; r < regions; ++r) {
      const size_t i = static_cast<size_t>(b) * regions + r;
      if (region_mask[i] && ex.bernoulli(p_mask_img)) keep[i] = 0.0;
    }
  }
  return tape.scale_rows(v_embed, std::move(keep));
}

void insert_mask_tokens(EmbeddingBatch& batch, double p_mask_txt, int mask_id,
                        const Rng& stream) {
  if (!(p_mask_txt >= 0.0 && p_mask_txt <= 1.0)) {
    throw std::invalid_argument("p_mask_txt must lie in [0, 1]");
  }
  if (p_mask_txt == 0.0) return;
  const int L = batch.tokens;
  for (int b = 0; b < batch.batch; ++b) {
    Rng ex = stream.child(batch.example_uids[static_cast<size_t>(b)]).child(1);
    int* ids = &batch.token_ids[static_cast<size_t>(b) * L];
    uint8_t* mask = &batch.token_mask[static_cast<size_t>(b) * L];
    int valid = 0;
    while (valid < L && mask[valid]) ++valid;
    const int n = ex.binomial(valid, p_mask_txt);
    for (int k = 0; k < n; ++k) {
      const int gap = ex.uniform_int(1, valid);  // after [CLS], up to the end
      const int last = std::min(valid, L - 1);
      for (int i = last; i > gap; --i) ids[i] = ids[i - 1];
      if (gap < L) ids[gap] = mask_id;
      valid = std::min(valid + 1, L);
      for (int i = 0; i < valid; ++i) mask[i] = 1;
    }
  }
}

double symmetric_kl_value(std::span<const double> p, std::span<const double> q,
                          int width) {
  if (p.size() != q.size() || p.size() % static_cast<size_t>(width) != 0) {
    throw std::invalid_argument("symmetric_kl_value: size mismatch");
  }
  constexpr double kClamp = 1e-8;
  const size_t rows = p.size() / static_cast<size_t>(width);
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pc = std::max(p[i], kClamp);
    const double qc = std::max(q[i], kClamp);
    acc += (pc - qc) * std::log(pc / qc);
  }
  return acc / static_cast<double>(rows);
}

AdversaryParts adversary_objective(ad::Tape& tape, ModelParams& model,
                                   NoiseGenerator* gen_image, NoiseGenerator* gen_text,
                                   const EmbeddingBatch& clean_batch,
                                   const EmbeddingBatch& adv_batch,
                                   ad::Tensor v_embed_adv, ad::Tensor w_embed_adv,
                                   const PerturbationConfig& config, Rng& noise_rng) {
  config.validate();
  AdversaryParts parts;

  EmbeddingPair clean_emb = build_embeddings(tape, model, clean_batch);
  EncodedBatch clean_enc =
      encode_forward(tape, model, clean_emb.v_embed, clean_emb.w_embed, clean_batch);
  parts.logits_clean = answer_logits(tape, model, clean_enc);

  ad::Tensor v = v_embed_adv, w = w_embed_adv;
  if (gen_image != nullptr) {
    parts.delta_v = generate_adversarial(tape, *gen_image, adv_batch.batch,
                                         adv_batch.regions, config.epsilon, noise_rng);
    v = tape.add(v, parts.delta_v);
  }
  if (gen_text != nullptr) {
    parts.delta_w = generate_adversarial(tape, *gen_text, adv_batch.batch,
                                         adv_batch.tokens, config.epsilon, noise_rng);
    w = tape.add(w, parts.delta_w);
  }
  EncodedBatch adv_enc = encode_forward(tape, model, v, w, adv_batch);
  parts.logits_adv = answer_logits(tape, model, adv_enc);

  ad::Tensor targets = tape.constant({adv_batch.batch, adv_batch.num_answers},
                                     adv_batch.labels);
  parts.l_std = tape.bce_with_logits(parts.logits_adv, targets);
  if (config.beta != 0.0) {
    ad::Tensor p = tape.softmax_rows(parts.logits_adv);
    ad::Tensor q = tape.softmax_rows(parts.logits_clean);
    parts.r_kl = tape.symmetric_kl(p, q);
    parts.objective = tape.add(parts.l_std, tape.scale(parts.r_kl, config.beta));
  } else {
    parts.objective = parts.l_std;
  }
  return parts;
}

}  // namespace mango
