#pragma once
// Perturbation machinery: Gaussian embedding noise, the learned adversarial
// noise generators with epsilon-sphere projection, random masking of regions
// and tokens, and the adversary's objective.

#include <optional>
#include <string>
#include <vector>

#include "mango/model.hpp"

namespace mango {

struct PerturbationConfig {
  double epsilon = 1.0;          // L2 radius of every perturbation vector
  double sigma = 0.5;            // Gaussian baseline standard deviation
  double gaussian_fraction = 0.5;  // fraction of examples perturbed (Gaussian mode)
  double beta = 1.0;             // weight of the symmetric-KL term
  int generator_every = 20;      // T: outer steps per generator update
  int64_t retrain_interval = 400;  // outer steps between generator reinits
  double generator_lr = 1e-5;
  double retrain_lr = 1e-4;      // generator learning rate after a reinit

  void validate() const;
};

struct MaskingConfig {
  double p_mask_img = 0.15;  // probability a valid region embedding is zeroed
  double p_mask_txt = 0.15;  // per-slot [MASK] insertion probability

  void validate() const;
};

enum class Modality { image, text };
std::string modality_name(Modality m);

// Per-position map from Gaussian samples to perturbations: two affine layers
// of the embedding width with one nonlinearity between.
struct NoiseGenerator {
  Modality modality = Modality::image;
  int width = 0;
  ParamSet set;
  ad::Parameter *w1 = nullptr, *b1 = nullptr, *w2 = nullptr, *b2 = nullptr;

  static NoiseGenerator init(Modality modality, int width, Rng& rng);
};

// Parameters re-drawn from the init distribution, optimizer moments zeroed.
// The learning-rate switch to retrain_lr is the trainer's responsibility.
void reinit_generator(NoiseGenerator& gen, Rng& rng);

// i.i.d. N(0, sigma^2) samples.
std::vector<double> sample_gaussian(size_t count, double sigma, Rng& rng);

// Rescales each trailing-dimension vector of a plain buffer to L2 norm
// epsilon; zero vectors are returned unchanged. Bit-exactly idempotent.
void project_to_sphere(std::span<double> data, int width, double epsilon);

// delta = project(g_phi(alpha)) with alpha ~ N(0, I), recorded on the tape so
// generator gradients flow through the projection.
ad::Tensor generate_adversarial(ad::Tape& tape, NoiseGenerator& gen, int batch,
                                int seq, double epsilon, Rng& rng);

// A seeded per-example coin selects `fraction` of the examples; selected
// examples receive additive Gaussian noise on their valid positions.
ad::Tensor gaussian_perturb(ad::Tape& tape, ad::Tensor embed,
                            std::span<const uint8_t> valid,
                            std::span<const uint64_t> example_uids, double sigma,
                            double fraction, const Rng& stream);

// Zeroes each valid region embedding independently with probability p; the
// attention mask is left unchanged.
ad::Tensor apply_random_region_mask(ad::Tape& tape, ad::Tensor v_embed,
                                    std::span<const uint8_t> region_mask,
                                    std::span<const uint64_t> example_uids,
                                    double p_mask_img, const Rng& stream);

// Draws n ~ Binomial(valid_count, p) and inserts n [MASK] tokens at uniform
// gaps after position 0, truncating at max_tokens from the right. Applied
// per example with a stream derived from the example uid.
void insert_mask_tokens(EmbeddingBatch& batch, double p_mask_txt, int mask_id,
                        const Rng& stream);

// Plain symmetric KL between two probability row sets (used by tests and
// reports; the differentiable version lives on the tape).
double symmetric_kl_value(std::span<const double> p, std::span<const double> q,
                          int width);

struct AdversaryParts {
  ad::Tensor objective;     // L_std + beta * R_kl (scalar)
  ad::Tensor l_std;         // BCE on the perturbed forward
  ad::Tensor r_kl;          // undefined when beta == 0
  ad::Tensor logits_clean;  // [B, A]
  ad::Tensor logits_adv;    // [B, A]
  ad::Tensor delta_v, delta_w;  // undefined for unperturbed modalities
};

// Builds the clean forward, the generator-perturbed forward on the supplied
// (possibly masked) embeddings, and the adversary objective. The adversary
// ascends the objective; the model descends it.
AdversaryParts adversary_objective(ad::Tape& tape, ModelParams& model,
                                   NoiseGenerator* gen_image, NoiseGenerator* gen_text,
                                   const EmbeddingBatch& clean_batch,
                                   const EmbeddingBatch& adv_batch,
                                   ad::Tensor v_embed_adv, ad::Tensor w_embed_adv,
                                   const PerturbationConfig& config, Rng& noise_rng);

}  // namespace mango
