#pragma once
// Decoupled-weight-decay Adam, the warmup/decay learning-rate schedule, and
// parameter registration/initialization helpers.

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mango/autodiff.hpp"
#include "mango/rng.hpp"

namespace mango {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

// One bias-corrected Adam step with decoupled weight decay; increments
// step_count. Requires a populated grad buffer.
void adamw_update(ad::Parameter& p, double lr, double beta1, double beta2,
                  double weight_decay, double eps);
void adamw_update(ad::Parameter& p, double lr, const AdamConfig& cfg);

// Linear ramp from 0 to peak over the first warmup_fraction of total_steps,
// then linear decay to 0 at total_steps. step outside [0, total_steps] is a
// contract error.
double lr_at_step(double peak_lr, double warmup_fraction, int64_t total_steps,
                  int64_t step);

// Named parameter registry; every parameter is registered exactly once.
class ParamSet {
 public:
  ad::Parameter& create(const std::string& name, ad::Shape shape);
  ad::Parameter& at(const std::string& name);
  const ad::Parameter& at(const std::string& name) const;
  ad::Parameter* find(const std::string& name);
  std::vector<ad::Parameter*> all();
  std::vector<const ad::Parameter*> all() const;
  size_t count() const { return params_.size(); }
  int64_t total_size() const;
  void zero_grads();

 private:
  std::vector<std::unique_ptr<ad::Parameter>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Normal(0, stddev) with resampling outside two standard deviations.
void fill_truncated_normal(std::vector<double>& values, double stddev, Rng& rng);
void fill_constant(std::vector<double>& values, double value);

}  // namespace mango
