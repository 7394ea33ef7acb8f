#include "mango/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace mango {

void adamw_update(ad::Parameter& p, double lr, double beta1, double beta2,
                  double weight_decay, double eps) {
  if (p.grad.size() != p.value.size()) {
    throw std::invalid_argument("adamw_update: parameter " + p.name + " has no gradient");
  }
  p.step_count += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p.step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p.step_count));
  for (size_t i = 0; i < p.value.size(); ++i) {
    const double g = p.grad[i];
    p.moment1[i] = beta1 * p.moment1[i] + (1.0 - beta1) * g;
    p.moment2[i] = beta2 * p.moment2[i] + (1.0 - beta2) * g * g;
    const double m_hat = p.moment1[i] / bc1;
    const double v_hat = p.moment2[i] / bc2;
    p.value[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * p.value[i]);
  }
}

void adamw_update(ad::Parameter& p, double lr, const AdamConfig& cfg) {
  adamw_update(p, lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps);
}

double lr_at_step(double peak_lr, double warmup_fraction, int64_t total_steps,
                  int64_t step) {
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("lr_at_step: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw std::invalid_argument("lr_at_step: warmup_fraction must be in (0, 1)");
  }
  const double warmup_steps = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s <= warmup_steps) return peak_lr * s / warmup_steps;
  return peak_lr * (static_cast<double>(total_steps) - s) /
         (static_cast<double>(total_steps) - warmup_steps);
}

ad::Parameter& ParamSet::create(const std::string& name, ad::Shape shape) {
  if (index_.contains(name)) {
    throw std::invalid_argument("parameter registered twice: " + name);
  }
  params_.push_back(std::make_unique<ad::Parameter>(name, std::move(shape)));
  index_.emplace(name, params_.size() - 1);
  return *params_.back();
}

ad::Parameter& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return *params_[it->second];
}

const ad::Parameter& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return *params_[it->second];
}

ad::Parameter* ParamSet::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

std::vector<ad::Parameter*> ParamSet::all() {
  std::vector<ad::Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const ad::Parameter*> ParamSet::all() const {
  std::vector<const ad::Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

int64_t ParamSet::total_size() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

void fill_truncated_normal(std::vector<double>& values, double stddev, Rng& rng) {
  for (double& v : values) {
    double x = rng.normal(0.0, stddev);
    while (std::fabs(x) > 2.0 * stddev) x = rng.normal(0.0, stddev);
    v = x;
  }
}

void fill_constant(std::vector<double>& values, double value) {
  for (double& v : values) v = value;
}

}  // namespace mango
