#pragma once
// Versioned binary checkpoints: named parameter tensors with shapes, optional
// optimizer moments, and a free-form JSON metadata block. Round-trips are
// bit-exact; files produced from the same state are byte-identical.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mango/optimizer.hpp"

namespace mango {

struct LoadedParam {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
  bool has_moments = false;
  std::vector<double> moment1;
  std::vector<double> moment2;
  int64_t step_count = 0;
};

struct LoadedCheckpoint {
  std::string meta_json;
  std::vector<LoadedParam> params;

  const LoadedParam& at(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& meta_json,
                     std::span<const ad::Parameter* const> params, bool with_moments);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Copies values (and moments when present) into matching parameters of the
// set; every set parameter must be present with an identical shape.
void restore_params(const LoadedCheckpoint& ckpt, ParamSet& set);

uint64_t fnv1a64(std::span<const uint8_t> bytes);
uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(uint64_t value);

}  // namespace mango
