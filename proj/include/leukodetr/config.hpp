#pragma once

#include <json.hpp>

#include "leukodetr/detector.hpp"
#include "leukodetr/losses.hpp"
#include "leukodetr/optimizer.hpp"

namespace leukodetr {

// Run configuration: a JSON document validated against the default tree.
// Every leaf is overridable via "--set dotted.key=value".
class RunConfig {
 public:
  static nlohmann::json default_tree();
  static RunConfig defaults();
  static RunConfig from_file(const std::string& path);
  static RunConfig from_json(const nlohmann::json& overrides);

  void apply_override(const std::string& key_eq_value);

  // typed views
  ModelConfig model() const;
  OptimConfig optim() const;
  // alpha entries resolve "auto" via dataset instance counts
  LossConfig loss(const std::vector<int64_t>& class_counts) const;

  uint64_t seed() const;
  std::string out_dir() const;
  const nlohmann::json& raw() const { return raw_; }

  double get_number(const std::string& dotted) const;
  bool get_bool(const std::string& dotted) const;
  std::string get_string(const std::string& dotted) const;

  std::string canonical_dump() const;  // sorted keys, stable across round trips
  uint64_t hash() const;

 private:
  nlohmann::json raw_;
};

}  // namespace leukodetr
