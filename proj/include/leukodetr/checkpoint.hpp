#pragma once

#include <map>
#include <string>
#include <vector>

#include "leukodetr/nn.hpp"

namespace leukodetr {

// Flat key -> array container with a stable little-endian binary encoding.
// Keys are written sorted, so save -> load -> save is byte-identical.
class Checkpoint {
 public:
  struct Entry {
    uint8_t dtype = 0;  // 0 = f32, 1 = f64, 2 = bytes
    std::vector<int64_t> shape;
    std::vector<unsigned char> raw;
  };

  template <class T>
  void put_tensor(const std::string& key, const Tensor<T>& t);
  // Converts dtype if needed; throws on missing key or shape mismatch.
  template <class T>
  Tensor<T> get_tensor(const std::string& key, const std::vector<int64_t>& want_shape) const;

  void put_string(const std::string& key, const std::string& s);
  std::string get_string(const std::string& key) const;
  void put_scalar(const std::string& key, double v);
  double get_scalar(const std::string& key) const;

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  std::vector<std::string> keys() const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, Entry> entries_;
};

struct LoadReport {
  std::vector<std::string> missing;     // wanted but absent in the checkpoint
  std::vector<std::string> unexpected;  // present but not wanted
  bool clean() const { return missing.empty() && unexpected.empty(); }
};

// Write every parameter and buffer under "model.<name>".
template <class T>
void save_model(Checkpoint& ckpt, Module<T>& model);

// Restore parameters/buffers. Missing or extra keys are tolerated and
// reported; a shape mismatch throws with the offending key.
template <class T>
LoadReport load_model(const Checkpoint& ckpt, Module<T>& model);

}  // namespace leukodetr
