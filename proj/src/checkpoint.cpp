#include "leukodetr/checkpoint.hpp"

#include <cstring>
#include <set>
#include <fstream>

namespace leukodetr {

namespace {

constexpr char kMagic[4] = {'L', 'K', 'D', 'T'};
constexpr uint32_t kVersion = 1;

template <class T>
uint8_t dtype_of();
template <>
uint8_t dtype_of<float>() { return 0; }
template <>
uint8_t dtype_of<double>() { return 1; }

template <class V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& is) {
  V v;
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) fail("checkpoint: truncated file");
  return v;
}

}  // namespace

template <class T>
void Checkpoint::put_tensor(const std::string& key, const Tensor<T>& t) {
  Entry e;
  e.dtype = dtype_of<T>();
  e.shape = t.shape();
  e.raw.resize(t.numel() * sizeof(T));
  std::memcpy(e.raw.data(), t.data(), e.raw.size());
  entries_[key] = std::move(e);
}

template <class T>
Tensor<T> Checkpoint::get_tensor(const std::string& key,
                                 const std::vector<int64_t>& want_shape) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) fail("checkpoint: missing key '" + key + "'");
  const Entry& e = it->second;
  check_arg(e.dtype == 0 || e.dtype == 1, "checkpoint: '" + key + "' is not a tensor");
  Tensor<T> out(e.shape);
  if (!want_shape.empty() && e.shape != want_shape)
    fail("checkpoint: shape mismatch for '" + key + "': stored " + shape_str(e.shape) +
         ", wanted " + shape_str(want_shape));
  if (e.dtype == 0) {
    const float* src = reinterpret_cast<const float*>(e.raw.data());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(src[i]);
  } else {
    const double* src = reinterpret_cast<const double*>(e.raw.data());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(src[i]);
  }
  return out;
}

void Checkpoint::put_string(const std::string& key, const std::string& s) {
  Entry e;
  e.dtype = 2;
  e.shape = {(int64_t)s.size()};
  e.raw.assign(s.begin(), s.end());
  entries_[key] = std::move(e);
}

std::string Checkpoint::get_string(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) fail("checkpoint: missing key '" + key + "'");
  check_arg(it->second.dtype == 2, "checkpoint: '" + key + "' is not a string");
  return std::string(it->second.raw.begin(), it->second.raw.end());
}

void Checkpoint::put_scalar(const std::string& key, double v) {
  put_tensor(key, TensorD::scalar(v));
}

double Checkpoint::get_scalar(const std::string& key) const {
  return get_tensor<double>(key, {1})[0];
}

std::vector<std::string> Checkpoint::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, e] : entries_) out.push_back(k);
  return out;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("checkpoint: cannot write " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, (uint64_t)entries_.size());
  for (const auto& [key, e] : entries_) {  // std::map iterates sorted
    write_pod(os, (uint32_t)key.size());
    os.write(key.data(), (std::streamsize)key.size());
    write_pod(os, e.dtype);
    write_pod(os, (uint32_t)e.shape.size());
    for (int64_t d : e.shape) write_pod(os, (uint64_t)d);
    write_pod(os, (uint64_t)e.raw.size());
    os.write(reinterpret_cast<const char*>(e.raw.data()), (std::streamsize)e.raw.size());
  }
  if (!os) fail("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    fail("checkpoint: " + path + " is not a checkpoint file");
  uint32_t version = read_pod<uint32_t>(is);
  check_arg(version == kVersion, "checkpoint: unsupported version");
  uint64_t count = read_pod<uint64_t>(is);
  Checkpoint ckpt;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t klen = read_pod<uint32_t>(is);
    std::string key(klen, '\0');
    is.read(key.data(), klen);
    Entry e;
    e.dtype = read_pod<uint8_t>(is);
    uint32_t nd = read_pod<uint32_t>(is);
    for (uint32_t d = 0; d < nd; ++d) e.shape.push_back((int64_t)read_pod<uint64_t>(is));
    uint64_t bytes = read_pod<uint64_t>(is);
    e.raw.resize(bytes);
    is.read(reinterpret_cast<char*>(e.raw.data()), (std::streamsize)bytes);
    if (!is) fail("checkpoint: truncated entry '" + key + "'");
    ckpt.entries_[key] = std::move(e);
  }
  return ckpt;
}

template <class T>
void save_model(Checkpoint& ckpt, Module<T>& model) {
  for (const auto& p : model.named_parameters()) ckpt.put_tensor("model." + p.name, p.var->val());
  for (const auto& b : model.named_buffers()) ckpt.put_tensor("model." + b.name, *b.tensor);
}

template <class T>
LoadReport load_model(const Checkpoint& ckpt, Module<T>& model) {
  LoadReport report;
  std::set<std::string> wanted;
  auto restore = [&](const std::string& name, Tensor<T>& dst) {
    std::string key = "model." + name;
    wanted.insert(key);
    if (!ckpt.has(key)) {
      report.missing.push_back(key);
      return;
    }
    dst = ckpt.get_tensor<T>(key, dst.shape());
  };
  for (auto& p : model.named_parameters()) restore(p.name, p.var->node()->value);
  for (auto& b : model.named_buffers()) restore(b.name, *b.tensor);
  for (const auto& key : ckpt.keys())
    if (key.rfind("model.", 0) == 0 && !wanted.count(key)) report.unexpected.push_back(key);
  return report;
}

template void Checkpoint::put_tensor<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put_tensor<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::get_tensor<float>(const std::string&,
                                                     const std::vector<int64_t>&) const;
template Tensor<double> Checkpoint::get_tensor<double>(const std::string&,
                                                       const std::vector<int64_t>&) const;
template void save_model<float>(Checkpoint&, Module<float>&);
template void save_model<double>(Checkpoint&, Module<double>&);
template LoadReport load_model<float>(const Checkpoint&, Module<float>&);
template LoadReport load_model<double>(const Checkpoint&, Module<double>&);

}  // namespace leukodetr
