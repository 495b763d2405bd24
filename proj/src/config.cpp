#include "leukodetr/config.hpp"

#include "leukodetr/data.hpp"

#include <fstream>

using nlohmann::json;

namespace leukodetr {

namespace {

// Validates `user` against the default tree: every user key must exist in the
// defaults (same nesting), scalars replace scalars.
void merge_into(json& base, const json& user, const std::string& path) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string here = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key()))
      throw std::invalid_argument("config: unknown key '" + here + "'");
    if (base[it.key()].is_object()) {
      if (!it.value().is_object())
        throw std::invalid_argument("config: '" + here + "' must be a section");
      merge_into(base[it.key()], it.value(), here);
    } else {
      base[it.key()] = it.value();
    }
  }
}

const json* find_path(const json& root, const std::string& dotted) {
  const json* cur = &root;
  size_t start = 0;
  while (true) {
    size_t dot = dotted.find('.', start);
    std::string part = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cur->is_object() || !cur->contains(part)) return nullptr;
    cur = &(*cur)[part];
    if (dot == std::string::npos) return cur;
    start = dot + 1;
  }
}

}  // namespace

json RunConfig::default_tree() {
  return json{
      {"seed", 0},
      {"out_dir", "runs/default"},
      {"data",
       {{"schema", "synthetic"},
        {"train_json", ""},
        {"test_json", ""},
        {"resize_shorter", 0},   // 0 keeps native resolution (synthetic default)
        {"resize_max", 0},
        {"hflip", true}}},
      {"d_model", 256},
      {"ffn_dim", 1024},
      {"num_queries", 100},
      {"dropout", 0.1},
      {"attn", {{"heads", 8}, {"points", 4}, {"levels", 4}}},
      {"enc", {{"layers", 6}}},
      {"dec", {{"layers", 6}}},
      {"pe", {{"spatial", "sin"}, {"scale", "learned"}}},
      {"fpn", {{"mode", "tconv_bl"}, {"variant", "hsfpn"}}},
      {"loss",
       {{"l1", true},
        {"giou", true},
        {"aux", true},
        {"gamma", 2.0},
        {"alpha", "auto"},  // "auto", "none", or an explicit per-class list
        {"class_weight", 2.0},
        {"l1_weight", 5.0},
        {"giou_weight", 2.0}}},
      {"optim",
       {{"lr_backbone", 2e-5},
        {"lr_transformer", 2e-4},
        {"lr_fpn", 3e-4},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"weight_decay", 1e-4},
        {"clip_norm", 0.1},
        {"step_size", 40},
        {"step_gamma", 0.1}}},
      {"train",
       {{"batch_size", 4},
        {"epochs", 150},
        {"iterations", 0},  // > 0 trains for a fixed iteration count instead
        {"eval_every", 0},
        {"log_every", 10}}},
      {"infer", {{"threshold", 0.5}}},
  };
}

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.raw_ = default_tree();
  return cfg;
}

RunConfig RunConfig::from_json(const json& overrides) {
  RunConfig cfg = defaults();
  merge_into(cfg.raw_, overrides, "");
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  json user;
  try {
    in >> user;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: malformed JSON in " + path + ": " + e.what());
  }
  return from_json(user);
}

void RunConfig::apply_override(const std::string& key_eq_value) {
  size_t eq = key_eq_value.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("--set expects key=value, got '" + key_eq_value + "'");
  std::string dotted = key_eq_value.substr(0, eq);
  std::string value = key_eq_value.substr(eq + 1);

  json* cur = &raw_;
  size_t start = 0;
  while (true) {
    size_t dot = dotted.find('.', start);
    std::string part = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cur->is_object() || !cur->contains(part))
      throw std::invalid_argument("config: unknown key '" + dotted + "'");
    cur = &(*cur)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (cur->is_object())
    throw std::invalid_argument("config: '" + dotted + "' is a section, not a value");
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // plain strings need no quotes
  if (cur->is_string() && !parsed.is_string()) parsed = value;
  *cur = parsed;
}

ModelConfig RunConfig::model() const {
  ModelConfig mc;
  mc.transformer.d_model = (int64_t)get_number("d_model");
  mc.transformer.ffn_dim = (int64_t)get_number("ffn_dim");
  mc.transformer.num_queries = (int64_t)get_number("num_queries");
  mc.transformer.dropout = get_number("dropout");
  mc.transformer.heads = (int)get_number("attn.heads");
  mc.transformer.points = (int)get_number("attn.points");
  mc.transformer.levels = (int)get_number("attn.levels");
  mc.transformer.enc_layers = (int)get_number("enc.layers");
  mc.transformer.dec_layers = (int)get_number("dec.layers");
  mc.transformer.spatial_pe = spatial_pe_from_string(get_string("pe.spatial"));
  mc.transformer.scale_pe = scale_pe_from_string(get_string("pe.scale"));
  mc.transformer.num_classes =
      (int64_t)DatasetSchema::by_name(get_string("data.schema")).classes.size();
  mc.fpn_mode = fpn_mode_from_string(get_string("fpn.mode"));
  mc.fpn_variant = fpn_variant_from_string(get_string("fpn.variant"));
  check_arg(mc.transformer.levels == 4, "attn.levels must be 4 for the 4-level pyramid");
  return mc;
}

OptimConfig RunConfig::optim() const {
  OptimConfig oc;
  oc.lr_backbone = get_number("optim.lr_backbone");
  oc.lr_transformer = get_number("optim.lr_transformer");
  oc.lr_fpn = get_number("optim.lr_fpn");
  oc.beta1 = get_number("optim.beta1");
  oc.beta2 = get_number("optim.beta2");
  oc.weight_decay = get_number("optim.weight_decay");
  oc.clip_norm = get_number("optim.clip_norm");
  oc.step_size = (int64_t)get_number("optim.step_size");
  oc.step_gamma = get_number("optim.step_gamma");
  return oc;
}

LossConfig RunConfig::loss(const std::vector<int64_t>& class_counts) const {
  LossConfig lc;
  lc.use_l1 = get_bool("loss.l1");
  lc.use_giou = get_bool("loss.giou");
  lc.aux = get_bool("loss.aux");
  lc.gamma = get_number("loss.gamma");
  lc.class_weight = get_number("loss.class_weight");
  lc.l1_weight = get_number("loss.l1_weight");
  lc.giou_weight = get_number("loss.giou_weight");

  const json& alpha = raw_["loss"]["alpha"];
  if (alpha.is_array()) {
    for (const auto& v : alpha) lc.alpha.push_back(v.get<double>());
  } else if (alpha.is_string() && alpha.get<std::string>() == "auto") {
    int64_t total = 0;
    for (int64_t c : class_counts) total += c;
    if (total > 0) {
      for (int64_t c : class_counts)
        lc.alpha.push_back(std::clamp(1.0 - double(c) / double(total), 0.05, 0.95));
    }
  } else if (alpha.is_string() && alpha.get<std::string>() == "none") {
    // alpha balancing disabled
  } else {
    throw std::invalid_argument("loss.alpha must be 'auto', 'none', or a list");
  }
  return lc;
}

uint64_t RunConfig::seed() const { return (uint64_t)get_number("seed"); }
std::string RunConfig::out_dir() const { return get_string("out_dir"); }

double RunConfig::get_number(const std::string& dotted) const {
  const json* v = find_path(raw_, dotted);
  check_arg(v && v->is_number(), "config: '" + dotted + "' must be a number");
  return v->get<double>();
}

bool RunConfig::get_bool(const std::string& dotted) const {
  const json* v = find_path(raw_, dotted);
  check_arg(v && v->is_boolean(), "config: '" + dotted + "' must be a boolean");
  return v->get<bool>();
}

std::string RunConfig::get_string(const std::string& dotted) const {
  const json* v = find_path(raw_, dotted);
  check_arg(v && v->is_string(), "config: '" + dotted + "' must be a string");
  return v->get<std::string>();
}

std::string RunConfig::canonical_dump() const { return raw_.dump(1); }

uint64_t RunConfig::hash() const {
  std::string s = canonical_dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace leukodetr
