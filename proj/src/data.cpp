#include "leukodetr/data.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace fs = std::filesystem;
using nlohmann::json;

namespace leukodetr {

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = (char)std::tolower((unsigned char)c);
  return s;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    fail("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

}  // namespace

DatasetSchema DatasetSchema::wbcdd() { return {"wbcdd", {"BAS", "EOS", "LYM", "MON", "NEU"}}; }
DatasetSchema DatasetSchema::lisc() { return {"lisc", {"BAS", "EOS", "LYM", "MON", "NEU"}}; }
DatasetSchema DatasetSchema::bccd() { return {"bccd", {"Platelets", "RBC", "WBC"}}; }
DatasetSchema DatasetSchema::synthetic() {
  return {"synthetic", {"disc_large", "disc_medium", "disc_small"}};
}

DatasetSchema DatasetSchema::by_name(const std::string& name) {
  std::string n = lower(name);
  if (n == "wbcdd") return wbcdd();
  if (n == "lisc") return lisc();
  if (n == "bccd") return bccd();
  if (n == "synthetic") return synthetic();
  fail("unknown dataset schema: " + name);
}

int DatasetSchema::class_index(const std::string& label) const {
  std::string l = lower(label);
  for (size_t i = 0; i < classes.size(); ++i)
    if (lower(classes[i]) == l) return (int)i;
  return -1;
}

std::vector<int64_t> Dataset::class_instance_counts() const {
  std::vector<int64_t> counts(schema.classes.size(), 0);
  for (const auto& img : images)
    for (const auto& b : img.boxes) ++counts[b.class_id];
  return counts;
}

const AnnotatedImage* Dataset::find(int64_t id) const {
  for (const auto& img : images)
    if (img.id == id) return &img;
  return nullptr;
}

Dataset load_coco(const std::string& json_path, const DatasetSchema* expected) {
  json j = read_json_file(json_path);
  check_arg(j.contains("images") && j.contains("annotations") && j.contains("categories"),
            json_path + ": not a COCO-style annotation file");

  Dataset ds;
  ds.image_root = fs::path(json_path).parent_path().string();

  // categories, ordered by id, mapped onto the schema
  std::vector<std::pair<int64_t, std::string>> cats;
  for (const auto& c : j["categories"])
    cats.emplace_back(c.at("id").get<int64_t>(), c.at("name").get<std::string>());
  std::sort(cats.begin(), cats.end());
  if (expected) {
    ds.schema = *expected;
  } else {
    std::string schema_name = j.value("info", json::object()).value("schema", "");
    if (!schema_name.empty()) {
      ds.schema = DatasetSchema::by_name(schema_name);
    } else {
      ds.schema.name = "custom";
      for (const auto& [id, name] : cats) ds.schema.classes.push_back(name);
    }
  }
  std::unordered_map<int64_t, int> cat_to_class;
  for (const auto& [id, name] : cats) {
    int idx = ds.schema.class_index(name);
    check_arg(idx >= 0, json_path + ": category '" + name + "' not in schema " + ds.schema.name);
    cat_to_class[id] = idx;
  }

  std::unordered_map<int64_t, size_t> by_id;
  for (const auto& im : j["images"]) {
    AnnotatedImage a;
    a.id = im.at("id").get<int64_t>();
    a.file = im.at("file_name").get<std::string>();
    a.width = im.at("width").get<int64_t>();
    a.height = im.at("height").get<int64_t>();
    check_arg(!by_id.count(a.id), json_path + ": duplicate image id " + std::to_string(a.id));
    by_id[a.id] = ds.images.size();
    ds.images.push_back(std::move(a));
  }

  std::vector<std::string> missing;
  for (const auto& im : ds.images) {
    if (!fs::exists(fs::path(ds.image_root) / im.file))
      missing.push_back(std::to_string(im.id) + " (" + im.file + ")");
  }
  if (!missing.empty()) {
    std::string msg = json_path + ": missing image files for ids:";
    for (const auto& m : missing) msg += " " + m;
    fail(msg);
  }

  for (const auto& an : j["annotations"]) {
    int64_t img_id = an.at("image_id").get<int64_t>();
    auto it = by_id.find(img_id);
    check_arg(it != by_id.end(),
              json_path + ": annotation refers to unknown image " + std::to_string(img_id));
    AnnotatedImage& img = ds.images[it->second];
    auto bbox = an.at("bbox");
    check_arg(bbox.size() == 4, json_path + ": bbox must be [x,y,w,h]");
    AnnotatedBox b;
    b.class_id = cat_to_class.at(an.at("category_id").get<int64_t>());
    b.x1 = std::max(0.0, bbox[0].get<double>());
    b.y1 = std::max(0.0, bbox[1].get<double>());
    b.x2 = std::min((double)img.width, bbox[0].get<double>() + bbox[2].get<double>());
    b.y2 = std::min((double)img.height, bbox[1].get<double>() + bbox[3].get<double>());
    if (b.x2 <= b.x1 || b.y2 <= b.y1) {
      ++ds.dropped_degenerate;
      continue;
    }
    img.boxes.push_back(b);
  }

  std::sort(ds.images.begin(), ds.images.end(),
            [](const AnnotatedImage& a, const AnnotatedImage& b) { return a.id < b.id; });
  return ds;
}

void save_coco(const Dataset& ds, const std::string& json_path) {
  json j;
  j["info"] = {{"schema", ds.schema.name}};
  j["categories"] = json::array();
  for (size_t i = 0; i < ds.schema.classes.size(); ++i)
    j["categories"].push_back({{"id", (int64_t)i + 1}, {"name", ds.schema.classes[i]}});
  j["images"] = json::array();
  j["annotations"] = json::array();
  int64_t ann_id = 1;
  for (const auto& im : ds.images) {
    j["images"].push_back({{"id", im.id},
                           {"file_name", im.file},
                           {"width", im.width},
                           {"height", im.height}});
    for (const auto& b : im.boxes) {
      j["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", im.id},
                                  {"category_id", (int64_t)b.class_id + 1},
                                  {"bbox", {b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1}},
                                  {"area", (b.x2 - b.x1) * (b.y2 - b.y1)},
                                  {"iscrowd", 0}});
    }
  }
  std::ofstream out(json_path);
  if (!out) fail("cannot write " + json_path);
  out << j.dump(1) << "\n";
}

LabelmeReport convert_labelme(const std::string& input_dir, const std::string& output_json,
                              const DatasetSchema& schema) {
  check_arg(fs::is_directory(input_dir), "convert_labelme: not a directory: " + input_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input_dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  Dataset ds;
  ds.schema = schema;
  ds.image_root = input_dir;
  LabelmeReport report;
  int64_t next_id = 1;
  for (const auto& f : files) {
    json j = read_json_file(f.string());
    if (!j.contains("shapes")) continue;  // not a LabelMe annotation
    AnnotatedImage img;
    img.id = next_id++;
    img.file = j.value("imagePath", f.stem().string() + ".png");
    img.height = j.value("imageHeight", 0);
    img.width = j.value("imageWidth", 0);
    check_arg(img.width > 0 && img.height > 0,
              f.string() + ": missing imageWidth/imageHeight");
    for (const auto& shape : j["shapes"]) {
      std::string label = shape.at("label").get<std::string>();
      int cls = schema.class_index(label);
      if (cls < 0) {
        report.rejects.push_back(f.filename().string() + ": " + label);
        continue;
      }
      double x1 = 1e30, y1 = 1e30, x2 = -1e30, y2 = -1e30;
      for (const auto& pt : shape.at("points")) {
        double x = pt[0].get<double>(), y = pt[1].get<double>();
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
      x1 = std::max(0.0, x1);
      y1 = std::max(0.0, y1);
      x2 = std::min((double)img.width, x2);
      y2 = std::min((double)img.height, y2);
      if (x2 <= x1 || y2 <= y1) {
        ++ds.dropped_degenerate;
        continue;
      }
      img.boxes.push_back({cls, x1, y1, x2, y2});
      ++report.boxes;
    }
    ds.images.push_back(std::move(img));
    ++report.images;
  }
  save_coco(ds, output_json);
  return report;
}

Dataset make_synthetic(uint64_t seed, int64_t n_images, const std::string& out_dir) {
  check_arg(n_images > 0, "make_synthetic: need n_images > 0");
  fs::create_directories(fs::path(out_dir) / "images");
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> count_dist(1, 3);
  std::uniform_int_distribution<int> cls_dist(0, 2);
  std::uniform_int_distribution<int> noise(-5, 5);
  // radius families per class, matching the schema order
  const int rmin[3] = {30, 18, 10};
  const int rmax[3] = {42, 26, 16};
  const int base_rgb[3][3] = {{70, 90, 200}, {60, 170, 80}, {200, 60, 60}};
  constexpr int kSize = 256;

  Dataset ds;
  ds.schema = DatasetSchema::synthetic();
  ds.image_root = out_dir;

  for (int64_t n = 0; n < n_images; ++n) {
    cv::Mat img(kSize, kSize, CV_8UC3, cv::Scalar(235, 228, 232));  // BGR pale background
    AnnotatedImage ann;
    ann.id = n + 1;
    char name[64];
    std::snprintf(name, sizeof(name), "images/img_%05lld.png", (long long)ann.id);
    ann.file = name;
    ann.width = kSize;
    ann.height = kSize;

    int want = count_dist(gen);
    std::vector<std::array<int, 3>> placed;  // cx, cy, r
    for (int d = 0; d < want; ++d) {
      int cls = cls_dist(gen);
      std::uniform_int_distribution<int> rd(rmin[cls], rmax[cls]);
      for (int attempt = 0; attempt < 100; ++attempt) {
        int r = rd(gen);
        std::uniform_int_distribution<int> cd(r + 4, kSize - r - 5);
        int cx = cd(gen), cy = cd(gen);
        bool ok = true;
        for (const auto& p : placed) {
          double dx = cx - p[0], dy = cy - p[1];
          if (std::sqrt(dx * dx + dy * dy) < r + p[2] + 4) ok = false;
        }
        if (!ok) continue;
        placed.push_back({cx, cy, r});
        int jitter[3] = {noise(gen) * 3, noise(gen) * 3, noise(gen) * 3};
        for (int y = cy - r; y <= cy + r; ++y)
          for (int x = cx - r; x <= cx + r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) {
              auto& px = img.at<cv::Vec3b>(y, x);
              px[0] = (uchar)std::clamp(base_rgb[cls][2] + jitter[2], 0, 255);
              px[1] = (uchar)std::clamp(base_rgb[cls][1] + jitter[1], 0, 255);
              px[2] = (uchar)std::clamp(base_rgb[cls][0] + jitter[0], 0, 255);
            }
        // disc pixels span [c-r, c+r]; with pixel i covering [i, i+1) the
        // tight box is [c-r, c+r+1)
        ann.boxes.push_back({cls, double(cx - r), double(cy - r), double(cx + r + 1),
                             double(cy + r + 1)});
        break;
      }
    }
    // mild deterministic sensor noise
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) {
        auto& px = img.at<cv::Vec3b>(y, x);
        for (int c = 0; c < 3; ++c) px[c] = (uchar)std::clamp(px[c] + noise(gen), 0, 255);
      }
    cv::imwrite((fs::path(out_dir) / ann.file).string(), img);
    ds.images.push_back(std::move(ann));
  }
  save_coco(ds, (fs::path(out_dir) / "annotations.json").string());
  return ds;
}

template <class T>
ImageBatch<T> make_batch(const Dataset& ds, const std::vector<int64_t>& indices,
                         const BatchOptions& opts, std::mt19937_64* aug_rng) {
  check_arg(!indices.empty(), "make_batch: empty index list");
  check_arg(!opts.hflip || aug_rng, "make_batch: hflip needs an rng");

  struct Loaded {
    cv::Mat rgb;
    std::vector<AnnotatedBox> boxes;
    int64_t id;
  };
  std::vector<Loaded> loaded;
  int64_t max_h = opts.min_size, max_w = opts.min_size;
  for (int64_t idx : indices) {
    check_arg(idx >= 0 && idx < (int64_t)ds.images.size(), "make_batch: index out of range");
    const AnnotatedImage& ann = ds.images[idx];
    std::string path = (fs::path(ds.image_root) / ann.file).string();
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) fail("make_batch: cannot read image id " + std::to_string(ann.id) + ": " + path);
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    std::vector<AnnotatedBox> boxes = ann.boxes;

    if (opts.resize_shorter > 0) {
      double scale = double(opts.resize_shorter) / std::min(rgb.rows, rgb.cols);
      if (opts.resize_max > 0 && scale * std::max(rgb.rows, rgb.cols) > opts.resize_max)
        scale = double(opts.resize_max) / std::max(rgb.rows, rgb.cols);
      int nw = std::max<int>(1, (int)std::lround(rgb.cols * scale));
      int nh = std::max<int>(1, (int)std::lround(rgb.rows * scale));
      double sx = double(nw) / rgb.cols, sy = double(nh) / rgb.rows;
      cv::resize(rgb, rgb, {nw, nh}, 0, 0, cv::INTER_LINEAR);
      for (auto& b : boxes) {
        b.x1 *= sx; b.x2 *= sx; b.y1 *= sy; b.y2 *= sy;
      }
    }
    if (opts.hflip && std::uniform_real_distribution<double>(0, 1)(*aug_rng) < 0.5) {
      cv::flip(rgb, rgb, 1);
      for (auto& b : boxes) {
        double x1 = b.x1;
        b.x1 = rgb.cols - b.x2;
        b.x2 = rgb.cols - x1;
      }
    }
    max_h = std::max<int64_t>(max_h, rgb.rows);
    max_w = std::max<int64_t>(max_w, rgb.cols);
    loaded.push_back({rgb, std::move(boxes), ann.id});
  }

  int64_t b = (int64_t)loaded.size();
  ImageBatch<T> batch;
  batch.pixels = Tensor<T>::zeros({b, 3, max_h, max_w});
  batch.mask = TensorB::full({b, max_h, max_w}, 1);
  for (int64_t i = 0; i < b; ++i) {
    const cv::Mat& rgb = loaded[i].rgb;
    int64_t h = rgb.rows, w = rgb.cols;
    batch.sizes.push_back({h, w});
    batch.image_ids.push_back(loaded[i].id);
    for (int64_t y = 0; y < h; ++y) {
      const cv::Vec3b* row = rgb.ptr<cv::Vec3b>((int)y);
      for (int64_t x = 0; x < w; ++x) {
        batch.mask[(i * max_h + y) * max_w + x] = 0;
        for (int c = 0; c < 3; ++c)
          batch.pixels.at(i, c, y, x) =
              T((row[x][c] / 255.0 - opts.mean[c]) / opts.stddev[c]);
      }
    }
    ImageTargets<T> tgt;
    tgt.boxes = Tensor<T>({(int64_t)loaded[i].boxes.size(), 4});
    for (size_t k = 0; k < loaded[i].boxes.size(); ++k) {
      const AnnotatedBox& bx = loaded[i].boxes[k];
      tgt.class_ids.push_back(bx.class_id);
      tgt.boxes.at(k, 0) = T((bx.x1 + bx.x2) / 2 / w);
      tgt.boxes.at(k, 1) = T((bx.y1 + bx.y2) / 2 / h);
      tgt.boxes.at(k, 2) = T((bx.x2 - bx.x1) / w);
      tgt.boxes.at(k, 3) = T((bx.y2 - bx.y1) / h);
    }
    batch.targets.push_back(std::move(tgt));
  }
  return batch;
}

template ImageBatch<float> make_batch<float>(const Dataset&, const std::vector<int64_t>&,
                                             const BatchOptions&, std::mt19937_64*);
template ImageBatch<double> make_batch<double>(const Dataset&, const std::vector<int64_t>&,
                                               const BatchOptions&, std::mt19937_64*);

}  // namespace leukodetr
