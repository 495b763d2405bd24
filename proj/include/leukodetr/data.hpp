#pragma once

#include <array>
#include <random>

#include "leukodetr/losses.hpp"

namespace leukodetr {

struct DatasetSchema {
  std::string name;
  std::vector<std::string> classes;  // index order is the class-id order

  static DatasetSchema wbcdd();
  static DatasetSchema lisc();
  static DatasetSchema bccd();
  static DatasetSchema synthetic();
  static DatasetSchema by_name(const std::string& name);

  // Case-insensitive lookup, -1 when the label is unknown.
  int class_index(const std::string& label) const;
};

struct AnnotatedBox {
  int class_id = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // absolute pixel xyxy
};

struct AnnotatedImage {
  int64_t id = 0;
  std::string file;  // relative to the dataset image root
  int64_t width = 0, height = 0;
  std::vector<AnnotatedBox> boxes;
};

struct Dataset {
  DatasetSchema schema;
  std::string image_root;
  std::vector<AnnotatedImage> images;  // sorted by id
  int64_t dropped_degenerate = 0;      // zero-area boxes removed at load

  std::vector<int64_t> class_instance_counts() const;
  const AnnotatedImage* find(int64_t id) const;
};

// Canonical COCO-style JSON (images/annotations/categories, pixel [x,y,w,h]).
Dataset load_coco(const std::string& json_path, const DatasetSchema* expected = nullptr);
void save_coco(const Dataset& ds, const std::string& json_path);

struct LabelmeReport {
  int64_t images = 0;
  int64_t boxes = 0;
  std::vector<std::string> rejects;  // "file: label" for unknown labels
};

// Converts a directory of LabelMe per-image JSON files (rectangle and polygon
// shapes) into the canonical format. Unknown labels are reported, not
// silently dropped.
LabelmeReport convert_labelme(const std::string& input_dir, const std::string& output_json,
                              const DatasetSchema& schema);

// Deterministic 256x256 disc dataset: 1-3 non-overlapping discs per image,
// class <-> color/radius family, boxes exactly bounding each disc. Writes
// images plus annotations.json under out_dir and returns the loaded dataset.
Dataset make_synthetic(uint64_t seed, int64_t n_images, const std::string& out_dir);

struct BatchOptions {
  bool hflip = false;       // random horizontal flip (training only)
  int resize_shorter = 0;   // 0 disables resizing
  int resize_max = 0;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> stddev{0.229, 0.224, 0.225};
  int64_t min_size = 64;    // batches are padded up to at least this size
};

template <class T>
struct ImageBatch {
  Tensor<T> pixels;  // [B, 3, H, W], normalized, padding zeroed
  TensorB mask;      // [B, H, W], 1 marks padding
  std::vector<ImageTargets<T>> targets;       // boxes normalized by true size
  std::vector<int64_t> image_ids;
  std::vector<std::array<int64_t, 2>> sizes;  // true (H, W) before padding
};

// Pads to the elementwise max of the selected image shapes; aug_rng drives
// the horizontal flip and may be null when opts.hflip is false.
template <class T>
ImageBatch<T> make_batch(const Dataset& ds, const std::vector<int64_t>& indices,
                         const BatchOptions& opts, std::mt19937_64* aug_rng);

}  // namespace leukodetr
