#include "leukodetr/trainer.hpp"

#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>

#include "leukodetr/overlay.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace leukodetr {

namespace {

std::string rng_to_string(const std::mt19937_64& gen) {
  std::ostringstream os;
  os << gen;
  return os.str();
}

void rng_from_string(std::mt19937_64& gen, const std::string& s) {
  std::istringstream is(s);
  is >> gen;
}

BatchOptions batch_options(const RunConfig& cfg, bool train) {
  BatchOptions opts;
  opts.resize_shorter = (int)cfg.get_number("data.resize_shorter");
  opts.resize_max = (int)cfg.get_number("data.resize_max");
  opts.hflip = train && cfg.get_bool("data.hflip");
  return opts;
}

}  // namespace

Runner::Runner(RunConfig cfg) : cfg_(std::move(cfg)) {}

void Runner::save_checkpoint(const std::string& path, LeukoDetector<float>& model,
                             AdamW<float>& optim, int64_t epoch, int64_t iter,
                             std::mt19937_64& shuffle_rng, std::mt19937_64& aug_rng,
                             std::mt19937_64& dropout_rng) const {
  Checkpoint ckpt;
  save_model(ckpt, model);
  for (auto& slot : optim.slots()) {
    ckpt.put_tensor("optim." + slot.param.name + ".m", slot.m);
    ckpt.put_tensor("optim." + slot.param.name + ".v", slot.v);
  }
  ckpt.put_scalar("optim.step", (double)optim.step_count());
  ckpt.put_scalar("trainer.epoch", (double)epoch);
  ckpt.put_scalar("trainer.iter", (double)iter);
  ckpt.put_scalar("trainer.lr_scale", optim.lr_scale());
  ckpt.put_string("rng.shuffle", rng_to_string(shuffle_rng));
  ckpt.put_string("rng.aug", rng_to_string(aug_rng));
  ckpt.put_string("rng.dropout", rng_to_string(dropout_rng));
  ckpt.put_string("config", cfg_.canonical_dump());
  ckpt.save(path);
}

std::string Runner::train(const std::string& resume_path) {
  const std::string train_json = cfg_.get_string("data.train_json");
  check_arg(!train_json.empty(), "config: data.train_json is required for training");
  DatasetSchema schema = DatasetSchema::by_name(cfg_.get_string("data.schema"));
  Dataset ds = load_coco(train_json, &schema);
  check_arg(!ds.images.empty(), "training dataset is empty");
  if (ds.dropped_degenerate > 0)
    std::cerr << "warning: dropped " << ds.dropped_degenerate << " degenerate boxes\n";

  LeukoDetector<float> model(cfg_.model(), cfg_.seed());
  model.set_train(true);
  SetCriterion<float> criterion(cfg_.loss(ds.class_instance_counts()));
  AdamW<float> optim(model.grouped_parameters(), cfg_.optim());

  SeedTree seeds(cfg_.seed());
  std::mt19937_64 shuffle_rng = seeds.child("shuffle").generator();
  std::mt19937_64 aug_rng = seeds.child("aug").generator();
  std::mt19937_64 dropout_rng = seeds.child("dropout").generator();

  int64_t start_epoch = 0, iter = 0;
  if (!resume_path.empty()) {
    Checkpoint ckpt = Checkpoint::load(resume_path);
    LoadReport report = load_model(ckpt, model);
    for (const auto& k : report.missing) std::cerr << "warning: checkpoint missing " << k << "\n";
    for (const auto& k : report.unexpected)
      std::cerr << "warning: checkpoint has unused " << k << "\n";
    for (auto& slot : optim.slots()) {
      if (ckpt.has("optim." + slot.param.name + ".m")) {
        slot.m = ckpt.get_tensor<float>("optim." + slot.param.name + ".m", slot.m.shape());
        slot.v = ckpt.get_tensor<float>("optim." + slot.param.name + ".v", slot.v.shape());
      }
    }
    optim.set_step_count((int64_t)ckpt.get_scalar("optim.step"));
    optim.set_lr_scale(ckpt.get_scalar("trainer.lr_scale"));
    start_epoch = (int64_t)ckpt.get_scalar("trainer.epoch");
    iter = (int64_t)ckpt.get_scalar("trainer.iter");
    rng_from_string(shuffle_rng, ckpt.get_string("rng.shuffle"));
    rng_from_string(aug_rng, ckpt.get_string("rng.aug"));
    rng_from_string(dropout_rng, ckpt.get_string("rng.dropout"));
    if (ckpt.get_string("config") != cfg_.canonical_dump())
      std::cerr << "warning: resuming with a different config than the checkpoint's\n";
  }

  const int64_t batch_size = (int64_t)cfg_.get_number("train.batch_size");
  const int64_t max_iterations = (int64_t)cfg_.get_number("train.iterations");
  const int64_t epochs = (int64_t)cfg_.get_number("train.epochs");
  const int64_t eval_every = (int64_t)cfg_.get_number("train.eval_every");
  const int64_t log_every = std::max<int64_t>(1, (int64_t)cfg_.get_number("train.log_every"));
  const OptimConfig ocfg = cfg_.optim();
  check_arg(batch_size >= 1, "train.batch_size must be >= 1");

  fs::create_directories(fs::path(cfg_.out_dir()) / "checkpoints");
  fs::create_directories(fs::path(cfg_.out_dir()) / "reports");
  std::ofstream metrics(fs::path(cfg_.out_dir()) / "metrics.jsonl", std::ios::app);
  BatchOptions opts = batch_options(cfg_, true);

  bool done = false;
  int64_t epoch = start_epoch;
  for (; epoch < epochs && !done; ++epoch) {
    std::vector<int64_t> order(ds.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = (int64_t)i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochLog log;
    log.epoch = epoch + 1;
    int64_t batches = 0;
    for (size_t start = 0; start < order.size() && !done; start += batch_size) {
      std::vector<int64_t> idx(order.begin() + start,
                               order.begin() + std::min(order.size(), start + batch_size));
      ImageBatch<float> batch = make_batch<float>(ds, idx, opts, &aug_rng);
      ForwardCtx ctx{true, &dropout_rng};
      auto outputs = model.forward(batch.pixels, batch.mask, ctx);
      LossBreakdown<float> loss = criterion.compute(outputs, batch.targets);
      if (!std::isfinite(loss.total)) {
        std::string ids;
        for (int64_t id : batch.image_ids) ids += " " + std::to_string(id);
        fail("training loss is not finite at iteration " + std::to_string(iter + 1) +
             "; offending batch image ids:" + ids);
      }
      optim.zero_grad();
      loss.total_var.backward();
      double norm = optim.clip_gradients();
      optim.step();

      ++iter;
      iteration_losses_.push_back(loss.total);
      double cls = 0, l1 = 0, gi = 0;
      for (const auto& l : loss.layers) {
        cls += l.class_loss;
        l1 += l.l1_loss;
        gi += l.giou_loss;
      }
      log.class_loss += cls;
      log.l1_loss += l1;
      log.giou_loss += gi;
      log.total += loss.total;
      log.grad_norm += norm;
      ++batches;

      if (iter % log_every == 0) {
        json line = {{"iter", iter},       {"epoch", epoch + 1}, {"loss", loss.total},
                     {"class_loss", cls},  {"l1_loss", l1},      {"giou_loss", gi},
                     {"grad_norm", norm},  {"lr_scale", optim.lr_scale()}};
        metrics << line.dump() << "\n";
        metrics.flush();
        std::cout << "iter " << iter << " epoch " << epoch + 1 << " loss " << loss.total
                  << "\n";
      }
      if (max_iterations > 0 && iter >= max_iterations) done = true;
    }
    if (batches > 0) {
      log.class_loss /= batches;
      log.l1_loss /= batches;
      log.giou_loss /= batches;
      log.total /= batches;
      log.grad_norm /= batches;
    }
    epoch_logs_.push_back(log);
    json eline = {{"epoch", log.epoch},         {"avg_loss", log.total},
                  {"class_loss", log.class_loss}, {"l1_loss", log.l1_loss},
                  {"giou_loss", log.giou_loss},   {"grad_norm", log.grad_norm}};
    metrics << eline.dump() << "\n";
    metrics.flush();

    // step decay on the epoch counter
    int64_t completed = epoch + 1;
    optim.set_lr_scale(std::pow(ocfg.step_gamma, double(completed / ocfg.step_size)));

    std::string latest = (fs::path(cfg_.out_dir()) / "checkpoints/latest.ckpt").string();
    save_checkpoint(latest, model, optim, completed, iter, shuffle_rng, aug_rng, dropout_rng);

    if (eval_every > 0 && completed % eval_every == 0 &&
        !cfg_.get_string("data.test_json").empty()) {
      EvalResult r = evaluate(latest);
      json jl = {{"epoch", completed}, {"ap", r.ap}, {"ap50", r.ap50}, {"ap75", r.ap75}};
      metrics << jl.dump() << "\n";
      metrics.flush();
      model.set_train(true);
    }
  }

  std::string final_path = (fs::path(cfg_.out_dir()) / "checkpoints/final.ckpt").string();
  save_checkpoint(final_path, model, optim, epoch, iter, shuffle_rng, aug_rng, dropout_rng);
  return final_path;
}

EvalResult Runner::evaluate(const std::string& ckpt_path, const std::string& split_json) {
  std::string path = split_json.empty() ? cfg_.get_string("data.test_json") : split_json;
  check_arg(!path.empty(), "config: data.test_json is required for evaluation");
  DatasetSchema schema = DatasetSchema::by_name(cfg_.get_string("data.schema"));
  Dataset ds = load_coco(path, &schema);

  LeukoDetector<float> model(cfg_.model(), cfg_.seed());
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  LoadReport report = load_model(ckpt, model);
  for (const auto& k : report.missing) std::cerr << "warning: checkpoint missing " << k << "\n";
  for (const auto& k : report.unexpected)
    std::cerr << "warning: checkpoint has unused " << k << "\n";
  model.set_train(false);

  const int64_t batch_size = std::max<int64_t>(1, (int64_t)cfg_.get_number("train.batch_size"));
  BatchOptions opts = batch_options(cfg_, false);
  DetectionEvaluator evaluator((int)schema.classes.size(), 100);

  for (size_t start = 0; start < ds.images.size(); start += batch_size) {
    std::vector<int64_t> idx;
    for (size_t i = start; i < std::min(ds.images.size(), start + batch_size); ++i)
      idx.push_back((int64_t)i);
    ImageBatch<float> batch = make_batch<float>(ds, idx, opts, nullptr);
    ForwardCtx ctx{false, nullptr};
    auto outputs = model.forward(batch.pixels, batch.mask, ctx);
    const auto& final_layer = outputs.back();
    for (size_t b = 0; b < idx.size(); ++b) {
      const AnnotatedImage& ann = ds.images[idx[b]];
      // detections in original pixel space via the normalized boxes
      std::vector<Detection> dets =
          extract_detections(final_layer[b], ann.height, ann.width, 0.0);
      std::vector<GtBox> gts;
      for (const auto& bx : ann.boxes) gts.push_back({bx.class_id, bx.x1, bx.y1, bx.x2, bx.y2});
      evaluator.add_image(dets, gts);
    }
  }

  EvalResult result = evaluator.evaluate();
  json report_json = {{"ap", result.ap},
                      {"ap50", result.ap50},
                      {"ap75", result.ap75},
                      {"per_class_ap", json::object()},
                      {"ap_per_threshold", result.ap_per_threshold},
                      {"checkpoint", ckpt_path},
                      {"split", path}};
  for (size_t c = 0; c < schema.classes.size(); ++c)
    report_json["per_class_ap"][schema.classes[c]] = result.per_class_ap[c];
  fs::create_directories(fs::path(cfg_.out_dir()) / "reports");
  std::ofstream out(fs::path(cfg_.out_dir()) / "reports/eval.json");
  out << report_json.dump(1) << "\n";
  std::cout << report_json.dump(1) << "\n";
  return result;
}

InferSummary Runner::infer(const std::string& ckpt_path, const std::string& images_dir,
                           double threshold, const std::string& gt_json) {
  DatasetSchema schema = DatasetSchema::by_name(cfg_.get_string("data.schema"));
  LeukoDetector<float> model(cfg_.model(), cfg_.seed());
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  load_model(ckpt, model);
  model.set_train(false);

  std::unordered_map<std::string, std::vector<GtBox>> gt_by_file;
  if (!gt_json.empty()) {
    Dataset gt = load_coco(gt_json, &schema);
    for (const auto& img : gt.images) {
      std::vector<GtBox> boxes;
      for (const auto& b : img.boxes) boxes.push_back({b.class_id, b.x1, b.y1, b.x2, b.y2});
      gt_by_file[fs::path(img.file).filename().string()] = std::move(boxes);
    }
  }

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    std::string ext = e.path().extension().string();
    for (auto& c : ext) c = (char)std::tolower((unsigned char)c);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp")
      files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  OverlayStyle style = style_for_schema(schema);
  fs::create_directories(fs::path(cfg_.out_dir()) / "overlays");
  fs::create_directories(fs::path(cfg_.out_dir()) / "reports");
  BatchOptions opts = batch_options(cfg_, false);

  InferSummary summary;
  json dets_json = json::array();
  for (const auto& file : files) {
    cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
      summary.errors.push_back(file.string());
      std::cerr << "error: cannot read " << file << ", skipping\n";
      continue;
    }
    // single-image dataset view so batching/resize policy stays shared
    Dataset view;
    view.schema = schema;
    view.image_root = file.parent_path().string();
    view.images.push_back({1, file.filename().string(), bgr.cols, bgr.rows, {}});
    ImageBatch<float> batch = make_batch<float>(view, {0}, opts, nullptr);
    ForwardCtx ctx{false, nullptr};
    auto outputs = model.forward(batch.pixels, batch.mask, ctx);
    std::vector<Detection> dets =
        extract_detections(outputs.back()[0], bgr.rows, bgr.cols, threshold);

    auto git = gt_by_file.find(file.filename().string());
    draw_detections(bgr, dets, style, git == gt_by_file.end() ? nullptr : &git->second);
    std::string out_path =
        (fs::path(cfg_.out_dir()) / "overlays" / (file.stem().string() + ".png")).string();
    cv::imwrite(out_path, bgr);

    for (const auto& d : dets) {
      dets_json.push_back({{"file", file.filename().string()},
                           {"class_id", d.class_id},
                           {"class_name", schema.classes[d.class_id]},
                           {"confidence", d.confidence},
                           {"box_xyxy", {d.x1, d.y1, d.x2, d.y2}}});
      ++summary.boxes;
    }
    ++summary.images;
  }
  summary.detections_json =
      (fs::path(cfg_.out_dir()) / "reports/detections.json").string();
  std::ofstream out(summary.detections_json);
  json root = {{"detections", dets_json}, {"threshold", threshold}};
  if (!summary.errors.empty()) root["errors"] = summary.errors;
  out << root.dump(1) << "\n";
  return summary;
}

}  // namespace leukodetr
