#include <CLI11.hpp>

#include <iostream>

#include "leukodetr/trainer.hpp"

using namespace leukodetr;

namespace {

RunConfig build_config(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg = config_path.empty() ? RunConfig::defaults() : RunConfig::from_file(config_path);
  for (const auto& kv : sets) cfg.apply_override(kv);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"leukodetr: leukocyte detection transformer (train / eval / infer)"};
  app.require_subcommand(1);

  std::string config_path, ckpt, resume, images_dir, gt_json;
  std::vector<std::string> sets;
  double threshold = -1.0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration JSON");
    cmd->add_option("--set", sets, "override a config key, e.g. --set train.epochs=10")
        ->take_all();
  };

  CLI::App* train = app.add_subcommand("train", "train a detector");
  add_common(train);
  train->add_option("--resume", resume, "checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--ckpt", ckpt, "checkpoint path")->required();

  CLI::App* infer = app.add_subcommand("infer", "run detection and draw overlays");
  add_common(infer);
  infer->add_option("--ckpt", ckpt, "checkpoint path")->required();
  infer->add_option("--images", images_dir, "directory of input images")->required();
  infer->add_option("--threshold", threshold, "score threshold (default from config)");
  infer->add_option("--gt", gt_json, "optional annotations drawn in black");

  uint64_t synth_seed = 0;
  int64_t synth_n = 20;
  std::string synth_out = "synthetic";
  CLI::App* synth = app.add_subcommand("make-synth", "generate the synthetic disc dataset");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--out", synth_out, "output directory")->required();

  std::string lm_in, lm_out, lm_schema = "wbcdd";
  CLI::App* labelme = app.add_subcommand("convert-labelme", "convert LabelMe annotations");
  labelme->add_option("--in", lm_in, "directory of LabelMe JSON files")->required();
  labelme->add_option("--out", lm_out, "output annotations JSON")->required();
  labelme->add_option("--schema", lm_schema, "class schema (wbcdd|lisc|bccd|synthetic)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      Runner runner(build_config(config_path, sets));
      std::string final_ckpt = runner.train(resume);
      std::cout << "final checkpoint: " << final_ckpt << "\n";
    } else if (eval->parsed()) {
      Runner runner(build_config(config_path, sets));
      EvalResult r = runner.evaluate(ckpt);
      std::cout << "AP " << r.ap << " AP50 " << r.ap50 << " AP75 " << r.ap75 << "\n";
    } else if (infer->parsed()) {
      RunConfig cfg = build_config(config_path, sets);
      if (threshold < 0) threshold = cfg.get_number("infer.threshold");
      Runner runner(cfg);
      InferSummary s = runner.infer(ckpt, images_dir, threshold, gt_json);
      std::cout << "processed " << s.images << " images, " << s.boxes << " detections -> "
                << s.detections_json << "\n";
      if (!s.errors.empty()) std::cerr << s.errors.size() << " files could not be read\n";
    } else if (synth->parsed()) {
      Dataset ds = make_synthetic(synth_seed, synth_n, synth_out);
      std::cout << "wrote " << ds.images.size() << " images under " << synth_out << "\n";
    } else if (labelme->parsed()) {
      LabelmeReport rep =
          convert_labelme(lm_in, lm_out, DatasetSchema::by_name(lm_schema));
      std::cout << "converted " << rep.images << " images, " << rep.boxes << " boxes -> "
                << lm_out << "\n";
      if (!rep.rejects.empty()) {
        std::cerr << rep.rejects.size() << " unknown labels:\n";
        for (const auto& r : rep.rejects) std::cerr << "  " << r << "\n";
      }
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
