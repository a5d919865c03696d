// cks: command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "CLI11.hpp"
#include "cks/ablation.hpp"
#include "cks/checkpoint.hpp"
#include "cks/config.hpp"
#include "cks/data.hpp"
#include "cks/error.hpp"
#include "cks/evaluation.hpp"
#include "cks/inference.hpp"
#include "cks/json_util.hpp"
#include "cks/rle.hpp"
#include "cks/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kImageExtensions{".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"};

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return kImageExtensions.contains(ext);
}

std::vector<fs::path> collect_images(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && is_image(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::is_regular_file(p)) {
      out.push_back(p);
    } else {
      throw cks::LoadError("no such image or directory: " + in);
    }
  }
  return out;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw cks::LoadError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// --- convert-points ----------------------------------------------------------

struct ConvertArgs {
  std::string coco;
  std::string image_root;
  std::string nuclei_dir;
  std::string out;
  cks::BlobDetectorParams blob;
};

int cmd_convert_points(const ConvertArgs& a) {
  if (a.coco.empty() == a.nuclei_dir.empty()) throw cks::ConfigError("give exactly one of --coco or --nuclei-dir");
  cks::PointTable table;
  if (!a.coco.empty()) {
    const auto samples = cks::load_coco_dataset(
        a.coco, a.image_root.empty() ? std::optional<fs::path>{} : std::optional<fs::path>{a.image_root});
    for (const auto& s : samples) {
      table[s.id] = cks::centroids_from_masks(s.gt_masks);
      std::cout << s.id << '\t' << table[s.id].size() << '\n';
    }
  } else {
    for (const auto& path : collect_images({a.nuclei_dir})) {
      const auto image = cks::load_image(path);
      cv::Mat gray = image;
      if (image.channels() > 1) {
        std::vector<cv::Mat> planes;
        cv::split(image, planes);
        gray = planes.front();
      }
      const auto id = path.stem().string();
      table[id] = cks::detect_nuclei_points(gray, a.blob);
      std::cout << id << '\t' << table[id].size() << '\n';
    }
  }
  cks::write_point_table(a.out, table);
  return 0;
}

// --- synth ---------------------------------------------------------------------

int cmd_synth(const cks::SyntheticParams& params, const std::string& out) {
  const auto set = cks::generate_synthetic(params);
  for (const auto& s : set.shortfalls) {
    std::cerr << "warning: image " << s.image_index << " holds " << s.placed << " of " << s.requested
              << " requested blobs\n";
  }
  cks::write_dataset(out, set.samples);
  std::cout << "wrote " << set.samples.size() << " images to " << out << '\n';
  return 0;
}

// --- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string output;
  std::string resume;
  long long steps = -1;
};

int cmd_train(const TrainArgs& a) {
  auto config = cks::load_run_config(a.config);
  if (!a.output.empty()) config.output_dir = a.output;
  if (a.steps >= 0) config.train.total_steps = a.steps;
  cks::validate(config);
  const auto dataset = cks::load_training_data(config.data);
  cks::check_dataset_for_mode(dataset, config.train.mode);

  cks::FitOptions options;
  if (!a.resume.empty()) options.resume_from = a.resume;
  const long long total = config.train.total_steps;
  options.on_step = [total](const cks::StepMetrics& m) {
    if ((m.step + 1) % 100 == 0 || m.step + 1 == total) {
      std::cerr << "step " << (m.step + 1) << "/" << total << "  L_pr " << m.losses.l_pr << "  L_co "
                << m.losses.l_co << "  mean s " << m.mean_window_probability << '\n';
    }
    return true;
  };
  const auto result = cks::fit(config, dataset, options);
  std::cout << "final checkpoint: " << result.final_checkpoint.string() << '\n';
  return 0;
}

// --- predict -------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string config;
  std::vector<std::string> images;
  std::string out;
  double score_threshold = -1.0;
  double nms_radius = -1.0;
  double mask_threshold = -1.0;
  double prior_radius = -1.0;
  std::string group;
  bool overlay = false;
};

int cmd_predict(const PredictArgs& a) {
  cks::InferenceConfig inference;
  cks::LossWeights weights;
  std::optional<cks::RunConfig> run;
  if (!a.config.empty()) {
    run = cks::load_run_config(a.config);
    inference = run->inference;
    weights = run->losses;
  }
  auto model = cks::load_principal(a.checkpoint);
  if (run && cks::to_json(run->principal).dump() != cks::to_json(model->config()).dump()) {
    throw cks::ConfigError("checkpoint " + a.checkpoint + " was trained with a different principal config than " +
                           a.config);
  }
  if (a.score_threshold >= 0.0) inference.score_threshold = a.score_threshold;
  if (a.nms_radius >= 0.0) inference.nms_radius = a.nms_radius;
  if (a.mask_threshold >= 0.0) inference.mask_threshold = a.mask_threshold;
  cks::validate(inference);
  const double prior = a.prior_radius > 0.0 ? a.prior_radius : weights.d_for(a.group);

  const auto paths = collect_images(a.images);
  const fs::path out(a.out);
  for (const auto& path : paths) {
    const auto image = cks::load_image(path);
    const auto id = path.stem().string();
    const auto predictions = cks::predict(model, image, inference, prior);
    fs::create_directories(out / "labels");
    cv::imwrite((out / "labels" / (id + ".png")).string(),
                cks::render_label_map(predictions, image.rows, image.cols));
    write_json(out / "records" / (id + ".json"), cks::prediction_records(id, predictions));
    if (a.overlay) {
      fs::create_directories(out / "overlays");
      cv::imwrite((out / "overlays" / (id + ".png")).string(), cks::overlay_contours(image, predictions));
    }
    std::cout << id << '\t' << predictions.size() << " instances\n";
  }
  return 0;
}

// --- evaluate ------------------------------------------------------------------

struct EvaluateArgs {
  std::string predictions;
  std::string ground_truth;
  std::string out;
  bool by_group = false;
};

std::map<std::string, std::vector<cks::ScoredMask>> read_prediction_records(const fs::path& dir) {
  const fs::path records = fs::is_directory(dir / "records") ? dir / "records" : dir;
  if (!fs::is_directory(records)) throw cks::LoadError("predictions directory not found: " + dir.string());
  std::map<std::string, std::vector<cks::ScoredMask>> out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(records)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw cks::ParseError(f.string() + ": " + e.what());
    }
    auto& list = out[f.stem().string()];
    for (const auto& r : j) {
      const auto& seg = r.at("segmentation");
      cks::rle::Rle rle;
      rle.height = seg.at("size").at(0).get<int>();
      rle.width = seg.at("size").at(1).get<int>();
      rle.counts = cks::rle::decompress_counts(seg.at("counts").get<std::string>());
      list.push_back({r.at("score").get<double>(), cks::rle::decode(rle)});
    }
    std::stable_sort(list.begin(), list.end(), [](const auto& x, const auto& y) { return x.score > y.score; });
  }
  return out;
}

int cmd_evaluate(const EvaluateArgs& a) {
  const fs::path gt(a.ground_truth);
  const auto samples = fs::is_directory(gt) ? cks::read_dataset(gt) : cks::load_coco_dataset(gt);
  std::map<std::string, std::vector<cv::Mat>> truth;
  std::map<std::string, std::string> groups;
  for (const auto& s : samples) {
    truth[s.id] = s.gt_masks;
    if (a.by_group) groups[s.id] = s.group;
  }
  const auto images = cks::align_by_id(read_prediction_records(a.predictions), truth, groups);
  const auto result = cks::evaluate_dataset(images);
  std::cout << cks::format_metrics_table(result);
  if (!a.out.empty()) {
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    std::ofstream(a.out) << cks::metrics_json(result) << '\n';
  }
  return 0;
}

// --- export --------------------------------------------------------------------

int cmd_export(const std::string& checkpoint, const std::string& out) {
  auto model = cks::load_principal(checkpoint);
  torch::serialize::OutputArchive archive;
  cks::checkpoint::write_int(archive, "schema_version", cks::checkpoint::kSchemaVersion);
  cks::checkpoint::write_principal(archive, model);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  cks::checkpoint::save_archive(archive, out);
  std::cout << "wrote " << out << '\n';
  return 0;
}

// --- sweeps ----------------------------------------------------------------------

int cmd_sweep(const std::string& config_path, const std::string& output, long long steps, bool collaborator) {
  auto config = cks::load_run_config(config_path);
  if (!output.empty()) config.output_dir = output;
  if (steps >= 0) config.ablation.steps = steps;
  cks::validate(config);
  const auto dataset = cks::load_training_data(config.data);
  const auto table = collaborator ? cks::sweep_collaborator(config, dataset, dataset)
                                  : cks::sweep_prior(config, dataset, dataset);
  std::cout << table.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell instance segmentation from point labels"};
  app.require_subcommand(1);

  ConvertArgs convert;
  auto* c = app.add_subcommand("convert-points", "Derive a point-label table from masks or nuclei images");
  c->add_option("--coco", convert.coco, "COCO annotation file (centroid mode)");
  c->add_option("--image-root", convert.image_root, "Image directory for the COCO file");
  c->add_option("--nuclei-dir", convert.nuclei_dir, "Directory of nuclei images (blob mode)");
  c->add_option("--out", convert.out, "Output table (.csv or .json)")->required();
  c->add_option("--min-sigma", convert.blob.min_sigma);
  c->add_option("--max-sigma", convert.blob.max_sigma);
  c->add_option("--num-sigma", convert.blob.num_sigma);
  c->add_option("--threshold", convert.blob.threshold);

  cks::SyntheticParams synth;
  std::string synth_out;
  auto* s = app.add_subcommand("synth", "Write a synthetic blob dataset");
  s->add_option("--out", synth_out, "Output directory")->required();
  s->add_option("--n", synth.n_images, "Number of images");
  s->add_option("--size", synth.image_size, "Image side in pixels");
  s->add_option("--blobs-min", synth.blobs_min);
  s->add_option("--blobs-max", synth.blobs_max);
  s->add_option("--radius-min", synth.radius_min);
  s->add_option("--radius-max", synth.radius_max);
  s->add_option("--noise", synth.noise_sigma);
  s->add_option("--group", synth.group);
  s->add_option("--seed", synth.seed);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train from a run config");
  t->add_option("--config", train.config, "Run config (JSON)")->required();
  t->add_option("--output", train.output, "Override output_dir");
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--steps", train.steps, "Override train.total_steps");

  PredictArgs predict;
  auto* p = app.add_subcommand("predict", "Segment images with a trained checkpoint");
  p->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
  p->add_option("--config", predict.config, "Run config; must match the checkpoint");
  p->add_option("--images", predict.images, "Image files or directories");
  p->add_option("--out", predict.out, "Output directory")->required();
  p->add_option("--score-threshold", predict.score_threshold);
  p->add_option("--nms-radius", predict.nms_radius);
  p->add_option("--mask-threshold", predict.mask_threshold);
  p->add_option("--prior-radius", predict.prior_radius, "Prior radius d used for the default NMS radius");
  p->add_option("--group", predict.group, "Cell group for the prior radius lookup");
  p->add_flag("--overlay", predict.overlay, "Also write contour overlays");

  EvaluateArgs evaluate;
  auto* e = app.add_subcommand("evaluate", "Score predictions against ground truth");
  e->add_option("--predictions", evaluate.predictions, "Directory written by predict")->required();
  e->add_option("--ground-truth", evaluate.ground_truth, "Dataset directory or COCO file")->required();
  e->add_option("--out", evaluate.out, "Write metrics JSON here");
  e->add_flag("--by-group", evaluate.by_group, "Add per-group rows");

  std::string export_checkpoint, export_out;
  auto* x = app.add_subcommand("export", "Write a principal-only checkpoint for deployment");
  x->add_option("--checkpoint", export_checkpoint, "Training checkpoint")->required();
  x->add_option("--out", export_out, "Output file")->required();

  std::string sweep_config, sweep_output;
  long long sweep_steps = -1;
  auto* sp = app.add_subcommand("sweep-prior", "Prior ablation (no prior / constant d / per-group d)");
  auto* sc = app.add_subcommand("sweep-collaborator", "Collaborator architecture ablation");
  for (auto* cmd : {sp, sc}) {
    cmd->add_option("--config", sweep_config, "Run config (JSON)")->required();
    cmd->add_option("--output", sweep_output, "Override output_dir");
    cmd->add_option("--steps", sweep_steps, "Override ablation.steps");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*c) return cmd_convert_points(convert);
    if (*s) return cmd_synth(synth, synth_out);
    if (*t) return cmd_train(train);
    if (*p) return cmd_predict(predict);
    if (*e) return cmd_evaluate(evaluate);
    if (*x) return cmd_export(export_checkpoint, export_out);
    if (*sp) return cmd_sweep(sweep_config, sweep_output, sweep_steps, false);
    if (*sc) return cmd_sweep(sweep_config, sweep_output, sweep_steps, true);
  } catch (const cks::ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 1;
  } catch (const cks::InvalidArgument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 1;
}
