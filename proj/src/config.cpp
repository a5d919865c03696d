#include "cks/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <set>
#include <fstream>

#include "cks/error.hpp"
#include "cks/json_util.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace cks {

namespace {

json to_json(const SyntheticParams& p) {
  return {{"n_images", p.n_images},     {"image_size", p.image_size}, {"blobs_min", p.blobs_min},
          {"blobs_max", p.blobs_max},   {"radius_min", p.radius_min}, {"radius_max", p.radius_max},
          {"seed", p.seed},             {"noise_sigma", p.noise_sigma}, {"group", p.group}};
}

SyntheticParams synthetic_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  SyntheticParams p;
  o.get("n_images", p.n_images);
  o.get("image_size", p.image_size);
  o.get("blobs_min", p.blobs_min);
  o.get("blobs_max", p.blobs_max);
  o.get("radius_min", p.radius_min);
  o.get("radius_max", p.radius_max);
  o.get("seed", p.seed);
  o.get("noise_sigma", p.noise_sigma);
  o.get("group", p.group);
  o.finish();
  return p;
}

json to_json(const BlobDetectorParams& p) {
  return {{"min_sigma", p.min_sigma}, {"max_sigma", p.max_sigma}, {"num_sigma", p.num_sigma}, {"threshold", p.threshold}};
}

BlobDetectorParams blob_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  BlobDetectorParams p;
  o.get("min_sigma", p.min_sigma);
  o.get("max_sigma", p.max_sigma);
  o.get("num_sigma", p.num_sigma);
  o.get("threshold", p.threshold);
  o.finish();
  return p;
}

json to_json(const AugmentationConfig& a) {
  return {{"rotate", a.rotate},
          {"flip", a.flip},
          {"resize_range", {a.resize_range.first, a.resize_range.second}},
          {"brightness_delta", a.brightness_delta},
          {"contrast_range", {a.contrast_range.first, a.contrast_range.second}},
          {"arbitrary_rotation_deg", a.arbitrary_rotation_deg},
          {"seed", a.seed}};
}

AugmentationConfig augmentation_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  AugmentationConfig a;
  o.get("rotate", a.rotate);
  o.get("flip", a.flip);
  std::vector<double> range{a.resize_range.first, a.resize_range.second};
  o.get("resize_range", range);
  if (range.size() != 2) throw ConfigError(where + ".resize_range: expected [low, high]");
  a.resize_range = {range[0], range[1]};
  o.get("brightness_delta", a.brightness_delta);
  range = {a.contrast_range.first, a.contrast_range.second};
  o.get("contrast_range", range);
  if (range.size() != 2) throw ConfigError(where + ".contrast_range: expected [low, high]");
  a.contrast_range = {range[0], range[1]};
  o.get("arbitrary_rotation_deg", a.arbitrary_rotation_deg);
  o.get("seed", a.seed);
  o.finish();
  validate(a);
  return a;
}

json to_json(const DatasetConfig& d) {
  return {{"format", d.format},       {"path", d.path},
          {"image_root", d.image_root}, {"points", d.points},
          {"point_source", d.point_source}, {"synthetic", to_json(d.synthetic)},
          {"blob", to_json(d.blob)},  {"prescale", d.prescale}};
}

DatasetConfig dataset_from_json(const json& j) {
  json_util::StrictObject o(j, "data");
  DatasetConfig d;
  o.get("format", d.format);
  o.get("path", d.path);
  o.get("image_root", d.image_root);
  o.get("points", d.points);
  o.get("point_source", d.point_source);
  d.synthetic = synthetic_from_json(o.child("synthetic"), "data.synthetic");
  d.blob = blob_from_json(o.child("blob"), "data.blob");
  o.get("prescale", d.prescale);
  o.finish();
  return d;
}

json to_json(const TrainConfig& t) {
  return {{"total_steps", t.total_steps},
          {"batch", t.batch},
          {"lr_initial", t.lr_initial},
          {"lr_finetune", t.lr_finetune},
          {"lr_schedule", to_string(t.lr_schedule)},
          {"initial_phase_fraction", t.initial_phase_fraction},
          {"checkpoint_every", t.checkpoint_every},
          {"seed", t.seed},
          {"mode", to_string(t.mode)},
          {"augment", t.augment},
          {"augmentation", to_json(t.augmentation)},
          {"collapse_threshold", t.collapse_threshold},
          {"collapse_patience", t.collapse_patience},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps}};
}

TrainConfig train_from_json(const json& j) {
  json_util::StrictObject o(j, "train");
  TrainConfig t;
  o.get("total_steps", t.total_steps);
  o.get("batch", t.batch);
  o.get("lr_initial", t.lr_initial);
  o.get("lr_finetune", t.lr_finetune);
  std::string schedule = to_string(t.lr_schedule);
  o.get("lr_schedule", schedule);
  if (schedule == "two_phase") {
    t.lr_schedule = LrSchedule::TwoPhase;
  } else if (schedule == "backbone_split") {
    t.lr_schedule = LrSchedule::BackboneSplit;
  } else {
    throw ConfigError("train.lr_schedule: expected two_phase or backbone_split");
  }
  o.get("initial_phase_fraction", t.initial_phase_fraction);
  o.get("checkpoint_every", t.checkpoint_every);
  o.get("seed", t.seed);
  std::string mode = to_string(t.mode);
  o.get("mode", mode);
  if (mode == "cks") {
    t.mode = TrainMode::Cks;
  } else if (mode == "supervised") {
    t.mode = TrainMode::Supervised;
  } else {
    throw ConfigError("train.mode: expected cks or supervised");
  }
  o.get("augment", t.augment);
  t.augmentation = augmentation_from_json(o.child("augmentation"), "train.augmentation");
  o.get("collapse_threshold", t.collapse_threshold);
  o.get("collapse_patience", t.collapse_patience);
  o.get("adam_beta1", t.adam_beta1);
  o.get("adam_beta2", t.adam_beta2);
  o.get("adam_eps", t.adam_eps);
  o.finish();
  return t;
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object() && !j.empty()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

}  // namespace

std::string to_string(TrainMode mode) { return mode == TrainMode::Cks ? "cks" : "supervised"; }
std::string to_string(LrSchedule s) { return s == LrSchedule::TwoPhase ? "two_phase" : "backbone_split"; }

void validate(const RunConfig& c) {
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  static const std::set<std::string> formats{"synthetic", "dataset", "coco"};
  if (!formats.contains(c.data.format)) throw ConfigError("data.format: expected synthetic, dataset or coco");
  if (c.data.format != "synthetic" && c.data.path.empty()) throw ConfigError("data.path is required for " + c.data.format);
  static const std::set<std::string> sources{"stored", "centroids", "nuclei"};
  if (!sources.contains(c.data.point_source)) throw ConfigError("data.point_source: expected stored, centroids or nuclei");
  for (const auto& [g, f] : c.data.prescale) {
    if (!(f > 0.0)) throw ConfigError("data.prescale['" + g + "'] must be > 0");
  }
  validate(c.principal);
  validate(c.collaborator);
  if (c.principal.in_channels != c.collaborator.in_channels) {
    throw ConfigError("principal.in_channels and collaborator.in_channels differ");
  }
  validate(c.losses);
  validate(c.inference);
  const auto& t = c.train;
  if (t.total_steps < 0 || t.batch <= 0 || t.checkpoint_every <= 0) {
    throw ConfigError("train: total_steps >= 0, batch > 0 and checkpoint_every > 0 required");
  }
  if (!(t.lr_initial > 0.0 && t.lr_finetune > 0.0)) throw ConfigError("train: learning rates must be positive");
  if (t.lr_finetune > t.lr_initial) throw ConfigError("train.lr_finetune must not exceed train.lr_initial");
  if (!(t.initial_phase_fraction >= 0.0 && t.initial_phase_fraction <= 1.0)) {
    throw ConfigError("train.initial_phase_fraction must be in [0,1]");
  }
  validate(t.augmentation);
  if (c.ablation.steps < 0) throw ConfigError("ablation.steps must be >= 0");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

json to_json(const RunConfig& c) {
  return {{"schema_version", c.schema_version},
          {"data", to_json(c.data)},
          {"principal", to_json(c.principal)},
          {"collaborator", to_json(c.collaborator)},
          {"losses", to_json(c.losses)},
          {"train", to_json(c.train)},
          {"inference", to_json(c.inference)},
          {"ablation", {{"steps", c.ablation.steps}, {"constant_d", c.ablation.constant_d}}},
          {"output_dir", c.output_dir}};
}

RunConfig run_config_from_json(const json& j) {
  json_util::StrictObject o(j, "config");
  RunConfig c;
  o.require("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported");
  }
  c.data = dataset_from_json(o.child("data"));
  c.principal = principal_config_from_json(o.child("principal"));
  c.collaborator = collaborator_config_from_json(o.child("collaborator"));
  c.losses = loss_weights_from_json(o.child("losses"));
  c.train = train_from_json(o.child("train"));
  c.inference = inference_config_from_json(o.child("inference"));
  {
    json_util::StrictObject a(o.child("ablation"), "ablation");
    a.get("steps", c.ablation.steps);
    a.get("constant_d", c.ablation.constant_d);
    a.finish();
  }
  o.get("output_dir", c.output_dir);
  o.finish();
  validate(c);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  if (const char* dir = std::getenv("CKS_OUTPUT_DIR"); dir != nullptr && *dir != '\0') c.output_dir = dir;
  return c;
}

void write_run_config(const fs::path& path, const RunConfig& config) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write config: " + path.string());
  out << to_json(config).dump(2) << '\n';
}

std::vector<ImageSample> load_training_data(const DatasetConfig& data) {
  std::vector<ImageSample> samples;
  if (data.format == "synthetic") {
    samples = generate_synthetic(data.synthetic).samples;
  } else if (data.format == "dataset") {
    samples = read_dataset(data.path);
  } else {
    samples = load_coco_dataset(data.path, data.image_root.empty() ? std::optional<fs::path>{}
                                                                   : std::optional<fs::path>{data.image_root});
  }
  if (!data.points.empty()) attach_points(samples, read_point_table(data.points));
  for (auto& s : samples) {
    if (data.point_source == "centroids") {
      s.points = centroids_from_masks(s.gt_masks);
    } else if (data.point_source == "nuclei") {
      if (!s.nuclei) throw ConfigError("sample '" + s.id + "' has no nuclei channel for point_source=nuclei");
      s.points = detect_nuclei_points(*s.nuclei, data.blob);
    }
  }
  if (!data.prescale.empty()) {
    for (auto& s : samples) s = prescale_by_group(s, data.prescale);
  }
  return samples;
}

void check_dataset_for_mode(const std::vector<ImageSample>& samples, TrainMode mode) {
  if (samples.empty()) throw ConfigError("dataset is empty");
  for (const auto& s : samples) {
    if (mode == TrainMode::Cks && s.points.empty() && !s.gt_masks.empty()) {
      throw ConfigError("cks mode needs point labels; sample '" + s.id + "' has none");
    }
    if (mode == TrainMode::Supervised && s.gt_masks.empty() && !s.points.empty()) {
      throw ConfigError("supervised mode needs masks; sample '" + s.id + "' has none");
    }
  }
  const bool any_points = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return !s.points.empty(); });
  const bool any_masks = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return !s.gt_masks.empty(); });
  if (mode == TrainMode::Cks && !any_points) throw ConfigError("cks mode needs point labels; dataset has none");
  if (mode == TrainMode::Supervised && !any_masks) throw ConfigError("supervised mode needs masks; dataset has none");
}

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::map<std::string, json> fa, fb;
  flatten(to_json(a), "", fa);
  flatten(to_json(b), "", fb);
  std::set<std::string> keys;
  for (const auto& [k, _] : fa) keys.insert(k);
  for (const auto& [k, _] : fb) keys.insert(k);
  std::vector<std::string> out;
  for (const auto& k : keys) {
    const auto ia = fa.find(k), ib = fb.find(k);
    if (ia == fa.end() || ib == fb.end() || ia->second != ib->second) out.push_back(k);
  }
  return out;
}

}  // namespace cks
