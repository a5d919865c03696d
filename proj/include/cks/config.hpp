#pragma once

// Run configuration: one JSON document holding every module's settings.
// Unknown keys are rejected; the resolved document is written into the
// output directory of every run.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cks/collaborator.hpp"
#include "cks/data.hpp"
#include "cks/inference.hpp"
#include "cks/losses.hpp"
#include "cks/principal.hpp"
#include "json.hpp"

namespace cks {

inline constexpr int kConfigSchemaVersion = 1;

enum class TrainMode { Cks, Supervised };
enum class LrSchedule { TwoPhase, BackboneSplit };

struct DatasetConfig {
  /// "synthetic" (generated in memory), "dataset" (directory written by
  /// write_dataset) or "coco" (annotation file).
  std::string format = "synthetic";
  std::string path;
  std::string image_root;
  /// Optional point table (CSV/JSON) overriding stored points.
  std::string points;
  /// "stored" (points shipped with the data / table), "centroids" or "nuclei".
  std::string point_source = "stored";
  SyntheticParams synthetic;
  BlobDetectorParams blob;
  /// group -> resampling factor applied before training.
  std::map<std::string, double> prescale;
};

struct TrainConfig {
  long long total_steps = 90000;
  int batch = 1;
  double lr_initial = 1e-3;
  double lr_finetune = 2e-4;
  LrSchedule lr_schedule = LrSchedule::TwoPhase;
  /// Fraction of total_steps run at lr_initial in the two-phase schedule.
  double initial_phase_fraction = 0.8;
  long long checkpoint_every = 1000;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::Cks;
  bool augment = true;
  AugmentationConfig augmentation;
  /// Collapse alarm: mean window probability below this ...
  double collapse_threshold = 1e-3;
  /// ... for this many consecutive steps.
  long long collapse_patience = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct AblationConfig {
  /// Steps per sweep run (overrides train.total_steps).
  long long steps = 3000;
  /// Radius used by the "CONSTANT d" row; <= 0 means the largest group value (or d).
  double constant_d = 0.0;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  DatasetConfig data;
  PrincipalConfig principal;
  CollaboratorConfig collaborator;
  LossWeights losses;
  TrainConfig train;
  InferenceConfig inference;
  AblationConfig ablation;
  std::string output_dir = "runs/default";
};

void validate(const RunConfig& config);
nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Reads, validates and applies the CKS_OUTPUT_DIR environment override.
RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(const std::filesystem::path& path, const RunConfig& config);

std::string to_string(TrainMode mode);
std::string to_string(LrSchedule schedule);

/// Loads and prepares samples per `data`: ingestion, point derivation on the
/// original images, then per-group prescaling.
std::vector<ImageSample> load_training_data(const DatasetConfig& data);

/// Validates that the dataset can feed `mode` (points for CKS, masks for
/// supervised). Throws ConfigError naming the first offending sample.
void check_dataset_for_mode(const std::vector<ImageSample>& samples, TrainMode mode);

/// Keys whose values differ between two configs, as dotted paths.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b);

}  // namespace cks
