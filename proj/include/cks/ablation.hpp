#pragma once

// Ablation sweeps: each row is a full training run from the same base config
// that differs only in the swept keys, followed by evaluation.

#include <functional>
#include <string>
#include <vector>

#include "cks/config.hpp"
#include "cks/evaluation.hpp"
#include "json.hpp"

namespace cks {

struct SweepVariant {
  std::string label;
  RunConfig config;
};

struct SweepRow {
  std::string label;
  std::vector<std::string> changed_keys;
  EvalSummary metrics;
  long long collaborator_parameters = 0;
  double final_mean_window_probability = 0.0;
};

struct SweepTable {
  std::string name;
  std::vector<SweepRow> rows;

  const SweepRow& row(const std::string& label) const;
  std::string to_text() const;
  nlohmann::json to_json() const;
};

/// The base config with ablation.steps applied as train.total_steps.
RunConfig sweep_base(const RunConfig& config);

/// Rows "NOT USED" (pi = 0), "CONSTANT d" (one radius for every group) and
/// "PER-GROUP d" (the base config).
std::vector<SweepVariant> prior_sweep_variants(const RunConfig& config);

/// Rows a1b1, a2b1, a3b1 and a1b2.
std::vector<SweepVariant> collaborator_sweep_variants(const RunConfig& config);

struct SweepOptions {
  std::function<void(const std::string&)> log;
  bool write_outputs = true;
};

/// Trains every variant on `train` and evaluates on `eval` (un-augmented).
/// Outputs go to <output_dir>/<name>/<label>/ plus a summary table.
/// `base` is the reference the changed_keys of each row are computed against.
SweepTable run_sweep(const std::string& name, const RunConfig& base, const std::vector<SweepVariant>& variants,
                     const std::vector<ImageSample>& train, const std::vector<ImageSample>& eval,
                     const SweepOptions& options = {});

SweepTable sweep_prior(const RunConfig& config, const std::vector<ImageSample>& train,
                       const std::vector<ImageSample>& eval, const SweepOptions& options = {});
SweepTable sweep_collaborator(const RunConfig& config, const std::vector<ImageSample>& train,
                              const std::vector<ImageSample>& eval, const SweepOptions& options = {});

}  // namespace cks
